use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use momkd::checkpoint::Checkpoint;
use momkd::evalkit::write_eval_csv;
use momkd::gradcheck::objective_suite;
use momkd::memory::{read_dynamics_csv, write_dynamics_csv, BankSide};
use momkd::synthdata::{self, Manifest};
use momkd::train::{self, build_graphs, write_metrics_csv, TrainOptions};
use momkd::{Error, Result, RunConfig, SplitName};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const RUN_FILE: &str = "run.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const GRADCHECK_TOL: f64 = 1e-4;

fn io(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io(format!("cannot write {}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(format!("cannot create {}", dir.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn parse_split(s: &str) -> Result<SplitName> {
    SplitName::ALL
        .into_iter()
        .find(|n| n.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split {s:?}, expected train, val or test")))
}

/// Accepts either a checkpoint file or a run directory holding one.
fn checkpoint_path(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.join(CHECKPOINT_FILE)
    } else {
        model.to_path_buf()
    }
}

fn sibling(ckpt: &Path, name: &str) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn synth(config: &Path, out: &Path, shift: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut ds = synthdata::generate(&cfg.synth())?;
    if shift {
        ds = synthdata::shift(&ds, &cfg.shift())?;
    }
    let m = synthdata::save(&ds, out)?;
    println!(
        "wrote {} train / {} val / {} test samples to {} (hash {})",
        m.train.len(),
        m.val.len(),
        m.test.len(),
        out.display(),
        m.content_hash
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    data_hash: &'a str,
    freeze_memory: bool,
    best_epoch: usize,
    epochs_run: usize,
    optimizer_steps: u64,
    config: &'a RunConfig,
}

pub fn train(config: &Path, data: &Path, out: &Path, freeze_memory: bool, workers: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let manifest: Manifest = synthdata::read_manifest(data)?;
    let ds = synthdata::load(data)?;
    let outcome = train::train(
        &cfg,
        &ds,
        TrainOptions {
            freeze_memory,
            workers,
            on_step: None,
        },
    )?;
    create_dir(out)?;
    Checkpoint {
        config: cfg.clone(),
        rng: outcome.rng,
        best_epoch: outcome.best_epoch,
        model: outcome.model,
    }
    .save(&out.join(CHECKPOINT_FILE))?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &outcome.metrics).expect("in-memory write");
    write(&out.join(METRICS_FILE), &buf)?;
    buf.clear();
    write_dynamics_csv(&mut buf, &outcome.dynamics).expect("in-memory write");
    write(&out.join(DYNAMICS_FILE), &buf)?;
    let summary = RunSummary {
        seed: cfg.seed,
        data_hash: &manifest.content_hash,
        freeze_memory,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        optimizer_steps: outcome.steps,
        config: &cfg,
    };
    write(&out.join(RUN_FILE), to_json(&summary))?;
    println!(
        "trained {} epochs ({} steps), best epoch {}; run written to {}",
        outcome.epochs_run,
        outcome.steps,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

pub fn eval(model: &Path, data: &Path, split: &str, out: Option<&Path>, workers: usize) -> Result<()> {
    let split = parse_split(split)?;
    let ckpt_path = checkpoint_path(model);
    let ck = Checkpoint::load(&ckpt_path)?;
    let ds = synthdata::load(data)?;
    let samples = ds.split(split);
    let graphs = build_graphs(samples, ck.config.k_neighbors)?;
    let report = train::evaluate(&ck.model, samples, &graphs, &ck.config, workers)?;
    let mut buf = Vec::new();
    write_eval_csv(&mut buf, &[(split.name(), &report)]).expect("in-memory write");
    let out = out.map_or_else(|| sibling(&ckpt_path, &format!("eval_{split}.csv")), Path::to_path_buf);
    write(&out, &buf)?;
    println!(
        "{split}: auc {:.4} acc {:.4} f1 {:.4} ({} pos / {} neg)",
        report.auc, report.acc, report.f1, report.n_pos, report.n_neg
    );
    Ok(())
}

pub fn dynamics(run: &Path) -> Result<()> {
    let path = run.join(DYNAMICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let records = read_dynamics_csv(&text)?;
    println!("epoch  pos_active  pos_perplexity  neg_active  neg_perplexity");
    let fmt = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"));
    for pair in records.chunks(2) {
        let get = |side: BankSide| pair.iter().find(|r| r.bank == side);
        let (Some(p), Some(n)) = (get(BankSide::Pos), get(BankSide::Neg)) else {
            return Err(Error::Data(format!("{}: unpaired bank rows", path.display())));
        };
        println!(
            "{:>5}  {:>10}  {:>14}  {:>10}  {:>14}",
            p.epoch,
            fmt(p.active_ratio),
            fmt(p.perplexity),
            fmt(n.active_ratio),
            fmt(n.perplexity)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    seeds: &'a [u64],
    data_hash: &'a str,
    shifted_hash: &'a str,
    config: &'a RunConfig,
}

pub fn compare(config: &Path, data: &Path, shifted: &Path, seeds: &[u64], out: &Path, workers: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = synthdata::load(data)?;
    let sh = synthdata::load(shifted)?;
    let table = train::compare_fixed_vs_momentum(&cfg, &ds, &sh, seeds, workers)?;
    create_dir(out)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).expect("in-memory write");
    write(&out.join(COMPARE_FILE), &buf)?;
    let summary = CompareSummary {
        seeds,
        data_hash: &synthdata::read_manifest(data)?.content_hash,
        shifted_hash: &synthdata::read_manifest(shifted)?.content_hash,
        config: &cfg,
    };
    write(&out.join(RUN_FILE), to_json(&summary))?;
    print!("{}", table.render());
    for (seed, id, sh) in table.gaps() {
        println!("seed {seed}: momentum − fixed = {id:+.4} in-distribution, {sh:+.4} shifted");
    }
    Ok(())
}

#[derive(Serialize)]
struct Inspection<'a> {
    seed: u64,
    split: SplitName,
    topk: usize,
    components: &'a [train::ComponentMatches],
    config: &'a RunConfig,
}

pub fn inspect_memory(model: &Path, data: &Path, topk: usize, split: &str, out: Option<&Path>) -> Result<()> {
    let split = parse_split(split)?;
    let ckpt_path = checkpoint_path(model);
    let ck = Checkpoint::load(&ckpt_path)?;
    let ds = synthdata::load(data)?;
    let samples = ds.split(split);
    let graphs = build_graphs(samples, ck.config.k_neighbors)?;
    let components = train::inspect_memory(&ck.model, samples, &graphs, &ck.config.objective(), topk)?;
    let out = out.map_or_else(|| sibling(&ckpt_path, "memory_topk.json"), Path::to_path_buf);
    let doc = Inspection {
        seed: ck.config.seed,
        split,
        topk,
        components: &components,
        config: &ck.config,
    };
    write(&out, to_json(&doc))?;
    println!("{} components inspected, written to {}", components.len(), out.display());
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = config.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)?;
    let reports = objective_suite(&cfg, seed)?;
    let mut worst: f64 = 0.0;
    for (term, r) in &reports {
        println!("{:<18} max rel error {:.3e} over {} coordinates", term.name(), r.max_rel_error, r.checked);
        worst = worst.max(r.max_rel_error);
    }
    println!("max rel error {worst:.3e}");
    if worst >= GRADCHECK_TOL {
        let (term, r) = reports
            .iter()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .expect("non-empty suite");
        return Err(Error::Numeric(format!(
            "gradient check failed for {}: {:?}",
            term.name(),
            r.worst
        )));
    }
    Ok(())
}
