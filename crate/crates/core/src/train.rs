//! Training loop, evaluation and the fixed-versus-momentum memory comparison.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::distill::{build_objective, infer, positive_probability, total_loss, LossValues, Objective, PairedInput};
use crate::error::{Error, Result};
use crate::evalkit::{acc_f1, auc, mean_std, EarlyStopState, EvalReport};
use crate::graphnet::{build_knn_graph, encode_wsi, SpatialGraph};
use crate::memory::{kmeans_init, BankSide, random_unit_rows, renormalize, DynamicsRecord, MemoryBank, UsageCounter};
use crate::model::MomkdModel;
use crate::optim::{AccumBuffer, AdamW};
use crate::params::GroupKind;
use crate::synthdata::{Dataset, PairedSample, SplitName};
use crate::tape::Tape;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 3;
const KMEANS_SAMPLE_STREAM: u64 = 4;
const FALLBACK_STREAM: u64 = 5;

/// Position of the trainer's shuffling generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: SplitName,
    pub losses: LossValues,
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,split,loss_total,loss_ce,loss_mse,loss_align_wsi,loss_align_omics,loss_mem,auc,acc,f1";

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch, r.split, l.total, l.ce, l.mse, l.align_wsi, l.align_omics, l.mem, r.auc, r.acc, r.f1
        )?;
    }
    Ok(())
}

/// Called after every optimizer step.
pub struct StepEvent<'a> {
    pub step: u64,
    pub epoch: usize,
    pub model: &'a MomkdModel,
}

pub struct TrainOptions<'a> {
    /// Keep the k-means memory fixed for the whole run.
    pub freeze_memory: bool,
    pub workers: usize,
    pub on_step: Option<&'a mut dyn FnMut(&StepEvent<'_>)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            freeze_memory: false,
            workers: 1,
            on_step: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: MomkdModel,
    pub initial_bank: MemoryBank,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
    pub metrics: Vec<MetricsRow>,
    pub dynamics: Vec<DynamicsRecord>,
    pub rng: RngState,
}

pub fn build_graphs(samples: &[PairedSample], k: usize) -> Result<Vec<SpatialGraph>> {
    samples.iter().map(|s| build_knn_graph(&s.centroids, k)).collect()
}

/// Unit patch projections `F_P` of one bag under the current parameters.
pub fn patch_projections(model: &MomkdModel, sample: &PairedSample, graph: &SpatialGraph, objective: &Objective) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, &GroupKind::ALL);
    let wsi = model.layout.wsi_vars(&b)?;
    let x = tape.constant(sample.embeddings.clone());
    let f = encode_wsi(&mut tape, x, graph, [&wsi.gat[0], &wsi.gat[1]], objective.leaky_slope)?;
    let p = crate::branches::project_patches(&mut tape, f, wsi.patch_proj)?;
    Ok(tape.value(p).clone())
}

/// Seeds both banks by k-means over projected training patches.
pub fn init_memory(model: &mut MomkdModel, train: &[PairedSample], graphs: &[SpatialGraph], cfg: &RunConfig) -> Result<MemoryBank> {
    let objective = cfg.objective();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (s, g) in train.iter().zip(graphs) {
        let p = patch_projections(model, s, g, &objective)?;
        for r in 0..p.rows() {
            rows.push(p.row_slice(r).to_vec());
            labels.push(s.label);
        }
    }
    let take = cfg.kmeans_sample.min(rows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(KMEANS_SAMPLE_STREAM);
    let mut picked = index::sample(&mut rng, rows.len(), take).into_vec();
    picked.sort_unstable();
    let sample = Tensor::from_rows(&picked.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())?;
    let sample_labels: Vec<u8> = picked.iter().map(|&i| labels[i]).collect();
    let bank = kmeans_init(&sample, &sample_labels, cfg.memory_size, &cfg.kmeans(), cfg.seed)?;
    model.set_bank(bank.clone())?;
    Ok(bank)
}

/// Positive-class probabilities, fanned out over `workers` threads.
pub fn predict(
    model: &MomkdModel,
    samples: &[PairedSample],
    graphs: &[SpatialGraph],
    objective: &Objective,
    workers: usize,
) -> Result<Vec<f64>> {
    let run = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
        range
            .map(|i| infer(&model.layout, &model.params, &samples[i].embeddings, &graphs[i], objective))
            .collect()
    };
    let workers = workers.clamp(1, samples.len().max(1));
    if workers == 1 {
        return run(0..samples.len());
    }
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..samples.len())
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(samples.len());
                scope.spawn(move || run(start..end))
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Numeric("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}

pub fn evaluate(
    model: &MomkdModel,
    samples: &[PairedSample],
    graphs: &[SpatialGraph],
    cfg: &RunConfig,
    workers: usize,
) -> Result<EvalReport> {
    let probs = predict(model, samples, graphs, &cfg.objective(), workers)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    EvalReport::compute(&probs, &labels, cfg.threshold)
}

fn mean_losses(all: &[LossValues]) -> LossValues {
    let n = all.len().max(1) as f64;
    let sum = |f: fn(&LossValues) -> f64| all.iter().map(f).sum::<f64>() / n;
    LossValues {
        total: sum(|l| l.total),
        ce: sum(|l| l.ce),
        mse: sum(|l| l.mse),
        align_wsi: sum(|l| l.align_wsi),
        align_omics: sum(|l| l.align_omics),
        mem: sum(|l| l.mem),
    }
}

fn forward_losses(model: &MomkdModel, sample: &PairedSample, graph: &SpatialGraph, objective: &Objective) -> Result<(LossValues, f64)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, &GroupKind::ALL);
    let input = PairedInput {
        embeddings: &sample.embeddings,
        graph,
        profile: Some(&sample.profile),
        label: sample.label,
    };
    let g = build_objective(&mut tape, &b, &model.layout, &input, objective, None)?;
    Ok((LossValues::read(&tape, &g.terms), positive_probability(tape.value(g.forward.logits))))
}

fn metrics_row(epoch: usize, split: SplitName, losses: &[LossValues], probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsRow> {
    let (acc, f1) = acc_f1(probs, labels, threshold)?;
    Ok(MetricsRow {
        epoch,
        split,
        losses: mean_losses(losses),
        auc: auc(probs, labels)?,
        acc,
        f1,
    })
}

/// Trains on `ds.train`, selects the best epoch on `ds.val`.
pub fn train(cfg: &RunConfig, ds: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    let objective = cfg.objective();
    let dims = cfg.dims(ds.d_in(), ds.g_dim());
    let mut model = MomkdModel::init(dims, cfg.seed)?;
    let train_graphs = build_graphs(&ds.train, cfg.k_neighbors)?;
    let val_graphs = build_graphs(&ds.val, cfg.k_neighbors)?;
    let initial_bank = init_memory(&mut model, &ds.train, &train_graphs, cfg)?;

    let frozen: &[GroupKind] = if opts.freeze_memory { &[GroupKind::Memory] } else { &[] };
    let mut optimizer = AdamW::new(cfg.adamw(), &model.params)
        .without_decay(&[GroupKind::Memory])
        .freeze(frozen);
    if !opts.freeze_memory {
        let mut fb = ChaCha8Rng::seed_from_u64(cfg.seed);
        fb.set_stream(FALLBACK_STREAM);
        let fallback = [
            random_unit_rows(&mut fb, dims.memory_size, dims.sphere),
            random_unit_rows(&mut fb, dims.memory_size, dims.sphere),
        ];
        let ids = [model.layout.memory_pos, model.layout.memory_neg];
        optimizer.register_hook(Box::new(move |params| {
            for (id, fb) in ids.iter().zip(&fallback) {
                renormalize(params.get_mut(*id)?, fb);
            }
            Ok(())
        }));
    }
    let mut buffer = AccumBuffer::new(&model.params, cfg.accum_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut stopper = EarlyStopState::new(cfg.patience);
    let mut best = model.clone();
    let mut metrics = Vec::new();
    let mut dynamics = Vec::new();
    let mut usage = UsageCounter::new(dims.memory_size);
    let mut epochs_run = 0;
    let train_labels: Vec<u8> = ds.train.iter().map(|s| s.label).collect();
    let val_labels: Vec<u8> = ds.val.iter().map(|s| s.label).collect();

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        let mut probs = vec![0.0; order.len()];
        usage.reset();
        for &i in &order {
            let s = &ds.train[i];
            let input = PairedInput {
                embeddings: &s.embeddings,
                graph: &train_graphs[i],
                profile: Some(&s.profile),
                label: s.label,
            };
            let out = total_loss(&model, &input, &objective, frozen)?;
            usage.record(&out.f_p, &model.bank()?);
            losses.push(out.diagnostics.losses);
            probs[i] = out.diagnostics.probability;
            log::trace!("epoch {epoch} sample {}: {:?}", s.id, out.diagnostics);
            buffer.accumulate(&out.grads)?;
            if buffer.is_full() {
                optimizer.step(&mut model.params, &mut buffer)?;
                if let Some(cb) = opts.on_step.as_mut() {
                    cb(&StepEvent {
                        step: optimizer.step_count(),
                        epoch,
                        model: &model,
                    });
                }
            }
        }
        metrics.push(metrics_row(epoch, SplitName::Train, &losses, &probs, &train_labels, cfg.threshold)?);
        dynamics.extend(usage.epoch_dynamics(epoch));

        let mut val_losses = Vec::with_capacity(ds.val.len());
        let mut val_probs = Vec::with_capacity(ds.val.len());
        for (s, g) in ds.val.iter().zip(&val_graphs) {
            let (l, p) = forward_losses(&model, s, g, &objective)?;
            val_losses.push(l);
            val_probs.push(p);
        }
        let row = metrics_row(epoch, SplitName::Val, &val_losses, &val_probs, &val_labels, cfg.threshold)?;
        let (improved, stop) = stopper.update(row.acc);
        log::info!(
            "epoch {epoch}: train loss {:.4}, val auc {:.4} acc {:.4}{}",
            metrics[metrics.len() - 1].losses.total,
            row.auc,
            row.acc,
            if improved { " *" } else { "" }
        );
        metrics.push(row);
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        initial_bank,
        best_epoch: stopper.best_epoch,
        epochs_run,
        steps: optimizer.step_count(),
        metrics,
        dynamics,
        rng: RngState::capture(&rng, cfg.seed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub sample_id: String,
    pub patch: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatches {
    pub bank: BankSide,
    pub component: usize,
    pub patches: Vec<PatchMatch>,
}

/// The `topk` most similar projected patches of `samples` for every memory
/// component, most similar first. Ties keep sample and patch order.
pub fn inspect_memory(
    model: &MomkdModel,
    samples: &[PairedSample],
    graphs: &[SpatialGraph],
    objective: &Objective,
    topk: usize,
) -> Result<Vec<ComponentMatches>> {
    if topk == 0 {
        return Err(Error::Config("topk must be positive".into()));
    }
    let bank = model.bank()?;
    let mut out: Vec<ComponentMatches> = [BankSide::Pos, BankSide::Neg]
        .iter()
        .flat_map(|&side| {
            (0..bank.n()).map(move |component| ComponentMatches {
                bank: side,
                component,
                patches: Vec::new(),
            })
        })
        .collect();
    for (s, g) in samples.iter().zip(graphs) {
        let f_p = patch_projections(model, s, g, objective)?;
        for m in out.iter_mut() {
            let c = bank.side(m.bank).row_slice(m.component);
            for p in 0..f_p.rows() {
                let similarity = crate::tensor::dot(f_p.row_slice(p), c);
                let pos = m.patches.partition_point(|e| e.similarity >= similarity);
                if pos < topk {
                    m.patches.insert(
                        pos,
                        PatchMatch {
                            sample_id: s.id.clone(),
                            patch: p,
                            similarity,
                        },
                    );
                    m.patches.truncate(topk);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryArm {
    Fixed,
    Momentum,
}

impl MemoryArm {
    pub fn name(self) -> &'static str {
        match self {
            MemoryArm::Fixed => "fixed",
            MemoryArm::Momentum => "momentum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub arm: MemoryArm,
    pub auc_in_distribution: f64,
    pub auc_shifted: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_HEADER: &str = "seed,arm,auc_in_distribution,auc_shifted,best_epoch";

impl CompareTable {
    pub fn arm(&self, arm: MemoryArm) -> impl Iterator<Item = &CompareRow> {
        self.rows.iter().filter(move |r| r.arm == arm)
    }

    /// `(mean, std)` of in-distribution and shifted AUC for one arm.
    pub fn summary(&self, arm: MemoryArm) -> ((f64, f64), (f64, f64)) {
        let id: Vec<f64> = self.arm(arm).map(|r| r.auc_in_distribution).collect();
        let sh: Vec<f64> = self.arm(arm).map(|r| r.auc_shifted).collect();
        (mean_std(&id), mean_std(&sh))
    }

    /// Per seed: `(momentum − fixed)` on in-distribution and shifted test sets.
    pub fn gaps(&self) -> Vec<(u64, f64, f64)> {
        self.arm(MemoryArm::Momentum)
            .filter_map(|m| {
                self.arm(MemoryArm::Fixed).find(|f| f.seed == m.seed).map(|f| {
                    (
                        m.seed,
                        m.auc_in_distribution - f.auc_in_distribution,
                        m.auc_shifted - f.auc_shifted,
                    )
                })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{COMPARE_HEADER}")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.seed, r.arm.name(), r.auc_in_distribution, r.auc_shifted, r.best_epoch)?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("arm        in-distribution AUC   shifted AUC\n");
        for arm in [MemoryArm::Fixed, MemoryArm::Momentum] {
            let ((im, is), (sm, ss)) = self.summary(arm);
            s += &format!("{:<10} {im:.4} ± {is:.4}       {sm:.4} ± {ss:.4}\n", arm.name());
        }
        s
    }
}

/// Trains both memory variants for each seed from identical initial banks
/// and scores them on the in-distribution and shifted test splits.
pub fn compare_fixed_vs_momentum(
    cfg: &RunConfig,
    ds: &Dataset,
    shifted: &Dataset,
    seeds: &[u64],
    workers: usize,
) -> Result<CompareTable> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("comparison needs at least 3 seeds, got {}", seeds.len())));
    }
    let test_graphs = build_graphs(&ds.test, cfg.k_neighbors)?;
    let shifted_graphs = build_graphs(&shifted.test, cfg.k_neighbors)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let run_cfg = RunConfig { seed, ..cfg.clone() };
        for arm in [MemoryArm::Fixed, MemoryArm::Momentum] {
            let out = train(
                &run_cfg,
                ds,
                TrainOptions {
                    freeze_memory: arm == MemoryArm::Fixed,
                    workers,
                    on_step: None,
                },
            )?;
            let a = evaluate(&out.model, &ds.test, &test_graphs, &run_cfg, workers)?;
            let b = evaluate(&out.model, &shifted.test, &shifted_graphs, &run_cfg, workers)?;
            log::info!("seed {seed} {}: auc {:.4} shifted {:.4}", arm.name(), a.auc, b.auc);
            rows.push(CompareRow {
                seed,
                arm,
                auc_in_distribution: a.auc,
                auc_shifted: b.auc,
                best_epoch: out.best_epoch,
            });
        }
    }
    Ok(CompareTable { rows })
}
