//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::distill::{build_objective, Objective, PairedInput, StepGraph};
use crate::error::{Error, Result};
use crate::graphnet::{build_knn_graph, SpatialGraph};
use crate::model::MomkdModel;
use crate::params::{Binding, GradSet, GroupKind, ParamGroups};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const MIN_SAMPLES_PER_GROUP: usize = 25;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Coordinates per group; groups with fewer values are checked exhaustively.
    pub samples_per_group: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            samples_per_group: MIN_SAMPLES_PER_GROUP,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub group: GroupKind,
    pub tensor: usize,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub per_group: BTreeMap<GroupKind, f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        for (g, e) in other.per_group {
            let slot = self.per_group.entry(g).or_insert(0.0);
            *slot = slot.max(e);
        }
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// `|a − c| / (|a| + |c| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares tape gradients of `build_loss` against central differences.
///
/// `build_loss` must be deterministic: it is re-run on a fresh tape for each
/// perturbed coordinate.
pub fn finite_diff_check<F>(params: &ParamGroups, opts: &FdOptions, build_loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference eps {} must be positive", opts.eps)));
    }
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, &[]);
    let loss = build_loss(&mut tape, &binding)?;
    tape.backward(loss)?;
    let analytic = binding.gradients(&tape);

    let eval = |p: &ParamGroups| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t, &[]);
        let l = build_loss(&mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (kind, group) in params.iter() {
        let sizes: Vec<usize> = group.tensors().iter().map(|t| t.len()).collect();
        let total: usize = sizes.iter().sum();
        let flat: Vec<usize> = if total <= opts.samples_per_group {
            (0..total).collect()
        } else {
            let mut v = index::sample(&mut rng, total, opts.samples_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut group_max: f64 = 0.0;
        for f in flat {
            let (tensor, offset) = locate(&sizes, f);
            let original = group.tensors()[tensor].data()[offset];
            let set = |w: &mut ParamGroups, v: f64| {
                w.group_mut(kind).expect("group present").tensors_mut()[tensor].data_mut()[offset] = v;
            };
            set(&mut work, original + opts.eps);
            let plus = eval(&work)?;
            set(&mut work, original - opts.eps);
            let minus = eval(&work)?;
            set(&mut work, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss when perturbing {kind}[{tensor}][{offset}] (f+ = {plus}, f- = {minus})"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.group(kind).expect("bound group")[tensor][offset];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            group_max = group_max.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordinateCheck {
                    group: kind,
                    tensor,
                    offset,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_group.insert(kind, group_max);
    }
    Ok(report)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("flat index beyond parameter group")
}

/// Loss terms covered by [`objective_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Ce,
    Mse,
    AlignWsi,
    AlignOmics,
    MemCommitment,
    MemOrthogonality,
    Mem,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::Ce,
        LossTerm::Mse,
        LossTerm::AlignWsi,
        LossTerm::AlignOmics,
        LossTerm::MemCommitment,
        LossTerm::MemOrthogonality,
        LossTerm::Mem,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Mse => "mse",
            LossTerm::AlignWsi => "align_wsi",
            LossTerm::AlignOmics => "align_omics",
            LossTerm::MemCommitment => "mem_commitment",
            LossTerm::MemOrthogonality => "mem_orthogonality",
            LossTerm::Mem => "mem",
            LossTerm::Total => "total",
        }
    }

    pub fn pick(self, g: &StepGraph) -> Var {
        match self {
            LossTerm::Ce => g.terms.ce,
            LossTerm::Mse => g.terms.mse,
            LossTerm::AlignWsi => g.terms.align_wsi,
            LossTerm::AlignOmics => g.terms.align_omics,
            LossTerm::MemCommitment => g.terms.mem.commitment,
            LossTerm::MemOrthogonality => g.terms.mem.orthogonality,
            LossTerm::Mem => g.terms.mem.total,
            LossTerm::Total => g.terms.total,
        }
    }
}

pub const CASE_PATCHES: usize = 14;

/// A randomly initialised model with one random paired sample.
pub struct GradCase {
    pub model: MomkdModel,
    pub objective: Objective,
    pub embeddings: Tensor,
    pub profile: Tensor,
    pub graph: SpatialGraph,
    pub label: u8,
}

impl GradCase {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let dims = cfg.dims(cfg.d_in, cfg.g_dim);
        let model = MomkdModel::init(dims, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CASE_STREAM);
        let mut uniform = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let embeddings = Tensor::matrix(CASE_PATCHES, dims.d_in, uniform(CASE_PATCHES * dims.d_in, -1.0, 1.0))?;
        let centroids = Tensor::matrix(CASE_PATCHES, 2, uniform(CASE_PATCHES * 2, 0.0, 1.0))?;
        let profile = Tensor::row(uniform(dims.g_dim, -1.5, 1.5));
        Ok(Self {
            model,
            objective: cfg.objective(),
            embeddings,
            profile,
            graph: build_knn_graph(&centroids, cfg.k_neighbors.min(CASE_PATCHES - 1))?,
            label: (seed % 2) as u8,
        })
    }

    pub fn input(&self) -> PairedInput<'_> {
        PairedInput {
            embeddings: &self.embeddings,
            graph: &self.graph,
            profile: Some(&self.profile),
            label: self.label,
        }
    }

    /// Tape gradients of one term with every group trainable.
    pub fn grads_of(&self, term: LossTerm) -> Result<GradSet> {
        let mut tape = Tape::new();
        let b = self.model.params.bind(&mut tape, &[]);
        let g = build_objective(&mut tape, &b, &self.model.layout, &self.input(), &self.objective, None)?;
        tape.backward(term.pick(&g))?;
        Ok(b.gradients(&tape))
    }

    /// Finite-difference check of one term. Stop-gradient quantities are
    /// evaluated at the unperturbed memory so they stay constant.
    pub fn check(&self, term: LossTerm, opts: &FdOptions) -> Result<GradCheckReport> {
        let anchor = self.model.bank()?;
        finite_diff_check(&self.model.params, opts, |tape, b| {
            let g = build_objective(tape, b, &self.model.layout, &self.input(), &self.objective, Some(&anchor))?;
            Ok(term.pick(&g))
        })
    }
}

const CASE_STREAM: u64 = 6;

/// Checks every loss term on a fresh case for `seed`.
pub fn objective_suite(cfg: &RunConfig, seed: u64) -> Result<Vec<(LossTerm, GradCheckReport)>> {
    let case = GradCase::new(cfg, seed)?;
    let opts = FdOptions {
        seed,
        ..FdOptions::default()
    };
    LossTerm::ALL.iter().map(|&t| Ok((t, case.check(t, &opts)?))).collect()
}
