//! The distillation objective: soft-angle alignment of both modalities to
//! the memory, memory-guided attention pooling, and the combined loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::branches::{encode_omics, omics_normalized, project_patches, reconstruct_omics, slide_normalized, WsiBranchVars};
use crate::error::{Error, Result};
use crate::graphnet::{encode_wsi, SpatialGraph, DEFAULT_SLOPE};
use crate::memory::{mem_loss, MemLoss, MemoryBank};
use crate::model::{Layout, MomkdModel};
use crate::params::{Binding, GradSet, GroupKind};
use crate::tape::{Tape, Var};
use crate::tensor::{norm, Tensor};

/// Tolerance of the unit-norm precondition on alignment inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub tau_agg: f64,
    pub beta: f64,
    pub margin: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau_agg: 5.0,
            beta: 20.0,
            margin: 0.3,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_agg > 0.0) {
            return Err(Error::Config(format!("tau_agg must be positive, got {}", self.tau_agg)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(0.0..2.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must lie in [0, 2), got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_mse: f64,
    pub alpha_wsi: f64,
    pub alpha_omics: f64,
    pub lambda_mem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 0.5,
            lambda_mse: 0.01,
            alpha_wsi: 0.2,
            alpha_omics: 0.05,
            lambda_mem: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_mse", self.lambda_mse),
            ("alpha_wsi", self.alpha_wsi),
            ("alpha_omics", self.alpha_omics),
            ("lambda_mem", self.lambda_mem),
        ];
        match all.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            Some((name, v)) => Err(Error::Config(format!("{name} must be a non-negative number, got {v}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub tau_attn: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { tau_attn: 0.2 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_attn > 0.0) {
            return Err(Error::Config(format!("tau_attn must be positive, got {}", self.tau_attn)));
        }
        Ok(())
    }
}

/// Everything the objective needs besides parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub align: AlignConfig,
    pub weights: LossWeights,
    pub inference: InferenceConfig,
    pub leaky_slope: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            align: AlignConfig::default(),
            weights: LossWeights::default(),
            inference: InferenceConfig::default(),
            leaky_slope: DEFAULT_SLOPE,
        }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.weights.validate()?;
        self.inference.validate()?;
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = norm(t.row_slice(r));
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            let name = if t.rows() == 1 { what.to_string() } else { format!("{what} row {r}") };
            return Err(Error::Numeric(format!("{name} has norm {n}, expected a unit vector")));
        }
    }
    Ok(())
}

/// Smooth maximum of the cosines between `f` (`1 × D_N`) and the rows of `c`:
/// `(1/τ)·ln Σ_j exp(τ·f·c_j)`, evaluated around the largest cosine.
pub fn phi(tape: &mut Tape, f: Var, c: Var, tau: f64) -> Result<Var> {
    if tape.value(f).rows() != 1 {
        return Err(Error::shape("phi", format!("query must be a single row, got {:?}", tape.value(f).shape())));
    }
    check_unit_rows(tape.value(f), "query vector")?;
    check_unit_rows(tape.value(c), "memory")?;
    let sims = tape.matmul_t(f, c)?;
    let top = tape.row_max(sims)?;
    let shifted = tape.sub(sims, top)?;
    let scaled = tape.scale(shifted, tau)?;
    let lse = tape.logsumexp(scaled, 1)?;
    let soft = tape.scale(lse, 1.0 / tau)?;
    let soft = tape.sum(soft)?;
    let top = tape.sum(top)?;
    tape.add(top, soft)
}

/// `φ(f, C⁺) − φ(f, C⁻)`.
pub fn delta(tape: &mut Tape, f: Var, pos: Var, neg: Var, tau: f64) -> Result<Var> {
    let p = phi(tape, f, pos, tau)?;
    let n = phi(tape, f, neg, tau)?;
    tape.sub(p, n)
}

/// `softplus(β(m − Δ))` for label 1, `softplus(β(m + Δ))` for label 0.
pub fn align_from_delta(tape: &mut Tape, delta: Var, label: u8, cfg: &AlignConfig) -> Result<Var> {
    let signed = match label {
        1 => tape.scale(delta, -1.0)?,
        0 => delta,
        other => return Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
    };
    let shifted = tape.add_scalar(signed, cfg.margin)?;
    let z = tape.scale(shifted, cfg.beta)?;
    tape.softplus(z)
}

pub fn align_loss(tape: &mut Tape, f: Var, label: u8, pos: Var, neg: Var, cfg: &AlignConfig) -> Result<Var> {
    let d = delta(tape, f, pos, neg, cfg.tau_agg)?;
    align_from_delta(tape, d, label, cfg)
}

/// `max_j F_P,i·c⁺_j − max_j F_P,i·c⁻_j` as an `I × 1` column.
pub fn patch_scores(tape: &mut Tape, f_p: Var, pos: Var, neg: Var, detach_banks: bool) -> Result<Var> {
    let (pos, neg) = if detach_banks {
        (tape.detach(pos)?, tape.detach(neg)?)
    } else {
        (pos, neg)
    };
    let sp = tape.matmul_t(f_p, pos)?;
    let sn = tape.matmul_t(f_p, neg)?;
    let mp = tape.row_max(sp)?;
    let mn = tape.row_max(sn)?;
    tape.sub(mp, mn)
}

/// Temperature softmax of the scores, returned as a `1 × I` row.
pub fn attention(tape: &mut Tape, scores: Var, tau: f64) -> Result<Var> {
    if !tape.value(scores).is_finite() {
        return Err(Error::Numeric("non-finite patch scores".into()));
    }
    let i = tape.value(scores).len();
    let row = tape.reshape(scores, &[1, i])?;
    tape.softmax(row, 1, tau)
}

/// `Σ_i α_i · F_wsi,i`.
pub fn aggregate(tape: &mut Tape, f_wsi: Var, alpha: Var) -> Result<Var> {
    tape.matmul(alpha, f_wsi)
}

/// Two-class logits `F_C·Wᵀ + b`.
pub fn classify(tape: &mut Tape, f_c: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul_t(f_c, w)?;
    tape.add(z, b)
}

/// Positive-class probability of a `1 × 2` logit row.
pub fn positive_probability(logits: &Tensor) -> f64 {
    let l = logits.data();
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    e1 / (e0 + e1)
}

/// Intermediate handles of the bag path.
#[derive(Clone, Copy, Debug)]
pub struct WsiForward {
    pub f_wsi: Var,
    pub f_p: Var,
    pub scores: Var,
    pub alpha: Var,
    pub f_c: Var,
    pub logits: Var,
}

/// Bag → encoder → projections → memory-guided pooling → logits, with the
/// banks entering the pooling as constants.
pub fn wsi_forward(
    tape: &mut Tape,
    wsi: &WsiBranchVars,
    embeddings: Var,
    graph: &SpatialGraph,
    banks: (Var, Var),
    objective: &Objective,
) -> Result<WsiForward> {
    if tape.value(embeddings).rows() == 0 {
        return Err(Error::Data("empty bag".into()));
    }
    let f_wsi = encode_wsi(tape, embeddings, graph, [&wsi.gat[0], &wsi.gat[1]], objective.leaky_slope)?;
    let f_p = project_patches(tape, f_wsi, wsi.patch_proj)?;
    let scores = patch_scores(tape, f_p, banks.0, banks.1, true)?;
    let alpha = attention(tape, scores, objective.inference.tau_attn)?;
    let f_c = aggregate(tape, f_wsi, alpha)?;
    let logits = classify(tape, f_c, wsi.cls_w, wsi.cls_b)?;
    Ok(WsiForward {
        f_wsi,
        f_p,
        scores,
        alpha,
        f_c,
        logits,
    })
}

/// One training sample as consumed by the objective.
#[derive(Clone, Copy, Debug)]
pub struct PairedInput<'a> {
    /// `I × D_in`.
    pub embeddings: &'a Tensor,
    pub graph: &'a SpatialGraph,
    /// `1 × G`; required for training.
    pub profile: Option<&'a Tensor>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub mse: Var,
    pub align_wsi: Var,
    pub align_omics: Var,
    pub mem: MemLoss,
    pub total: Var,
}

/// The full objective recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StepGraph {
    pub terms: LossTerms,
    pub forward: WsiForward,
    pub delta_wsi: Var,
    pub delta_omics: Var,
}

fn weighted(tape: &mut Tape, parts: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in parts {
        let s = tape.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::Config("empty loss".into()))
}

/// Records every loss term for one sample. Parameters come from `binding`;
/// the memory may be bound as constants to freeze it.
///
/// Stop-gradient uses of the memory (pooling scores and commitment targets)
/// read `anchor` when given, so finite differences can hold them fixed.
pub fn build_objective(
    tape: &mut Tape,
    binding: &Binding,
    layout: &Layout,
    sample: &PairedInput<'_>,
    objective: &Objective,
    anchor: Option<&MemoryBank>,
) -> Result<StepGraph> {
    let profile = sample
        .profile
        .ok_or_else(|| Error::Data("training requires a profile vector for every sample".into()))?;
    let wsi = layout.wsi_vars(binding)?;
    let enc = layout.omics_encoder_vars(binding)?;
    let dec = layout.omics_decoder_vars(binding)?;
    let (pos, neg) = layout.memory_vars(binding)?;

    let sg_banks = match anchor {
        Some(b) => (tape.constant(b.pos.clone()), tape.constant(b.neg.clone())),
        None => (pos, neg),
    };
    let x = tape.constant(sample.embeddings.clone());
    let forward = wsi_forward(tape, &wsi, x, sample.graph, sg_banks, objective)?;
    let ce = tape.cross_entropy(forward.logits, &[sample.label as usize])?;
    let f_n_wsi = slide_normalized(tape, forward.f_c, wsi.slide_proj)?;
    let delta_wsi = delta(tape, f_n_wsi, pos, neg, objective.align.tau_agg)?;
    let align_wsi = align_from_delta(tape, delta_wsi, sample.label, &objective.align)?;

    let o = tape.constant(profile.clone());
    let f_omics = encode_omics(tape, o, &enc)?;
    let (_, mse) = reconstruct_omics(tape, f_omics, &dec, o)?;
    let f_n_omics = omics_normalized(tape, f_omics, enc.proj)?;
    let delta_omics = delta(tape, f_n_omics, pos, neg, objective.align.tau_agg)?;
    let align_omics = align_from_delta(tape, delta_omics, sample.label, &objective.align)?;

    let mem = mem_loss(tape, forward.f_p, pos, neg, anchor)?;
    let w = &objective.weights;
    let total = weighted(
        tape,
        &[
            (w.lambda_ce, ce),
            (w.lambda_mse, mse),
            (w.alpha_wsi, align_wsi),
            (w.alpha_omics, align_omics),
            (w.lambda_mem, mem.total),
        ],
    )?;
    Ok(StepGraph {
        terms: LossTerms {
            ce,
            mse,
            align_wsi,
            align_omics,
            mem,
            total,
        },
        forward,
        delta_wsi,
        delta_omics,
    })
}

/// Scalar values of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
    pub align_wsi: f64,
    pub align_omics: f64,
    pub mem: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, t: &LossTerms) -> Self {
        Self {
            total: tape.value(t.total).item(),
            ce: tape.value(t.ce).item(),
            mse: tape.value(t.mse).item(),
            align_wsi: tape.value(t.align_wsi).item(),
            align_omics: tape.value(t.align_omics).item(),
            mem: tape.value(t.mem.total).item(),
        }
    }
}

/// Per-step record: loss values, memory differentials and gradient norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub losses: LossValues,
    pub delta_wsi: f64,
    pub delta_omics: f64,
    pub probability: f64,
    pub grad_norms: BTreeMap<GroupKind, f64>,
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub grads: GradSet,
    pub diagnostics: StepDiagnostics,
    /// Patch projections, for usage telemetry.
    pub f_p: Tensor,
}

/// Forward and backward of the full objective on one sample.
pub fn total_loss(
    model: &MomkdModel,
    sample: &PairedInput<'_>,
    objective: &Objective,
    frozen: &[GroupKind],
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, frozen);
    let g = build_objective(&mut tape, &binding, &model.layout, sample, objective, None)?;
    let losses = LossValues::read(&tape, &g.terms);
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {losses:?}")));
    }
    tape.backward(g.terms.total)?;
    let grads = binding.gradients(&tape);
    let grad_norms = grads.iter().map(|(k, _)| (k, grads.norm(k))).collect();
    Ok(StepOutput {
        diagnostics: StepDiagnostics {
            losses,
            delta_wsi: tape.value(g.delta_wsi).item(),
            delta_omics: tape.value(g.delta_omics).item(),
            probability: positive_probability(tape.value(g.forward.logits)),
            grad_norms,
        },
        f_p: tape.value(g.forward.f_p).clone(),
        grads,
    })
}

/// Bag-only prediction. Only the bag encoder, the classifier and the memory
/// are read, so omics groups may be absent from `params`.
pub fn infer(
    layout: &Layout,
    params: &crate::params::ParamGroups,
    embeddings: &Tensor,
    graph: &SpatialGraph,
    objective: &Objective,
) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, &GroupKind::ALL);
    let wsi = layout.wsi_vars(&binding)?;
    let banks = layout.memory_vars(&binding)?;
    let x = tape.constant(embeddings.clone());
    let fwd = wsi_forward(&mut tape, &wsi, x, graph, banks, objective)?;
    Ok(positive_probability(tape.value(fwd.logits)))
}
