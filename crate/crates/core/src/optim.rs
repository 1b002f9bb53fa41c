//! AdamW with gradient accumulation and post-step hooks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradSet, GroupKind, ParamGroups};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Sums micro-step gradients until `target_steps` have been collected.
///
/// Sums are compensated (Neumaier) so that averaging `k` identical gradients
/// reproduces that gradient exactly whenever `k` times it is representable.
#[derive(Clone, Debug)]
pub struct AccumBuffer {
    sums: GradSet,
    compensation: GradSet,
    micro_steps: usize,
    target_steps: usize,
}

impl AccumBuffer {
    pub fn new(params: &ParamGroups, target_steps: usize) -> Result<Self> {
        if target_steps == 0 {
            return Err(Error::Config("accumulation target must be at least 1".into()));
        }
        Ok(Self {
            sums: params.zeros_like(),
            compensation: params.zeros_like(),
            micro_steps: 0,
            target_steps,
        })
    }

    pub fn micro_steps(&self) -> usize {
        self.micro_steps
    }

    pub fn target_steps(&self) -> usize {
        self.target_steps
    }

    pub fn is_full(&self) -> bool {
        self.micro_steps == self.target_steps
    }

    pub fn accumulate(&mut self, grads: &GradSet) -> Result<()> {
        if self.is_full() {
            return Err(Error::Numeric(format!(
                "accumulation buffer already holds {} micro-steps",
                self.target_steps
            )));
        }
        // Validate the whole layout before touching anything.
        for (kind, sums) in self.sums.iter() {
            let incoming = grads
                .group(kind)
                .ok_or_else(|| Error::shape("accumulate", format!("gradient set lacks group {kind}")))?;
            if incoming.len() != sums.len() || incoming.iter().zip(sums).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::shape("accumulate", format!("gradient layout differs in group {kind}")));
            }
        }
        let kinds: Vec<GroupKind> = self.sums.iter().map(|(k, _)| k).collect();
        for kind in kinds {
            let incoming = grads.group(kind).expect("validated");
            let sums = self.sums.group_mut(kind).expect("own group");
            let comp = self.compensation.group_mut(kind).expect("own group");
            for ((s, c), g) in sums.iter_mut().zip(comp.iter_mut()).zip(incoming) {
                for ((si, ci), &gi) in s.iter_mut().zip(c.iter_mut()).zip(g) {
                    let t = *si + gi;
                    *ci += if si.abs() >= gi.abs() {
                        (*si - t) + gi
                    } else {
                        (gi - t) + *si
                    };
                    *si = t;
                }
            }
        }
        self.micro_steps += 1;
        Ok(())
    }

    /// Mean gradient over the collected micro-steps.
    pub fn averaged(&self) -> GradSet {
        let mut out = self.sums.clone();
        let n = self.target_steps as f64;
        let kinds: Vec<GroupKind> = self.sums.iter().map(|(k, _)| k).collect();
        for kind in kinds {
            let comp = self.compensation.group(kind).expect("same layout");
            for (o, c) in out.group_mut(kind).expect("same layout").iter_mut().zip(comp) {
                o.iter_mut().zip(c).for_each(|(v, ci)| {
                    // Divide the (sum, compensation) pair and correct with the exact residual.
                    let q = *v / n;
                    let r = (-q).mul_add(n, *v) + ci;
                    *v = q + r / n;
                });
            }
        }
        out
    }

    pub fn clear(&mut self) {
        for buf in [&mut self.sums, &mut self.compensation] {
            let kinds: Vec<GroupKind> = buf.iter().map(|(k, _)| k).collect();
            for kind in kinds {
                buf.group_mut(kind)
                    .expect("own group")
                    .iter_mut()
                    .for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
            }
        }
        self.micro_steps = 0;
    }
}

pub type PostStepHook = Box<dyn FnMut(&mut ParamGroups) -> Result<()> + Send>;

/// Bias-corrected Adam with decoupled weight decay.
pub struct AdamW {
    config: AdamWConfig,
    m: GradSet,
    v: GradSet,
    step_count: u64,
    no_decay: Vec<GroupKind>,
    frozen: Vec<GroupKind>,
    hooks: Vec<PostStepHook>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamGroups) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
            no_decay: Vec::new(),
            frozen: Vec::new(),
            hooks: Vec::new(),
        }
    }

    /// Groups exempt from weight decay.
    pub fn without_decay(mut self, groups: &[GroupKind]) -> Self {
        self.no_decay.extend_from_slice(groups);
        self
    }

    /// Groups that are never updated.
    pub fn freeze(mut self, groups: &[GroupKind]) -> Self {
        self.frozen.extend_from_slice(groups);
        self
    }

    pub fn register_hook(&mut self, hook: PostStepHook) {
        self.hooks.push(hook);
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut ParamGroups, buffer: &mut AccumBuffer) -> Result<()> {
        if !buffer.is_full() {
            return Err(Error::Numeric(format!(
                "optimizer step requested after {} of {} micro-steps",
                buffer.micro_steps(),
                buffer.target_steps()
            )));
        }
        let grads = buffer.averaged();
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let kinds: Vec<GroupKind> = params.kinds().collect();
        for kind in kinds {
            if self.frozen.contains(&kind) {
                continue;
            }
            let decay = if self.no_decay.contains(&kind) { 0.0 } else { weight_decay };
            let g = grads
                .group(kind)
                .ok_or_else(|| Error::shape("step", format!("no gradients for group {kind}")))?;
            let m = self.m.group_mut(kind).expect("moments share layout");
            let v = self.v.group_mut(kind).expect("moments share layout");
            let tensors = params.group_mut(kind).expect("listed kind").tensors_mut();
            for (((theta, gi), mi), vi) in tensors.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                for (((p, &gr), mj), vj) in theta.data_mut().iter_mut().zip(gi).zip(mi.iter_mut()).zip(vi.iter_mut()) {
                    *mj = beta1 * *mj + (1.0 - beta1) * gr;
                    *vj = beta2 * *vj + (1.0 - beta2) * gr * gr;
                    if !mj.is_finite() || !vj.is_finite() {
                        return Err(Error::Numeric(format!("non-finite Adam moment in group {kind}")));
                    }
                    let m_hat = *mj / bc1;
                    let v_hat = *vj / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    if decay != 0.0 {
                        *p -= lr * decay * *p;
                    }
                }
            }
        }
        buffer.clear();
        for hook in &mut self.hooks {
            hook(params)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn single(value: f64) -> ParamGroups {
        let mut p = ParamGroups::new();
        p.insert(GroupKind::Classifier, "w", Tensor::row(vec![value]));
        p
    }

    fn grads_of(p: &ParamGroups, g: f64) -> GradSet {
        let mut gs = p.zeros_like();
        for (kind, _) in p.iter() {
            gs.group_mut(kind).unwrap().iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = g));
        }
        gs
    }

    #[test]
    fn zero_gradients_accumulate_to_zero() {
        let p = single(1.0);
        let mut buf = AccumBuffer::new(&p, 16).unwrap();
        for _ in 0..16 {
            buf.accumulate(&grads_of(&p, 0.0)).unwrap();
        }
        assert_eq!(buf.micro_steps(), 16);
        assert!(buf.averaged().is_all_zero(GroupKind::Classifier));
        assert!(buf.accumulate(&grads_of(&p, 0.0)).is_err());
    }

    #[test]
    fn accumulation_is_additive() {
        let p = single(1.0);
        let mut buf = AccumBuffer::new(&p, 2).unwrap();
        buf.accumulate(&grads_of(&p, 0.75)).unwrap();
        buf.accumulate(&grads_of(&p, 0.75)).unwrap();
        assert_eq!(buf.averaged().group(GroupKind::Classifier).unwrap()[0], vec![0.75]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let p = single(1.0);
        let mut other = ParamGroups::new();
        other.insert(GroupKind::Classifier, "w", Tensor::row(vec![1.0, 2.0]));
        let mut buf = AccumBuffer::new(&p, 2).unwrap();
        assert!(matches!(buf.accumulate(&other.zeros_like()), Err(Error::Shape { .. })));
    }

    #[test]
    fn step_before_full_buffer_fails() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut buf = AccumBuffer::new(&p, 16).unwrap();
        buf.accumulate(&grads_of(&p, 1.0)).unwrap();
        assert!(opt.step(&mut p, &mut buf).is_err());
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = single(0.123456789);
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let mut buf = AccumBuffer::new(&p, 1).unwrap();
        buf.accumulate(&grads_of(&p, 0.0)).unwrap();
        opt.step(&mut p, &mut buf).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_on_zero_gradient() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut buf = AccumBuffer::new(&p, 1).unwrap();
        buf.accumulate(&grads_of(&p, 0.0)).unwrap();
        opt.step(&mut p, &mut buf).unwrap();
        let theta = p.group(GroupKind::Classifier).unwrap().tensors()[0].data()[0];
        assert!((theta - (1.0 - 2e-8)).abs() < 1e-16, "{theta}");
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.5, -0.02] {
            let mut p = single(0.0);
            let cfg = AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            };
            let mut opt = AdamW::new(cfg, &p);
            let mut buf = AccumBuffer::new(&p, 1).unwrap();
            buf.accumulate(&grads_of(&p, g)).unwrap();
            opt.step(&mut p, &mut buf).unwrap();
            let theta = p.group(GroupKind::Classifier).unwrap().tensors()[0].data()[0];
            let expected = -2e-4 * g.signum();
            // |g| / (|g| + eps) differs from 1 by at most eps/|g|.
            assert!((theta - expected).abs() <= 2e-4 * 1e-8 / g.abs() * 2.0, "{theta}");
        }
    }

    #[test]
    fn memory_group_is_not_decayed_and_hooks_run() {
        let mut p = single(1.0);
        p.insert(GroupKind::Memory, "pos", Tensor::row(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p).without_decay(&[GroupKind::Memory]);
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = calls.clone();
        opt.register_hook(Box::new(move |_| {
            c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(())
        }));
        let mut buf = AccumBuffer::new(&p, 1).unwrap();
        buf.accumulate(&grads_of(&p, 0.0)).unwrap();
        opt.step(&mut p, &mut buf).unwrap();
        assert_eq!(p.group(GroupKind::Memory).unwrap().tensors()[0].data()[0], 1.0);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 1);
        assert_eq!(buf.micro_steps(), 0);
    }

    #[test]
    fn zeroed_group_is_isolated_on_first_step() {
        let mut p = single(0.5);
        p.insert(GroupKind::OmicsEncoder, "w", Tensor::row(vec![0.25, -0.75]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let mut g = grads_of(&p, 0.3);
        g.group_mut(GroupKind::OmicsEncoder).unwrap()[0] = vec![0.0, 0.0];
        let mut buf = AccumBuffer::new(&p, 1).unwrap();
        buf.accumulate(&g).unwrap();
        let before = p.group(GroupKind::OmicsEncoder).unwrap().clone();
        opt.step(&mut p, &mut buf).unwrap();
        assert_eq!(p.group(GroupKind::OmicsEncoder).unwrap(), &before);
        assert_ne!(p.group(GroupKind::Classifier).unwrap().tensors()[0].data()[0], 0.5);
    }

    proptest! {
        #[test]
        fn averaged_identical_gradients_step_exactly(
            g in prop::collection::vec(-1e3f64..1e3, 1..6),
            theta in prop::collection::vec(-10f64..10.0, 6),
            k in 1usize..=16,
        ) {
            let mut a = ParamGroups::new();
            a.insert(GroupKind::WsiEncoder, "w", Tensor::row(theta[..g.len()].to_vec()));
            let mut b = a.clone();
            let mut grads = a.zeros_like();
            grads.group_mut(GroupKind::WsiEncoder).unwrap()[0] = g.clone();

            let mut opt_a = AdamW::new(AdamWConfig::default(), &a);
            let mut buf_a = AccumBuffer::new(&a, k).unwrap();
            for _ in 0..k {
                buf_a.accumulate(&grads).unwrap();
            }
            opt_a.step(&mut a, &mut buf_a).unwrap();

            let mut opt_b = AdamW::new(AdamWConfig::default(), &b);
            let mut buf_b = AccumBuffer::new(&b, 1).unwrap();
            buf_b.accumulate(&grads).unwrap();
            opt_b.step(&mut b, &mut buf_b).unwrap();

            prop_assert_eq!(a, b);
        }
    }
}
