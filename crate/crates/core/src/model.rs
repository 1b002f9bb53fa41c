//! Parameter layout of the dual-branch model and its initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{OmicsDecoderVars, OmicsEncoderVars, WsiBranchVars};
use crate::error::{Error, Result};
use crate::graphnet::GatLayerVars;
use crate::memory::{random_unit_rows, MemoryBank};
use crate::params::{Binding, GroupKind, ParamGroups, ParamId};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Patch embedding width.
    pub d_in: usize,
    /// Profile vector width.
    pub g_dim: usize,
    /// Shared latent width `D`.
    pub latent: usize,
    /// Sphere width `D_N`.
    pub sphere: usize,
    pub omics_hidden: usize,
    /// Components per memory bank.
    pub memory_size: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_in", self.d_in),
            ("g_dim", self.g_dim),
            ("latent_dim", self.latent),
            ("sphere_dim", self.sphere),
            ("omics_hidden", self.omics_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.memory_size < 2 {
            return Err(Error::Config(format!("memory_size must be at least 2, got {}", self.memory_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatLayerIds {
    pub w: ParamId,
    pub attn: ParamId,
    pub bias: ParamId,
}

impl GatLayerIds {
    fn vars(&self, b: &Binding) -> Result<GatLayerVars> {
        Ok(GatLayerVars {
            w: b.var(self.w)?,
            attn: b.var(self.attn)?,
            bias: b.var(self.bias)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Where every parameter lives inside [`ParamGroups`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub dims: ModelDims,
    pub gat: [GatLayerIds; 2],
    pub patch_proj: ParamId,
    pub slide_proj: ParamId,
    pub classifier: DenseIds,
    pub omics_enc: [DenseIds; 2],
    pub omics_proj: ParamId,
    pub omics_dec: [DenseIds; 2],
    pub memory_pos: ParamId,
    pub memory_neg: ParamId,
}

impl Layout {
    pub fn wsi_vars(&self, b: &Binding) -> Result<WsiBranchVars> {
        Ok(WsiBranchVars {
            gat: [self.gat[0].vars(b)?, self.gat[1].vars(b)?],
            patch_proj: b.var(self.patch_proj)?,
            slide_proj: b.var(self.slide_proj)?,
            cls_w: b.var(self.classifier.w)?,
            cls_b: b.var(self.classifier.b)?,
        })
    }

    pub fn omics_encoder_vars(&self, b: &Binding) -> Result<OmicsEncoderVars> {
        Ok(OmicsEncoderVars {
            w1: b.var(self.omics_enc[0].w)?,
            b1: b.var(self.omics_enc[0].b)?,
            w2: b.var(self.omics_enc[1].w)?,
            b2: b.var(self.omics_enc[1].b)?,
            proj: b.var(self.omics_proj)?,
        })
    }

    pub fn omics_decoder_vars(&self, b: &Binding) -> Result<OmicsDecoderVars> {
        Ok(OmicsDecoderVars {
            w1: b.var(self.omics_dec[0].w)?,
            b1: b.var(self.omics_dec[0].b)?,
            w2: b.var(self.omics_dec[1].w)?,
            b2: b.var(self.omics_dec[1].b)?,
        })
    }

    /// `(C⁺, C⁻)` handles.
    pub fn memory_vars(&self, b: &Binding) -> Result<(Var, Var)> {
        Ok((b.var(self.memory_pos)?, b.var(self.memory_neg)?))
    }
}

/// Layout plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct MomkdModel {
    pub layout: Layout,
    pub params: ParamGroups,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()).expect("sized")
}

impl MomkdModel {
    /// Glorot-uniform weights, zero biases, random unit memory rows.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut p = ParamGroups::new();
        let ModelDims {
            d_in,
            g_dim,
            latent,
            sphere,
            omics_hidden,
            memory_size,
        } = dims;

        let gat_layer = |p: &mut ParamGroups, rng: &mut ChaCha8Rng, tag: &str, fan_in: usize| GatLayerIds {
            w: p.insert(GroupKind::WsiEncoder, format!("{tag}.w"), glorot(rng, latent, fan_in)),
            attn: p.insert(GroupKind::WsiEncoder, format!("{tag}.attn"), glorot(rng, 1, latent)),
            bias: p.insert(GroupKind::WsiEncoder, format!("{tag}.bias"), Tensor::zeros(vec![1, latent])),
        };
        let gat = [gat_layer(&mut p, &mut rng, "gat1", d_in), gat_layer(&mut p, &mut rng, "gat2", latent)];
        let patch_proj = p.insert(GroupKind::WsiEncoder, "patch_proj", glorot(&mut rng, sphere, latent));
        let slide_proj = p.insert(GroupKind::WsiEncoder, "slide_proj", glorot(&mut rng, sphere, latent));
        let classifier = DenseIds {
            w: p.insert(GroupKind::Classifier, "head.w", glorot(&mut rng, 2, latent)),
            b: p.insert(GroupKind::Classifier, "head.b", Tensor::zeros(vec![1, 2])),
        };

        let dense = |p: &mut ParamGroups, rng: &mut ChaCha8Rng, group: GroupKind, tag: &str, fan_in: usize, fan_out: usize| DenseIds {
            w: p.insert(group, format!("{tag}.w"), glorot(rng, fan_out, fan_in)),
            b: p.insert(group, format!("{tag}.b"), Tensor::zeros(vec![1, fan_out])),
        };
        let omics_enc = [
            dense(&mut p, &mut rng, GroupKind::OmicsEncoder, "enc1", g_dim, omics_hidden),
            dense(&mut p, &mut rng, GroupKind::OmicsEncoder, "enc2", omics_hidden, latent),
        ];
        let omics_proj = p.insert(GroupKind::OmicsEncoder, "omics_proj", glorot(&mut rng, sphere, latent));
        let omics_dec = [
            dense(&mut p, &mut rng, GroupKind::OmicsDecoder, "dec1", latent, omics_hidden),
            dense(&mut p, &mut rng, GroupKind::OmicsDecoder, "dec2", omics_hidden, g_dim),
        ];
        let memory_pos = p.insert(GroupKind::Memory, "pos", random_unit_rows(&mut rng, memory_size, sphere));
        let memory_neg = p.insert(GroupKind::Memory, "neg", random_unit_rows(&mut rng, memory_size, sphere));

        Ok(Self {
            layout: Layout {
                dims,
                gat,
                patch_proj,
                slide_proj,
                classifier,
                omics_enc,
                omics_proj,
                omics_dec,
                memory_pos,
                memory_neg,
            },
            params: p,
        })
    }

    pub fn bank(&self) -> Result<MemoryBank> {
        Ok(MemoryBank {
            pos: self.params.get(self.layout.memory_pos)?.clone(),
            neg: self.params.get(self.layout.memory_neg)?.clone(),
        })
    }

    pub fn set_bank(&mut self, bank: MemoryBank) -> Result<()> {
        let n = self.layout.dims.memory_size;
        let d = self.layout.dims.sphere;
        for t in [&bank.pos, &bank.neg] {
            if t.dims2() != (n, d) {
                return Err(Error::shape("set_bank", format!("bank {:?} for a {n}×{d} memory", t.shape())));
            }
        }
        *self.params.get_mut(self.layout.memory_pos)? = bank.pos;
        *self.params.get_mut(self.layout.memory_neg)? = bank.neg;
        Ok(())
    }

    /// Replaces parameter values with `params`, checking names and shapes.
    pub fn load_params(&mut self, params: ParamGroups) -> Result<()> {
        for (kind, group) in self.params.iter() {
            let other = params
                .group(kind)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter group {kind}")))?;
            if other.names() != group.names()
                || other.tensors().iter().zip(group.tensors()).any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::Data(format!("checkpoint group {kind} does not match the model layout")));
            }
        }
        self.params = params;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            d_in: 6,
            g_dim: 5,
            latent: 8,
            sphere: 4,
            omics_hidden: 7,
            memory_size: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_partitioned() {
        let a = MomkdModel::init(dims(), 11).unwrap();
        let b = MomkdModel::init(dims(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, MomkdModel::init(dims(), 12).unwrap().params);
        let total: usize = a.params.iter().map(|(_, g)| g.tensors().len()).sum();
        assert_eq!(total, 6 + 2 + 2 + 5 + 4 + 2);
        let bank = a.bank().unwrap();
        assert!(bank.max_norm_deviation() < 1e-12);
    }

    #[test]
    fn memory_size_below_two_is_rejected() {
        let mut d = dims();
        d.memory_size = 1;
        assert!(matches!(MomkdModel::init(d, 0), Err(Error::Config(_))));
    }
}
