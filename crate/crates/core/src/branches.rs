//! The two modality branches: patch/slide projections onto the unit sphere
//! and the profile encoder/decoder.

use crate::error::Result;
use crate::graphnet::GatLayerVars;
use crate::tape::{Tape, Var};

/// Bag-side parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct WsiBranchVars {
    pub gat: [GatLayerVars; 2],
    /// `D_N × D`.
    pub patch_proj: Var,
    /// `D_N × D`.
    pub slide_proj: Var,
    /// `2 × D`.
    pub cls_w: Var,
    pub cls_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct OmicsEncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    /// `D_N × D`.
    pub proj: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct OmicsDecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_t(x, w)?;
    tape.add(y, b)
}

/// Unit-norm patch projections `F_P` (`I × D_N`); zero rows stay zero.
pub fn project_patches(tape: &mut Tape, f_wsi: Var, patch_proj: Var) -> Result<Var> {
    let p = tape.matmul_t(f_wsi, patch_proj)?;
    tape.l2_normalize(p, 1)
}

/// Slide embedding on the sphere; a zero projection yields the zero vector.
pub fn slide_normalized(tape: &mut Tape, f_c: Var, slide_proj: Var) -> Result<Var> {
    let p = tape.matmul_t(f_c, slide_proj)?;
    tape.l2_normalize(p, 1)
}

/// Profile MLP with one ReLU hidden layer, `1 × G → 1 × D`.
pub fn encode_omics(tape: &mut Tape, omics: Var, enc: &OmicsEncoderVars) -> Result<Var> {
    let h = linear(tape, omics, enc.w1, enc.b1)?;
    let h = tape.relu(h)?;
    linear(tape, h, enc.w2, enc.b2)
}

/// Decoder mirror of the encoder; returns `(reconstruction, mse)`.
pub fn reconstruct_omics(tape: &mut Tape, f_omics: Var, dec: &OmicsDecoderVars, omics: Var) -> Result<(Var, Var)> {
    let h = linear(tape, f_omics, dec.w1, dec.b1)?;
    let h = tape.relu(h)?;
    let recon = linear(tape, h, dec.w2, dec.b2)?;
    let loss = tape.mse(recon, omics)?;
    Ok((recon, loss))
}

pub fn omics_normalized(tape: &mut Tape, f_omics: Var, proj: Var) -> Result<Var> {
    let p = tape.matmul_t(f_omics, proj)?;
    tape.l2_normalize(p, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FdOptions};
    use crate::params::{GroupKind, ParamGroups};
    use crate::tensor::{dot, norm, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_projection_normalizes_rows() {
        let mut tape = Tape::new();
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let w = tape.constant(Tensor::matrix(4, 4, eye).unwrap());
        let f = tape.constant(Tensor::matrix(2, 4, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let p = project_patches(&mut tape, f, w).unwrap();
        assert_eq!(tape.value(p).data(), &[0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn projected_rows_are_unit_and_cosines_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let w = tape.constant(rand_t(&mut rng, 5, 7));
        let f = tape.constant(rand_t(&mut rng, 20, 7));
        let p = project_patches(&mut tape, f, w).unwrap();
        let mut c = rand_t(&mut rng, 1, 5).into_data();
        let n = norm(&c);
        c.iter_mut().for_each(|v| *v /= n);
        for r in 0..20 {
            let row = tape.value(p).row_slice(r);
            assert!((norm(row) - 1.0).abs() < 1e-12);
            assert!(dot(row, &c).abs() <= 1.0);
        }
    }

    #[test]
    fn slide_projection_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_t(&mut rng, 4, 6);
        let f = rand_t(&mut rng, 1, 6);
        let run = |s: f64| {
            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let fv = tape.constant(Tensor::row(f.data().iter().map(|x| x * s).collect()));
            let out = slide_normalized(&mut tape, fv, wv).unwrap();
            tape.value(out).clone()
        };
        let base = run(1.0);
        assert!((norm(base.data()) - 1.0).abs() < 1e-12);
        for s in [0.01, 3.0, 1e4] {
            for (a, b) in base.data().iter().zip(run(s).data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn orthonormal_rows_recover_coordinates() {
        // Rows e0, e1 of R^3; F in their span.
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let f = tape.constant(Tensor::row(vec![1.0, 2.0, 0.0]));
        let out = slide_normalized(&mut tape, f, w).unwrap();
        let s5 = 5f64.sqrt();
        let got = tape.value(out).data();
        assert!((got[0] - 1.0 / s5).abs() < 1e-15 && (got[1] - 2.0 / s5).abs() < 1e-15);
    }

    #[test]
    fn zero_slide_projection_is_zero_vector() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(vec![3, 4]));
        let f = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
        let out = slide_normalized(&mut tape, f, w).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    struct OmicsFixture {
        params: ParamGroups,
        ids: Vec<crate::params::ParamId>,
    }

    fn omics_fixture(seed: u64, g: usize, h: usize, d: usize, dn: usize) -> OmicsFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamGroups::new();
        let enc = GroupKind::OmicsEncoder;
        let dec = GroupKind::OmicsDecoder;
        let ids = vec![
            params.insert(enc, "w1", rand_t(&mut rng, h, g)),
            params.insert(enc, "b1", rand_t(&mut rng, 1, h)),
            params.insert(enc, "w2", rand_t(&mut rng, d, h)),
            params.insert(enc, "b2", rand_t(&mut rng, 1, d)),
            params.insert(enc, "proj", rand_t(&mut rng, dn, d)),
            params.insert(dec, "w1", rand_t(&mut rng, h, d)),
            params.insert(dec, "b1", rand_t(&mut rng, 1, h)),
            params.insert(dec, "w2", rand_t(&mut rng, g, h)),
            params.insert(dec, "b2", rand_t(&mut rng, 1, g)),
        ];
        OmicsFixture { params, ids }
    }

    fn enc_vars(f: &OmicsFixture, b: &crate::params::Binding) -> Result<OmicsEncoderVars> {
        Ok(OmicsEncoderVars {
            w1: b.var(f.ids[0])?,
            b1: b.var(f.ids[1])?,
            w2: b.var(f.ids[2])?,
            b2: b.var(f.ids[3])?,
            proj: b.var(f.ids[4])?,
        })
    }

    fn dec_vars(f: &OmicsFixture, b: &crate::params::Binding) -> Result<OmicsDecoderVars> {
        Ok(OmicsDecoderVars {
            w1: b.var(f.ids[5])?,
            b1: b.var(f.ids[6])?,
            w2: b.var(f.ids[7])?,
            b2: b.var(f.ids[8])?,
        })
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let mut f = omics_fixture(3, 6, 9, 5, 4);
        for idx in [1, 3] {
            *f.params.get_mut(f.ids[idx]).unwrap() = Tensor::zeros(f.params.get(f.ids[idx]).unwrap().shape().to_vec());
        }
        let mut tape = Tape::new();
        let b = f.params.bind(&mut tape, &[]);
        let o = tape.constant(Tensor::zeros(vec![1, 6]));
        let out = encode_omics(&mut tape, o, &enc_vars(&f, &b).unwrap()).unwrap();
        assert_eq!(tape.value(out).dims2(), (1, 5));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_loss_of_constant_offset_is_one() {
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::row(vec![0.5, -1.0, 2.0]));
        let hat = tape.constant(Tensor::row(vec![1.5, 0.0, 3.0]));
        let same = tape.mse(o, o).unwrap();
        let off = tape.mse(hat, o).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        assert_eq!(tape.value(off).item(), 1.0);
    }

    #[test]
    fn omics_branch_gradients_match_finite_differences() {
        let f = omics_fixture(4, 6, 9, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let omics = rand_t(&mut rng, 1, 6);
        let probe = rand_t(&mut rng, 1, 4);
        let opts = FdOptions {
            samples_per_group: 40,
            ..FdOptions::default()
        };
        let report = finite_diff_check(&f.params, &opts, |tape, b| {
            let o = tape.constant(omics.clone());
            let enc = enc_vars(&f, b)?;
            let f_omics = encode_omics(tape, o, &enc)?;
            let (_, mse) = reconstruct_omics(tape, f_omics, &dec_vars(&f, b)?, o)?;
            let fn_omics = omics_normalized(tape, f_omics, enc.proj)?;
            let pv = tape.constant(probe.clone());
            let prod = tape.mul(fn_omics, pv)?;
            let s = tape.sum(prod)?;
            tape.add(s, mse)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn omics_projection_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let w = rand_t(&mut rng, 4, 6);
            let f = rand_t(&mut rng, 1, 6);
            let mut tape = Tape::new();
            let (wv, fv) = (tape.constant(w.clone()), tape.constant(f.clone()));
            let out = omics_normalized(&mut tape, fv, wv).unwrap();
            let raw: Vec<f64> = (0..4).map(|r| dot(w.row_slice(r), f.data())).collect();
            let n = norm(&raw);
            for (a, b) in tape.value(out).data().iter().zip(&raw) {
                assert!((a - b / n).abs() < 1e-14);
            }
            assert!((norm(tape.value(out).data()) - 1.0).abs() < 1e-12);
        }
    }
}
