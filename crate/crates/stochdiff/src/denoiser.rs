//! Data-prediction network `x0_hat = f(x^n, n, z)`.
//!
//! Pipeline: each of the `d` dimensions of the noisy point becomes a
//! token via a per-dimension learned affine lift; self-attention mixes
//! the tokens (dimension correlations); a sinusoidal step embedding is
//! added; cross-attention fuses the result with tokens projected from
//! the latent `z` (queries from the diffusion side, keys/values from the
//! latent side) with a residual add; an FCN head maps the flattened
//! tokens back to `d` outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AttentionBlock, Fcn};
use crate::params::{BoundParams, ParameterSet};
use crate::tape::{Tape, Tx};
use crate::tensor::Tensor;

/// Number of tokens the latent is projected into for cross-attention.
const Z_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub latent_width: usize,
    pub embed_width: usize,
    pub attention_heads: usize,
    pub hidden_width: usize,
}

/// Sinusoidal embedding of a diffusion step index at the given width.
/// Frequencies follow the usual geometric ladder starting at 1.
pub fn step_embedding(n: usize, width: usize) -> Vec<f64> {
    assert!(width >= 1);
    let mut out = Vec::with_capacity(width);
    let t = n as f64;
    for k in 0..width {
        let pair = (k / 2) as f64;
        let freq = 10_000.0_f64.powf(-2.0 * pair / width as f64);
        out.push(if k % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub name: String,
    self_attn: AttentionBlock,
    cross_attn: AttentionBlock,
    head: Fcn,
    lift_w: String,
    lift_b: String,
    ztok_w: String,
    ztok_b: String,
}

impl Denoiser {
    pub fn new(name: &str, cfg: DenoiserConfig) -> Self {
        let e = cfg.embed_width;
        assert!(
            e % cfg.attention_heads == 0,
            "embed width {e} must be divisible by heads {}",
            cfg.attention_heads
        );
        Self {
            cfg,
            lift_w: format!("{name}.lift_w"),
            lift_b: format!("{name}.lift_b"),
            ztok_w: format!("{name}.ztok_w"),
            ztok_b: format!("{name}.ztok_b"),
            name: name.to_string(),
            self_attn: AttentionBlock::new(
                format!("{name}.self"),
                e,
                e,
                e,
                e,
                e,
                cfg.attention_heads,
            ),
            cross_attn: AttentionBlock::new(
                format!("{name}.cross"),
                e,
                e,
                e,
                e,
                e,
                cfg.attention_heads,
            ),
            head: Fcn::new(
                format!("{name}.head"),
                vec![
                    cfg.data_dim * e + cfg.latent_width,
                    cfg.hidden_width,
                    cfg.data_dim,
                ],
                Activation::Tanh,
                Activation::Identity,
            ),
        }
    }


    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) {
        let (d, e, w) = (self.cfg.data_dim, self.cfg.embed_width, self.cfg.latent_width);
        let bound = 1.0;
        let lift: Vec<f64> = (0..d * e).map(|_| rng.gen_range(-bound..bound)).collect();
        ps.insert(self.lift_w.clone(), Tensor::matrix(d, e, lift).unwrap());
        ps.insert(self.lift_b.clone(), {
            let data = (0..d * e).map(|_| rng.gen_range(-0.1..0.1)).collect();
            Tensor::matrix(d, e, data).unwrap()
        });
        self.self_attn.init(ps, rng);
        let zb = 1.0 / (w as f64).sqrt();
        let zt: Vec<f64> = (0..w * Z_TOKENS * e).map(|_| rng.gen_range(-zb..zb)).collect();
        ps.insert(self.ztok_w.clone(), Tensor::matrix(w, Z_TOKENS * e, zt).unwrap());
        ps.insert(self.ztok_b.clone(), Tensor::zeros(&[1, Z_TOKENS * e]));
        self.cross_attn.init(ps, rng);
        self.head.init(ps, rng);
    }

    /// Tape forward pass. `xn` enters as a constant; `z` is 1×latent and
    /// may carry gradients back into the encoders.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        xn: &[f64],
        n: usize,
        z: Tx<'t>,
    ) -> Tx<'t> {
        let (d, e) = (self.cfg.data_dim, self.cfg.embed_width);
        debug_assert_eq!(xn.len(), d);
        let xn_col = tape.constant(Tensor::column(xn));
        let tokens = p.get(&self.lift_w).rows_scale(xn_col).add(p.get(&self.lift_b));
        let feats = tokens.add(self.self_attn.apply(tape, p, tokens, tokens, tokens));
        let emb = tape.constant(Tensor::row(&step_embedding(n, e)));
        let feats = feats.add_row(emb);
        let z_tok = z
            .matmul(p.get(&self.ztok_w))
            .add_row(p.get(&self.ztok_b))
            .reshape(vec![Z_TOKENS, e]);
        let fused = feats.add(self.cross_attn.apply(tape, p, feats, z_tok, z_tok));
        let head_in = crate::tape::concat_cols(tape, &[fused.reshape(vec![1, d * e]), z]);
        self.head.apply(p, head_in)
    }

    /// Plain-value prediction of `x0` from a noisy point, step index and
    /// latent sample.
    pub fn predict_x0(
        &self,
        params: &ParameterSet,
        xn: &[f64],
        n: usize,
        z: &[f64],
    ) -> Result<Vec<f64>> {
        if xn.len() != self.cfg.data_dim {
            return Err(Error::ShapeMismatch(format!(
                "xn len {} vs data dim {}",
                xn.len(),
                self.cfg.data_dim
            )));
        }
        if z.len() != self.cfg.latent_width {
            return Err(Error::ShapeMismatch(format!(
                "z len {} vs latent width {}",
                z.len(),
                self.cfg.latent_width
            )));
        }
        let tape = Tape::new();
        let p = params.bind(&tape);
        let z_tx = tape.constant(Tensor::row(z));
        let out = self.forward(&tape, &p, xn, n, z_tx).value();
        if !out.all_finite() {
            return Err(Error::NonFinite("predict_x0 output".into()));
        }
        Ok(out.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use crate::rng::normal_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn seeded(n: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(n)
    }

    fn small(d: usize) -> (Denoiser, ParameterSet) {
        let cfg = DenoiserConfig {
            data_dim: d,
            latent_width: 3,
            embed_width: 4,
            attention_heads: 1,
            hidden_width: 6,
        };
        let den = Denoiser::new("den", cfg);
        let mut ps = ParameterSet::new();
        den.init(&mut ps, &mut seeded(13));
        (den, ps)
    }

    #[test]
    fn step_embedding_first_frequency() {
        let e = step_embedding(1, 2);
        assert_eq!(e, vec![1.0f64.sin(), 1.0f64.cos()]);
        assert_eq!(step_embedding(7, 2), step_embedding(7, 2));
    }

    #[test]
    fn step_embeddings_pairwise_distinct() {
        for width in [2usize, 4, 5] {
            let embs: Vec<Vec<f64>> = (1..=100).map(|n| step_embedding(n, width)).collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    assert_ne!(embs[i], embs[j], "width {width}: steps {} and {}", i + 1, j + 1);
                }
            }
        }
    }

    #[test]
    fn output_width_matches_data_dim() {
        for d in [1usize, 4, 16] {
            let (den, ps) = small(d);
            let xn = vec![0.25; d];
            let out = den.predict_x0(&ps, &xn, 3, &[0.1, -0.2, 0.4]).unwrap();
            assert_eq!(out.len(), d);
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let (den, ps) = small(4);
        let xn = [0.3, -0.8, 1.1, 0.0];
        let z = [0.5, 0.2, -0.9];
        let a = den.predict_x0(&ps, &xn, 7, &z).unwrap();
        let b = den.predict_x0(&ps, &xn, 7, &z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn condition_path_is_live() {
        // finite-difference probe: perturbing z must move the output.
        let (den, ps) = small(4);
        let xn = [0.3, -0.8, 1.1, 0.0];
        let z = [0.5, 0.2, -0.9];
        let base = den.predict_x0(&ps, &xn, 5, &z).unwrap();
        let mut any = false;
        for i in 0..3 {
            let mut zp = z;
            zp[i] += 1e-4;
            let out = den.predict_x0(&ps, &xn, 5, &zp).unwrap();
            let delta: f64 = out
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 1e-4;
            if delta > 1e-6 {
                any = true;
            }
        }
        assert!(any, "output is insensitive to z");

        // zeroing z changes the output for generic weights.
        let zeroed = den.predict_x0(&ps, &xn, 5, &[0.0; 3]).unwrap();
        assert_ne!(zeroed, base);
    }

    #[test]
    fn finite_on_random_inputs() {
        let (den, ps) = small(4);
        let mut rng = seeded(99);
        for trial in 0..200 {
            let xn = normal_vec(&mut rng, 4);
            let z = normal_vec(&mut rng, 3);
            let n = 1 + (trial % 10);
            let out = den.predict_x0(&ps, &xn, n, &z).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn reconstruction_gradient_check() {
        let (den, mut ps) = small(2);
        let xn = [0.4, -0.6];
        let x0 = [0.1, 0.9];
        let z = [0.3, -0.5, 0.8];
        let report = gradient_check(
            move |tape, p| {
                let z_tx = tape.constant(Tensor::row(&z));
                let pred = den.forward(tape, p, &xn, 2, z_tx);
                let target = tape.constant(Tensor::row(&x0));
                let diff = pred.sub(target);
                Ok(diff.mul(diff).sum())
            },
            &mut ps,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}
