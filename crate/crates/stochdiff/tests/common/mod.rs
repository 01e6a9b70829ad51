//! Independent plain-loop reference implementations used as oracles.
//!
//! Everything here recomputes the model forward passes with bare `f64`
//! loops reading parameters by name — no tape, no shared code with the
//! library's graph path beyond the parameter store itself.

#![allow(dead_code)]

use stochdiff::model::ModelConfig;
use stochdiff::params::ParameterSet;
use stochdiff::schedule::DiffusionSchedule;
use stochdiff::training::WindowDraws;

pub fn affine(ps: &ParameterSet, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
    let w = ps.get(w).unwrap_or_else(|| panic!("missing {w}"));
    let b = ps.get(b).unwrap_or_else(|| panic!("missing {b}"));
    assert_eq!(w.rows(), x.len());
    (0..w.cols())
        .map(|j| {
            b.data()[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, &xv)| xv * w.get2(i, j))
                    .sum::<f64>()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Two-layer Gaussian encoder: tanh trunk, linear mean head, softplus
/// variance head floored at 1e-6.
pub fn ref_encoder(ps: &ParameterSet, prefix: &str, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let trunk: Vec<f64> = affine(
        ps,
        &format!("{prefix}.trunk.w0"),
        &format!("{prefix}.trunk.b0"),
        input,
    )
    .iter()
    .map(|v| v.tanh())
    .collect();
    let mean = affine(
        ps,
        &format!("{prefix}.mean.w0"),
        &format!("{prefix}.mean.b0"),
        &trunk,
    );
    let var = affine(
        ps,
        &format!("{prefix}.var.w0"),
        &format!("{prefix}.var.b0"),
        &trunk,
    )
    .iter()
    .map(|&v| softplus(v).max(1e-6))
    .collect();
    (mean, var)
}

pub fn ref_kl(qm: &[f64], qv: &[f64], pm: &[f64], pv: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..qm.len() {
        let dm = qm[i] - pm[i];
        total += 0.5 * ((pv[i] / qv[i]).ln() + (qv[i] + dm * dm) / pv[i] - 1.0);
    }
    total
}

/// Single-head scaled dot-product attention over explicit rows.
pub fn ref_attention(
    ps: &ParameterSet,
    prefix: &str,
    queries: &[Vec<f64>],
    keys_values: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let wq = ps.get(&format!("{prefix}.wq")).unwrap();
    let wk = ps.get(&format!("{prefix}.wk")).unwrap();
    let wv = ps.get(&format!("{prefix}.wv")).unwrap();
    let proj = |rows: &[Vec<f64>], w: &stochdiff::Tensor| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                (0..w.cols())
                    .map(|j| {
                        r.iter()
                            .enumerate()
                            .map(|(i, &v)| v * w.get2(i, j))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    };
    let q = proj(queries, wq);
    let k = proj(keys_values, wk);
    let v = proj(keys_values, wv);
    let dk = wq.cols() as f64;
    q.iter()
        .map(|qr| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(&a, &b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            (0..v[0].len())
                .map(|j| {
                    exps.iter()
                        .zip(&v)
                        .map(|(&e, vr)| e / denom * vr[j])
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Sinusoidal step embedding, independently transcribed.
pub fn ref_step_embedding(n: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|k| {
            let freq = 10_000.0_f64.powf(-2.0 * (k / 2) as f64 / width as f64);
            let arg = n as f64 * freq;
            if k % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

/// Full denoiser forward: per-dimension lift, self-attention with
/// residual, step embedding, latent tokens, cross-attention with
/// residual, FCN head.
pub fn ref_denoiser(
    ps: &ParameterSet,
    cfg: &ModelConfig,
    xn: &[f64],
    n: usize,
    z: &[f64],
) -> Vec<f64> {
    let (d, e) = (cfg.data_dim, cfg.embed_width);
    let lift_w = ps.get("denoiser.lift_w").unwrap();
    let lift_b = ps.get("denoiser.lift_b").unwrap();
    let tokens: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..e)
                .map(|j| lift_w.get2(i, j) * xn[i] + lift_b.get2(i, j))
                .collect()
        })
        .collect();
    let sa = ref_attention(ps, "denoiser.self", &tokens, &tokens);
    let emb = ref_step_embedding(n, e);
    let feats: Vec<Vec<f64>> = tokens
        .iter()
        .zip(&sa)
        .map(|(t, a)| {
            (0..e)
                .map(|j| t[j] + a[j] + emb[j])
                .collect()
        })
        .collect();
    let z_flat = affine(ps, "denoiser.ztok_w", "denoiser.ztok_b", z);
    let z_tokens: Vec<Vec<f64>> = z_flat.chunks(e).map(<[f64]>::to_vec).collect();
    assert_eq!(z_tokens.len(), 4);
    let ca = ref_attention(ps, "denoiser.cross", &feats, &z_tokens);
    let mut fused: Vec<f64> = feats
        .iter()
        .zip(&ca)
        .flat_map(|(f, c)| f.iter().zip(c).map(|(&a, &b)| a + b))
        .collect();
    fused.extend_from_slice(z);
    let hidden: Vec<f64> = affine(ps, "denoiser.head.w0", "denoiser.head.b0", &fused)
        .iter()
        .map(|v| v.tanh())
        .collect();
    affine(ps, "denoiser.head.w1", "denoiser.head.b1", &hidden)
}

/// Packed-gate LSTM step on `concat(x, z)`.
pub fn ref_lstm_step(
    ps: &ParameterSet,
    input: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let w_ih = ps.get("lstm.w_ih").unwrap();
    let w_hh = ps.get("lstm.w_hh").unwrap();
    let b = ps.get("lstm.b").unwrap();
    let hs = h.len();
    let mut gates = vec![0.0; 4 * hs];
    for (j, g) in gates.iter_mut().enumerate() {
        let mut acc = b.data()[j];
        for (i, &xv) in input.iter().enumerate() {
            acc += xv * w_ih.get2(i, j);
        }
        for (i, &hv) in h.iter().enumerate() {
            acc += hv * w_hh.get2(i, j);
        }
        *g = acc;
    }
    let mut h2 = vec![0.0; hs];
    let mut c2 = vec![0.0; hs];
    for j in 0..hs {
        let i_g = sigmoid(gates[j]);
        let f_g = sigmoid(gates[hs + j]);
        let g_g = gates[2 * hs + j].tanh();
        let o_g = sigmoid(gates[3 * hs + j]);
        c2[j] = f_g * c[j] + i_g * g_g;
        h2[j] = o_g * c2[j].tanh();
    }
    (h2, c2)
}

/// Independent transcription of the whole Algorithm-1 window loop for
/// the full model: posterior and prior encoders, KL, reparameterized
/// projection, closed-form forward noising, denoiser reconstruction,
/// recurrence update. Returns `(total, kl, recon)`.
pub fn ref_dual_loss_stochdiff(
    ps: &ParameterSet,
    cfg: &ModelConfig,
    sched: &DiffusionSchedule,
    window: &[Vec<f64>],
    draws: &WindowDraws,
) -> (f64, f64, f64) {
    let mut h = vec![0.0; cfg.hidden_width];
    let mut c = vec![0.0; cfg.hidden_width];
    let mut kl_total = 0.0;
    let mut recon_total = 0.0;
    for (t, x) in window.iter().enumerate() {
        let dr = &draws.steps[t];
        let mut hx = h.clone();
        hx.extend_from_slice(x);
        let (qm, qv) = ref_encoder(ps, "posterior", &hx);
        let (pm, pv) = ref_encoder(ps, "prior", &h);
        kl_total += ref_kl(&qm, &qv, &pm, &pv);

        let pre_z: Vec<f64> = qm
            .iter()
            .zip(&qv)
            .zip(&dr.eps_z)
            .map(|((&m, &v), &e)| m + v.sqrt() * e)
            .collect();
        let z = affine(ps, "projector.w0", "projector.b0", &pre_z);

        let ab = sched.alpha_bar(dr.n);
        let xn: Vec<f64> = x
            .iter()
            .zip(&dr.eps_diff)
            .map(|(&xv, &e)| ab.sqrt() * xv + (1.0 - ab).sqrt() * e)
            .collect();
        let pred = ref_denoiser(ps, cfg, &xn, dr.n, &z);
        recon_total += x
            .iter()
            .zip(&pred)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>();

        let mut input = x.clone();
        input.extend_from_slice(&z);
        let (h2, c2) = ref_lstm_step(ps, &input, &h, &c);
        h = h2;
        c = c2;
    }
    (kl_total + recon_total, kl_total, recon_total)
}
