//! Decay-modulated self-attention.
//!
//! `gsa_full` multiplies the softmaxed score matrix elementwise by
//! beta^G and applies it to the values with no renormalization, so decayed
//! rows sum to at most 1. `gsa_axial` runs the same mechanism per image
//! row and then per image column, with the axial priors Gx/Gy.
//! Scores are scaled by 1/sqrt(d) inside the softmax.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::prior::{fuse_on_tape, FusionMemory, FusionMode, PriorMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How per-head decay rates are chosen. Rates are fixed hyperparameters,
/// never trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayStrategy {
    Fixed(f64),
    Linear { lo: f64, hi: f64 },
}

impl DecayStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("fixed:") {
            let beta: f64 = rest
                .parse()
                .map_err(|_| Error::param(format!("bad fixed decay rate `{rest}`")))?;
            return Ok(DecayStrategy::Fixed(beta));
        }
        if let Some(rest) = s.strip_prefix("linear:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::param(format!(
                    "linear decay expects `linear:lo,hi`, got `{s}`"
                )));
            }
            let lo: f64 = parts[0]
                .parse()
                .map_err(|_| Error::param(format!("bad decay bound `{}`", parts[0])))?;
            let hi: f64 = parts[1]
                .parse()
                .map_err(|_| Error::param(format!("bad decay bound `{}`", parts[1])))?;
            return Ok(DecayStrategy::Linear { lo, hi });
        }
        Err(Error::param(format!(
            "unknown decay strategy `{s}` (expected fixed:B or linear:LO,HI)"
        )))
    }

    pub fn describe(&self) -> String {
        match self {
            DecayStrategy::Fixed(b) => format!("fixed:{b}"),
            DecayStrategy::Linear { lo, hi } => format!("linear:{lo},{hi}"),
        }
    }
}

/// Per-head decay rates produced by a sampling strategy.
#[derive(Debug, Clone)]
pub struct DecaySchedule {
    pub strategy: DecayStrategy,
    pub rates: Vec<f64>,
}

/// Deterministic per-head decay rates.
///
/// Linear sampling fills beta_h = lo + (hi - lo) * h / n for h = 0..n-1,
/// so all rates lie in [lo, hi).
pub fn sample_decay_rates(strategy: DecayStrategy, n_heads: usize) -> Result<DecaySchedule> {
    if n_heads == 0 {
        return Err(Error::param("decay schedule needs at least one head"));
    }
    let rates = match strategy {
        DecayStrategy::Fixed(beta) => {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::param(format!(
                    "fixed decay rate must lie in (0,1), got {beta}"
                )));
            }
            vec![beta; n_heads]
        }
        DecayStrategy::Linear { lo, hi } => {
            if !(lo > 0.0 && lo < hi && hi <= 1.0) {
                return Err(Error::param(format!(
                    "linear decay bounds must satisfy 0 < lo < hi <= 1, got [{lo}, {hi})"
                )));
            }
            (0..n_heads)
                .map(|h| lo + (hi - lo) * h as f64 / n_heads as f64)
                .collect()
        }
    };
    Ok(DecaySchedule { strategy, rates })
}

/// Projection weights of one attention layer. Plain C x C matrices without
/// biases, plus the fusion memory the layer uses to build its prior.
#[derive(Debug, Clone)]
pub struct AttentionLayerWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub fusion: FusionMemory<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionLayerWeights<T> {
    pub fn new(c: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::param(format!(
                "channel width {c} not divisible by {heads} heads"
            )));
        }
        let init = |rng: &mut _| Tensor::randn_trunc(vec![c, c], 0.02, rng).with_grad();
        Ok(AttentionLayerWeights {
            wq: init(rng),
            wk: init(rng),
            wv: init(rng),
            wo: init(rng),
            fusion: FusionMemory::new(),
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.wq.shape()[0] / self.heads
    }
}

/// Attention placement: full everywhere or the axial decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Full,
    Axial,
}

/// Prior basis for one stage, recorded as tape constants. The fusion into
/// G happens per layer so the memory weights receive gradients.
pub enum StagePriorBasis {
    None,
    /// Full pairwise distance matrices [N,N].
    Full { d: Option<Var>, s: Option<Var> },
    /// Axial distances: dx/sx [HW,W], dy/sy [HW,H].
    Axial {
        dx: Option<Var>,
        sx: Option<Var>,
        dy: Option<Var>,
        sy: Option<Var>,
    },
}

fn scaled_scores<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, d: usize) -> Result<Var> {
    let raw = tape.bmm_nt(q, k)?;
    Ok(tape.scale(raw, T::from_f64(1.0 / (d as f64).sqrt())))
}

/// Softmax(QK^T / sqrt(d)) V over a single token set.
pub fn vanilla_attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if qs.len() != 2 || qs != ks || qs != vs {
        return Err(Error::shape(format!(
            "vanilla_attention: Q {qs:?}, K {ks:?}, V {vs:?} must agree"
        )));
    }
    let (n, d) = (qs[0], qs[1]);
    let q3 = tape.reshape(q, vec![1, n, d])?;
    let k3 = tape.reshape(k, vec![1, n, d])?;
    let v3 = tape.reshape(v, vec![1, n, d])?;
    let scores = scaled_scores(tape, q3, k3, d)?;
    let sm = tape.softmax_rows(scores)?;
    let out = tape.bmm(sm, v3)?;
    tape.reshape(out, vec![n, d])
}

/// Geometry self-attention over the full token set:
/// (Softmax(QK^T / sqrt(d)) ⊙ beta^G) V, with no renormalization after
/// the elementwise product.
pub fn gsa_full<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    g: Option<Var>,
    beta: f64,
) -> Result<Var> {
    let (qs, vs) = (tape.shape(q).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || qs != tape.shape(k) || qs != vs.as_slice() {
        return Err(Error::shape(format!(
            "gsa_full: Q {:?}, K {:?}, V {:?} must agree",
            qs,
            tape.shape(k),
            vs
        )));
    }
    let (n, d) = (qs[0], qs[1]);
    if let Some(g) = g {
        if tape.shape(g) != [n, n] {
            return Err(Error::shape(format!(
                "gsa_full: prior {:?} does not match {n} tokens",
                tape.shape(g)
            )));
        }
    }
    let q3 = tape.reshape(q, vec![1, n, d])?;
    let k3 = tape.reshape(k, vec![1, n, d])?;
    let v3 = tape.reshape(v, vec![1, n, d])?;
    let scores = scaled_scores(tape, q3, k3, d)?;
    let sm = tape.softmax_rows(scores)?;
    let weighted = match g {
        Some(g) => {
            let decay = tape.exp_decay(g, beta)?;
            let d3 = tape.reshape(decay, vec![1, n, n])?;
            tape.mul(sm, d3)?
        }
        None => sm,
    };
    let out = tape.bmm(weighted, v3)?;
    tape.reshape(out, vec![n, d])
}

/// Token permutation that regroups a row-major [H*W] sequence into
/// column-major order, i.e. out[j*H + i] = in[i*W + j].
pub fn column_major_perm(h: usize, w: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(h * w);
    for j in 0..w {
        for i in 0..h {
            perm.push(i * w + j);
        }
    }
    perm
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Axially decomposed geometry self-attention.
///
/// Q, K, V are projections of the original features, flattened row-major
/// over an (h, w) grid. The horizontal pass attends within each image row
/// under beta^Gx; the vertical pass re-uses the original queries/keys to
/// attend within each column over the horizontal output, under beta^Gy.
#[allow(clippy::too_many_arguments)]
pub fn gsa_axial<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    gx: Option<Var>,
    gy: Option<Var>,
    h: usize,
    w: usize,
    beta: f64,
) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    if qs.len() != 2 || qs != tape.shape(k) || qs != tape.shape(v) {
        return Err(Error::shape(format!(
            "gsa_axial: Q {:?}, K {:?}, V {:?} must agree",
            qs,
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let (n, d) = (qs[0], qs[1]);
    if n != h * w {
        return Err(Error::shape(format!(
            "gsa_axial: {n} tokens do not fill an {h}x{w} grid"
        )));
    }
    if let Some(gx) = gx {
        if tape.shape(gx) != [n, w] {
            return Err(Error::shape(format!(
                "gsa_axial: Gx {:?} expected [{n}, {w}]",
                tape.shape(gx)
            )));
        }
    }
    if let Some(gy) = gy {
        if tape.shape(gy) != [n, h] {
            return Err(Error::shape(format!(
                "gsa_axial: Gy {:?} expected [{n}, {h}]",
                tape.shape(gy)
            )));
        }
    }

    // Horizontal pass: batch of H rows, attention over W tokens each.
    let qr = tape.reshape(q, vec![h, w, d])?;
    let kr = tape.reshape(k, vec![h, w, d])?;
    let vr = tape.reshape(v, vec![h, w, d])?;
    let scores_h = scaled_scores(tape, qr, kr, d)?;
    let sm_h = tape.softmax_rows(scores_h)?;
    let weighted_h = match gx {
        Some(gx) => {
            let decay = tape.exp_decay(gx, beta)?;
            let d3 = tape.reshape(decay, vec![h, w, w])?;
            tape.mul(sm_h, d3)?
        }
        None => sm_h,
    };
    let u_rows = tape.bmm(weighted_h, vr)?;
    let u = tape.reshape(u_rows, vec![n, d])?;

    // Vertical pass: regroup tokens column-major, batch of W columns.
    let perm = column_major_perm(h, w);
    let qc = tape.permute_rows(q, &perm)?;
    let kc = tape.permute_rows(k, &perm)?;
    let uc = tape.permute_rows(u, &perm)?;
    let qcr = tape.reshape(qc, vec![w, h, d])?;
    let kcr = tape.reshape(kc, vec![w, h, d])?;
    let ucr = tape.reshape(uc, vec![w, h, d])?;
    let scores_v = scaled_scores(tape, qcr, kcr, d)?;
    let sm_v = tape.softmax_rows(scores_v)?;
    let weighted_v = match gy {
        Some(gy) => {
            let gyc = tape.permute_rows(gy, &perm)?;
            let decay = tape.exp_decay(gyc, beta)?;
            let d3 = tape.reshape(decay, vec![w, h, h])?;
            tape.mul(sm_v, d3)?
        }
        None => sm_v,
    };
    let out_cols = tape.bmm(weighted_v, ucr)?;
    let out_flat = tape.reshape(out_cols, vec![n, d])?;
    tape.permute_rows(out_flat, &inverse_perm(&perm))
}

/// Multi-head geometry self-attention over tokens [N, C].
///
/// Channels split into `heads` blocks; each head runs full or axial GSA
/// with its own decay rate, the concatenation goes through the output
/// projection. The layer's fusion memory builds one shared G which every
/// head decays at its own rate.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_gsa<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    basis: &StagePriorBasis,
    weights: &AttentionLayerWeights<T>,
    sched: &DecaySchedule,
    mode: AttnMode,
    grid: (usize, usize),
    fusion_mode: FusionMode,
    prior_mode: PriorMode,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let c = weights.wq.shape()[0];
    if xs.len() != 2 || xs[1] != c {
        return Err(Error::shape(format!(
            "multi_head_gsa: tokens {:?} do not match projection width {c}",
            xs
        )));
    }
    let (h, w) = grid;
    if xs[0] != h * w {
        return Err(Error::shape(format!(
            "multi_head_gsa: {} tokens do not fill an {h}x{w} grid",
            xs[0]
        )));
    }
    let heads = weights.heads;
    if sched.rates.len() != heads {
        return Err(Error::param(format!(
            "decay schedule has {} rates for {heads} heads",
            sched.rates.len()
        )));
    }
    let dh = c / heads;

    let wq = tape.watch(&weights.wq);
    let wk = tape.watch(&weights.wk);
    let wv = tape.watch(&weights.wv);
    let wo = tape.watch(&weights.wo);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;

    // One fused prior per layer, decayed per head below.
    let (g_full, g_axial) = match basis {
        StagePriorBasis::None => (None, None),
        StagePriorBasis::Full { d, s } => {
            let g = fuse_on_tape(tape, *d, *s, &weights.fusion, fusion_mode, prior_mode)?;
            (g, None)
        }
        StagePriorBasis::Axial { dx, sx, dy, sy } => {
            let gx = fuse_on_tape(tape, *dx, *sx, &weights.fusion, fusion_mode, prior_mode)?;
            let gy = fuse_on_tape(tape, *dy, *sy, &weights.fusion, fusion_mode, prior_mode)?;
            (None, gx.zip(gy))
        }
    };
    match (mode, basis) {
        (AttnMode::Full, StagePriorBasis::Axial { .. }) => {
            return Err(Error::usage("full attention given an axial prior basis"))
        }
        (AttnMode::Axial, StagePriorBasis::Full { .. }) => {
            return Err(Error::usage("axial attention given a full prior basis"))
        }
        _ => {}
    }

    // The concatenated heads times Wo, expanded per head: each head's
    // output multiplies its own row block of Wo and the contributions are
    // summed in head order. Same MACs as the fused GEMM, and permuting a
    // head pair together with its Wo rows commutes exactly.
    let mut acc: Option<Var> = None;
    for hidx in 0..heads {
        let qh = tape.slice_cols(q, hidx * dh, dh)?;
        let kh = tape.slice_cols(k, hidx * dh, dh)?;
        let vh = tape.slice_cols(v, hidx * dh, dh)?;
        let beta = sched.rates[hidx];
        let out = match mode {
            AttnMode::Full => gsa_full(tape, qh, kh, vh, g_full, beta)?,
            AttnMode::Axial => {
                let (gx, gy) = match g_axial {
                    Some((gx, gy)) => (Some(gx), Some(gy)),
                    None => (None, None),
                };
                gsa_axial(tape, qh, kh, vh, gx, gy, h, w, beta)?
            }
        };
        let wo_rows = tape.slice_rows(wo, hidx * dh, dh)?;
        let contrib = tape.matmul(out, wo_rows)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, contrib)?,
            None => contrib,
        });
    }
    Ok(acc.expect("at least one head"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::rand_uniform(shape, -1.0, 1.0, rng)
    }

    /// Scalar oracle: explicit softmax then weighted sum, with 1/sqrt(d).
    fn vanilla_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                for t in 0..d {
                    scores[j] += q.at(&[i, t]) * k.at(&[j, t]);
                }
                scores[j] *= scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                let wgt = exps[j] / sum;
                for t in 0..d {
                    out[i * d + t] += wgt * v.at(&[j, t]);
                }
            }
        }
        Tensor::from_vec(vec![n, d], out).unwrap()
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_t(vec![1, 4], &mut rng);
        let k = rand_t(vec![1, 4], &mut rng);
        let v = rand_t(vec![1, 4], &mut rng);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let out = vanilla_attention(&mut tape, vq, vk, vv).unwrap();
        assert!(max_abs_diff(tape.value(out), &v) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_t(vec![3, 2], &mut rng);
        let krow = rand_t(vec![1, 2], &mut rng);
        let k = Tensor::from_vec(vec![3, 2], krow.data().repeat(3)).unwrap();
        let v = rand_t(vec![3, 2], &mut rng);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let out = vanilla_attention(&mut tape, vq, vk, vv).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                let mean = (v.at(&[0, t]) + v.at(&[1, t]) + v.at(&[2, t])) / 3.0;
                assert!((tape.value(out).at(&[i, t]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanilla_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_t(vec![4, 3], &mut rng);
        let k = rand_t(vec![4, 3], &mut rng);
        let v = rand_t(vec![4, 3], &mut rng);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let out = vanilla_attention(&mut tape, vq, vk, vv).unwrap();
        assert!(max_abs_diff(tape.value(out), &vanilla_oracle(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn beta_one_and_zero_prior_reduce_to_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_t(vec![4, 3], &mut rng);
        let k = rand_t(vec![4, 3], &mut rng);
        let v = rand_t(vec![4, 3], &mut rng);
        let mut g = vec![0.0; 16];
        for p in 0..4 {
            for q2 in (p + 1)..4 {
                let val = (p + q2) as f64 * 0.3;
                g[p * 4 + q2] = val;
                g[q2 * 4 + p] = val;
            }
        }
        let g = Tensor::from_vec(vec![4, 4], g).unwrap();
        let zero_g = Tensor::<f64>::zeros(vec![4, 4]);

        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let vg = tape.constant(&g);
        let vzg = tape.constant(&zero_g);
        let plain = vanilla_attention(&mut tape, vq, vk, vv).unwrap();
        let beta_one = gsa_full(&mut tape, vq, vk, vv, Some(vg), 1.0).unwrap();
        let g_zero = gsa_full(&mut tape, vq, vk, vv, Some(vzg), 0.37).unwrap();
        assert!(max_abs_diff(tape.value(plain), tape.value(beta_one)) < 1e-12);
        assert!(max_abs_diff(tape.value(plain), tape.value(g_zero)) < 1e-12);
    }

    #[test]
    fn huge_prior_entry_annihilates_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_t(vec![2, 2], &mut rng);
        let k = rand_t(vec![2, 2], &mut rng);
        let v = rand_t(vec![2, 2], &mut rng);
        let g = Tensor::from_vec(vec![2, 2], vec![0.0, 1e6, 1e6, 0.0]).unwrap();
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let vg = tape.constant(&g);
        // Reconstruct the decayed weight directly: it must be <= 1e-6 of
        // the vanilla weight (the decay factor is 0.5^1e6 ~ 0).
        let q3 = tape.reshape(vq, vec![1, 2, 2]).unwrap();
        let k3 = tape.reshape(vk, vec![1, 2, 2]).unwrap();
        let raw = tape.bmm_nt(q3, k3).unwrap();
        let scaled = tape.scale(raw, 1.0 / (2.0f64).sqrt());
        let sm = tape.softmax_rows(scaled).unwrap();
        let dec = tape.exp_decay(vg, 0.5).unwrap();
        let d3 = tape.reshape(dec, vec![1, 2, 2]).unwrap();
        let wgt = tape.mul(sm, d3).unwrap();
        let ratio = tape.value(wgt).at(&[0, 0, 1]) / tape.value(sm).at(&[0, 0, 1]);
        assert!(ratio <= 1e-6);
        // And the full op still produces finite output.
        let out = gsa_full(&mut tape, vq, vk, vv, Some(vg), 0.5).unwrap();
        assert!(tape.value(out).is_finite());
    }

    /// Two-pass scalar oracle for the axial decomposition.
    fn axial_oracle(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        gx: &Tensor<f64>,
        gy: &Tensor<f64>,
        h: usize,
        w: usize,
        beta: f64,
    ) -> Tensor<f64> {
        let d = q.shape()[1];
        let scale = 1.0 / (d as f64).sqrt();
        let n = h * w;
        // Horizontal: per row i, attention over its w tokens.
        let mut u = vec![0.0; n * d];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut scores = vec![0.0; w];
                for j2 in 0..w {
                    let q2 = i * w + j2;
                    for t in 0..d {
                        scores[j2] += q.at(&[p, t]) * k.at(&[q2, t]);
                    }
                    scores[j2] *= scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j2 in 0..w {
                    let wgt = exps[j2] / sum * beta.powf(gx.at(&[p, j2]));
                    for t in 0..d {
                        u[p * d + t] += wgt * v.at(&[i * w + j2, t]);
                    }
                }
            }
        }
        // Vertical: per column j, original Q/K attend over U.
        let mut out = vec![0.0; n * d];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut scores = vec![0.0; h];
                for i2 in 0..h {
                    let q2 = i2 * w + j;
                    for t in 0..d {
                        scores[i2] += q.at(&[p, t]) * k.at(&[q2, t]);
                    }
                    scores[i2] *= scale;
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for i2 in 0..h {
                    let wgt = exps[i2] / sum * beta.powf(gy.at(&[p, i2]));
                    for t in 0..d {
                        out[p * d + t] += wgt * u[(i2 * w + j) * d + t];
                    }
                }
            }
        }
        Tensor::from_vec(vec![n, d], out).unwrap()
    }

    fn axial_fixture(
        h: usize,
        w: usize,
        d: usize,
        seed: u64,
    ) -> (
        Tensor<f64>,
        Tensor<f64>,
        Tensor<f64>,
        Tensor<f64>,
        Tensor<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_t(vec![h * w, d], &mut rng);
        let k = rand_t(vec![h * w, d], &mut rng);
        let v = rand_t(vec![h * w, d], &mut rng);
        let grid = crate::prior::random_grid::<f64>(h, w, &mut rng);
        let mem = FusionMemory::with_weights(1.0, 0.2);
        let (gx, gy) = crate::prior::axial_priors(&grid, &mem, FusionMode::Memory).unwrap();
        (q, k, v, gx, gy)
    }

    #[test]
    fn axial_matches_two_pass_oracle() {
        for (h, w, seed) in [(2, 2, 6), (3, 4, 7), (1, 5, 8), (4, 1, 9)] {
            let (q, k, v, gx, gy) = axial_fixture(h, w, 3, seed);
            let mut tape = Tape::new();
            let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
            let (vgx, vgy) = (tape.constant(&gx), tape.constant(&gy));
            let out = gsa_axial(&mut tape, vq, vk, vv, Some(vgx), Some(vgy), h, w, 0.8).unwrap();
            let oracle = axial_oracle(&q, &k, &v, &gx, &gy, h, w, 0.8);
            assert!(
                max_abs_diff(tape.value(out), &oracle) < 1e-12,
                "grid {h}x{w}"
            );
        }
    }

    #[test]
    fn single_row_axial_equals_full_on_row_prior() {
        let (q, k, v, gx, _gy) = axial_fixture(1, 5, 3, 10);
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
        let vgx = tape.constant(&gx);
        let ax = gsa_axial(&mut tape, vq, vk, vv, Some(vgx), None, 1, 5, 0.8).unwrap();
        // With one row, Gx is already the full [N,N] prior.
        let vg = tape.constant(&gx);
        let full = gsa_full(&mut tape, vq, vk, vv, Some(vg), 0.8).unwrap();
        assert!(max_abs_diff(tape.value(ax), tape.value(full)) < 1e-12);
    }

    #[test]
    fn decay_schedules_match_stated_values() {
        let s = sample_decay_rates(DecayStrategy::Linear { lo: 0.75, hi: 1.0 }, 4).unwrap();
        assert_eq!(s.rates, vec![0.75, 0.8125, 0.875, 0.9375]);
        let s2 = sample_decay_rates(DecayStrategy::Fixed(0.25), 3).unwrap();
        assert_eq!(s2.rates, vec![0.25, 0.25, 0.25]);
        let s3 = sample_decay_rates(DecayStrategy::Linear { lo: 0.5, hi: 1.0 }, 2).unwrap();
        assert_eq!(s3.rates, vec![0.5, 0.75]);
        let s4 = sample_decay_rates(DecayStrategy::Linear { lo: 0.75, hi: 1.0 }, 1).unwrap();
        assert_eq!(s4.rates, vec![0.75]);
        assert!(sample_decay_rates(DecayStrategy::Linear { lo: 0.9, hi: 0.5 }, 2).is_err());
        assert!(sample_decay_rates(DecayStrategy::Fixed(1.0), 2).is_err());
    }

    fn mh_fixture(
        c: usize,
        heads: usize,
        seed: u64,
    ) -> (Tensor<f64>, AttentionLayerWeights<f64>, DecaySchedule) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(vec![6, c], &mut rng);
        let w = AttentionLayerWeights::new(c, heads, &mut rng).unwrap();
        let sched =
            sample_decay_rates(DecayStrategy::Linear { lo: 0.75, hi: 1.0 }, heads).unwrap();
        (x, w, sched)
    }

    #[test]
    fn multi_head_output_shape_and_modes() {
        let (x, w, sched) = mh_fixture(8, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = crate::prior::random_grid::<f64>(2, 3, &mut rng);
        let d = crate::prior::depth_distance_matrix(&grid);
        let s = crate::prior::spatial_distance_matrix::<f64>(2, 3);
        let (dx, dy) = crate::prior::axial_depth_distances(&grid);
        let (sx, sy) = crate::prior::axial_spatial_distances::<f64>(2, 3);

        let mut tape = Tape::new();
        let vx = tape.constant(&x);
        let basis = StagePriorBasis::Full {
            d: Some(tape.constant(&d)),
            s: Some(tape.constant(&s)),
        };
        let out = multi_head_gsa(
            &mut tape,
            vx,
            &basis,
            &w,
            &sched,
            AttnMode::Full,
            (2, 3),
            FusionMode::Memory,
            PriorMode::Both,
        )
        .unwrap();
        assert_eq!(tape.shape(out), &[6, 8]);

        let basis_ax = StagePriorBasis::Axial {
            dx: Some(tape.constant(&dx)),
            sx: Some(tape.constant(&sx)),
            dy: Some(tape.constant(&dy)),
            sy: Some(tape.constant(&sy)),
        };
        let out_ax = multi_head_gsa(
            &mut tape,
            vx,
            &basis_ax,
            &w,
            &sched,
            AttnMode::Axial,
            (2, 3),
            FusionMode::Memory,
            PriorMode::Both,
        )
        .unwrap();
        assert_eq!(tape.shape(out_ax), &[6, 8]);
    }

    #[test]
    fn one_head_beta_one_equals_vanilla_multi_head() {
        // A fixed(1.0) schedule is test-only; build it directly.
        let sched = DecaySchedule {
            strategy: DecayStrategy::Fixed(1.0),
            rates: vec![1.0],
        };
        let (x, w, _) = mh_fixture(4, 1, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let grid = crate::prior::random_grid::<f64>(2, 3, &mut rng);
        let d = crate::prior::depth_distance_matrix(&grid);
        let s = crate::prior::spatial_distance_matrix::<f64>(2, 3);

        let mut tape = Tape::new();
        let vx = tape.constant(&x);
        let basis = StagePriorBasis::Full {
            d: Some(tape.constant(&d)),
            s: Some(tape.constant(&s)),
        };
        let gsa = multi_head_gsa(
            &mut tape,
            vx,
            &basis,
            &w,
            &sched,
            AttnMode::Full,
            (2, 3),
            FusionMode::Memory,
            PriorMode::Both,
        )
        .unwrap();

        // Vanilla multi-head: same projections, no decay.
        let wq = tape.watch(&w.wq);
        let wk = tape.watch(&w.wk);
        let wv = tape.watch(&w.wv);
        let wo = tape.watch(&w.wo);
        let q = tape.matmul(vx, wq).unwrap();
        let k = tape.matmul(vx, wk).unwrap();
        let v = tape.matmul(vx, wv).unwrap();
        let att = vanilla_attention(&mut tape, q, k, v).unwrap();
        let plain = tape.matmul(att, wo).unwrap();
        assert!(max_abs_diff(tape.value(gsa), tape.value(plain)) < 1e-12);
    }

    #[test]
    fn head_permutation_invariance() {
        // Permuting head column blocks of Wq/Wk/Wv together with the decay
        // rates and the matching row blocks of Wo leaves the output
        // unchanged bit-for-bit up to float addition order (exact here
        // because concatenation order only moves whole blocks).
        let (x, w, _) = mh_fixture(8, 2, 15);
        let sched = DecaySchedule {
            strategy: DecayStrategy::Linear { lo: 0.5, hi: 1.0 },
            rates: vec![0.5, 0.75],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let grid = crate::prior::random_grid::<f64>(2, 3, &mut rng);
        let d = crate::prior::depth_distance_matrix(&grid);
        let s = crate::prior::spatial_distance_matrix::<f64>(2, 3);

        let run = |w: &AttentionLayerWeights<f64>, sched: &DecaySchedule| {
            let mut tape = Tape::new();
            let vx = tape.constant(&x);
            let basis = StagePriorBasis::Full {
                d: Some(tape.constant(&d)),
                s: Some(tape.constant(&s)),
            };
            let out = multi_head_gsa(
                &mut tape,
                vx,
                &basis,
                w,
                sched,
                AttnMode::Full,
                (2, 3),
                FusionMode::Memory,
                PriorMode::Both,
            )
            .unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&w, &sched);

        // Swap the two head blocks: columns dh..2dh first in Wq/Wk/Wv,
        // rows dh..2dh first in Wo, rates reversed.
        let dh = 4;
        let c = 8;
        let swap_cols = |t: &Tensor<f64>| {
            let mut out = vec![0.0; c * c];
            for r in 0..c {
                for col in 0..c {
                    let src = if col < dh { col + dh } else { col - dh };
                    out[r * c + col] = t.data()[r * c + src];
                }
            }
            Tensor::from_vec(vec![c, c], out).unwrap().with_grad()
        };
        let swap_rows = |t: &Tensor<f64>| {
            let mut out = vec![0.0; c * c];
            for r in 0..c {
                let src = if r < dh { r + dh } else { r - dh };
                out[r * c..(r + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
            Tensor::from_vec(vec![c, c], out).unwrap().with_grad()
        };
        let permuted = AttentionLayerWeights {
            wq: swap_cols(&w.wq),
            wk: swap_cols(&w.wk),
            wv: swap_cols(&w.wv),
            wo: swap_rows(&w.wo),
            fusion: w.fusion.clone(),
            heads: 2,
        };
        let sched_rev = DecaySchedule {
            strategy: sched.strategy,
            rates: vec![0.75, 0.5],
        };
        let swapped = run(&permuted, &sched_rev);
        assert_eq!(base, swapped);
    }
}
