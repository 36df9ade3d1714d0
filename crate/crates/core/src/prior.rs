//! Geometry priors: depth distances, spatial Manhattan distances, their
//! learnable fusion, and the axial decomposition.
//!
//! Token flattening is row-major everywhere: the token at grid position
//! (i, j) has index p = i*W + j. All distance matrices are symmetric,
//! nonnegative, and zero on the diagonal, so the decay matrices they
//! produce lie in (0,1] with an exact-1 diagonal.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pooled depth values on the token grid, normalized to [0,1].
#[derive(Debug, Clone)]
pub struct DepthGrid<T> {
    pub h: usize,
    pub w: usize,
    pub z: Tensor<T>,
}

impl<T: Scalar> DepthGrid<T> {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// How the depth and spatial priors are combined into the geometry prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Weighted sum with two learnable nonnegative memory scalars.
    Memory,
    /// Plain sum of the raw priors.
    Addition,
    /// Elementwise product of the raw priors.
    Hadamard,
    /// 1x1 convolution over the stacked priors (two learnable weights and
    /// a bias); the output is passed through |.| to stay a valid exponent.
    Conv,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "memory" => Ok(FusionMode::Memory),
            "addition" => Ok(FusionMode::Addition),
            "hadamard" => Ok(FusionMode::Hadamard),
            "conv" => Ok(FusionMode::Conv),
            other => Err(Error::param(format!(
                "unknown fusion mode `{other}` (expected memory|addition|hadamard|conv)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Memory => "memory",
            FusionMode::Addition => "addition",
            FusionMode::Hadamard => "hadamard",
            FusionMode::Conv => "conv",
        }
    }

    /// Learnable scalars this fusion contributes per attention layer.
    pub fn param_count(&self) -> usize {
        match self {
            FusionMode::Memory => 2,
            FusionMode::Addition | FusionMode::Hadamard => 0,
            FusionMode::Conv => 3,
        }
    }
}

/// Which priors feed the fusion. The ablation arms of the roadmap map onto
/// these: depth-only and spatial-only keep a single term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    None,
    DepthOnly,
    SpatialOnly,
    Both,
}

impl PriorMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PriorMode::None),
            "depth-only" => Ok(PriorMode::DepthOnly),
            "spatial-only" => Ok(PriorMode::SpatialOnly),
            "both" => Ok(PriorMode::Both),
            other => Err(Error::param(format!(
                "unknown prior mode `{other}` (expected none|depth-only|spatial-only|both)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriorMode::None => "none",
            PriorMode::DepthOnly => "depth-only",
            PriorMode::SpatialOnly => "spatial-only",
            PriorMode::Both => "both",
        }
    }

    pub fn uses_depth(&self) -> bool {
        matches!(self, PriorMode::DepthOnly | PriorMode::Both)
    }
}

/// Learnable memory pair weighting the depth and spatial priors.
///
/// The stored scalars are unconstrained; the effective weights are their
/// absolute values so the fused prior stays nonnegative. One pair per
/// attention layer, shared across heads. In `Conv` fusion mode the same
/// two scalars act as the 1x1 kernel taps and `conv_bias` is added.
#[derive(Debug, Clone)]
pub struct FusionMemory<T> {
    pub w_depth: Tensor<T>,
    pub w_spatial: Tensor<T>,
    pub conv_bias: Tensor<T>,
}

impl<T: Scalar> FusionMemory<T> {
    /// Depth weight starts at 1.0 and spatial at 0.1: the spatial prior
    /// grows linearly with grid size while depth distances stay <= 1.
    pub fn new() -> Self {
        FusionMemory {
            w_depth: Tensor::scalar(T::one()).with_grad(),
            w_spatial: Tensor::scalar(T::from_f64(0.1)).with_grad(),
            conv_bias: Tensor::scalar(T::zero()).with_grad(),
        }
    }

    pub fn with_weights(w_depth: f64, w_spatial: f64) -> Self {
        FusionMemory {
            w_depth: Tensor::scalar(T::from_f64(w_depth)).with_grad(),
            w_spatial: Tensor::scalar(T::from_f64(w_spatial)).with_grad(),
            conv_bias: Tensor::scalar(T::zero()).with_grad(),
        }
    }

    /// Effective (nonnegative) weights under the Memory parameterization.
    pub fn effective(&self) -> (T, T) {
        (self.w_depth.data()[0].abs(), self.w_spatial.data()[0].abs())
    }
}

impl<T: Scalar> Default for FusionMemory<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Min-max normalize a raw depth map to [0,1]; a constant map becomes all
/// zeros. Invariant under monotone affine rescaling of the input: the
/// normalization divides elementwise (rather than multiplying by a
/// reciprocal) so rescalings whose intermediate values stay exactly
/// representable, e.g. integer sensor counts under integer unit changes,
/// reproduce bit-identical results.
pub fn normalize_depth<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in raw.data() {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    if hi <= lo {
        return Tensor::zeros(raw.shape().to_vec());
    }
    let span = hi - lo;
    raw.map(|v| (v - lo) / span)
}

/// Average-pool a normalized depth map into patch tokens.
pub fn pool_depth_to_grid<T: Scalar>(depth: &Tensor<T>, patch: usize) -> Result<DepthGrid<T>> {
    if depth.rank() != 2 {
        return Err(Error::shape(format!(
            "pool_depth_to_grid expects a [h,w] map, got {:?}",
            depth.shape()
        )));
    }
    if patch == 0 {
        return Err(Error::param("patch size must be >= 1"));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "depth map {h}x{w} not divisible by patch {patch}"
        )));
    }
    for &v in depth.data() {
        if v < T::zero() || v > T::one() {
            return Err(Error::domain(format!(
                "pool_depth_to_grid expects depth normalized to [0,1], found {v}"
            )));
        }
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut z = vec![T::zero(); gh * gw];
    crate::kernels::avg_pool2d(
        depth.data(),
        h,
        w,
        patch,
        patch,
        patch,
        patch,
        gh,
        gw,
        &mut z,
    );
    Ok(DepthGrid {
        h: gh,
        w: gw,
        z: Tensor::from_vec(vec![gh, gw], z)?,
    })
}

/// Pairwise absolute pooled-depth differences, [HW x HW].
pub fn depth_distance_matrix<T: Scalar>(grid: &DepthGrid<T>) -> Tensor<T> {
    let n = grid.tokens();
    let z = grid.z.data();
    let mut d = vec![T::zero(); n * n];
    for p in 0..n {
        for q in (p + 1)..n {
            let v = (z[p] - z[q]).abs();
            d[p * n + q] = v;
            d[q * n + p] = v;
        }
    }
    Tensor::from_vec(vec![n, n], d).expect("depth distance shape")
}

/// Pairwise Manhattan grid distances, [HW x HW]. Integer-valued.
pub fn spatial_distance_matrix<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let n = h * w;
    let mut s = vec![T::zero(); n * n];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for i2 in 0..h {
                for j2 in 0..w {
                    let q = i2 * w + j2;
                    let d = (i as isize - i2 as isize).unsigned_abs()
                        + (j as isize - j2 as isize).unsigned_abs();
                    s[p * n + q] = T::from_f64(d as f64);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, n], s).expect("spatial distance shape")
}

/// Axial depth distances: dx[p=(i,j)][j'] = |z_ij - z_ij'| of shape [HW, W]
/// and dy[p=(i,j)][i'] = |z_ij - z_i'j| of shape [HW, H].
pub fn axial_depth_distances<T: Scalar>(grid: &DepthGrid<T>) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (grid.h, grid.w);
    let z = grid.z.data();
    let mut dx = vec![T::zero(); h * w * w];
    let mut dy = vec![T::zero(); h * w * h];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for j2 in 0..w {
                dx[p * w + j2] = (z[i * w + j] - z[i * w + j2]).abs();
            }
            for i2 in 0..h {
                dy[p * h + i2] = (z[i * w + j] - z[i2 * w + j]).abs();
            }
        }
    }
    (
        Tensor::from_vec(vec![h * w, w], dx).expect("dx shape"),
        Tensor::from_vec(vec![h * w, h], dy).expect("dy shape"),
    )
}

/// Axial Manhattan distances: sx[p=(i,j)][j'] = |j - j'| and
/// sy[p=(i,j)][i'] = |i - i'|.
pub fn axial_spatial_distances<T: Scalar>(h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
    let mut sx = vec![T::zero(); h * w * w];
    let mut sy = vec![T::zero(); h * w * h];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for j2 in 0..w {
                sx[p * w + j2] = T::from_f64((j as isize - j2 as isize).abs() as f64);
            }
            for i2 in 0..h {
                sy[p * h + i2] = T::from_f64((i as isize - i2 as isize).abs() as f64);
            }
        }
    }
    (
        Tensor::from_vec(vec![h * w, w], sx).expect("sx shape"),
        Tensor::from_vec(vec![h * w, h], sy).expect("sy shape"),
    )
}

fn fuse_raw<T: Scalar>(
    d: &Tensor<T>,
    s: &Tensor<T>,
    mem: &FusionMemory<T>,
    mode: FusionMode,
) -> Result<Tensor<T>> {
    if d.shape() != s.shape() {
        return Err(Error::shape(format!(
            "fuse_priors: depth prior {:?} vs spatial prior {:?}",
            d.shape(),
            s.shape()
        )));
    }
    let data: Vec<T> = match mode {
        FusionMode::Memory => {
            let (wd, ws) = mem.effective();
            d.data()
                .iter()
                .zip(s.data())
                .map(|(&dv, &sv)| wd * dv + ws * sv)
                .collect()
        }
        FusionMode::Addition => d
            .data()
            .iter()
            .zip(s.data())
            .map(|(&dv, &sv)| dv + sv)
            .collect(),
        FusionMode::Hadamard => d
            .data()
            .iter()
            .zip(s.data())
            .map(|(&dv, &sv)| dv * sv)
            .collect(),
        FusionMode::Conv => {
            let w1 = mem.w_depth.data()[0];
            let w2 = mem.w_spatial.data()[0];
            let b = mem.conv_bias.data()[0];
            d.data()
                .iter()
                .zip(s.data())
                .map(|(&dv, &sv)| (w1 * dv + w2 * sv + b).abs())
                .collect()
        }
    };
    Tensor::from_vec(d.shape().to_vec(), data)
}

/// Fuse the depth and spatial priors into the geometry prior G.
pub fn fuse_priors<T: Scalar>(
    d: &Tensor<T>,
    s: &Tensor<T>,
    mem: &FusionMemory<T>,
    mode: FusionMode,
) -> Result<Tensor<T>> {
    fuse_raw(d, s, mem, mode)
}

/// Axial geometry priors Gx [HW,W] and Gy [HW,H], computed directly from
/// axial distances. Each row equals the corresponding same-row/same-column
/// slice of the full fused G; the slice-consistency tests enforce this.
pub fn axial_priors<T: Scalar>(
    grid: &DepthGrid<T>,
    mem: &FusionMemory<T>,
    mode: FusionMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dx, dy) = axial_depth_distances(grid);
    let (sx, sy) = axial_spatial_distances(grid.h, grid.w);
    Ok((fuse_raw(&dx, &sx, mem, mode)?, fuse_raw(&dy, &sy, mem, mode)?))
}

/// Elementwise beta^G without a tape; validation matches the tape op.
pub fn decay_tensor<T: Scalar>(g: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::param(format!(
            "decay rate beta must lie in (0, 1], got {beta}"
        )));
    }
    if let Some(bad) = g.data().iter().find(|v| **v < T::zero()) {
        return Err(Error::domain(format!(
            "decay_tensor requires nonnegative exponents, found {bad}"
        )));
    }
    let lnb = T::from_f64(beta.ln());
    Ok(g.map(|x| (x * lnb).exp()))
}

/// Unchecked variant used only by the fault-injection path of the check
/// suites, to prove the invariant detectors catch real violations.
#[doc(hidden)]
pub fn decay_tensor_unchecked<T: Scalar>(g: &Tensor<T>, beta: f64) -> Tensor<T> {
    let lnb = T::from_f64(beta.ln());
    g.map(|x| (x * lnb).exp())
}

/// Fully materialized priors for one grid: inputs to visualization and the
/// invariant suites. The model itself fuses the distance bases on the tape
/// so gradients reach the memory weights.
#[derive(Debug, Clone)]
pub struct GeometryPrior<T> {
    pub d: Tensor<T>,
    pub s: Tensor<T>,
    pub g: Tensor<T>,
    pub gx: Tensor<T>,
    pub gy: Tensor<T>,
    pub grid: (usize, usize),
}

impl<T: Scalar> GeometryPrior<T> {
    pub fn build(grid: &DepthGrid<T>, mem: &FusionMemory<T>, mode: FusionMode) -> Result<Self> {
        let d = depth_distance_matrix(grid);
        let s = spatial_distance_matrix(grid.h, grid.w);
        let g = fuse_priors(&d, &s, mem, mode)?;
        let (gx, gy) = axial_priors(grid, mem, mode)?;
        Ok(GeometryPrior {
            d,
            s,
            g,
            gx,
            gy,
            grid: (grid.h, grid.w),
        })
    }
}

/// Fuse two prior-basis vars on the tape so the memory weights train.
///
/// `d` and `s` are constants; the returned var is nonnegative by
/// construction in every mode.
pub fn fuse_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    d: Option<Var>,
    s: Option<Var>,
    mem: &FusionMemory<T>,
    mode: FusionMode,
    prior: PriorMode,
) -> Result<Option<Var>> {
    match prior {
        PriorMode::None => Ok(None),
        PriorMode::DepthOnly => {
            let d = d.ok_or_else(|| Error::usage("depth prior basis missing"))?;
            let wd = tape.watch(&mem.w_depth);
            let wd_abs = tape.abs(wd);
            Ok(Some(tape.scale_var(d, wd_abs)?))
        }
        PriorMode::SpatialOnly => {
            let s = s.ok_or_else(|| Error::usage("spatial prior basis missing"))?;
            let ws = tape.watch(&mem.w_spatial);
            let ws_abs = tape.abs(ws);
            Ok(Some(tape.scale_var(s, ws_abs)?))
        }
        PriorMode::Both => {
            let d = d.ok_or_else(|| Error::usage("depth prior basis missing"))?;
            let s = s.ok_or_else(|| Error::usage("spatial prior basis missing"))?;
            let fused = match mode {
                FusionMode::Memory => {
                    let wd = tape.watch(&mem.w_depth);
                    let ws = tape.watch(&mem.w_spatial);
                    let wd_abs = tape.abs(wd);
                    let ws_abs = tape.abs(ws);
                    let dt = tape.scale_var(d, wd_abs)?;
                    let st = tape.scale_var(s, ws_abs)?;
                    tape.add(dt, st)?
                }
                FusionMode::Addition => tape.add(d, s)?,
                FusionMode::Hadamard => tape.mul(d, s)?,
                FusionMode::Conv => {
                    let wd = tape.watch(&mem.w_depth);
                    let ws = tape.watch(&mem.w_spatial);
                    let b = tape.watch(&mem.conv_bias);
                    let dt = tape.scale_var(d, wd)?;
                    let st = tape.scale_var(s, ws)?;
                    let sum = tape.add(dt, st)?;
                    let shifted = tape.add_scalar_var(sum, b)?;
                    tape.abs(shifted)
                }
            };
            Ok(Some(fused))
        }
    }
}

/// Linear min-max scaling of a matrix to 8-bit gray; a constant input maps
/// to all zeros. Returns the bytes together with the (min, max) used.
pub fn heatmap_u8<T: Scalar>(t: &Tensor<T>) -> (Vec<u8>, f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in t.data() {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return (vec![0u8; t.numel()], lo, hi);
    }
    let scale = 255.0 / (hi - lo);
    let bytes = t
        .data()
        .iter()
        .map(|&v| ((v.as_f64() - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    (bytes, lo, hi)
}

/// Deterministic random depth grid for tests and the check suites.
pub fn random_grid<T: Scalar>(h: usize, w: usize, rng: &mut impl Rng) -> DepthGrid<T> {
    DepthGrid {
        h,
        w,
        z: Tensor::rand_uniform(vec![h, w], 0.0, 1.0, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(h: usize, w: usize, vals: &[f64]) -> DepthGrid<f64> {
        DepthGrid {
            h,
            w,
            z: Tensor::from_vec(vec![h, w], vals.to_vec()).unwrap(),
        }
    }

    #[test]
    fn pooling_constant_quadrants_and_identity() {
        let c = Tensor::<f64>::full(vec![4, 4], 0.4);
        let g = pool_depth_to_grid(&c, 2).unwrap();
        assert!(g.z.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let mut vals = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                vals[i * 4 + j] = match (i < 2, j < 2) {
                    (true, true) => 0.0,
                    (true, false) => 0.2,
                    (false, true) => 0.6,
                    (false, false) => 1.0,
                };
            }
        }
        let q = pool_depth_to_grid(&Tensor::from_vec(vec![4, 4], vals.clone()).unwrap(), 2)
            .unwrap();
        assert_eq!(q.z.data(), &[0.0, 0.2, 0.6, 1.0]);

        let idem = pool_depth_to_grid(&Tensor::from_vec(vec![4, 4], vals.clone()).unwrap(), 1)
            .unwrap();
        assert_eq!(idem.z.data(), vals.as_slice());

        assert!(pool_depth_to_grid(&Tensor::<f64>::zeros(vec![5, 4]), 2).is_err());
    }

    #[test]
    fn depth_distances_reference_values() {
        let g = grid_from(2, 2, &[0.2, 0.5, 0.2, 0.9]);
        let d = depth_distance_matrix(&g);
        assert!((d.at(&[0, 1]) - 0.3).abs() < 1e-15);
        assert!(d.at(&[0, 2]).abs() < 1e-15);
        assert!((d.at(&[1, 3]) - 0.4).abs() < 1e-15);
        // uniform depth -> all zeros
        let u = grid_from(2, 3, &[0.7; 6]);
        assert!(depth_distance_matrix(&u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_distances_reference_values() {
        let s = spatial_distance_matrix::<f64>(2, 2);
        // p=(0,0) at index 0, q=(1,1) at index 3, q=(0,1) at index 1
        assert_eq!(s.at(&[0, 3]), 2.0);
        assert_eq!(s.at(&[0, 1]), 1.0);
        let single = spatial_distance_matrix::<f64>(1, 1);
        assert_eq!(single.data(), &[0.0]);
    }

    #[test]
    fn priors_symmetric_nonneg_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 2)] {
            let g = random_grid::<f64>(h, w, &mut rng);
            let mem = FusionMemory::new();
            let p = GeometryPrior::build(&g, &mem, FusionMode::Memory).unwrap();
            let n = h * w;
            for m in [&p.d, &p.s, &p.g] {
                for a in 0..n {
                    assert_eq!(m.at(&[a, a]), 0.0);
                    for b in 0..n {
                        assert!(m.at(&[a, b]) >= 0.0);
                        assert_eq!(m.at(&[a, b]), m.at(&[b, a]));
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_triangle_inequality_exhaustive_small() {
        let s = spatial_distance_matrix::<f64>(3, 3);
        let n = 9;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    assert!(s.at(&[a, c]) <= s.at(&[a, b]) + s.at(&[b, c]) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn axial_rows_match_full_prior_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = random_grid::<f64>(3, 4, &mut rng);
        let mem = FusionMemory::with_weights(0.9, 0.3);
        for mode in [
            FusionMode::Memory,
            FusionMode::Addition,
            FusionMode::Hadamard,
            FusionMode::Conv,
        ] {
            let p = GeometryPrior::build(&g, &mem, mode).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    let pidx = i * 4 + j;
                    for j2 in 0..4 {
                        let full = p.g.at(&[pidx, i * 4 + j2]);
                        let ax = p.gx.at(&[pidx, j2]);
                        assert!((full - ax).abs() < 1e-12, "mode {mode:?}");
                    }
                    for i2 in 0..3 {
                        let full = p.g.at(&[pidx, i2 * 4 + j]);
                        let ax = p.gy.at(&[pidx, i2]);
                        assert!((full - ax).abs() < 1e-12, "mode {mode:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn fusion_arm_degenerate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let g = random_grid::<f64>(2, 2, &mut rng);
        let d = depth_distance_matrix(&g);
        let s = spatial_distance_matrix::<f64>(2, 2);
        // depth weight 0 -> spatial-only prior
        let spatial_only =
            fuse_priors(&d, &s, &FusionMemory::with_weights(0.0, 1.0), FusionMode::Memory)
                .unwrap();
        assert_eq!(spatial_only.data(), s.data());
        // spatial weight 0 -> depth-only prior
        let depth_only =
            fuse_priors(&d, &s, &FusionMemory::with_weights(1.0, 0.0), FusionMode::Memory)
                .unwrap();
        assert_eq!(depth_only.data(), d.data());
        // unit weights and zero depth distances -> exactly S
        let zero_d = Tensor::<f64>::zeros(vec![4, 4]);
        let g2 =
            fuse_priors(&zero_d, &s, &FusionMemory::with_weights(1.0, 1.0), FusionMode::Memory)
                .unwrap();
        assert_eq!(g2.data(), s.data());
    }

    #[test]
    fn uniform_depth_axial_x_is_manhattan_profile() {
        let g = grid_from(2, 3, &[0.5; 6]);
        let (gx, _gy) =
            axial_priors(&g, &FusionMemory::with_weights(1.0, 1.0), FusionMode::Memory).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for j2 in 0..3 {
                    let expect = (j as isize - j2 as isize).abs() as f64;
                    assert_eq!(gx.at(&[i * 3 + j, j2]), expect);
                }
            }
        }
    }

    #[test]
    fn single_row_grid_has_zero_gy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = random_grid::<f64>(1, 5, &mut rng);
        let (_gx, gy) = axial_priors(&g, &FusionMemory::new(), FusionMode::Memory).unwrap();
        assert!(gy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_tensor_diagonal_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let g = random_grid::<f64>(3, 3, &mut rng);
        let p = GeometryPrior::build(&g, &FusionMemory::new(), FusionMode::Memory).unwrap();
        let dec = decay_tensor(&p.g, 0.8).unwrap();
        for p_idx in 0..9 {
            assert_eq!(dec.at(&[p_idx, p_idx]), 1.0);
        }
        assert!(dec.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        // beta boundaries
        assert!(decay_tensor(&p.g, 1.0).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(decay_tensor(&p.g, 0.0).is_err());
        // scalar value check
        let two = Tensor::<f64>::scalar(2.0);
        assert!((decay_tensor(&two, 0.75).unwrap().data()[0] - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn normalize_depth_is_affine_invariant() {
        let raw = Tensor::<f64>::from_vec(vec![2, 2], vec![800.0, 1600.0, 2400.0, 4000.0]).unwrap();
        let scaled = raw.map(|v| v * 3.5 + 100.0);
        let a = normalize_depth(&raw);
        let b = normalize_depth(&scaled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let constant = Tensor::<f64>::full(vec![2, 2], 5.0);
        assert!(normalize_depth(&constant).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_scaling_handles_constant_input() {
        let c = Tensor::<f64>::zeros(vec![3, 3]);
        let (bytes, _, _) = heatmap_u8(&c);
        assert!(bytes.iter().all(|&b| b == 0));
        let r = Tensor::<f64>::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (bytes, lo, hi) = heatmap_u8(&r);
        assert_eq!(bytes, vec![0, 128, 255]);
        assert_eq!((lo, hi), (1.0, 3.0));
    }
}
