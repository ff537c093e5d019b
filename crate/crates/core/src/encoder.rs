//! Rotation- and translation-equivariant inference network.
//!
//! One lifting group convolution correlates `r` rotated copies of each kernel
//! with the input, adding a rotation axis to the feature map. A stack of 1x1
//! group convolutions (cyclic along the rotation axis, full mixing) follows,
//! and the final layer emits the posterior parameter maps.
//!
//! Internal activation layout is `[B, P, C * r]` with `P = H * W` row-major
//! pixels and feature index `c * r + rho`.

use ndarray::{Array1, Array2, Array3, Array4, Array5, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;

use crate::error::{Result, TvaeError};
use crate::geometry::snapped_sin_cos;
use crate::nn::{
    he_std, leaky_relu_backward_from_output, leaky_relu_inplace, with_prefix, ParamRef,
    Parameterized,
};

/// Architecture switches for the group-convolutional encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupConvSpec {
    /// Number of discrete rotations (1 collapses to a plain convolution).
    pub r: usize,
    /// Spatial kernel size of the lifting layer. Guidance: at least the
    /// expected object extent, so the receptive field covers the object.
    pub first_kernel_size: usize,
    /// Channels in the lifting layer and the pointwise stack.
    pub channels: usize,
    /// Number of 1x1 group-convolutional layers, the last of which is the
    /// posterior head.
    pub n_pointwise_layers: usize,
}

impl GroupConvSpec {
    pub fn new(r: usize, first_kernel_size: usize) -> Result<Self> {
        if r < 1 {
            return Err(TvaeError::InvalidArgument("r must be >= 1".into()));
        }
        if first_kernel_size < 1 {
            return Err(TvaeError::InvalidArgument(
                "first_kernel_size must be >= 1".into(),
            ));
        }
        Ok(GroupConvSpec {
            r,
            first_kernel_size,
            channels: 128,
            n_pointwise_layers: 3,
        })
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_pointwise_layers(mut self, n: usize) -> Self {
        self.n_pointwise_layers = n;
        self
    }
}

/// Per-image encoder output: attention logits over (rotation, pixel) plus
/// per-cell Gaussian parameters for `z` and the residual angle.
#[derive(Debug, Clone)]
pub struct PosteriorField {
    /// `[B, r, H, W]` joint attention logits.
    pub attn_logits: Array4<f64>,
    /// `[B, r, H, W, z_dim]`.
    pub mu_z: Array5<f64>,
    /// `[B, r, H, W, z_dim]`.
    pub log_sigma_z: Array5<f64>,
    /// `[B, r, H, W]` residual rotation mean, before the discrete offset.
    pub mu_dtheta: Array4<f64>,
    /// `[B, r, H, W]`.
    pub log_sigma_theta: Array4<f64>,
}

impl PosteriorField {
    pub fn batch(&self) -> usize {
        self.attn_logits.shape()[0]
    }
    pub fn r(&self) -> usize {
        self.attn_logits.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.attn_logits.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.attn_logits.shape()[3]
    }
    pub fn z_dim(&self) -> usize {
        self.mu_z.shape()[4]
    }

    pub fn zeros(b: usize, r: usize, h: usize, w: usize, z: usize) -> Self {
        PosteriorField {
            attn_logits: Array4::zeros((b, r, h, w)),
            mu_z: Array5::zeros((b, r, h, w, z)),
            log_sigma_z: Array5::zeros((b, r, h, w, z)),
            mu_dtheta: Array4::zeros((b, r, h, w)),
            log_sigma_theta: Array4::zeros((b, r, h, w)),
        }
    }
}

/// Gradients with respect to every entry of a [`PosteriorField`].
pub(crate) type PosteriorFieldGrad = PosteriorField;

// ---------------------------------------------------------------------------
// Kernel rotation
// ---------------------------------------------------------------------------

/// Precomputed sparse maps taking a base `k x k` kernel to its `r` rotated
/// copies. Rotations that are exact multiples of pi/2 are index permutations;
/// others use bilinear interpolation with zero fill outside the kernel frame.
#[derive(Debug, Clone)]
pub(crate) struct KernelRotationPlan {
    /// Per rotation: (target_index, source_index, weight) triplets.
    taps: Vec<Vec<(u32, u32, f64)>>,
}

impl KernelRotationPlan {
    pub fn new(k: usize, r: usize) -> Self {
        let c = (k as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(r);
        for j in 0..r {
            let angle = j as f64 * TAU / r as f64;
            let (s, cos) = snapped_sin_cos(angle);
            let mut rot = Vec::new();
            for ti in 0..k {
                for tj in 0..k {
                    let x = tj as f64 - c;
                    let y = ti as f64 - c;
                    // sample source at R(angle) * (x, y)
                    let sx = cos * x - s * y + c;
                    let sy = s * x + cos * y + c;
                    let tgt = (ti * k + tj) as u32;
                    let r0 = sy.floor();
                    let c0 = sx.floor();
                    let fr = sy - r0;
                    let fc = sx - c0;
                    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
                        if wr == 0.0 {
                            continue;
                        }
                        let row = r0 as i64 + dr;
                        if row < 0 || row >= k as i64 {
                            continue;
                        }
                        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
                            if wc == 0.0 {
                                continue;
                            }
                            let col = c0 as i64 + dc;
                            if col < 0 || col >= k as i64 {
                                continue;
                            }
                            let src = (row as usize * k + col as usize) as u32;
                            rot.push((tgt, src, wr * wc));
                        }
                    }
                }
            }
            taps.push(rot);
        }
        KernelRotationPlan { taps }
    }

    /// `out[rot]` += rotated copy of `base` (both flat `k*k` slices).
    pub fn apply(&self, rot: usize, base: &[f64], out: &mut [f64]) {
        for &(tgt, src, w) in &self.taps[rot] {
            out[tgt as usize] += w * base[src as usize];
        }
    }

    /// Transpose: scatter a rotated-copy gradient back onto the base kernel.
    pub fn apply_transpose(&self, rot: usize, grad_rot: &[f64], grad_base: &mut [f64]) {
        for &(tgt, src, w) in &self.taps[rot] {
            grad_base[src as usize] += w * grad_rot[tgt as usize];
        }
    }
}

/// Rotates each `k x k` kernel in the stack by the `r` angles `j * 2 pi / r`.
///
/// Returns `[n, r, k, k]`; copy 0 is always identical to the input, and
/// quarter-turn multiples are exact index permutations.
pub fn rotate_kernel_stack(kernels: &Array3<f64>, r: usize) -> Array4<f64> {
    let (n, k, k2) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    assert_eq!(k, k2, "kernels must be square");
    let plan = KernelRotationPlan::new(k, r);
    let mut out = Array4::zeros((n, r, k, k));
    for i in 0..n {
        let base: Vec<f64> = kernels.index_axis(ndarray::Axis(0), i).iter().copied().collect();
        for j in 0..r {
            let mut copy = vec![0.0; k * k];
            plan.apply(j, &base, &mut copy);
            out.index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(&Array2::from_shape_vec((k, k), copy).unwrap());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Lifting group convolution
// ---------------------------------------------------------------------------

/// First layer: correlates `r` rotated copies of each kernel with the input,
/// stride 1 with "same" zero padding, adding the rotation axis.
#[derive(Debug, Clone)]
pub struct LiftingConv {
    pub in_channels: usize,
    pub channels: usize,
    pub k: usize,
    pub r: usize,
    w: Array4<f64>, // [C, C_in, k, k]
    b: Array1<f64>, // [C]
    gw: Array4<f64>,
    gb: Array1<f64>,
    plan: KernelRotationPlan,
}

impl LiftingConv {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        channels: usize,
        k: usize,
        r: usize,
        rng: &mut R,
    ) -> Self {
        let std = he_std(in_channels * k * k);
        let dist = Normal::new(0.0, std).expect("positive std");
        LiftingConv {
            in_channels,
            channels,
            k,
            r,
            w: Array4::from_shape_fn((channels, in_channels, k, k), |_| dist.sample(rng)),
            b: Array1::zeros(channels),
            gw: Array4::zeros((channels, in_channels, k, k)),
            gb: Array1::zeros(channels),
            plan: KernelRotationPlan::new(k, r),
        }
    }

    pub fn weights(&self) -> &Array4<f64> {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Array4<f64> {
        &mut self.w
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.b
    }

    /// Rotated kernels flattened to the im2col weight matrix
    /// `[C_in * k * k, C * r]` with column index `c * r + rho`.
    fn weight_matrix(&self) -> Array2<f64> {
        let (c_out, c_in, k) = (self.channels, self.in_channels, self.k);
        let kk = k * k;
        let mut wm = Array2::zeros((c_in * kk, c_out * self.r));
        let mut rotated = vec![0.0; kk];
        for co in 0..c_out {
            for ci in 0..c_in {
                let base: Vec<f64> = self
                    .w
                    .index_axis(ndarray::Axis(0), co)
                    .index_axis(ndarray::Axis(0), ci)
                    .iter()
                    .copied()
                    .collect();
                for rho in 0..self.r {
                    rotated.iter_mut().for_each(|v| *v = 0.0);
                    self.plan.apply(rho, &base, &mut rotated);
                    let col = co * self.r + rho;
                    for (idx, &v) in rotated.iter().enumerate() {
                        wm[[ci * kk + idx, col]] = v;
                    }
                }
            }
        }
        wm
    }

    fn im2col(&self, image: &ArrayView2<'_, f64>, cols: &mut Array2<f64>, channel: usize) {
        let (h, w) = (image.nrows() as i64, image.ncols() as i64);
        let k = self.k as i64;
        let pad = (k - 1) / 2;
        let kk = (k * k) as usize;
        for i in 0..h {
            for j in 0..w {
                let p = (i * w + j) as usize;
                for u in 0..k {
                    let si = i + u - pad;
                    let base = channel * kk + (u * k) as usize;
                    if si < 0 || si >= h {
                        for v in 0..k as usize {
                            cols[[p, base + v]] = 0.0;
                        }
                        continue;
                    }
                    for v in 0..k {
                        let sj = j + v - pad;
                        cols[[p, base + v as usize]] =
                            if sj < 0 || sj >= w { 0.0 } else { image[[si as usize, sj as usize]] };
                    }
                }
            }
        }
    }

    /// `[B, C_in, H, W] -> [B, H*W, C*r]`.
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array3<f64>> {
        let (b, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c_in != self.in_channels {
            return Err(TvaeError::ShapeMismatch(format!(
                "expected {} input channels, got {c_in}",
                self.in_channels
            )));
        }
        if h < self.k || w < self.k {
            return Err(TvaeError::InvalidDimension(format!(
                "kernel {}x{} larger than image {h}x{w}",
                self.k, self.k
            )));
        }
        let p = h * w;
        let f_out = self.channels * self.r;
        let wm = self.weight_matrix();
        let mut out = Array3::zeros((b, p, f_out));
        let mut cols = Array2::zeros((p, c_in * self.k * self.k));
        for bi in 0..b {
            for ci in 0..c_in {
                let img = x.index_axis(ndarray::Axis(0), bi);
                let img = img.index_axis(ndarray::Axis(0), ci);
                self.im2col(&img, &mut cols, ci);
            }
            let mut y = cols.dot(&wm);
            for c in 0..self.channels {
                let bias = self.b[c];
                for rho in 0..self.r {
                    y.column_mut(c * self.r + rho).iter_mut().for_each(|v| *v += bias);
                }
            }
            out.index_axis_mut(ndarray::Axis(0), bi).assign(&y);
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients. The input is data, so no input
    /// gradient is produced.
    pub fn backward(&mut self, x: &Array4<f64>, grad_out: &Array3<f64>) {
        let (b, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let p = h * w;
        let kk = self.k * self.k;
        let mut gwm: Array2<f64> = Array2::zeros((c_in * kk, self.channels * self.r));
        let mut cols = Array2::zeros((p, c_in * kk));
        for bi in 0..b {
            for ci in 0..c_in {
                let img = x.index_axis(ndarray::Axis(0), bi);
                let img = img.index_axis(ndarray::Axis(0), ci);
                self.im2col(&img, &mut cols, ci);
            }
            let gy = grad_out.index_axis(ndarray::Axis(0), bi);
            gwm += &cols.t().dot(&gy);
            for c in 0..self.channels {
                let mut acc = 0.0;
                for rho in 0..self.r {
                    acc += gy.column(c * self.r + rho).sum();
                }
                self.gb[c] += acc;
            }
        }
        // fold the rotated-weight gradient back through the rotation maps
        let mut grot = vec![0.0; kk];
        let mut gbase = vec![0.0; kk];
        for co in 0..self.channels {
            for ci in 0..c_in {
                gbase.iter_mut().for_each(|v| *v = 0.0);
                for rho in 0..self.r {
                    for idx in 0..kk {
                        grot[idx] = gwm[[ci * kk + idx, co * self.r + rho]];
                    }
                    self.plan.apply_transpose(rho, &grot, &mut gbase);
                }
                let mut gw = self.gw.index_axis_mut(ndarray::Axis(0), co);
                let mut gw = gw.index_axis_mut(ndarray::Axis(0), ci);
                for u in 0..self.k {
                    for v in 0..self.k {
                        gw[[u, v]] += gbase[u * self.k + v];
                    }
                }
            }
        }
    }
}

impl Parameterized for LiftingConv {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef::new("weight", &mut self.w, &mut self.gw),
            ParamRef::new("bias", &mut self.b, &mut self.gb),
        ]
    }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) group convolution
// ---------------------------------------------------------------------------

/// 1x1 spatial footprint; mixes channels and acts along the rotation axis
/// with cyclic boundary handling (full rotation-axis footprint), preserving
/// the group structure.
#[derive(Debug, Clone)]
pub struct PointwiseGConv {
    pub c_in: usize,
    pub c_out: usize,
    pub r: usize,
    w: Array3<f64>, // [C_out, C_in, r]
    b: Array1<f64>, // [C_out]
    gw: Array3<f64>,
    gb: Array1<f64>,
}

impl PointwiseGConv {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, r: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        PointwiseGConv {
            c_in,
            c_out,
            r,
            w: Array3::from_shape_fn((c_out, c_in, r), |_| dist.sample(rng)),
            b: Array1::zeros(c_out),
            gw: Array3::zeros((c_out, c_in, r)),
            gb: Array1::zeros(c_out),
        }
    }

    pub fn he<R: Rng + ?Sized>(c_in: usize, c_out: usize, r: usize, rng: &mut R) -> Self {
        Self::new(c_in, c_out, r, he_std(c_in * r), rng)
    }

    /// Identity-initialized layer (c_in == c_out): output equals input.
    pub fn identity(c: usize, r: usize) -> Self {
        let mut w = Array3::zeros((c, c, r));
        for i in 0..c {
            w[[i, i, 0]] = 1.0;
        }
        PointwiseGConv {
            c_in: c,
            c_out: c,
            r,
            w,
            b: Array1::zeros(c),
            gw: Array3::zeros((c, c, r)),
            gb: Array1::zeros(c),
        }
    }

    pub fn weights_mut(&mut self) -> &mut Array3<f64> {
        &mut self.w
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.b
    }

    /// Block-circulant expansion `[C_in * r, C_out * r]`:
    /// `out[co, ro] = sum_{ci, dr} w[co, ci, dr] * in[ci, (ro + dr) % r]`.
    fn expanded(&self) -> Array2<f64> {
        let r = self.r;
        let mut m = Array2::zeros((self.c_in * r, self.c_out * r));
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ro in 0..r {
                    for dr in 0..r {
                        let ri = (ro + dr) % r;
                        m[[ci * r + ri, co * r + ro]] = self.w[[co, ci, dr]];
                    }
                }
            }
        }
        m
    }

    /// `[B, P, C_in * r] -> [B, P, C_out * r]`.
    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (b, p, f_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if f_in != self.c_in * self.r {
            return Err(TvaeError::ShapeMismatch(format!(
                "pointwise gconv expects {} features ({}ch x {}rot), got {f_in}",
                self.c_in * self.r,
                self.c_in,
                self.r
            )));
        }
        let m = self.expanded();
        let x2 = x
            .view()
            .into_shape_with_order((b * p, f_in))
            .expect("standard layout");
        let mut y2 = x2.dot(&m);
        for co in 0..self.c_out {
            let bias = self.b[co];
            for ro in 0..self.r {
                y2.column_mut(co * self.r + ro).iter_mut().for_each(|v| *v += bias);
            }
        }
        Ok(y2
            .into_shape_with_order((b, p, self.c_out * self.r))
            .expect("contiguous"))
    }

    /// Accumulates parameter gradients, returns the input gradient.
    pub fn backward(&mut self, x: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, p, f_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let f_out = self.c_out * self.r;
        let m = self.expanded();
        let x2 = x
            .view()
            .into_shape_with_order((b * p, f_in))
            .expect("standard layout");
        let gy2 = grad_out
            .view()
            .into_shape_with_order((b * p, f_out))
            .expect("standard layout");
        let gx2 = crate::nn::to_standard(gy2.dot(&m.t()));
        let gm = x2.t().dot(&gy2);
        let r = self.r;
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for dr in 0..r {
                    let mut acc = 0.0;
                    for ro in 0..r {
                        acc += gm[[ci * r + (ro + dr) % r, co * r + ro]];
                    }
                    self.gw[[co, ci, dr]] += acc;
                }
            }
            let mut acc = 0.0;
            for ro in 0..r {
                acc += gy2.column(co * r + ro).sum();
            }
            self.gb[co] += acc;
        }
        gx2.into_shape_with_order((b, p, f_in)).expect("contiguous")
    }
}

impl Parameterized for PointwiseGConv {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef::new("weight", &mut self.w, &mut self.gw),
            ParamRef::new("bias", &mut self.b, &mut self.gb),
        ]
    }
}

// ---------------------------------------------------------------------------
// Learned rotation-axis collapse (ablation V2)
// ---------------------------------------------------------------------------

/// Per-channel learned linear map over the rotation axis, reducing
/// `[B, P, C * r]` to `[B, P, C]`. Used by the ablation that keeps
/// group-convolutional features but performs no inference on rotation.
#[derive(Debug, Clone)]
pub struct RotationCollapse {
    pub channels: usize,
    pub r: usize,
    w: Array2<f64>, // [C, r]
    b: Array1<f64>, // [C]
    gw: Array2<f64>,
    gb: Array1<f64>,
}

impl RotationCollapse {
    pub fn new<R: Rng + ?Sized>(channels: usize, r: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("positive std");
        RotationCollapse {
            channels,
            r,
            w: Array2::from_shape_fn((channels, r), |_| dist.sample(rng)),
            b: Array1::zeros(channels),
            gw: Array2::zeros((channels, r)),
            gb: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (b, p, f_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if f_in != self.channels * self.r {
            return Err(TvaeError::ShapeMismatch(format!(
                "rotation collapse expects {} features, got {f_in}",
                self.channels * self.r
            )));
        }
        let mut y = Array3::zeros((b, p, self.channels));
        for bi in 0..b {
            for pi in 0..p {
                for c in 0..self.channels {
                    let mut acc = self.b[c];
                    for rho in 0..self.r {
                        acc += self.w[[c, rho]] * x[[bi, pi, c * self.r + rho]];
                    }
                    y[[bi, pi, c]] = acc;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
        let (b, p, _) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut gx = Array3::zeros(x.raw_dim());
        for bi in 0..b {
            for pi in 0..p {
                for c in 0..self.channels {
                    let g = grad_out[[bi, pi, c]];
                    self.gb[c] += g;
                    for rho in 0..self.r {
                        self.gw[[c, rho]] += g * x[[bi, pi, c * self.r + rho]];
                        gx[[bi, pi, c * self.r + rho]] = g * self.w[[c, rho]];
                    }
                }
            }
        }
        gx
    }
}

impl Parameterized for RotationCollapse {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef::new("weight", &mut self.w, &mut self.gw),
            ParamRef::new("bias", &mut self.b, &mut self.gb),
        ]
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Variant-dependent wiring of the encoder trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Group-equivariant trunk, posterior over all r rotation components.
    Group,
    /// Group-equivariant trunk, rotation axis collapsed before the heads.
    CollapsedRotation,
}

/// The full inference network. The head emits `1 + 2 z_dim + 2` maps per
/// `(rotation, pixel)` cell: attention logit, mu_z, log_sigma_z, mu_dtheta,
/// log_sigma_theta.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: GroupConvSpec,
    pub z_dim: usize,
    pub in_channels: usize,
    lifting: LiftingConv,
    pointwise: Vec<PointwiseGConv>,
    collapse: Option<RotationCollapse>,
    head: PointwiseGConv,
}

/// Cached post-activation maps from [`Encoder::forward_with_cache`].
pub struct EncoderCache {
    /// Post-activation output of lifting and each hidden layer; the last
    /// entry is the head input.
    activations: Vec<Array3<f64>>,
    h: usize,
    w: usize,
}

impl Encoder {
    pub fn head_channels(z_dim: usize) -> usize {
        1 + 2 * z_dim + 2
    }

    pub fn new<R: Rng + ?Sized>(
        spec: GroupConvSpec,
        z_dim: usize,
        in_channels: usize,
        kind: EncoderKind,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.n_pointwise_layers < 1 {
            return Err(TvaeError::InvalidArgument(
                "need at least one pointwise layer (the posterior head)".into(),
            ));
        }
        let c = spec.channels;
        let lifting = LiftingConv::new(in_channels, c, spec.first_kernel_size, spec.r, rng);
        let mut pointwise = Vec::new();
        for _ in 0..spec.n_pointwise_layers - 1 {
            pointwise.push(PointwiseGConv::he(c, c, spec.r, rng));
        }
        let collapse = match kind {
            EncoderKind::Group => None,
            EncoderKind::CollapsedRotation => Some(RotationCollapse::new(c, spec.r, rng)),
        };
        let head_r = if collapse.is_some() { 1 } else { spec.r };
        // small head init keeps the initial attention near uniform and the
        // initial sigmas near their bias value
        let head = PointwiseGConv::new(c, Self::head_channels(z_dim), head_r, 1e-2, rng);
        Ok(Encoder {
            spec,
            z_dim,
            in_channels,
            lifting,
            pointwise,
            collapse,
            head,
        })
    }

    /// Rotation components of the emitted posterior (1 when collapsed).
    pub fn posterior_r(&self) -> usize {
        if self.collapse.is_some() {
            1
        } else {
            self.spec.r
        }
    }

    pub fn lifting(&self) -> &LiftingConv {
        &self.lifting
    }

    pub fn lifting_mut(&mut self) -> &mut LiftingConv {
        &mut self.lifting
    }

    pub fn head_mut(&mut self) -> &mut PointwiseGConv {
        &mut self.head
    }

    /// Runs the network and reorganizes the head output into a
    /// [`PosteriorField`].
    pub fn encode(&self, images: &Array4<f64>) -> Result<PosteriorField> {
        Ok(self.forward_with_cache(images)?.0)
    }

    pub(crate) fn forward_with_cache(
        &self,
        images: &Array4<f64>,
    ) -> Result<(PosteriorField, EncoderCache)> {
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let mut activations = Vec::with_capacity(self.pointwise.len() + 2);
        let mut a = self.lifting.forward(images)?;
        leaky_relu_inplace(&mut a);
        activations.push(a);
        for pw in &self.pointwise {
            let mut y = pw.forward(activations.last().unwrap())?;
            leaky_relu_inplace(&mut y);
            activations.push(y);
        }
        if let Some(col) = &self.collapse {
            let mut y = col.forward(activations.last().unwrap())?;
            leaky_relu_inplace(&mut y);
            activations.push(y);
        }
        let head_in = if self.collapse.is_some() {
            // collapsed features have rotation length 1 in the head layout
            activations.last().unwrap().clone()
        } else {
            activations.last().unwrap().clone()
        };
        let flat = self.head.forward(&head_in)?;
        let field = self.field_from_flat(&flat, h, w);
        Ok((field, EncoderCache { activations, h, w }))
    }

    /// Backpropagates posterior-field gradients into all encoder parameters.
    pub(crate) fn backward(
        &mut self,
        images: &Array4<f64>,
        cache: &EncoderCache,
        grad: &PosteriorFieldGrad,
    ) {
        let flat_grad = self.flat_from_field_grad(grad, cache.h, cache.w);
        let head_in = cache.activations.last().unwrap();
        let mut g = self.head.backward(head_in, &flat_grad);
        let mut idx = cache.activations.len() - 1;
        if let Some(col) = &mut self.collapse {
            leaky_relu_backward_from_output(&cache.activations[idx], &mut g);
            idx -= 1;
            g = col.backward(&cache.activations[idx], &g);
        }
        for pw in self.pointwise.iter_mut().rev() {
            leaky_relu_backward_from_output(&cache.activations[idx], &mut g);
            idx -= 1;
            g = pw.backward(&cache.activations[idx], &g);
        }
        leaky_relu_backward_from_output(&cache.activations[0], &mut g);
        self.lifting.backward(images, &g);
    }

    /// Head layout: feature index `ch * r + rho`, channels ordered
    /// `[attn, mu_z(0..z), log_sigma_z(0..z), mu_dtheta, log_sigma_theta]`.
    fn field_from_flat(&self, flat: &Array3<f64>, h: usize, w: usize) -> PosteriorField {
        let b = flat.shape()[0];
        let r = self.posterior_r();
        let z = self.z_dim;
        let mut field = PosteriorField::zeros(b, r, h, w, z);
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for rho in 0..r {
                        field.attn_logits[[bi, rho, i, j]] = flat[[bi, p, rho]];
                        for d in 0..z {
                            field.mu_z[[bi, rho, i, j, d]] = flat[[bi, p, (1 + d) * r + rho]];
                            field.log_sigma_z[[bi, rho, i, j, d]] =
                                flat[[bi, p, (1 + z + d) * r + rho]];
                        }
                        field.mu_dtheta[[bi, rho, i, j]] = flat[[bi, p, (1 + 2 * z) * r + rho]];
                        field.log_sigma_theta[[bi, rho, i, j]] =
                            flat[[bi, p, (1 + 2 * z + 1) * r + rho]];
                    }
                }
            }
        }
        field
    }

    fn flat_from_field_grad(&self, grad: &PosteriorFieldGrad, h: usize, w: usize) -> Array3<f64> {
        let b = grad.attn_logits.shape()[0];
        let r = self.posterior_r();
        let z = self.z_dim;
        let mut flat = Array3::zeros((b, h * w, Self::head_channels(z) * r));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for rho in 0..r {
                        flat[[bi, p, rho]] = grad.attn_logits[[bi, rho, i, j]];
                        for d in 0..z {
                            flat[[bi, p, (1 + d) * r + rho]] = grad.mu_z[[bi, rho, i, j, d]];
                            flat[[bi, p, (1 + z + d) * r + rho]] =
                                grad.log_sigma_z[[bi, rho, i, j, d]];
                        }
                        flat[[bi, p, (1 + 2 * z) * r + rho]] = grad.mu_dtheta[[bi, rho, i, j]];
                        flat[[bi, p, (1 + 2 * z + 1) * r + rho]] =
                            grad.log_sigma_theta[[bi, rho, i, j]];
                    }
                }
            }
        }
        flat
    }
}

impl Parameterized for Encoder {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = with_prefix("lifting", self.lifting.params());
        for (i, pw) in self.pointwise.iter_mut().enumerate() {
            out.extend(with_prefix(&format!("pw{i}"), pw.params()));
        }
        if let Some(col) = &mut self.collapse {
            out.extend(with_prefix("collapse", col.params()));
        }
        out.extend(with_prefix("head", self.head.params()));
        out
    }
}

/// Plain 2D "same"-padding correlation used as an independent oracle in tests.
#[cfg(test)]
pub(crate) fn plain_conv2d_same(image: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (image.nrows() as i64, image.ncols() as i64);
    let k = kernel.nrows() as i64;
    let pad = (k - 1) / 2;
    let mut out = Array2::zeros((h as usize, w as usize));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for u in 0..k {
                for v in 0..k {
                    let si = i + u - pad;
                    let sj = j + v - pad;
                    if si >= 0 && si < h && sj >= 0 && sj < w {
                        acc += kernel[[u as usize, v as usize]] * image[[si as usize, sj as usize]];
                    }
                }
            }
            out[[i as usize, j as usize]] = acc;
        }
    }
    out
}
