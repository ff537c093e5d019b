//! Coordinate grids, rigid transforms, Fourier feature expansion, image
//! warping, and circular statistics.
//!
//! Pixel-to-coordinate convention: images are indexed `[row, col]` with the
//! top-left pixel mapping to `(x, y) = (-1, -1)`. `x` increases with the
//! column index, `y` increases with the row index (downward), and both axes
//! span `[-1, 1]` inclusive with uniform spacing `2/(W-1)` and `2/(H-1)`.
//! Rotations use `R(theta) = [[cos, -sin], [sin, cos]]` acting on `(x, y)`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};

use crate::error::{Result, TvaeError};

/// Regular pixel grid in normalized `[-1, 1]` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    coords: Vec<[f64; 2]>,
    height: usize,
    width: usize,
}

impl CoordinateGrid {
    /// Builds the normalized coordinate grid for an `height x width` image.
    ///
    /// Errors with [`TvaeError::InvalidDimension`] if either side is < 2
    /// (the spacing `2/(n-1)` is undefined for a single pixel).
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(TvaeError::InvalidDimension(format!(
                "coordinate grid requires H >= 2 and W >= 2, got {height}x{width}"
            )));
        }
        Ok(Self::new_allow_degenerate(height, width))
    }

    /// Like [`CoordinateGrid::new`] but maps any axis of length 1 to the
    /// single coordinate 0.0. Used internally for degenerate test models.
    pub(crate) fn new_allow_degenerate(height: usize, width: usize) -> Self {
        let axis = |n: usize, i: usize| -> f64 {
            if n <= 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        };
        let mut coords = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                coords.push([axis(width, j), axis(height, i)]);
            }
        }
        CoordinateGrid {
            coords,
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major `(x, y)` pairs, length `H * W`.
    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Coordinate of pixel `(row, col)`.
    pub fn coord_at(&self, row: usize, col: usize) -> [f64; 2] {
        self.coords[row * self.width + col]
    }

    /// Normalized units per pixel along `(x, y)`.
    pub fn pixel_scale(&self) -> (f64, f64) {
        let sx = if self.width > 1 {
            2.0 / (self.width - 1) as f64
        } else {
            1.0
        };
        let sy = if self.height > 1 {
            2.0 / (self.height - 1) as f64
        } else {
            1.0
        };
        (sx, sy)
    }

    /// Converts a normalized coordinate to fractional pixel offsets from the
    /// image center, `(dx_cols, dy_rows)`.
    pub fn coord_to_pixels(&self, coord: [f64; 2]) -> (f64, f64) {
        let (sx, sy) = self.pixel_scale();
        (coord[0] / sx, coord[1] / sy)
    }
}

/// Planar rigid transform: rotation by `theta` followed by translation `t`.
///
/// `theta` is stored unwrapped; angle comparisons are modulo 2*pi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub theta: f64,
    pub t: [f64; 2],
}

impl RigidTransform {
    pub fn new(theta: f64, t: [f64; 2]) -> Self {
        RigidTransform { theta, t }
    }

    pub fn identity() -> Self {
        RigidTransform {
            theta: 0.0,
            t: [0.0, 0.0],
        }
    }

    /// Applies `R(theta) p + t` to a single point.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [
            c * p[0] - s * p[1] + self.t[0],
            s * p[0] + c * p[1] + self.t[1],
        ]
    }
}

/// Applies a rigid transform to every grid coordinate, preserving order.
pub fn transform_coordinates(grid: &CoordinateGrid, tf: &RigidTransform) -> Vec<[f64; 2]> {
    transform_points(grid.coords(), tf)
}

/// Applies a rigid transform to a list of points.
pub fn transform_points(points: &[[f64; 2]], tf: &RigidTransform) -> Vec<[f64; 2]> {
    let (s, c) = tf.theta.sin_cos();
    points
        .iter()
        .map(|p| {
            [
                c * p[0] - s * p[1] + tf.t[0],
                s * p[0] + c * p[1] + tf.t[1],
            ]
        })
        .collect()
}

/// Random Fourier feature expansion of 2-d coordinates.
///
/// The frequency matrix is sampled once at construction and is serialized
/// with the model, so the expansion of a coordinate is stable across process
/// restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatureSpec {
    frequency_matrix: Array2<f64>,
    scale: f64,
}

impl FourierFeatureSpec {
    /// Samples `n_freq` frequency rows from N(0, scale^2).
    pub fn sample<R: Rng + ?Sized>(n_freq: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if n_freq == 0 {
            return Err(TvaeError::InvalidArgument(
                "fourier spec needs n_freq >= 1".into(),
            ));
        }
        if !(scale > 0.0) {
            return Err(TvaeError::InvalidArgument(format!(
                "fourier scale must be positive, got {scale}"
            )));
        }
        let dist = Normal::new(0.0, scale).expect("positive std");
        let freq = Array2::from_shape_fn((n_freq, 2), |_| dist.sample(rng));
        Ok(FourierFeatureSpec {
            frequency_matrix: freq,
            scale,
        })
    }

    /// Rebuilds a spec from a stored frequency matrix.
    pub fn from_matrix(frequency_matrix: Array2<f64>, scale: f64) -> Result<Self> {
        if frequency_matrix.ncols() != 2 || frequency_matrix.nrows() == 0 {
            return Err(TvaeError::ShapeMismatch(format!(
                "frequency matrix must be [n_freq, 2], got {:?}",
                frequency_matrix.shape()
            )));
        }
        Ok(FourierFeatureSpec {
            frequency_matrix,
            scale,
        })
    }

    pub fn n_freq(&self) -> usize {
        self.frequency_matrix.nrows()
    }

    /// Output feature dimension: sine and cosine per frequency row.
    pub fn feature_dim(&self) -> usize {
        2 * self.n_freq()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn frequency_matrix(&self) -> ArrayView2<'_, f64> {
        self.frequency_matrix.view()
    }

    /// Expands each coordinate `c` to `[sin(2 pi F c); cos(2 pi F c)]`.
    pub fn expand(&self, coords: &[[f64; 2]]) -> Array2<f64> {
        let nf = self.n_freq();
        let mut out = Array2::zeros((coords.len(), 2 * nf));
        for (i, c) in coords.iter().enumerate() {
            for k in 0..nf {
                let a = TAU * (self.frequency_matrix[[k, 0]] * c[0] + self.frequency_matrix[[k, 1]] * c[1]);
                out[[i, k]] = a.sin();
                out[[i, nf + k]] = a.cos();
            }
        }
        out
    }

    /// Gradient of the expansion with respect to the coordinates.
    ///
    /// `features` must be the output of [`FourierFeatureSpec::expand`] for the
    /// same coordinates; the sin/cos values are reused instead of recomputed.
    pub(crate) fn backward(
        &self,
        features: &Array2<f64>,
        grad_features: &Array2<f64>,
    ) -> Vec<[f64; 2]> {
        let nf = self.n_freq();
        let n = features.nrows();
        let mut out = vec![[0.0; 2]; n];
        for i in 0..n {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for k in 0..nf {
                let sin_a = features[[i, k]];
                let cos_a = features[[i, nf + k]];
                // d sin / dc = 2 pi cos(a) f_k ; d cos / dc = -2 pi sin(a) f_k
                let scale = TAU * (grad_features[[i, k]] * cos_a - grad_features[[i, nf + k]] * sin_a);
                gx += scale * self.frequency_matrix[[k, 0]];
                gy += scale * self.frequency_matrix[[k, 1]];
            }
            out[i] = [gx, gy];
        }
        out
    }
}

/// Convenience wrapper matching the library surface: expands a coordinate
/// slice under a fixed spec.
pub fn fourier_expand(coords: &[[f64; 2]], spec: &FourierFeatureSpec) -> Array2<f64> {
    spec.expand(coords)
}

/// Circular mean: `atan2` of the summed sines and cosines.
///
/// Errors when the input is empty or the mean resultant vector is (numerically)
/// zero, in which case the mean direction is undefined.
pub fn circular_mean(angles: &[f64]) -> Result<f64> {
    if angles.is_empty() {
        return Err(TvaeError::DegenerateInput(
            "circular mean of empty series".into(),
        ));
    }
    let (mut s, mut c) = (0.0, 0.0);
    for &a in angles {
        s += a.sin();
        c += a.cos();
    }
    let resultant = (s * s + c * c).sqrt() / angles.len() as f64;
    if resultant < 1e-12 {
        return Err(TvaeError::DegenerateInput(
            "zero resultant: circular mean undefined".into(),
        ));
    }
    Ok(s.atan2(c))
}

/// Circular correlation coefficient between two angle series
/// (Fisher-Lee; invariant to adding a constant to either series).
pub fn circular_correlation(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    if alpha.is_empty() || alpha.len() != beta.len() {
        return Err(TvaeError::DegenerateInput(format!(
            "circular correlation needs equal nonzero lengths, got {} and {}",
            alpha.len(),
            beta.len()
        )));
    }
    let a_mean = circular_mean(alpha)?;
    let b_mean = circular_mean(beta)?;
    let (mut num, mut da2, mut db2) = (0.0, 0.0, 0.0);
    for (&a, &b) in alpha.iter().zip(beta) {
        let sa = (a - a_mean).sin();
        let sb = (b - b_mean).sin();
        num += sa * sb;
        da2 += sa * sa;
        db2 += sb * sb;
    }
    let denom = (da2 * db2).sqrt();
    if denom < 1e-12 {
        return Err(TvaeError::DegenerateInput(
            "zero circular variance in at least one series".into(),
        ));
    }
    Ok(num / denom)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % TAU;
    if a > std::f64::consts::PI {
        a -= TAU;
    } else if a <= -std::f64::consts::PI {
        a += TAU;
    }
    a
}

/// Sine/cosine of `theta` with exact values snapped at multiples of pi/2.
///
/// Keeps quarter-turn warps free of interpolation error; the snap tolerance
/// (1e-12 rad) is far below any angle spacing used by the models.
pub(crate) fn snapped_sin_cos(theta: f64) -> (f64, f64) {
    let quarter = theta / FRAC_PI_2;
    let nearest = quarter.round();
    if (quarter - nearest).abs() < 1e-12 {
        let k = (nearest as i64).rem_euclid(4);
        return match k {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    theta.sin_cos()
}

/// Rotates image content about the array center.
///
/// The output at centered position `v = (x=col, y=row)` samples the input at
/// `R(theta) v` with bilinear interpolation and zero fill. Multiples of pi/2
/// reduce to exact index permutations. Under this convention a source image
/// warped with `rotate_image(theta)` is reproduced by the generator at latent
/// rotation `theta`.
pub fn rotate_image(input: ArrayView2<'_, f64>, theta: f64) -> Array2<f64> {
    let (h, w) = (input.nrows(), input.ncols());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, c) = snapped_sin_cos(theta);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let y = i as f64 - cy;
        for j in 0..w {
            let x = j as f64 - cx;
            let src_x = c * x - s * y + cx;
            let src_y = s * x + c * y + cy;
            out[[i, j]] = bilinear_sample(&input, src_y, src_x);
        }
    }
    out
}

/// Shifts image content by whole pixels (`dy` rows down, `dx` cols right),
/// zero fill.
pub fn shift_image(input: ArrayView2<'_, f64>, dy: i64, dx: i64) -> Array2<f64> {
    let (h, w) = (input.nrows(), input.ncols());
    let mut out = Array2::zeros((h, w));
    for i in 0..h as i64 {
        let si = i - dy;
        if si < 0 || si >= h as i64 {
            continue;
        }
        for j in 0..w as i64 {
            let sj = j - dx;
            if sj < 0 || sj >= w as i64 {
                continue;
            }
            out[[i as usize, j as usize]] = input[[si as usize, sj as usize]];
        }
    }
    out
}

/// Bilinear lookup at fractional `(row, col)`; zero outside the image.
pub(crate) fn bilinear_sample(input: &ArrayView2<'_, f64>, row: f64, col: f64) -> f64 {
    let (h, w) = (input.nrows() as i64, input.ncols() as i64);
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let mut acc = 0.0;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        let r = r0 + dr;
        if r < 0 || r >= h {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let c = c0 + dc;
            if c < 0 || c >= w {
                continue;
            }
            acc += wr * wc * input[[r as usize, c as usize]];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn grid_2x2_hits_all_corners() {
        let g = CoordinateGrid::new(2, 2).unwrap();
        assert_eq!(
            g.coords(),
            &[[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]
        );
    }

    #[test]
    fn grid_3x3_has_exact_center() {
        let g = CoordinateGrid::new(3, 3).unwrap();
        assert_eq!(g.coord_at(1, 1), [0.0, 0.0]);
    }

    #[test]
    fn grid_50x50_matches_linspace_oracle() {
        let g = CoordinateGrid::new(50, 50).unwrap();
        // independent linspace construction
        let linspace: Vec<f64> = (0..50).map(|i| -1.0 + i as f64 * (2.0 / 49.0)).collect();
        for i in 0..50 {
            for j in 0..50 {
                let c = g.coord_at(i, j);
                assert_abs_diff_eq!(c[0], linspace[j], epsilon = 1e-15);
                assert_abs_diff_eq!(c[1], linspace[i], epsilon = 1e-15);
            }
        }
        let (sx, _) = g.pixel_scale();
        assert_abs_diff_eq!(sx, 2.0 / 49.0, epsilon = 1e-15);
    }

    #[test]
    fn grid_is_symmetric_about_origin() {
        let g = CoordinateGrid::new(5, 8).unwrap();
        for &[x, y] in g.coords() {
            assert!(g
                .coords()
                .iter()
                .any(|&[u, v]| (u + x).abs() < 1e-12 && (v + y).abs() < 1e-12));
        }
    }

    #[test]
    fn grid_rejects_degenerate_dims() {
        assert!(CoordinateGrid::new(1, 5).is_err());
        assert!(CoordinateGrid::new(5, 0).is_err());
    }

    #[test]
    fn transform_identity_and_quarter_turn() {
        let g = CoordinateGrid::new(3, 3).unwrap();
        let id = RigidTransform::identity();
        assert_eq!(transform_coordinates(&g, &id), g.coords().to_vec());

        let quarter = RigidTransform::new(PI / 2.0, [0.0, 0.0]);
        let p = quarter.apply([1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn transform_matches_matrix_oracle() {
        let g = CoordinateGrid::new(5, 5).unwrap();
        let tf = RigidTransform::new(PI / 4.0, [0.2, -0.1]);
        let got = transform_coordinates(&g, &tf);
        let (s, c) = (tf.theta.sin(), tf.theta.cos());
        for (out, p) in got.iter().zip(g.coords()) {
            // independent 2x2 matrix multiply plus shift
            let ox = c * p[0] + (-s) * p[1] + 0.2;
            let oy = s * p[0] + c * p[1] + (-0.1);
            assert!((out[0] - ox).abs() < 1e-12 && (out[1] - oy).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_composition() {
        let g = CoordinateGrid::new(4, 4).unwrap();
        let a = RigidTransform::new(0.3, [0.1, -0.2]);
        let b = RigidTransform::new(-1.1, [0.05, 0.3]);
        let (s, c) = b.theta.sin_cos();
        let composed = RigidTransform::new(a.theta + b.theta, [
            c * a.t[0] - s * a.t[1] + b.t[0],
            s * a.t[0] + c * a.t[1] + b.t[1],
        ]);
        for p in g.coords() {
            let two_step = b.apply(a.apply(*p));
            let one_step = composed.apply(*p);
            assert_abs_diff_eq!(two_step[0], one_step[0], epsilon = 1e-10);
            assert_abs_diff_eq!(two_step[1], one_step[1], epsilon = 1e-10);
        }
    }

    #[test]
    fn fourier_origin_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = FourierFeatureSpec::sample(6, 1.0, &mut rng).unwrap();
        let f = spec.expand(&[[0.0, 0.0]]);
        for k in 0..6 {
            assert_eq!(f[[0, k]], 0.0);
            assert_eq!(f[[0, 6 + k]], 1.0);
        }
        let a = spec.expand(&[[0.3, -0.7]]);
        let b = spec.expand(&[[0.3, -0.7]]);
        assert_eq!(a, b);
    }

    #[test]
    fn fourier_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = FourierFeatureSpec::sample(4, 2.0, &mut rng).unwrap();
        let c = [0.42, -0.13];
        let f = spec.expand(&[c]);
        for k in 0..4 {
            let a = TAU
                * (spec.frequency_matrix()[[k, 0]] * c[0] + spec.frequency_matrix()[[k, 1]] * c[1]);
            assert!((f[[0, k]] - a.sin()).abs() < 1e-12);
            assert!((f[[0, 4 + k]] - a.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = FourierFeatureSpec::sample(5, 1.5, &mut rng).unwrap();
        let c = [[0.21, -0.4]];
        let f = spec.expand(&c);
        // scalar loss: sum of features weighted by fixed coefficients
        let gf = Array2::from_shape_fn((1, 10), |(_, j)| 0.1 * (j as f64 + 1.0));
        let g = spec.backward(&f, &gf);
        let loss = |p: [f64; 2]| -> f64 {
            let f = spec.expand(&[p]);
            f.iter().zip(gf.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for axis in 0..2 {
            let mut cp = c[0];
            let mut cm = c[0];
            cp[axis] += h;
            cm[axis] -= h;
            let fd = (loss(cp) - loss(cm)) / (2.0 * h);
            assert!((g[0][axis] - fd).abs() < 1e-6, "axis {axis}: {} vs {fd}", g[0][axis]);
        }
    }

    #[test]
    fn circular_correlation_self_and_offset() {
        let alpha: Vec<f64> = (0..50).map(|i| 0.13 * i as f64).collect();
        let r = circular_correlation(&alpha, &alpha).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        let beta: Vec<f64> = alpha.iter().map(|a| a + 1.234).collect();
        let r = circular_correlation(&alpha, &beta).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn circular_correlation_null_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let alpha: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() * TAU).collect();
        let beta: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() * TAU).collect();
        let r = circular_correlation(&alpha, &beta).unwrap();
        assert!(r.abs() < 0.05, "null correlation too large: {r}");
    }

    #[test]
    fn circular_correlation_degenerate_inputs() {
        assert!(circular_correlation(&[], &[]).is_err());
        assert!(circular_correlation(&[0.1, 0.2], &[0.1]).is_err());
        // zero circular variance: all angles identical
        let a = vec![0.5; 10];
        let b: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        assert!(circular_correlation(&a, &b).is_err());
    }

    #[test]
    fn circular_mean_zero_resultant_errors() {
        assert!(circular_mean(&[0.0, PI]).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.1 - TAU), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn rotate_image_quarter_turn_is_permutation() {
        let img = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let r = rotate_image(img.view(), PI / 2.0);
        // out[i][j] = in[j][n-1-i]
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r[[i, j]], img[[j, 2 - i]]);
            }
        }
        // four quarter turns give back the original
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = rotate_image(cur.view(), PI / 2.0);
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn rotate_image_half_turn_is_flip() {
        let img = array![[1.0, 2.0], [3.0, 4.0]];
        let r = rotate_image(img.view(), PI);
        assert_eq!(r, array![[4.0, 3.0], [2.0, 1.0]]);
    }

    #[test]
    fn shift_image_moves_content() {
        let img = array![[1.0, 0.0], [0.0, 0.0]];
        let s = shift_image(img.view(), 1, 1);
        assert_eq!(s, array![[0.0, 0.0], [0.0, 1.0]]);
    }
}
