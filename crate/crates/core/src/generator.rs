//! Spatially equivariant decoder: maps (semantic vector, transformed pixel
//! coordinate) to a per-pixel value distribution. Transforming the input
//! coordinates transforms the generated image identically, by construction.
//!
//! The coordinate branch (on Fourier-expanded coordinates) and the z branch
//! are processed by parallel dense layers, summed, then passed through the
//! remaining shared layers.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TvaeError};
use crate::geometry::FourierFeatureSpec;
use crate::latent::clamped_sigma;
use crate::nn::{
    he_std, leaky_relu_backward_from_output, leaky_relu_inplace, with_prefix, Linear, ParamRef,
    Parameterized,
};

/// Per-pixel distribution family emitted by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    /// One probability per pixel (binary-valued images).
    Bernoulli,
    /// Mean per pixel; standard deviation is a learned global per-channel
    /// value by default, or per-pixel when configured.
    Gaussian,
    /// Three Gaussian channels.
    Rgb,
}

impl OutputMode {
    pub fn channels(self) -> usize {
        match self {
            OutputMode::Bernoulli | OutputMode::Gaussian => 1,
            OutputMode::Rgb => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Hidden dense layers, counting the parallel coordinate/z pair as one.
    pub n_layers: usize,
    pub hidden_units: usize,
    pub output_mode: OutputMode,
    pub n_freq: usize,
    pub fourier_scale: f64,
    /// Gaussian modes only: emit a log sigma per pixel instead of the global
    /// per-channel parameter.
    pub per_pixel_sigma: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_layers: 3,
            hidden_units: 512,
            output_mode: OutputMode::Bernoulli,
            n_freq: 64,
            fourier_scale: 1.0,
            per_pixel_sigma: false,
        }
    }
}

impl GeneratorConfig {
    /// Raw output-layer width.
    fn raw_channels(&self) -> usize {
        let c = self.output_mode.channels();
        match self.output_mode {
            OutputMode::Bernoulli => c,
            _ if self.per_pixel_sigma => 2 * c,
            _ => c,
        }
    }

    fn uses_global_sigma(&self) -> bool {
        !self.per_pixel_sigma && self.output_mode != OutputMode::Bernoulli
    }
}

/// Distribution parameters for every pixel of a batch.
#[derive(Debug, Clone)]
pub struct PixelDistribution {
    pub mode: OutputMode,
    /// `[B, P, C]` probabilities (bernoulli) or means (gaussian/rgb); for
    /// per-pixel sigma the log sigmas follow the means along the last axis.
    pub values: Array3<f64>,
    /// Global per-channel log sigma (gaussian/rgb without per-pixel sigma).
    pub log_sigma: Option<Array1<f64>>,
    per_pixel_sigma: bool,
}

impl PixelDistribution {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn pixels(&self) -> usize {
        self.values.shape()[1]
    }

    /// `log p(y | params)` summed over pixels and channels, per image.
    /// Bernoulli probabilities are clamped to `[1e-6, 1 - 1e-6]`.
    pub fn log_prob(&self, y: &ArrayView3<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.log_prob_impl(y, false)?.0)
    }

    pub(crate) fn log_prob_with_grad(
        &self,
        y: &ArrayView3<'_, f64>,
    ) -> Result<(Array1<f64>, Array3<f64>, Option<Array1<f64>>)> {
        let (ll, grad, gsig) = self.log_prob_impl(y, true)?;
        Ok((ll, grad.unwrap(), gsig))
    }

    #[allow(clippy::type_complexity)]
    fn log_prob_impl(
        &self,
        y: &ArrayView3<'_, f64>,
        with_grad: bool,
    ) -> Result<(Array1<f64>, Option<Array3<f64>>, Option<Array1<f64>>)> {
        let (b, p) = (self.batch(), self.pixels());
        let c = self.mode.channels();
        if y.shape() != [b, p, c] {
            return Err(TvaeError::ShapeMismatch(format!(
                "targets {:?} vs distribution [{b}, {p}, {c}]",
                y.shape()
            )));
        }
        let mut ll = Array1::zeros(b);
        let mut grad = with_grad.then(|| Array3::zeros(self.values.raw_dim()));
        let mut gsig = match (&self.log_sigma, with_grad) {
            (Some(ls), true) => Some(Array1::zeros(ls.len())),
            _ => None,
        };
        const EPS: f64 = 1e-6;
        const LOG_2PI: f64 = 1.837877066409345;
        match self.mode {
            OutputMode::Bernoulli => {
                for bi in 0..b {
                    for pi in 0..p {
                        let prob = self.values[[bi, pi, 0]];
                        let clamped = prob.clamp(EPS, 1.0 - EPS);
                        let t = y[[bi, pi, 0]];
                        ll[bi] += t * clamped.ln() + (1.0 - t) * (1.0 - clamped).ln();
                        if let Some(g) = grad.as_mut() {
                            // zero gradient where the clamp is active
                            if prob > EPS && prob < 1.0 - EPS {
                                g[[bi, pi, 0]] = t / clamped - (1.0 - t) / (1.0 - clamped);
                            }
                        }
                    }
                }
            }
            OutputMode::Gaussian | OutputMode::Rgb => {
                for bi in 0..b {
                    for pi in 0..p {
                        for ch in 0..c {
                            let mu = self.values[[bi, pi, ch]];
                            let (sigma, ls_in_range, ls_idx) = if self.per_pixel_sigma {
                                let (s, m) = clamped_sigma(self.values[[bi, pi, c + ch]]);
                                (s, m, None)
                            } else {
                                let ls = self.log_sigma.as_ref().expect("global sigma")[ch];
                                let (s, m) = clamped_sigma(ls);
                                (s, m, Some(ch))
                            };
                            let diff = y[[bi, pi, ch]] - mu;
                            let z2 = diff * diff / (sigma * sigma);
                            ll[bi] += -0.5 * (LOG_2PI + z2) - sigma.ln();
                            if let Some(g) = grad.as_mut() {
                                g[[bi, pi, ch]] = diff / (sigma * sigma);
                                if self.per_pixel_sigma && ls_in_range {
                                    g[[bi, pi, c + ch]] = z2 - 1.0;
                                }
                                if let (Some(gs), Some(idx), true) =
                                    (gsig.as_mut(), ls_idx, ls_in_range)
                                {
                                    gs[idx] += z2 - 1.0;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((ll, grad, gsig))
    }
}

/// Scores a reconstruction: `log p(y | z, theta, t)` summed over pixels, per
/// image. `y` is `[B, P, C]` in pixel-major order matching the decoded grid.
pub fn reconstruction_log_prob(
    params: &PixelDistribution,
    y: &ArrayView3<'_, f64>,
) -> Result<Array1<f64>> {
    params.log_prob(y)
}

/// The coordinate-based generator network.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub z_dim: usize,
    pub fourier: FourierFeatureSpec,
    coord_in: Linear,
    z_in: Linear,
    hidden: Vec<Linear>,
    out: Linear,
    log_sigma: Array1<f64>,
    g_log_sigma: Array1<f64>,
}

pub(crate) struct GeneratorCache {
    features: Array2<f64>,
    /// Post-activation outputs of the summed layer and each shared layer.
    activations: Vec<Array2<f64>>,
    b: usize,
    p: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, z_dim: usize, rng: &mut R) -> Result<Self> {
        if config.n_layers < 1 {
            return Err(TvaeError::InvalidArgument(
                "generator needs at least one hidden layer".into(),
            ));
        }
        let fourier = FourierFeatureSpec::sample(config.n_freq, config.fourier_scale, rng)?;
        Self::with_fourier(config, z_dim, fourier, rng)
    }

    /// Rebuilds a generator around an existing (e.g. deserialized) Fourier
    /// spec.
    pub fn with_fourier<R: Rng + ?Sized>(
        config: GeneratorConfig,
        z_dim: usize,
        fourier: FourierFeatureSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let h = config.hidden_units;
        let feat = fourier.feature_dim();
        let coord_in = Linear::new(feat, h, he_std(feat), rng);
        let z_in = Linear::new(z_dim, h, he_std(z_dim.max(1)), rng);
        let mut hidden = Vec::new();
        for _ in 0..config.n_layers - 1 {
            hidden.push(Linear::new(h, h, he_std(h), rng));
        }
        let out = Linear::new(h, config.raw_channels(), 1e-2, rng);
        let n_sigma = if config.uses_global_sigma() {
            config.output_mode.channels()
        } else {
            0
        };
        Ok(Generator {
            config,
            z_dim,
            fourier,
            coord_in,
            z_in,
            hidden,
            out,
            log_sigma: Array1::zeros(n_sigma),
            g_log_sigma: Array1::zeros(n_sigma),
        })
    }

    pub fn out_mut(&mut self) -> &mut Linear {
        &mut self.out
    }

    /// Decodes per-pixel distribution parameters at the given (already
    /// transformed) coordinates. `coords[bi]` lists the P coordinates of
    /// image `bi`; all images must share the same P.
    pub fn decode(&self, z: &Array2<f64>, coords: &[Vec<[f64; 2]>]) -> Result<PixelDistribution> {
        Ok(self.forward_with_cache(z, coords)?.0)
    }

    pub(crate) fn forward_with_cache(
        &self,
        z: &Array2<f64>,
        coords: &[Vec<[f64; 2]>],
    ) -> Result<(PixelDistribution, GeneratorCache)> {
        let b = coords.len();
        if z.shape()[0] != b {
            return Err(TvaeError::ShapeMismatch(format!(
                "z batch {} vs coords batch {b}",
                z.shape()[0]
            )));
        }
        if z.shape()[1] != self.z_dim {
            return Err(TvaeError::ShapeMismatch(format!(
                "z dim {} vs generator z dim {}",
                z.shape()[1],
                self.z_dim
            )));
        }
        let p = coords.first().map_or(0, Vec::len);
        if p == 0 || coords.iter().any(|c| c.len() != p) {
            return Err(TvaeError::ShapeMismatch(
                "every image must provide the same nonzero number of coordinates".into(),
            ));
        }
        let mut flat = Vec::with_capacity(b * p);
        for c in coords {
            flat.extend_from_slice(c);
        }
        let features = self.fourier.expand(&flat);

        // parallel branches, summed
        let mut h0 = self.coord_in.forward(&features);
        let zb = self.z_in.forward(z); // [B, H]
        for bi in 0..b {
            let row = zb.row(bi);
            for pi in 0..p {
                let mut dst = h0.row_mut(bi * p + pi);
                dst += &row;
            }
        }
        leaky_relu_inplace(&mut h0);

        let mut activations = vec![h0];
        for layer in &self.hidden {
            let mut y = layer.forward(activations.last().unwrap());
            leaky_relu_inplace(&mut y);
            activations.push(y);
        }
        let mut raw = self.out.forward(activations.last().unwrap());
        if self.config.output_mode == OutputMode::Bernoulli {
            raw.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        }
        let values = raw
            .into_shape_with_order((b, p, self.config.raw_channels()))
            .expect("contiguous");
        let dist = PixelDistribution {
            mode: self.config.output_mode,
            values,
            log_sigma: self
                .config
                .uses_global_sigma()
                .then(|| self.log_sigma.clone()),
            per_pixel_sigma: self.config.per_pixel_sigma,
        };
        Ok((dist, GeneratorCache { features, activations, b, p }))
    }

    /// Pull-back of a gradient on the decoded distribution parameters to the
    /// z and coordinate inputs, without touching this generator's parameter
    /// gradients. Intended for finite-difference verification and analysis.
    #[allow(clippy::type_complexity)]
    pub fn decode_pull_back(
        &self,
        z: &Array2<f64>,
        coords: &[Vec<[f64; 2]>],
        d_values: &Array3<f64>,
    ) -> Result<(Array2<f64>, Vec<Vec<[f64; 2]>>)> {
        let (dist, cache) = self.forward_with_cache(z, coords)?;
        let mut scratch = self.clone();
        Ok(scratch.backward(z, &dist, &cache, d_values, None))
    }

    /// Backward from gradients on the distribution parameters (as produced by
    /// [`PixelDistribution::log_prob_with_grad`]) to parameter gradients, the
    /// z gradient, and the coordinate gradient.
    pub(crate) fn backward(
        &mut self,
        z: &Array2<f64>,
        dist: &PixelDistribution,
        cache: &GeneratorCache,
        d_values: &Array3<f64>,
        d_log_sigma: Option<&Array1<f64>>,
    ) -> (Array2<f64>, Vec<Vec<[f64; 2]>>) {
        let (b, p) = (cache.b, cache.p);
        let k = self.config.raw_channels();
        if let (Some(g), Some(d)) = (self.g_log_sigma.len().checked_sub(0), d_log_sigma) {
            let _ = g;
            self.g_log_sigma += d;
        }
        let mut d_raw = d_values
            .clone()
            .into_shape_with_order((b * p, k))
            .expect("contiguous");
        if self.config.output_mode == OutputMode::Bernoulli {
            // values hold sigmoid outputs; d_raw = d_p * p * (1 - p)
            let probs = dist.values.view().into_shape_with_order((b * p, k)).unwrap();
            for (g, &pv) in d_raw.iter_mut().zip(probs.iter()) {
                *g *= pv * (1.0 - pv);
            }
        }

        let mut g = self.out.backward(cache.activations.last().unwrap(), &d_raw);
        for i in (0..self.hidden.len()).rev() {
            leaky_relu_backward_from_output(&cache.activations[i + 1], &mut g);
            g = self.hidden[i].backward(&cache.activations[i], &g);
        }
        leaky_relu_backward_from_output(&cache.activations[0], &mut g);

        // sum node: gradient flows to both branches
        let d_features = self.coord_in.backward(&cache.features, &g);
        let mut gz_rows = Array2::zeros((b, g.shape()[1]));
        for bi in 0..b {
            for pi in 0..p {
                let src = g.row(bi * p + pi);
                let mut dst = gz_rows.row_mut(bi);
                dst += &src;
            }
        }
        let d_z = self.z_in.backward(z, &gz_rows);

        let flat_coords = self.fourier.backward(&cache.features, &d_features);
        let mut d_coords = Vec::with_capacity(b);
        for bi in 0..b {
            d_coords.push(flat_coords[bi * p..(bi + 1) * p].to_vec());
        }
        (d_z, d_coords)
    }
}

impl Parameterized for Generator {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = with_prefix("coord_in", self.coord_in.params());
        out.extend(with_prefix("z_in", self.z_in.params()));
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.extend(with_prefix(&format!("hidden{i}"), l.params()));
        }
        out.extend(with_prefix("out", self.out.params()));
        if self.log_sigma.len() > 0 {
            out.push(ParamRef::new(
                "log_sigma",
                &mut self.log_sigma,
                &mut self.g_log_sigma,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_points, CoordinateGrid, RigidTransform};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(mode: OutputMode) -> GeneratorConfig {
        GeneratorConfig {
            n_layers: 3,
            hidden_units: 16,
            output_mode: mode,
            n_freq: 4,
            fourier_scale: 1.0,
            per_pixel_sigma: false,
        }
    }

    fn toy_coords(n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| [-0.8 + 0.37 * i as f64, 0.5 - 0.21 * i as f64])
            .collect()
    }

    #[test]
    fn decode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(small_config(OutputMode::Bernoulli), 2, &mut rng).unwrap();
        let z = array![[0.3, -0.7]];
        let coords = vec![toy_coords(5)];
        let a = g.decode(&z, &coords).unwrap();
        let b = g.decode(&z, &coords).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn decode_rejects_z_dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(small_config(OutputMode::Bernoulli), 2, &mut rng).unwrap();
        let z = array![[0.3, -0.7, 0.1]];
        assert!(matches!(
            g.decode(&z, &[toy_coords(4)]),
            Err(TvaeError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn equivariance_is_definitional() {
        // decoding at transform (theta, t) IS decoding the pre-transformed
        // coordinates: the identical call yields bitwise-equal output
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::new(small_config(OutputMode::Bernoulli), 2, &mut rng).unwrap();
        let grid = CoordinateGrid::new(4, 4).unwrap();
        let tf = RigidTransform::new(0.83, [0.1, -0.2]);
        let transformed = transform_points(grid.coords(), &tf);
        let z = array![[0.5, 0.5]];
        let a = g.decode(&z, &[transformed.clone()]).unwrap();
        let b = g.decode(&z, &[transformed]).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn theta_plus_two_pi_renders_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::new(small_config(OutputMode::Bernoulli), 2, &mut rng).unwrap();
        let grid = CoordinateGrid::new(6, 6).unwrap();
        let z = array![[0.2, -0.4]];
        let render = |theta: f64| {
            let tf = RigidTransform::new(theta, [0.05, 0.1]);
            g.decode(&z, &[transform_points(grid.coords(), &tf)])
                .unwrap()
                .values
        };
        let a = render(0.7);
        let b = render(0.7 + std::f64::consts::TAU);
        let max = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6, "renders differ by {max}");
    }

    #[test]
    fn bernoulli_log_prob_examples() {
        let n = 7;
        // p == y at the clamp bounds: the maximum attainable log-prob
        let values = Array3::from_shape_fn((1, n, 1), |(_, i, _)| if i % 2 == 0 { 1.0 } else { 0.0 });
        let y = values.clone();
        let dist = PixelDistribution {
            mode: OutputMode::Bernoulli,
            values,
            log_sigma: None,
            per_pixel_sigma: false,
        };
        let ll = dist.log_prob(&y.view()).unwrap();
        let expected = n as f64 * (1.0 - 1e-6_f64).ln();
        assert_abs_diff_eq!(ll[0], expected, epsilon = 1e-9);

        // p = 0.5 everywhere on a binary image: exactly n log 0.5
        let values = Array3::from_elem((1, n, 1), 0.5);
        let y = Array3::from_shape_fn((1, n, 1), |(_, i, _)| (i % 2) as f64);
        let dist = PixelDistribution {
            mode: OutputMode::Bernoulli,
            values,
            log_sigma: None,
            per_pixel_sigma: false,
        };
        let ll = dist.log_prob(&y.view()).unwrap();
        assert_abs_diff_eq!(ll[0], n as f64 * 0.5_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_prob_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values = Array3::from_shape_fn((2, 5, 1), |_| rng.random::<f64>());
        let y = Array3::from_shape_fn((2, 5, 1), |_| rng.random::<f64>());
        let dist = PixelDistribution {
            mode: OutputMode::Bernoulli,
            values: values.clone(),
            log_sigma: None,
            per_pixel_sigma: false,
        };
        let ll = dist.log_prob(&y.view()).unwrap();
        for bi in 0..2 {
            let mut expect = 0.0;
            for pi in 0..5 {
                let p = values[[bi, pi, 0]].clamp(1e-6, 1.0 - 1e-6);
                let t = y[[bi, pi, 0]];
                expect += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
            assert!((ll[bi] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_log_prob_matches_density() {
        let values = Array3::from_elem((1, 3, 1), 0.25);
        let dist = PixelDistribution {
            mode: OutputMode::Gaussian,
            values,
            log_sigma: Some(array![0.5_f64.ln()]),
            per_pixel_sigma: false,
        };
        let y = Array3::from_elem((1, 3, 1), 0.75);
        let ll = dist.log_prob(&y.view()).unwrap();
        let sigma: f64 = 0.5;
        let per_pixel = -0.5 * (2.0 * std::f64::consts::PI).ln()
            - sigma.ln()
            - 0.5 * (0.5 / sigma) * (0.5 / sigma);
        assert_abs_diff_eq!(ll[0], 3.0 * per_pixel, epsilon = 1e-12);
    }

    #[test]
    fn gradient_wrt_z_matches_finite_differences() {
        // 4-pixel toy config, bernoulli reconstruction loss
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Generator::new(small_config(OutputMode::Bernoulli), 2, &mut rng).unwrap();
        let coords = vec![toy_coords(4)];
        let y = Array3::from_shape_fn((1, 4, 1), |_| rng.random::<f64>().round());
        let z0 = array![[0.31, -0.44]];

        let loss = |g: &Generator, z: &Array2<f64>| -> f64 {
            let d = g.decode(z, &coords).unwrap();
            d.log_prob(&y.view()).unwrap()[0]
        };
        let (dist, cache) = g.forward_with_cache(&z0, &coords).unwrap();
        let (_, d_values, d_ls) = dist.log_prob_with_grad(&y.view()).unwrap();
        let (d_z, _) = g.backward(&z0, &dist, &cache, &d_values, d_ls.as_ref());

        let h = 1e-4;
        for d in 0..2 {
            let mut zp = z0.clone();
            zp[[0, d]] += h;
            let mut zm = z0.clone();
            zm[[0, d]] -= h;
            let fd = (loss(&g, &zp) - loss(&g, &zm)) / (2.0 * h);
            let denom = d_z[[0, d]].abs().max(fd.abs()).max(1e-8);
            assert!(
                (d_z[[0, d]] - fd).abs() / denom < 1e-3,
                "z[{d}]: {} vs {fd}",
                d_z[[0, d]]
            );
        }
    }

    #[test]
    fn gradient_wrt_coords_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Generator::new(small_config(OutputMode::Gaussian), 1, &mut rng).unwrap();
        let coords = vec![toy_coords(3)];
        let y = Array3::from_shape_fn((1, 3, 1), |_| rng.random::<f64>());
        let z = array![[0.2]];
        let (dist, cache) = g.forward_with_cache(&z, &coords).unwrap();
        let (_, d_values, d_ls) = dist.log_prob_with_grad(&y.view()).unwrap();
        let (_, d_coords) = g.backward(&z, &dist, &cache, &d_values, d_ls.as_ref());

        let loss = |g: &Generator, coords: &[Vec<[f64; 2]>]| -> f64 {
            g.decode(&z, coords).unwrap().log_prob(&y.view()).unwrap()[0]
        };
        let h = 1e-5;
        for pi in 0..3 {
            for axis in 0..2 {
                let mut cp = coords.clone();
                cp[0][pi][axis] += h;
                let mut cm = coords.clone();
                cm[0][pi][axis] -= h;
                let fd = (loss(&g, &cp) - loss(&g, &cm)) / (2.0 * h);
                let analytic = d_coords[0][pi][axis];
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (analytic - fd).abs() / denom < 1e-3,
                    "coord[{pi}][{axis}]: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn all_weights_receive_gradient() {
        for mode in [OutputMode::Bernoulli, OutputMode::Gaussian, OutputMode::Rgb] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut g = Generator::new(small_config(mode), 2, &mut rng).unwrap();
            let coords = vec![toy_coords(6), toy_coords(6)];
            let z = array![[0.4, 0.1], [-0.3, 0.9]];
            let c = mode.channels();
            let y = Array3::from_shape_fn((2, 6, c), |_| rng.random::<f64>());
            let (dist, cache) = g.forward_with_cache(&z, &coords).unwrap();
            let (_, d_values, d_ls) = dist.log_prob_with_grad(&y.view()).unwrap();
            let _ = g.backward(&z, &dist, &cache, &d_values, d_ls.as_ref());
            for p in g.params() {
                let nonzero = p.grad.iter().any(|&v| v != 0.0);
                assert!(nonzero, "{mode:?}: parameter {} has all-zero gradient", p.name);
            }
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Generator::new(small_config(OutputMode::Gaussian), 2, &mut rng).unwrap();
        let coords = vec![toy_coords(4)];
        let z = array![[0.7, -0.2]];
        let y = Array3::from_shape_fn((1, 4, 1), |_| rng.random::<f64>());
        let (dist, cache) = g.forward_with_cache(&z, &coords).unwrap();
        let (_, d_values, d_ls) = dist.log_prob_with_grad(&y.view()).unwrap();
        let _ = g.backward(&z, &dist, &cache, &d_values, d_ls.as_ref());

        let grads: Vec<(String, Vec<f64>)> = g
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.grad.to_vec()))
            .collect();
        let h = 1e-5;
        for (name, grad) in &grads {
            for &i in &[0usize, grad.len() - 1] {
                let probe = |delta: f64, g: &mut Generator| -> f64 {
                    for p in g.params() {
                        if &p.name == name {
                            p.value[i] += delta;
                        }
                    }
                    let d = g.decode(&z, &coords).unwrap();
                    let ll = d.log_prob(&y.view()).unwrap()[0];
                    for p in g.params() {
                        if &p.name == name {
                            p.value[i] -= delta;
                        }
                    }
                    ll
                };
                let fd = (probe(h, &mut g) - probe(-h, &mut g)) / (2.0 * h);
                let analytic = grad[i];
                let denom = analytic.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (analytic - fd).abs() / denom < 1e-3,
                    "{name}[{i}]: {analytic} vs {fd}"
                );
            }
        }
    }
}
