//! Model assembly: encoder + generator + prior, pose-based rendering, and the
//! checkpoint container.
//!
//! Pose convention: the latent translation `t` is the object's location on
//! the image grid (the attention peak tracks the object, so the posterior
//! over `t` is translation-equivariant). The generator evaluates the
//! canonical object at `R(theta) (x - t)`, i.e. image coordinates are mapped
//! into the object frame. Rendering at `theta = 0, t = 0` therefore produces
//! the pose-canonicalized object.

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{Encoder, GroupConvSpec, PosteriorField};
use crate::error::{Result, TvaeError};
use crate::generator::{Generator, GeneratorConfig, PixelDistribution};
use crate::geometry::{CoordinateGrid, FourierFeatureSpec, RigidTransform};
use crate::latent::{PriorSpec, ThetaPrior};
use crate::nn::{with_prefix, ParamRef, Parameterized};
use crate::training::VariantId;

/// Architecture and variant switches for a full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantId,
    pub z_dim: usize,
    pub first_kernel_size: usize,
    pub channels: usize,
    pub n_pointwise_layers: usize,
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub generator: GeneratorConfig,
}

impl ModelConfig {
    pub fn new(variant: VariantId, z_dim: usize, image_height: usize, image_width: usize) -> Self {
        ModelConfig {
            variant,
            z_dim,
            first_kernel_size: 29,
            channels: 128,
            n_pointwise_layers: 3,
            in_channels: 1,
            image_height,
            image_width,
            generator: GeneratorConfig::default(),
        }
    }
}

/// Prior hyperparameters serialized alongside the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSettings {
    pub theta_prior: ThetaPrior,
    pub translation_std_pixels: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            theta_prior: ThetaPrior::Uniform,
            translation_std_pixels: 5.0,
        }
    }
}

/// The complete translation/rotation group-equivariant VAE.
#[derive(Debug, Clone)]
pub struct TargetVae {
    pub config: ModelConfig,
    pub prior_settings: PriorSettings,
    pub encoder: Encoder,
    pub generator: Generator,
    pub prior: PriorSpec,
    pub grid: CoordinateGrid,
}

impl TargetVae {
    /// Builds a model of the given variant with freshly initialized weights.
    pub fn new(config: ModelConfig, prior_settings: PriorSettings, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variant = config.variant;
        let spec = GroupConvSpec::new(variant.group_r(), config.first_kernel_size)?
            .with_channels(config.channels)
            .with_pointwise_layers(config.n_pointwise_layers);
        let encoder = Encoder::new(
            spec,
            config.z_dim,
            config.in_channels,
            variant.encoder_kind(),
            &mut rng,
        )?;
        let mut gen_config = config.generator;
        gen_config.output_mode = config.generator.output_mode;
        let generator = Generator::new(gen_config, config.z_dim, &mut rng)?;
        Self::assemble(config, prior_settings, encoder, generator)
    }

    fn assemble(
        config: ModelConfig,
        prior_settings: PriorSettings,
        encoder: Encoder,
        generator: Generator,
    ) -> Result<Self> {
        let grid = CoordinateGrid::new_allow_degenerate(config.image_height, config.image_width);
        let prior = PriorSpec::new(
            encoder.posterior_r(),
            config.z_dim,
            prior_settings.theta_prior,
            prior_settings.translation_std_pixels,
            &grid,
            config.variant.theta_offsets_enabled(),
        )?;
        Ok(TargetVae {
            config,
            prior_settings,
            encoder,
            generator,
            prior,
            grid,
        })
    }

    pub fn encode(&self, images: &Array4<f64>) -> Result<PosteriorField> {
        self.encoder.encode(images)
    }

    /// Rigid transform mapping image coordinates to object-frame coordinates
    /// for an object at location `t` with rotation `theta`:
    /// `x' = R(theta)(x - t)`.
    pub fn pose_transform(theta: f64, t: [f64; 2]) -> RigidTransform {
        let (s, c) = theta.sin_cos();
        RigidTransform::new(theta, [-(c * t[0] - s * t[1]), -(s * t[0] + c * t[1])])
    }

    /// Object-frame coordinates of every grid pixel for each (theta, t) pose.
    pub fn pose_coords(
        grid: &CoordinateGrid,
        theta: &Array1<f64>,
        t: &Array2<f64>,
    ) -> Vec<Vec<[f64; 2]>> {
        let b = theta.len();
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let tf = Self::pose_transform(theta[bi], [t[[bi, 0]], t[[bi, 1]]]);
            out.push(crate::geometry::transform_points(grid.coords(), &tf));
        }
        out
    }

    /// Backward through [`TargetVae::pose_coords`]: accumulates gradients on
    /// theta and t from per-pixel coordinate gradients.
    pub(crate) fn pose_coords_backward(
        grid: &CoordinateGrid,
        theta: &Array1<f64>,
        t: &Array2<f64>,
        d_coords: &[Vec<[f64; 2]>],
    ) -> (Array1<f64>, Array2<f64>) {
        let b = theta.len();
        let mut d_theta = Array1::zeros(b);
        let mut d_t = Array2::zeros((b, 2));
        for bi in 0..b {
            let (s, c) = theta[bi].sin_cos();
            let (tx, ty) = (t[[bi, 0]], t[[bi, 1]]);
            let mut acc_theta = 0.0;
            let (mut acc_tx, mut acc_ty) = (0.0, 0.0);
            for (p, g) in grid.coords().iter().zip(&d_coords[bi]) {
                let ux = p[0] - tx;
                let uy = p[1] - ty;
                // d x' / d theta = R'(theta) u with R' = [[-s, -c], [c, -s]]
                acc_theta += g[0] * (-s * ux - c * uy) + g[1] * (c * ux - s * uy);
                // d x' / d t = -R(theta)
                acc_tx += -(g[0] * c + g[1] * s);
                acc_ty += -(g[0] * -s + g[1] * c);
            }
            d_theta[bi] = acc_theta;
            d_t[[bi, 0]] = acc_tx;
            d_t[[bi, 1]] = acc_ty;
        }
        (d_theta, d_t)
    }

    /// Renders images at the given poses on an `h x w` grid, returning the
    /// per-pixel distribution (probabilities or means first along the channel
    /// axis).
    pub fn decode_at(
        &self,
        z: &Array2<f64>,
        theta: &Array1<f64>,
        t: &Array2<f64>,
        h: usize,
        w: usize,
    ) -> Result<PixelDistribution> {
        let grid = if (h, w) == (self.grid.height(), self.grid.width()) {
            self.grid.clone()
        } else {
            CoordinateGrid::new_allow_degenerate(h, w)
        };
        let coords = Self::pose_coords(&grid, theta, t);
        self.generator.decode(z, &coords)
    }

    /// Renders mean/probability images `[B, C, H, W]` at the given poses.
    pub fn render(
        &self,
        z: &Array2<f64>,
        theta: &Array1<f64>,
        t: &Array2<f64>,
        h: usize,
        w: usize,
    ) -> Result<Array4<f64>> {
        let dist = self.decode_at(z, theta, t, h, w)?;
        let b = dist.batch();
        let c = dist.mode.channels();
        let mut out = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        out[[bi, ch, i, j]] = dist.values[[bi, i * w + j, ch]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Checkpoint write: binary container of named f32 tensors plus a JSON
    /// metadata record (see [`CheckpointMeta`]).
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            prior: self.prior_settings,
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| TvaeError::Checkpoint(format!("metadata serialization: {e}")))?;

        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for p in self.params() {
            entries.push((p.name.clone(), p.shape.clone(), p.value.to_vec()));
        }
        let freq = self.generator.fourier.frequency_matrix();
        entries.push((
            "generator.fourier_freq".into(),
            freq.shape().to_vec(),
            freq.iter().copied().collect(),
        ));

        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for (name, shape, data) in &entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Checkpoint read: rebuilds the architecture from metadata, then loads
    /// every parameter tensor by name (shapes are validated).
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TvaeError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TvaeError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| TvaeError::Checkpoint(format!("metadata parse: {e}")))?;

        let n_entries = read_u64(&mut r)? as usize;
        let mut entries = std::collections::HashMap::new();
        for _ in 0..n_entries {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TvaeError::Checkpoint("non-utf8 tensor name".into()))?;
            let ndim = read_u8(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            entries.insert(name, (shape, data));
        }

        // rebuild the architecture, then overwrite every parameter
        let (freq_shape, freq_data) = entries
            .remove("generator.fourier_freq")
            .ok_or_else(|| TvaeError::Checkpoint("missing generator.fourier_freq".into()))?;
        let freq = Array2::from_shape_vec((freq_shape[0], freq_shape[1]), freq_data)
            .map_err(|e| TvaeError::Checkpoint(format!("fourier matrix shape: {e}")))?;
        let fourier = FourierFeatureSpec::from_matrix(freq, meta.config.generator.fourier_scale)?;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = GroupConvSpec::new(meta.config.variant.group_r(), meta.config.first_kernel_size)?
            .with_channels(meta.config.channels)
            .with_pointwise_layers(meta.config.n_pointwise_layers);
        let encoder = Encoder::new(
            spec,
            meta.config.z_dim,
            meta.config.in_channels,
            meta.config.variant.encoder_kind(),
            &mut rng,
        )?;
        let generator = Generator::with_fourier(
            meta.config.generator,
            meta.config.z_dim,
            fourier,
            &mut rng,
        )?;
        let mut model = Self::assemble(meta.config, meta.prior, encoder, generator)?;
        for p in model.params() {
            let (shape, data) = entries.remove(&p.name).ok_or_else(|| {
                TvaeError::Checkpoint(format!("checkpoint missing tensor {}", p.name))
            })?;
            if shape != p.shape {
                return Err(TvaeError::Checkpoint(format!(
                    "tensor {} shape {:?} does not match model shape {:?}",
                    p.name, shape, p.shape
                )));
            }
            p.value.copy_from_slice(&data);
        }
        if let Some(extra) = entries.keys().next() {
            return Err(TvaeError::Checkpoint(format!(
                "checkpoint holds unknown tensor {extra}"
            )));
        }
        Ok(model)
    }
}

impl Parameterized for TargetVae {
    fn params(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = with_prefix("encoder", self.encoder.params());
        out.extend(with_prefix("generator", self.generator.params()));
        out
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    config: ModelConfig,
    prior: PriorSettings,
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
