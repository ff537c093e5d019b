//! Dataset synthesis (transformed digits, multi-object canvases, procedural
//! shapes) and generic ingestion (IDX files, the repo's tensor stack
//! container) with downsampling and normalization.
//!
//! Stack container layout: magic `TVS1`, u8 dtype code (0 = u8, 1 = f32,
//! 2 = f64), u8 rank, rank little-endian u64 dims, then the little-endian
//! payload in row-major order.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::f64::consts::TAU;

use crate::error::{Result, TvaeError};
use crate::geometry::{rotate_image, snapped_sin_cos};

// ---------------------------------------------------------------------------
// Image batches
// ---------------------------------------------------------------------------

/// Batch of normalized images `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Array4<f64>,
}

impl ImageBatch {
    /// Validates the `[0, 1]` range contract.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(TvaeError::InvalidArgument(
                "image batch values must lie in [0, 1]".into(),
            ));
        }
        Ok(ImageBatch { data })
    }

    /// Skips range validation (e.g. raw un-normalized ingestion).
    pub fn from_raw(data: Array4<f64>) -> Self {
        ImageBatch { data }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Flat key-value record sufficient to regenerate a dataset bit-identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    entries: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TvaeError::Parse {
                offset: i as u64,
                message: format!("manifest line {i} is not key=value: {line}"),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(DatasetManifest { entries })
    }
}

// ---------------------------------------------------------------------------
// Transformed datasets
// ---------------------------------------------------------------------------

/// Synthesized pose-annotated dataset. Translations are stored in pixels,
/// `(tx, ty)` = (column shift, row shift); `gt_theta` is in the generator's
/// pose convention (an object synthesized at `(theta, t)` is reproduced by
/// rendering at exactly `(theta, t)`).
#[derive(Debug, Clone)]
pub struct TransformedDataset {
    pub images: Array4<f64>,
    pub gt_theta: Vec<f64>,
    /// Whole-pixel translations used for pasting.
    pub gt_t: Vec<[f64; 2]>,
    /// Sub-pixel translations as sampled, before rounding.
    pub gt_t_raw: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    /// Shape datasets only; empty otherwise.
    pub gt_scale: Vec<f64>,
    pub manifest: DatasetManifest,
}

impl TransformedDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Borrow the images as a (validated) batch.
    pub fn image_batch(&self) -> Result<ImageBatch> {
        ImageBatch::new(self.images.clone())
    }

    pub fn subset(&self, n: usize) -> TransformedDataset {
        let n = n.min(self.len());
        TransformedDataset {
            images: self
                .images
                .slice(ndarray::s![..n, .., .., ..])
                .to_owned(),
            gt_theta: self.gt_theta[..n].to_vec(),
            gt_t: self.gt_t[..n].to_vec(),
            gt_t_raw: self.gt_t_raw[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            gt_scale: if self.gt_scale.is_empty() {
                Vec::new()
            } else {
                self.gt_scale[..n].to_vec()
            },
            manifest: self.manifest.clone(),
        }
    }
}

/// Rotation distribution used by the digit synthesizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationDist {
    /// Uniform over [0, 2 pi).
    Uniform,
    /// N(0, std^2) radians.
    Normal { std: f64 },
}

impl RotationDist {
    fn describe(&self) -> String {
        match self {
            RotationDist::Uniform => "uniform(0,2pi)".into(),
            RotationDist::Normal { std } => format!("normal(0,{std})"),
        }
    }
}

/// Derives an independent per-item rng stream so synthesis is reproducible
/// regardless of iteration or worker order.
fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Rotates source tiles and pastes them onto larger canvases at sampled
/// whole-pixel offsets, recording ground-truth pose.
///
/// A sampled translation that would push the tile fully off the canvas is
/// resampled (counted in the manifest).
pub fn synthesize_transformed_mnist(
    source: &ImageBatch,
    labels: &[u8],
    rotation: RotationDist,
    translation_std_px: f64,
    canvas: (usize, usize),
    seed: u64,
) -> Result<TransformedDataset> {
    let n = source.len();
    if n == 0 {
        return Err(TvaeError::InvalidArgument("empty source digits".into()));
    }
    if labels.len() != n {
        return Err(TvaeError::ShapeMismatch(format!(
            "{n} source images vs {} labels",
            labels.len()
        )));
    }
    if source.channels() != 1 {
        return Err(TvaeError::InvalidArgument(
            "digit synthesis expects single-channel sources".into(),
        ));
    }
    let (th, tw) = (source.height(), source.width());
    let (ch, cw) = canvas;
    if ch < th || cw < tw {
        return Err(TvaeError::InvalidDimension(format!(
            "canvas {ch}x{cw} smaller than source tiles {th}x{tw}"
        )));
    }
    let mut images = Array4::zeros((n, 1, ch, cw));
    let mut gt_theta = Vec::with_capacity(n);
    let mut gt_t = Vec::with_capacity(n);
    let mut gt_t_raw = Vec::with_capacity(n);
    let mut resampled_total = 0u64;

    // center paste position of the tile's top-left corner
    let base_i = (ch - th) / 2;
    let base_j = (cw - tw) / 2;

    for idx in 0..n {
        let mut rng = item_rng(seed, idx as u64);
        let theta = match rotation {
            RotationDist::Uniform => rng.random::<f64>() * TAU,
            RotationDist::Normal { std } => {
                Normal::new(0.0, std).expect("positive std").sample(&mut rng)
            }
        };
        let tdist = Normal::new(0.0, translation_std_px).expect("positive std");
        let (tx_raw, ty_raw, tx, ty) = loop {
            let tx_raw: f64 = tdist.sample(&mut rng);
            let ty_raw: f64 = tdist.sample(&mut rng);
            let tx = tx_raw.round();
            let ty = ty_raw.round();
            // fully off canvas: no tile pixel lands inside
            let i0 = base_i as i64 + ty as i64;
            let j0 = base_j as i64 + tx as i64;
            let visible = i0 < ch as i64
                && i0 + th as i64 > 0
                && j0 < cw as i64
                && j0 + tw as i64 > 0;
            if visible {
                break (tx_raw, ty_raw, tx, ty);
            }
            resampled_total += 1;
        };

        let tile = source.data.index_axis(ndarray::Axis(0), idx);
        let tile = tile.index_axis(ndarray::Axis(0), 0);
        let rotated = rotate_image(tile, theta);
        let mut canvas_view = images.index_axis_mut(ndarray::Axis(0), idx);
        let mut canvas_view = canvas_view.index_axis_mut(ndarray::Axis(0), 0);
        for u in 0..th {
            let i = base_i as i64 + ty as i64 + u as i64;
            if i < 0 || i >= ch as i64 {
                continue;
            }
            for v in 0..tw {
                let j = base_j as i64 + tx as i64 + v as i64;
                if j < 0 || j >= cw as i64 {
                    continue;
                }
                canvas_view[[i as usize, j as usize]] = rotated[[u, v]];
            }
        }
        gt_theta.push(theta);
        gt_t.push([tx, ty]);
        gt_t_raw.push([tx_raw, ty_raw]);
    }

    let mut manifest = DatasetManifest::new();
    manifest.set("kind", "transformed-digits");
    manifest.set("seed", seed);
    manifest.set("n", n);
    manifest.set("canvas_h", ch);
    manifest.set("canvas_w", cw);
    manifest.set("tile_h", th);
    manifest.set("tile_w", tw);
    manifest.set("rotation", rotation.describe());
    manifest.set("translation_std_px", translation_std_px);
    manifest.set("resampled", resampled_total);

    Ok(TransformedDataset {
        images,
        gt_theta,
        gt_t,
        gt_t_raw,
        labels: labels.to_vec(),
        gt_scale: Vec::new(),
        manifest,
    })
}

// ---------------------------------------------------------------------------
// Multi-object synthesis
// ---------------------------------------------------------------------------

/// Ground truth for one pasted object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectGt {
    pub source_index: usize,
    pub label: u8,
    pub theta: f64,
    /// Object center in canvas pixels, `(x, y)`.
    pub center: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct MultiObjectDataset {
    pub images: Array4<f64>,
    pub objects: Vec<Vec<ObjectGt>>,
    pub manifest: DatasetManifest,
}

impl MultiObjectDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pastes `count` source images per canvas at random non-clipping offsets
/// (max blending, overlap allowed), recording per-object ground truth.
pub fn synthesize_multi_object(
    source: &TransformedDataset,
    canvas: (usize, usize),
    count: usize,
    n_images: usize,
    seed: u64,
) -> Result<MultiObjectDataset> {
    let (th, tw) = (source.height(), source.width());
    let (ch, cw) = canvas;
    if ch < th || cw < tw {
        return Err(TvaeError::InvalidDimension(format!(
            "canvas {ch}x{cw} smaller than source tiles {th}x{tw}"
        )));
    }
    if source.is_empty() || count == 0 {
        return Err(TvaeError::InvalidArgument(
            "need a nonempty source and count >= 1".into(),
        ));
    }
    let mut images = Array4::zeros((n_images, 1, ch, cw));
    let mut objects = Vec::with_capacity(n_images);
    for idx in 0..n_images {
        let mut rng = item_rng(seed, idx as u64);
        let mut gts = Vec::with_capacity(count);
        let mut canvas_view = images.index_axis_mut(ndarray::Axis(0), idx);
        let mut canvas_view = canvas_view.index_axis_mut(ndarray::Axis(0), 0);
        for _ in 0..count {
            let src = rng.random_range(0..source.len());
            let off_i = rng.random_range(0..=(ch - th));
            let off_j = rng.random_range(0..=(cw - tw));
            let tile = source.images.index_axis(ndarray::Axis(0), src);
            let tile = tile.index_axis(ndarray::Axis(0), 0);
            for u in 0..th {
                for v in 0..tw {
                    let dst: &mut f64 = &mut canvas_view[[off_i + u, off_j + v]];
                    *dst = dst.max(tile[[u, v]]);
                }
            }
            gts.push(ObjectGt {
                source_index: src,
                label: source.labels[src],
                theta: source.gt_theta[src],
                center: [
                    off_j as f64 + (tw as f64 - 1.0) / 2.0 + source.gt_t[src][0],
                    off_i as f64 + (th as f64 - 1.0) / 2.0 + source.gt_t[src][1],
                ],
            });
        }
        objects.push(gts);
    }
    let mut manifest = DatasetManifest::new();
    manifest.set("kind", "multi-object");
    manifest.set("seed", seed);
    manifest.set("n", n_images);
    manifest.set("count_per_image", count);
    manifest.set("canvas_h", ch);
    manifest.set("canvas_w", cw);
    Ok(MultiObjectDataset {
        images,
        objects,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// Procedural shapes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Heart];

    pub fn label(self) -> u8 {
        match self {
            Shape::Square => 0,
            Shape::Ellipse => 1,
            Shape::Heart => 2,
        }
    }

    /// Implicit inside test in the unit object frame.
    ///
    /// Square: `max(|x|, |y|) <= 1`. Ellipse: semi-axes (1, 0.5). Heart: the
    /// standard sextic `(x^2 + y^2 - 1)^3 - x^2 y^3 <= 0` (y up), scaled by
    /// 1.25 to fill the unit frame.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Square => x.abs() <= 1.0 && y.abs() <= 1.0,
            Shape::Ellipse => x * x + (y / 0.5) * (y / 0.5) <= 1.0,
            Shape::Heart => {
                let hx = x * 1.25;
                let hy = -y * 1.25; // image y grows downward
                let a = hx * hx + hy * hy - 1.0;
                a * a * a - hx * hx * hy * hy * hy <= 0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapesConfig {
    pub canvas: usize,
    pub n_rotations: usize,
    pub n_scales: usize,
    /// Translation grid points per axis (odd keeps a centered sample).
    pub n_translations: usize,
    /// Half-extent of the translation grid in pixels.
    pub translation_extent_px: f64,
    /// Object half-extent at scale 1, in pixels.
    pub base_half_extent_px: f64,
    /// Supersampling factor per axis for anti-aliased rasterization.
    pub supersample: usize,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            canvas: 64,
            n_rotations: 40,
            n_scales: 6,
            n_translations: 3,
            translation_extent_px: 8.0,
            base_half_extent_px: 12.0,
            supersample: 4,
        }
    }
}

/// Renders the full factor grid: every (shape, rotation, scale, translation)
/// combination. Rotations are `k * 2 pi / n_rotations`; scales are linearly
/// spaced in `[0.5, 1]`.
pub fn synthesize_shapes(cfg: &ShapesConfig) -> Result<TransformedDataset> {
    if cfg.n_rotations == 0 || cfg.n_scales == 0 || cfg.n_translations == 0 {
        return Err(TvaeError::InvalidArgument(
            "shape factor counts must be positive".into(),
        ));
    }
    let n = 3 * cfg.n_rotations * cfg.n_scales * cfg.n_translations * cfg.n_translations;
    let c = cfg.canvas;
    let center = (c as f64 - 1.0) / 2.0;
    let t_axis: Vec<f64> = if cfg.n_translations == 1 {
        vec![0.0]
    } else {
        (0..cfg.n_translations)
            .map(|k| {
                -cfg.translation_extent_px
                    + 2.0 * cfg.translation_extent_px * k as f64
                        / (cfg.n_translations - 1) as f64
            })
            .collect()
    };
    let scales: Vec<f64> = if cfg.n_scales == 1 {
        vec![1.0]
    } else {
        (0..cfg.n_scales)
            .map(|k| 0.5 + 0.5 * k as f64 / (cfg.n_scales - 1) as f64)
            .collect()
    };

    let mut images = Array4::zeros((n, 1, c, c));
    let mut gt_theta = Vec::with_capacity(n);
    let mut gt_t = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut gt_scale = Vec::with_capacity(n);
    let sub = cfg.supersample.max(1);
    let inv_sub = 1.0 / sub as f64;
    let mut idx = 0;
    for shape in Shape::ALL {
        for k_rot in 0..cfg.n_rotations {
            let theta = k_rot as f64 * TAU / cfg.n_rotations as f64;
            let (s, cosv) = snapped_sin_cos(theta);
            for &scale in &scales {
                let half = cfg.base_half_extent_px * scale;
                for &ty in &t_axis {
                    for &tx in &t_axis {
                        let mut img = images.index_axis_mut(ndarray::Axis(0), idx);
                        let mut img = img.index_axis_mut(ndarray::Axis(0), 0);
                        for i in 0..c {
                            for j in 0..c {
                                let mut hits = 0usize;
                                for si in 0..sub {
                                    let y =
                                        i as f64 + (si as f64 + 0.5) * inv_sub - 0.5 - center - ty;
                                    for sj in 0..sub {
                                        let x = j as f64 + (sj as f64 + 0.5) * inv_sub
                                            - 0.5
                                            - center
                                            - tx;
                                        // object frame: R(theta) (p - t) / half
                                        let ox = (cosv * x - s * y) / half;
                                        let oy = (s * x + cosv * y) / half;
                                        if shape.contains(ox, oy) {
                                            hits += 1;
                                        }
                                    }
                                }
                                img[[i, j]] = hits as f64 / (sub * sub) as f64;
                            }
                        }
                        gt_theta.push(theta);
                        gt_t.push([tx, ty]);
                        labels.push(shape.label());
                        gt_scale.push(scale);
                        idx += 1;
                    }
                }
            }
        }
    }

    let mut manifest = DatasetManifest::new();
    manifest.set("kind", "shapes");
    manifest.set("n", n);
    manifest.set("canvas", c);
    manifest.set("n_rotations", cfg.n_rotations);
    manifest.set("n_scales", cfg.n_scales);
    manifest.set("n_translations", cfg.n_translations);
    manifest.set("translation_extent_px", cfg.translation_extent_px);
    manifest.set("base_half_extent_px", cfg.base_half_extent_px);
    manifest.set("supersample", sub);

    Ok(TransformedDataset {
        images,
        gt_theta,
        gt_t: gt_t.clone(),
        gt_t_raw: gt_t,
        labels,
        gt_scale,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

/// Parsed IDX payload (standard big-endian container).
#[derive(Debug, Clone)]
pub enum IdxPayload {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct IdxFile {
    pub dims: Vec<usize>,
    pub payload: IdxPayload,
}

impl IdxFile {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.payload {
            IdxPayload::U8(v) => v.iter().map(|&x| x as f64).collect(),
            IdxPayload::I8(v) => v.iter().map(|&x| x as f64).collect(),
            IdxPayload::I16(v) => v.iter().map(|&x| x as f64).collect(),
            IdxPayload::I32(v) => v.iter().map(|&x| x as f64).collect(),
            IdxPayload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            IdxPayload::F64(v) => v.clone(),
        }
    }
}

fn parse_err(offset: u64, message: impl Into<String>) -> TvaeError {
    TvaeError::Parse {
        offset,
        message: message.into(),
    }
}

/// Reads a standard IDX file (big-endian magic, dtype code, dims, payload).
pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(parse_err(0, "file shorter than the 4-byte IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "IDX magic must start with two zero bytes"));
    }
    let dtype = bytes[2];
    let ndim = bytes[3] as usize;
    let mut offset = 4usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if offset + 4 > bytes.len() {
            return Err(parse_err(offset as u64, "truncated dimension header"));
        }
        let d = u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        dims.push(d);
        offset += 4;
    }
    let count: usize = dims.iter().product();
    let elem = match dtype {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => {
            return Err(parse_err(2, format!("unknown IDX dtype code 0x{other:02X}")));
        }
    };
    let need = count * elem;
    if bytes.len() - offset < need {
        return Err(parse_err(
            bytes.len() as u64,
            format!(
                "payload truncated: need {need} bytes, have {}",
                bytes.len() - offset
            ),
        ));
    }
    let body = &bytes[offset..offset + need];
    let payload = match dtype {
        0x08 => IdxPayload::U8(body.to_vec()),
        0x09 => IdxPayload::I8(body.iter().map(|&b| b as i8).collect()),
        0x0B => IdxPayload::I16(
            body.chunks_exact(2)
                .map(|c| i16::from_be_bytes([c[0], c[1]]))
                .collect(),
        ),
        0x0C => IdxPayload::I32(
            body.chunks_exact(4)
                .map(|c| i32::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        0x0D => IdxPayload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        0x0E => IdxPayload::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => unreachable!(),
    };
    Ok(IdxFile { dims, payload })
}

/// Writes a u8 IDX file (used for fixtures and round-trip tests).
pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(TvaeError::ShapeMismatch(format!(
            "dims {:?} imply {count} elements, got {}",
            dims,
            data.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&[0, 0, 0x08, dims.len() as u8])?;
    for &d in dims {
        f.write_all(&(d as u32).to_be_bytes())?;
    }
    f.write_all(data)?;
    Ok(())
}

/// Reads an IDX label file (1-d u8).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let idx = read_idx(path)?;
    if idx.dims.len() != 1 {
        return Err(TvaeError::ShapeMismatch(format!(
            "label file must be 1-d, got dims {:?}",
            idx.dims
        )));
    }
    match idx.payload {
        IdxPayload::U8(v) => Ok(v),
        _ => Err(TvaeError::InvalidArgument(
            "label file must hold unsigned bytes".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Stack container
// ---------------------------------------------------------------------------

pub const STACK_MAGIC: &[u8; 4] = b"TVS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackDtype {
    U8,
    F32,
    F64,
}

impl StackDtype {
    fn code(self) -> u8 {
        match self {
            StackDtype::U8 => 0,
            StackDtype::F32 => 1,
            StackDtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(StackDtype::U8),
            1 => Ok(StackDtype::F32),
            2 => Ok(StackDtype::F64),
            other => Err(parse_err(4, format!("unknown stack dtype code {other}"))),
        }
    }
}

/// Writes an n-d array to the stack container with the requested dtype
/// (f64 values are narrowed; u8 expects values already in 0..=255).
pub fn write_stack(path: &Path, data: &ArrayD<f64>, dtype: StackDtype) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(STACK_MAGIC)?;
    f.write_all(&[dtype.code(), data.ndim() as u8])?;
    for &d in data.shape() {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    let std = data.as_standard_layout();
    match dtype {
        StackDtype::U8 => {
            for &v in std.iter() {
                f.write_all(&[v.round().clamp(0.0, 255.0) as u8])?;
            }
        }
        StackDtype::F32 => {
            for &v in std.iter() {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        StackDtype::F64 => {
            for &v in std.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a stack container into f64 (raw values, no normalization).
pub fn read_stack(path: &Path) -> Result<(StackDtype, ArrayD<f64>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err(0, "file shorter than the stack magic"))?;
    if &magic != STACK_MAGIC {
        return Err(parse_err(0, format!("bad stack magic {magic:?}")));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)
        .map_err(|_| parse_err(4, "truncated dtype/rank header"))?;
    let dtype = StackDtype::from_code(hdr[0])?;
    let rank = hdr[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut offset = 6u64;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|_| parse_err(offset, "truncated dimension"))?;
        dims.push(u64::from_le_bytes(b) as usize);
        offset += 8;
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    match dtype {
        StackDtype::U8 => {
            let mut buf = vec![0u8; count];
            r.read_exact(&mut buf)
                .map_err(|_| parse_err(offset, "truncated u8 payload"))?;
            data.extend(buf.iter().map(|&b| b as f64));
        }
        StackDtype::F32 => {
            let mut b = [0u8; 4];
            for i in 0..count {
                r.read_exact(&mut b)
                    .map_err(|_| parse_err(offset + 4 * i as u64, "truncated f32 payload"))?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        StackDtype::F64 => {
            let mut b = [0u8; 8];
            for i in 0..count {
                r.read_exact(&mut b)
                    .map_err(|_| parse_err(offset + 8 * i as u64, "truncated f64 payload"))?;
                data.push(f64::from_le_bytes(b));
            }
        }
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| parse_err(offset, format!("shape error: {e}")))?;
    Ok((dtype, arr))
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestFormat {
    Idx,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizeMode {
    /// Per-dataset min-max to [0, 1].
    MinMax,
    /// Min-max then threshold to {0, 1}.
    Binary { threshold: f64 },
    /// Keep raw values (the resulting batch skips range validation).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub downsample_factor: usize,
    pub normalize: NormalizeMode,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            downsample_factor: 1,
            normalize: NormalizeMode::MinMax,
        }
    }
}

/// Loads an image stack from disk, optionally downsampling (local f x f mean)
/// and normalizing.
pub fn ingest(path: &Path, format: IngestFormat, options: IngestOptions) -> Result<ImageBatch> {
    let raw: Array4<f64> = match format {
        IngestFormat::Idx => {
            let idx = read_idx(path)?;
            if idx.dims.len() != 3 {
                return Err(TvaeError::ShapeMismatch(format!(
                    "IDX image file must be [N, H, W], got dims {:?}",
                    idx.dims
                )));
            }
            let (n, h, w) = (idx.dims[0], idx.dims[1], idx.dims[2]);
            Array4::from_shape_vec((n, 1, h, w), idx.to_f64())
                .map_err(|e| TvaeError::ShapeMismatch(e.to_string()))?
        }
        IngestFormat::Stack => {
            let (_, arr) = read_stack(path)?;
            match arr.ndim() {
                3 => {
                    let (n, h, w) = (arr.shape()[0], arr.shape()[1], arr.shape()[2]);
                    arr.into_shape_with_order((n, 1, h, w))
                        .map_err(|e| TvaeError::ShapeMismatch(e.to_string()))?
                        .into_dimensionality()
                        .map_err(|e| TvaeError::ShapeMismatch(e.to_string()))?
                }
                4 => arr
                    .into_dimensionality()
                    .map_err(|e| TvaeError::ShapeMismatch(e.to_string()))?,
                other => {
                    return Err(TvaeError::ShapeMismatch(format!(
                        "stack must be rank 3 or 4, got rank {other}"
                    )));
                }
            }
        }
    };

    let down = downsample_mean(&raw, options.downsample_factor)?;
    let normalized = match options.normalize {
        NormalizeMode::None => return Ok(ImageBatch::from_raw(down)),
        NormalizeMode::MinMax => min_max_normalize(down),
        NormalizeMode::Binary { threshold } => {
            let mm = min_max_normalize(down);
            mm.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
        }
    };
    ImageBatch::new(normalized)
}

/// Local mean over f x f blocks; trailing rows/cols that do not fill a block
/// are dropped.
pub fn downsample_mean(images: &Array4<f64>, factor: usize) -> Result<Array4<f64>> {
    if factor == 0 {
        return Err(TvaeError::InvalidArgument(
            "downsample factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(images.clone());
    }
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(TvaeError::InvalidDimension(format!(
            "cannot downsample {h}x{w} by {factor}"
        )));
    }
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array4::zeros((n, c, oh, ow));
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..factor {
                        for v in 0..factor {
                            acc += images[[bi, ch, i * factor + u, j * factor + v]];
                        }
                    }
                    out[[bi, ch, i, j]] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

fn min_max_normalize(mut images: Array4<f64>) -> Array4<f64> {
    let min = images.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = images.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let inv = 1.0 / (max - min);
        images.mapv_inplace(|v| (v - min) * inv);
    } else {
        images.fill(0.0);
    }
    images
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

pub const IMAGES_FILE: &str = "images.tvs";
pub const GT_FILE: &str = "gt.tsv";
pub const OBJECTS_FILE: &str = "objects.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `images.tvs` (f32 stack), `gt.tsv` and `manifest.txt` into `dir`.
pub fn save_dataset(ds: &TransformedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_stack(
        &dir.join(IMAGES_FILE),
        &ds.images.clone().into_dyn(),
        StackDtype::F32,
    )?;
    let mut f = BufWriter::new(File::create(dir.join(GT_FILE))?);
    let with_scale = !ds.gt_scale.is_empty();
    if with_scale {
        writeln!(f, "index\tlabel\ttheta\ttx\tty\ttx_raw\tty_raw\tscale")?;
    } else {
        writeln!(f, "index\tlabel\ttheta\ttx\tty\ttx_raw\tty_raw")?;
    }
    for i in 0..ds.len() {
        if with_scale {
            writeln!(
                f,
                "{i}\t{}\t{:.17e}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}",
                ds.labels[i],
                ds.gt_theta[i],
                ds.gt_t[i][0],
                ds.gt_t[i][1],
                ds.gt_t_raw[i][0],
                ds.gt_t_raw[i][1],
                ds.gt_scale[i]
            )?;
        } else {
            writeln!(
                f,
                "{i}\t{}\t{:.17e}\t{}\t{}\t{:.17e}\t{:.17e}",
                ds.labels[i],
                ds.gt_theta[i],
                ds.gt_t[i][0],
                ds.gt_t[i][1],
                ds.gt_t_raw[i][0],
                ds.gt_t_raw[i][1]
            )?;
        }
    }
    ds.manifest.write(&dir.join(MANIFEST_FILE))
}

pub fn load_dataset(dir: &Path) -> Result<TransformedDataset> {
    let (_, arr) = read_stack(&dir.join(IMAGES_FILE))?;
    let images: Array4<f64> = arr
        .into_dimensionality()
        .map_err(|e| TvaeError::ShapeMismatch(format!("dataset images: {e}")))?;
    let text = std::fs::read_to_string(dir.join(GT_FILE))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty ground-truth table"))?;
    let with_scale = header.trim_end().ends_with("scale");
    let mut gt_theta = Vec::new();
    let mut gt_t = Vec::new();
    let mut gt_t_raw = Vec::new();
    let mut labels = Vec::new();
    let mut gt_scale = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let expect = if with_scale { 8 } else { 7 };
        if cols.len() != expect {
            return Err(parse_err(
                lineno as u64 + 1,
                format!("expected {expect} columns, got {}", cols.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| parse_err(lineno as u64 + 1, format!("bad number {s}")))
        };
        labels.push(num(cols[1])? as u8);
        gt_theta.push(num(cols[2])?);
        gt_t.push([num(cols[3])?, num(cols[4])?]);
        gt_t_raw.push([num(cols[5])?, num(cols[6])?]);
        if with_scale {
            gt_scale.push(num(cols[7])?);
        }
    }
    if labels.len() != images.shape()[0] {
        return Err(TvaeError::ShapeMismatch(format!(
            "{} gt rows vs {} images",
            labels.len(),
            images.shape()[0]
        )));
    }
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    Ok(TransformedDataset {
        images,
        gt_theta,
        gt_t,
        gt_t_raw,
        labels,
        gt_scale,
        manifest,
    })
}

pub fn save_multi_dataset(ds: &MultiObjectDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_stack(
        &dir.join(IMAGES_FILE),
        &ds.images.clone().into_dyn(),
        StackDtype::F32,
    )?;
    let mut f = BufWriter::new(File::create(dir.join(OBJECTS_FILE))?);
    writeln!(f, "image\tobject\tsource\tlabel\ttheta\tcx\tcy")?;
    for (i, objs) in ds.objects.iter().enumerate() {
        for (k, o) in objs.iter().enumerate() {
            writeln!(
                f,
                "{i}\t{k}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}",
                o.source_index, o.label, o.theta, o.center[0], o.center[1]
            )?;
        }
    }
    ds.manifest.write(&dir.join(MANIFEST_FILE))
}

pub fn load_multi_dataset(dir: &Path) -> Result<MultiObjectDataset> {
    let (_, arr) = read_stack(&dir.join(IMAGES_FILE))?;
    let images: Array4<f64> = arr
        .into_dimensionality()
        .map_err(|e| TvaeError::ShapeMismatch(format!("dataset images: {e}")))?;
    let n = images.shape()[0];
    let mut objects: Vec<Vec<ObjectGt>> = vec![Vec::new(); n];
    let text = std::fs::read_to_string(dir.join(OBJECTS_FILE))?;
    for (lineno, line) in text.lines().skip(1).enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(parse_err(
                lineno as u64 + 1,
                format!("expected 7 columns, got {}", cols.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| parse_err(lineno as u64 + 1, format!("bad number {s}")))
        };
        let image: usize = num(cols[0])? as usize;
        if image >= n {
            return Err(parse_err(
                lineno as u64 + 1,
                format!("object references image {image} of {n}"),
            ));
        }
        objects[image].push(ObjectGt {
            source_index: num(cols[2])? as usize,
            label: num(cols[3])? as u8,
            theta: num(cols[4])?,
            center: [num(cols[5])?, num(cols[6])?],
        });
    }
    let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    Ok(MultiObjectDataset {
        images,
        objects,
        manifest,
    })
}

/// Procedural single-channel glyphs used as a digit stand-in when no real
/// IDX source is available (tests, smoke runs). Each class is a distinct
/// arrangement of strokes on a 28x28 tile.
pub fn procedural_glyphs(n_per_class: usize, n_classes: usize, seed: u64) -> (ImageBatch, Vec<u8>) {
    let n_classes = n_classes.clamp(1, 10);
    let n = n_per_class * n_classes;
    let mut data = Array4::zeros((n, 1, 28, 28));
    let mut labels = Vec::with_capacity(n);
    let mut idx = 0;
    for class in 0..n_classes {
        for item in 0..n_per_class {
            let mut rng = item_rng(seed ^ (class as u64) << 32, item as u64);
            let jx = rng.random_range(-1.0..1.0);
            let jy = rng.random_range(-1.0..1.0);
            let mut img = data.index_axis_mut(ndarray::Axis(0), idx);
            let mut img = img.index_axis_mut(ndarray::Axis(0), 0);
            let mut blob = |ci: f64, cj: f64, ri: f64, rj: f64| {
                for i in 0..28 {
                    for j in 0..28 {
                        let di = (i as f64 - ci - jy) / ri;
                        let dj = (j as f64 - cj - jx) / rj;
                        let d2 = di * di + dj * dj;
                        if d2 <= 1.0 {
                            let v = (1.0 - d2).sqrt();
                            let cur: f64 = img[[i, j]];
                            img[[i, j]] = cur.max(v);
                        }
                    }
                }
            };
            // stroke layouts; deliberately asymmetric (no 2-fold rotation
            // symmetry) so rotation inference is well-posed, and distinct in
            // topology so clustering has real structure to find
            match class {
                0 => {
                    // tall bar with a bottom-right lobe
                    blob(13.5, 9.5, 8.0, 2.2);
                    blob(18.5, 16.0, 3.5, 4.0);
                }
                1 => {
                    // bar with a single top dot
                    blob(15.5, 13.5, 6.5, 2.2);
                    blob(6.5, 13.5, 2.2, 2.2);
                }
                2 => {
                    // top bar with a hanging right stem
                    blob(8.0, 13.5, 2.2, 7.0);
                    blob(15.0, 18.5, 5.5, 2.2);
                }
                3 => {
                    // lopsided triangle of dots
                    blob(7.5, 8.5, 2.5, 2.5);
                    blob(8.5, 19.5, 2.0, 2.0);
                    blob(19.0, 12.0, 3.2, 3.2);
                }
                4 => {
                    // L
                    blob(13.0, 8.5, 7.5, 2.2);
                    blob(19.5, 15.0, 2.2, 5.5);
                }
                5 => {
                    // T with a short stem
                    blob(8.0, 13.5, 2.2, 7.0);
                    blob(14.5, 13.5, 5.0, 2.2);
                }
                6 => {
                    // ring with a notch at the top right
                    blob(13.5, 13.5, 8.0, 8.0);
                    for i in 8..20 {
                        for j in 8..20 {
                            img[[i, j]] = 0.0;
                        }
                    }
                    for i in 4..10 {
                        for j in 16..24 {
                            img[[i, j]] = 0.0;
                        }
                    }
                }
                7 => {
                    // diagonal stroke with an off-diagonal dot
                    blob(8.0, 8.0, 2.4, 2.4);
                    blob(12.0, 12.0, 2.4, 2.4);
                    blob(16.0, 16.0, 2.4, 2.4);
                    blob(20.0, 20.0, 2.4, 2.4);
                    blob(9.0, 19.0, 2.0, 2.0);
                }
                8 => {
                    // big lobe over a small lobe
                    blob(9.5, 13.5, 4.5, 5.5);
                    blob(19.0, 13.5, 2.5, 3.0);
                }
                _ => {
                    // c-shape: ring with the right side cleared
                    blob(13.5, 13.5, 7.0, 7.0);
                    for i in 9..18 {
                        for j in 9..18 {
                            img[[i, j]] = 0.0;
                        }
                    }
                    for i in 9..18 {
                        for j in 16..26 {
                            img[[i, j]] = 0.0;
                        }
                    }
                }
            }
            labels.push(class as u8);
            idx += 1;
        }
    }
    (
        ImageBatch::new(data).expect("glyphs stay in [0,1]"),
        labels,
    )
}
