//! Quantitative evaluation: pose-correlation metrics, semantic clustering
//! accuracy, the rotation-RMSE protocol, multi-object detection, and
//! pose-canonicalized reconstruction with PNG export.

use ndarray::{Array1, Array2, Array3, Array4};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::data::TransformedDataset;
use crate::error::{Result, TvaeError};
use crate::geometry::{circular_correlation, rotate_image, wrap_angle, CoordinateGrid};
use crate::latent::map_estimate;
use crate::model::TargetVae;

/// Encoder batch size used when sweeping datasets.
const EVAL_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// A scalar metric that may be undefined (e.g. degenerate predictions), with
/// the reason recorded instead of a number.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Defined(f64),
    Undefined(String),
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Defined(v) => Some(*v),
            Metric::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Defined(v) => write!(f, "{v:.6}"),
            Metric::Undefined(reason) => write!(f, "undefined: {reason}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseMetrics {
    pub pearson_x: Metric,
    pub pearson_y: Metric,
    pub circular: Metric,
}

/// All quantitative results of an evaluation run.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub translation_pearson: (Metric, Metric),
    pub rotation_circular_corr: Metric,
    /// Percent, when clustering was requested.
    pub clustering_accuracy: Option<f64>,
    /// Degrees per class, when the rotation-RMSE protocol was run.
    pub rotation_rmse_per_class: BTreeMap<u8, f64>,
    pub rotation_rmse_average: Option<f64>,
    /// Free-form provenance entries (model, dataset, settings).
    pub manifest: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn new() -> Self {
        MetricsReport {
            translation_pearson: (
                Metric::Undefined("not evaluated".into()),
                Metric::Undefined("not evaluated".into()),
            ),
            rotation_circular_corr: Metric::Undefined("not evaluated".into()),
            clustering_accuracy: None,
            rotation_rmse_per_class: BTreeMap::new(),
            rotation_rmse_average: None,
            manifest: BTreeMap::new(),
        }
    }

    /// Writes the flat key-value report plus a machine-readable TSV.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut kv = std::io::BufWriter::new(std::fs::File::create(dir.join("report.txt"))?);
        writeln!(kv, "translation_pearson_x={}", self.translation_pearson.0)?;
        writeln!(kv, "translation_pearson_y={}", self.translation_pearson.1)?;
        writeln!(kv, "rotation_circular_corr={}", self.rotation_circular_corr)?;
        if let Some(acc) = self.clustering_accuracy {
            writeln!(kv, "clustering_accuracy_percent={acc:.4}")?;
        }
        for (class, rmse) in &self.rotation_rmse_per_class {
            writeln!(kv, "rotation_rmse_deg_class_{class}={rmse:.4}")?;
        }
        if let Some(avg) = self.rotation_rmse_average {
            writeln!(kv, "rotation_rmse_deg_average={avg:.4}")?;
        }
        for (k, v) in &self.manifest {
            writeln!(kv, "{k}={v}")?;
        }

        let mut tsv = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.tsv"))?);
        writeln!(tsv, "metric\tvalue")?;
        let num = |m: &Metric| m.value().map_or("nan".into(), |v| format!("{v:.6}"));
        writeln!(tsv, "translation_pearson_x\t{}", num(&self.translation_pearson.0))?;
        writeln!(tsv, "translation_pearson_y\t{}", num(&self.translation_pearson.1))?;
        writeln!(tsv, "rotation_circular_corr\t{}", num(&self.rotation_circular_corr))?;
        if let Some(acc) = self.clustering_accuracy {
            writeln!(tsv, "clustering_accuracy_percent\t{acc:.6}")?;
        }
        for (class, rmse) in &self.rotation_rmse_per_class {
            writeln!(tsv, "rotation_rmse_deg_class_{class}\t{rmse:.6}")?;
        }
        if let Some(avg) = self.rotation_rmse_average {
            writeln!(tsv, "rotation_rmse_deg_average\t{avg:.6}")?;
        }
        Ok(())
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Pose evaluation
// ---------------------------------------------------------------------------

/// Pearson correlation; undefined when either series has (numerically) zero
/// variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Metric {
    if xs.is_empty() || xs.len() != ys.len() {
        return Metric::Undefined("empty or mismatched series".into());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx < 1e-12 || syy < 1e-12 {
        return Metric::Undefined("constant predictions".into());
    }
    Metric::Defined(sxy / (sxx * syy).sqrt())
}

/// Most-likely (t, theta, z) for every image, swept in chunks.
/// Returns translations in pixels `(tx, ty)`, angles in radians, and the
/// z embeddings `[N, z_dim]`.
pub fn map_sweep(
    model: &TargetVae,
    images: &Array4<f64>,
) -> Result<(Vec<[f64; 2]>, Vec<f64>, Array2<f64>)> {
    let n = images.shape()[0];
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let grid = CoordinateGrid::new_allow_degenerate(h, w);
    let (sx, sy) = grid.pixel_scale();
    let mut t_px = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    let mut z = Array2::zeros((n, model.config.z_dim));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let batch = images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let field = model.encoder.encode(&batch)?;
        let estimates = map_estimate(&field, &grid, &model.prior)?;
        for (k, est) in estimates.iter().enumerate() {
            t_px.push([est.t[0] / sx, est.t[1] / sy]);
            theta.push(est.theta);
            for d in 0..model.config.z_dim {
                z[[start + k, d]] = est.z[d];
            }
        }
        start = end;
    }
    Ok((t_px, theta, z))
}

/// Translation Pearson (per axis, pixels) and rotation circular correlation
/// of MAP predictions against ground truth.
pub fn eval_pose(model: &TargetVae, dataset: &TransformedDataset) -> Result<PoseMetrics> {
    let (t_px, theta, _) = map_sweep(model, &dataset.images)?;
    Ok(pose_metrics_from_predictions(&t_px, &theta, dataset))
}

pub(crate) fn pose_metrics_from_predictions(
    pred_t_px: &[[f64; 2]],
    pred_theta: &[f64],
    dataset: &TransformedDataset,
) -> PoseMetrics {
    let px: Vec<f64> = pred_t_px.iter().map(|t| t[0]).collect();
    let py: Vec<f64> = pred_t_px.iter().map(|t| t[1]).collect();
    let gx: Vec<f64> = dataset.gt_t.iter().map(|t| t[0]).collect();
    let gy: Vec<f64> = dataset.gt_t.iter().map(|t| t[1]).collect();
    let circular = match circular_correlation(pred_theta, &dataset.gt_theta) {
        Ok(v) => Metric::Defined(v),
        Err(e) => Metric::Undefined(e.to_string()),
    };
    PoseMetrics {
        pearson_x: pearson(&px, &gx),
        pearson_y: pearson(&py, &gy),
        circular,
    }
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// Ward-linkage agglomerative clustering into `k` clusters.
pub fn ward_cluster(points: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(TvaeError::InvalidArgument(format!(
            "cannot cut {n} points into {k} clusters"
        )));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut condensed: Vec<f32> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let mut d2 = 0.0;
            for d in 0..points.ncols() {
                let diff = points[[i, d]] - points[[j, d]];
                d2 += diff * diff;
            }
            condensed.push(d2.sqrt() as f32);
        }
    }
    let dendrogram = kodama::linkage(&mut condensed, n, kodama::Method::Ward);

    // apply the first n - k merges; step i creates cluster n + i
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, step) in dendrogram.steps().iter().take(n - k).enumerate() {
        let target = n + i;
        let a = find(&mut parent, step.cluster1);
        let b = find(&mut parent, step.cluster2);
        parent[a] = target;
        parent[b] = target;
    }
    let mut label_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        let next = label_of_root.len();
        labels[i] = *label_of_root.entry(root).or_insert(next);
    }
    Ok(labels)
}

/// Minimum-cost assignment on a square cost matrix (Hungarian algorithm with
/// potentials, O(n^3)). Returns the column assigned to each row.
pub(crate) fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    // 1-indexed potentials formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Accuracy (percent) of the best cluster-to-label assignment
/// (maximum-weight matching on the contingency matrix).
pub fn cluster_label_accuracy(clusters: &[usize], labels: &[u8]) -> Result<f64> {
    if clusters.is_empty() || clusters.len() != labels.len() {
        return Err(TvaeError::InvalidArgument(
            "clusters and labels must have equal nonzero length".into(),
        ));
    }
    let n_clusters = clusters.iter().max().unwrap() + 1;
    let n_labels = *labels.iter().max().unwrap() as usize + 1;
    let m = n_clusters.max(n_labels);
    let mut counts = Array2::<f64>::zeros((m, m));
    for (&c, &l) in clusters.iter().zip(labels) {
        counts[[c, l as usize]] += 1.0;
    }
    let assignment = hungarian_min(&counts.mapv(|v| -v));
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .map(|(c, &l)| counts[[c, l]])
        .sum();
    Ok(100.0 * matched / clusters.len() as f64)
}

/// Extracts MAP semantic embeddings, Ward-clusters them into `k` clusters,
/// and scores the best cluster-to-label assignment.
pub fn eval_clustering(model: &TargetVae, dataset: &TransformedDataset, k: usize) -> Result<f64> {
    if dataset.len() < k {
        return Err(TvaeError::InvalidArgument(format!(
            "{} images cannot form {k} clusters",
            dataset.len()
        )));
    }
    let (_, _, z) = map_sweep(model, &dataset.images)?;
    let clusters = ward_cluster(&z, k)?;
    cluster_label_accuracy(&clusters, &dataset.labels)
}

// ---------------------------------------------------------------------------
// Rotation RMSE protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RotationRmse {
    /// Degrees, per class.
    pub per_class: BTreeMap<u8, f64>,
    /// Mean of the per-class values, degrees.
    pub average: f64,
}

/// Shared residual math: for each (label, applied angle, baseline prediction,
/// rotated prediction), wrap `predicted - baseline - applied` into (-pi, pi]
/// and accumulate per-class RMS in degrees.
pub(crate) fn rmse_from_predictions(
    records: &[(u8, f64, f64, f64)],
) -> Result<RotationRmse> {
    if records.is_empty() {
        return Err(TvaeError::InvalidArgument("no rotation records".into()));
    }
    let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for &(label, applied, baseline, predicted) in records {
        let residual = wrap_angle(predicted - baseline - applied);
        let e = sums.entry(label).or_insert((0.0, 0));
        e.0 += residual * residual;
        e.1 += 1;
    }
    let mut per_class = BTreeMap::new();
    for (label, (ss, count)) in sums {
        per_class.insert(label, (ss / count as f64).sqrt().to_degrees());
    }
    let average = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(RotationRmse { per_class, average })
}

/// Rotates each test image `n_rotations` times by uniformly sampled angles,
/// predicts the rotation of each copy, subtracts the unrotated prediction,
/// and reports per-class RMSE of the wrapped residuals in degrees.
pub fn eval_rotation_rmse(
    model: &TargetVae,
    dataset: &TransformedDataset,
    n_rotations: usize,
    seed: u64,
) -> Result<RotationRmse> {
    use rand::{Rng, SeedableRng};
    if n_rotations == 0 {
        return Err(TvaeError::InvalidArgument("n_rotations must be >= 1".into()));
    }
    let n = dataset.len();
    let (h, w) = (dataset.height(), dataset.width());
    let mut records = Vec::with_capacity(n * n_rotations);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for img_idx in 0..n {
        let image = dataset.images.index_axis(ndarray::Axis(0), img_idx);
        let image = image.index_axis(ndarray::Axis(0), 0);
        let angles: Vec<f64> = (0..n_rotations)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        // batch: original followed by the rotated copies
        let mut batch = Array4::zeros((n_rotations + 1, 1, h, w));
        batch
            .index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&image);
        for (k, &phi) in angles.iter().enumerate() {
            batch
                .index_axis_mut(ndarray::Axis(0), k + 1)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(&rotate_image(image, phi));
        }
        let (_, theta, _) = map_sweep(model, &batch)?;
        let baseline = theta[0];
        for (k, &phi) in angles.iter().enumerate() {
            records.push((dataset.labels[img_idx], phi, baseline, theta[k + 1]));
        }
    }
    rmse_from_predictions(&records)
}

// ---------------------------------------------------------------------------
// Multi-object detection
// ---------------------------------------------------------------------------

/// One detected object.
#[derive(Debug, Clone)]
pub struct Detection {
    /// Peak location in pixels, `(x, y)`.
    pub t_pixels: [f64; 2],
    /// Peak location in normalized coordinates.
    pub t: [f64; 2],
    pub theta: f64,
    pub z: Array1<f64>,
    /// Marginal attention q(t|y) at the peak.
    pub score: f64,
    /// Rendered reconstruction of this object on the input-sized grid.
    pub reconstruction: Array3<f64>,
}

/// Strict local maxima of a 2-d map above a threshold, greedily pruned so
/// surviving peaks are at least `min_separation` pixels apart.
pub(crate) fn find_peaks(
    map: &Array2<f64>,
    threshold: f64,
    min_separation: f64,
) -> Vec<(usize, usize, f64)> {
    let (h, w) = (map.nrows(), map.ncols());
    let mut candidates = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = map[[i, j]];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'scan: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    if map[[ni as usize, nj as usize]] >= v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                candidates.push((i, j, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    'next: for c in candidates {
        for k in &kept {
            let d = ((c.0 as f64 - k.0 as f64).powi(2) + (c.1 as f64 - k.1 as f64).powi(2)).sqrt();
            if d < min_separation {
                continue 'next;
            }
        }
        kept.push(c);
    }
    kept
}

/// Detects objects in a (possibly larger-than-training) image by peaks of
/// the rotation-marginalized attention `q(t|y) = sum_r q(t, r|y)`.
///
/// Defaults: `peak_threshold` = 5x the uniform attention level,
/// `min_separation` = half the training image width.
pub fn detect_objects(
    model: &TargetVae,
    image: &Array4<f64>,
    peak_threshold: Option<f64>,
    min_separation: Option<f64>,
) -> Result<Vec<Detection>> {
    if image.shape()[0] != 1 {
        return Err(TvaeError::InvalidArgument(
            "detect_objects scans one image at a time".into(),
        ));
    }
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let threshold = peak_threshold.unwrap_or(5.0 / (h * w) as f64);
    let min_sep = min_separation.unwrap_or(model.config.image_width as f64 / 2.0);

    let field = model.encoder.encode(image)?;
    let q = crate::latent::attention_softmax(&field.attn_logits)?;
    let r = field.r();
    let mut q_t = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for rho in 0..r {
                acc += q[[0, rho, i, j]];
            }
            q_t[[i, j]] = acc;
        }
    }
    let grid = CoordinateGrid::new_allow_degenerate(h, w);
    let peaks = find_peaks(&q_t, threshold, min_sep);
    let mut out = Vec::with_capacity(peaks.len());
    for (i, j, score) in peaks {
        // condition on the peak cell: argmax rotation component there
        let mut rho_star = 0;
        for rho in 1..r {
            if q[[0, rho, i, j]] > q[[0, rho_star, i, j]] {
                rho_star = rho;
            }
        }
        let theta = field.mu_dtheta[[0, rho_star, i, j]] + model.prior.theta_offset(rho_star);
        let z = Array1::from_shape_fn(model.config.z_dim, |d| {
            field.mu_z[[0, rho_star, i, j, d]]
        });
        let t = grid.coord_at(i, j);
        let recon = model.render(
            &z.clone().insert_axis(ndarray::Axis(0)),
            &Array1::from_elem(1, theta),
            &Array2::from_shape_vec((1, 2), vec![t[0], t[1]]).unwrap(),
            h,
            w,
        )?;
        out.push(Detection {
            t_pixels: [j as f64, i as f64],
            t,
            theta,
            z,
            score,
            reconstruction: recon.index_axis(ndarray::Axis(0), 0).to_owned(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Aligned reconstruction and image export
// ---------------------------------------------------------------------------

/// Encodes each image, takes the MAP semantic vector, and renders it at
/// rotation 0, translation 0: pose-canonicalized reconstructions at the
/// model's training resolution.
pub fn reconstruct_aligned(model: &TargetVae, images: &Array4<f64>) -> Result<Array4<f64>> {
    let (_, _, z) = map_sweep(model, images)?;
    let n = z.nrows();
    let theta = Array1::zeros(n);
    let t = Array2::zeros((n, 2));
    model.render(
        &z,
        &theta,
        &t,
        model.config.image_height,
        model.config.image_width,
    )
}

/// Writes `[N, C, H, W]` images (values in [0, 1]) as a `ceil(sqrt(N))`-column
/// PNG montage. C must be 1 (grayscale) or 3 (RGB).
pub fn export_png_grid(images: &Array4<f64>, path: &Path) -> Result<()> {
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    if n == 0 {
        return Err(TvaeError::InvalidArgument("no images to export".into()));
    }
    if c != 1 && c != 3 {
        return Err(TvaeError::InvalidArgument(format!(
            "PNG export supports 1 or 3 channels, got {c}"
        )));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let mut img = image::GrayImage::new((cols * w) as u32, (rows * h) as u32);
        for k in 0..n {
            let (r0, c0) = (k / cols, k % cols);
            for i in 0..h {
                for j in 0..w {
                    img.put_pixel(
                        (c0 * w + j) as u32,
                        (r0 * h + i) as u32,
                        image::Luma([to_u8(images[[k, 0, i, j]])]),
                    );
                }
            }
        }
        img.save(path)
            .map_err(|e| TvaeError::InvalidArgument(format!("png export: {e}")))?;
    } else {
        let mut img = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
        for k in 0..n {
            let (r0, c0) = (k / cols, k % cols);
            for i in 0..h {
                for j in 0..w {
                    img.put_pixel(
                        (c0 * w + j) as u32,
                        (r0 * h + i) as u32,
                        image::Rgb([
                            to_u8(images[[k, 0, i, j]]),
                            to_u8(images[[k, 1, i, j]]),
                            to_u8(images[[k, 2, i, j]]),
                        ]),
                    );
                }
            }
        }
        img.save(path)
            .map_err(|e| TvaeError::InvalidArgument(format!("png export: {e}")))?;
    }
    Ok(())
}

/// MAP semantic embeddings `[N, z_dim]` for external analysis.
pub fn extract_embeddings(model: &TargetVae, images: &Array4<f64>) -> Result<Array2<f64>> {
    Ok(map_sweep(model, images)?.2)
}
