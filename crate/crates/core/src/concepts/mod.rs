//! Agent-determined visual concepts.
//!
//! Per frame: perturbation saliency of the controller's action distribution,
//! a z-score threshold, 8-connected components and masked patches. The patches
//! are encoded with the VAE and clustered; a frame's concept vector is its
//! normalized closeness to each cluster center.

pub mod kmeans;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{log_softmax, Controller};
use crate::env::{Action, Observation, CHANNELS, HEIGHT, NUM_ACTIONS, WIDTH};
use crate::episodes::{Dataset, Episode, Transition};
use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic, write_string};
use crate::nn::{checkpoint, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vae::Vae;

pub use kmeans::{kmeans, wcss_curve, KMeansConfig, KMeansFit};

/// Anything that maps a batch of `[n, H, W, C]` unit-scale images to action
/// probabilities.
pub trait ActionProbabilities {
    fn action_probabilities(&self, images: &Tensor<f32>) -> Result<Vec<[f64; NUM_ACTIONS]>>;
}

/// The trained agent seen through its encoder: `π(enc(I))` with the mean latent.
pub struct EncodedPolicy<'a, T> {
    pub vae: &'a Vae<T>,
    pub controller: &'a Controller<T>,
}

impl<T: Scalar> ActionProbabilities for EncodedPolicy<'_, T> {
    fn action_probabilities(&self, images: &Tensor<f32>) -> Result<Vec<[f64; NUM_ACTIONS]>> {
        let (mu, _) = self.vae.encode_batch(&images.cast())?;
        let (logits, _) = self.controller.forward(&mu)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
                let mut p = [0.0; NUM_ACTIONS];
                for (o, lp) in p.iter_mut().zip(log_softmax(&row)) {
                    *o = lp.exp();
                }
                p
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    pub stride: usize,
    pub mask_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            mask_sigma: 3.0,
            blur_sigma: 3.0,
        }
    }
}

/// Per-pixel saliency aligned with the observation, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of an HWC image with clamped borders.
pub fn gaussian_blur(image: &[f32], height: usize, width: usize, channels: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return image.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let at = |r: usize, c: usize, ch: usize| (r * width + c) * channels + ch;
    let mut tmp = vec![0.0f32; image.len()];
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let cc = (c as isize + k as isize - radius).clamp(0, width as isize - 1) as usize;
                    acc += w * image[at(r, cc, ch)] as f64;
                }
                tmp[at(r, c, ch)] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; image.len()];
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let rr = (r as isize + k as isize - radius).clamp(0, height as isize - 1) as usize;
                    acc += w * tmp[at(rr, c, ch)] as f64;
                }
                out[at(r, c, ch)] = acc as f32;
            }
        }
    }
    out
}

/// Perturbation centres along one axis: `stride/2, stride/2 + stride, ...`.
fn grid_positions(extent: usize, stride: usize) -> Vec<usize> {
    (stride / 2..extent).step_by(stride).collect()
}

/// Bilinear upsampling of a coarse grid whose node `g` sits at pixel
/// `offset + g·stride`; pixels outside the node range clamp to the edge nodes.
fn upsample(grid: &[f64], rows: &[usize], cols: &[usize], height: usize, width: usize) -> Vec<f64> {
    let coord = |p: usize, nodes: &[usize]| -> (usize, usize, f64) {
        let first = nodes[0] as f64;
        let step = if nodes.len() > 1 { (nodes[1] - nodes[0]) as f64 } else { 1.0 };
        let g = ((p as f64 - first) / step).clamp(0.0, (nodes.len() - 1) as f64);
        let lo = g.floor() as usize;
        let hi = (lo + 1).min(nodes.len() - 1);
        (lo, hi, g - lo as f64)
    };
    let gw = cols.len();
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        let (r0, r1, fr) = coord(r, rows);
        for c in 0..width {
            let (c0, c1, fc) = coord(c, cols);
            let top = grid[r0 * gw + c0] * (1.0 - fc) + grid[r0 * gw + c1] * fc;
            let bottom = grid[r1 * gw + c0] * (1.0 - fc) + grid[r1 * gw + c1] * fc;
            out[r * width + c] = top * (1.0 - fr) + bottom * fr;
        }
    }
    out
}

/// Perturbation saliency: each grid point blends a Gaussian-weighted patch of
/// the blurred frame into the original and scores `0.5·‖π(I) − π(Φ)‖²`.
pub fn saliency_map<P: ActionProbabilities + ?Sized>(
    policy: &P,
    obs: &Observation,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    if config.stride == 0 {
        return Err(Error::InvalidArgument("saliency stride must be positive".into()));
    }
    let image: Vec<f32> = obs.to_unit();
    let blurred = gaussian_blur(&image, HEIGHT, WIDTH, CHANNELS, config.blur_sigma);
    let rows = grid_positions(HEIGHT, config.stride);
    let cols = grid_positions(WIDTH, config.stride);
    let n = rows.len() * cols.len();
    let mut batch = Tensor::zeros(&[n + 1, HEIGHT, WIDTH, CHANNELS]);
    batch.data_mut()[..Observation::LEN].copy_from_slice(&image);
    let two_s2 = 2.0 * config.mask_sigma * config.mask_sigma;
    for (gi, &ci) in rows.iter().enumerate() {
        for (gj, &cj) in cols.iter().enumerate() {
            let slot = 1 + gi * cols.len() + gj;
            let out = &mut batch.data_mut()[slot * Observation::LEN..(slot + 1) * Observation::LEN];
            for r in 0..HEIGHT {
                for c in 0..WIDTH {
                    let d2 = (r as f64 - ci as f64).powi(2) + (c as f64 - cj as f64).powi(2);
                    let m = (-d2 / two_s2).exp() as f32;
                    for ch in 0..CHANNELS {
                        let i = (r * WIDTH + c) * CHANNELS + ch;
                        out[i] = image[i] * (1.0 - m) + blurred[i] * m;
                    }
                }
            }
        }
    }
    let probs = policy.action_probabilities(&batch)?;
    if probs.len() != n + 1 {
        return Err(Error::ContractViolation(format!(
            "policy returned {} distributions for {} images",
            probs.len(),
            n + 1
        )));
    }
    let base = probs[0];
    let grid: Vec<f64> = probs[1..]
        .iter()
        .map(|p| 0.5 * p.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .collect();
    let values = upsample(&grid, &rows, &cols, HEIGHT, WIDTH);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saliency map".into()));
    }
    Ok(SaliencyMap {
        height: HEIGHT,
        width: WIDTH,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Keeps pixels at least two standard deviations above the frame mean. A
/// constant map yields an empty mask.
pub fn threshold_mask(sal: &SaliencyMap) -> Mask {
    let n = sal.values.len() as f64;
    let mean = sal.values.iter().sum::<f64>() / n;
    let std = (sal.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut mask = Mask::empty(sal.height, sal.width);
    if std > 0.0 {
        for (b, v) in mask.bits.iter_mut().zip(&sal.values) {
            *b = (v - mean) / std >= 2.0;
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SalientComponent {
    pub mask: Mask,
    pub pixel_count: usize,
    /// Inclusive `(row_min, col_min, row_max, col_max)`.
    pub bounding_box: (usize, usize, usize, usize),
}

/// Every 8-connected component of `mask`, in raster order of first pixel.
pub fn label_components(mask: &Mask) -> Vec<SalientComponent> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        let mut comp = Mask::empty(h, w);
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            comp.bits[i] = true;
            count += 1;
            bbox = (bbox.0.min(r), bbox.1.min(c), bbox.2.max(r), bbox.3.max(c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(SalientComponent {
            mask: comp,
            pixel_count: count,
            bounding_box: bbox,
        });
    }
    out
}

/// Smallest surviving component: 1% of the frame, rounded up.
pub fn min_component_pixels(height: usize, width: usize) -> usize {
    (height * width).div_ceil(100)
}

/// 8-connected components with at least [`min_component_pixels`] pixels.
pub fn connected_components(mask: &Mask) -> Vec<SalientComponent> {
    let min = min_component_pixels(mask.height, mask.width);
    label_components(mask).into_iter().filter(|c| c.pixel_count >= min).collect()
}

/// Salient pixels kept in place over a background of the frame's per-channel
/// mean colour.
pub fn masked_patch(obs: &Observation, mask: &Mask) -> Result<Observation> {
    if (mask.height, mask.width) != (HEIGHT, WIDTH) {
        return Err(Error::shape("masked_patch", &[HEIGHT, WIDTH], &[mask.height, mask.width]));
    }
    let px = obs.pixels();
    let mut mean = [0.0f64; CHANNELS];
    for (i, &p) in px.iter().enumerate() {
        mean[i % CHANNELS] += p as f64;
    }
    let fill = mean.map(|m| (m / (HEIGHT * WIDTH) as f64).round() as u8);
    let out = px
        .iter()
        .enumerate()
        .map(|(i, &p)| if mask.bits[i / CHANNELS] { p } else { fill[i % CHANNELS] })
        .collect();
    Ok(Observation::from_pixels(out).expect("same length"))
}

/// Fitted cluster centers in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel<T> {
    /// `[n_clusters, latent_dim]`
    pub centers: Tensor<T>,
}

impl<T: Scalar> ConceptModel<T> {
    pub fn new(centers: Tensor<T>) -> Result<Self> {
        if centers.shape().len() != 2 || centers.rows() == 0 || !centers.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "concept centers must be a finite non-empty matrix, got shape {:?}",
                centers.shape()
            )));
        }
        Ok(Self { centers })
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.centers.row_len()
    }

    /// `c_k = 1 − (d_k − min d)/(max d − min d)`; all ones when every center is
    /// equidistant.
    pub fn concept_vector<U: Scalar>(&self, z: &[U]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape("concept_vector", &[self.latent_dim()], &[z.len()]));
        }
        let d: Vec<f64> = (0..self.n_clusters())
            .map(|k| {
                self.centers
                    .row(k)
                    .iter()
                    .zip(z)
                    .map(|(c, x)| (c.as_f64() - x.as_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Ok(vec![1.0; d.len()]);
        }
        Ok(d.iter().map(|dk| 1.0 - (dk - lo) / (hi - lo)).collect())
    }

    /// Concept vectors for every row of `z` `[n, latent]`, as `[n, n_clusters]`.
    pub fn concept_matrix<U: Scalar>(&self, z: &Tensor<U>) -> Result<Tensor<f32>> {
        let mut out = Vec::with_capacity(z.rows() * self.n_clusters());
        for i in 0..z.rows() {
            out.extend(self.concept_vector(z.row(i))?.into_iter().map(|v| v as f32));
        }
        Tensor::from_vec(&[z.rows(), self.n_clusters()], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = ParamSet::new();
        params.add("concepts.centers", self.centers.clone());
        let meta = serde_json::json!({ "n_clusters": self.n_clusters(), "latent_dim": self.latent_dim() });
        checkpoint::save(path, &params, &meta.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, _) = checkpoint::load::<T>(path)?;
        let centers = params.by_name("concepts.centers").ok_or_else(|| Error::Format {
            path: path.into(),
            reason: "no concepts.centers tensor".into(),
        })?;
        Self::new(centers.clone())
    }
}

/// Source of one patch: episode index, step and component index within the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub episode: usize,
    pub t: usize,
    pub component: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub saliency: SaliencyConfig,
    /// Process every `frame_stride`-th frame of each episode.
    pub frame_stride: usize,
    /// Worker threads for per-frame extraction; does not affect the output.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            saliency: SaliencyConfig::default(),
            frame_stride: 1,
            jobs: 1,
        }
    }
}

/// Masked patches stored as frames: one episode per source episode that
/// produced any patch, plus the per-patch provenance in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub patches: Dataset,
    pub sources: Vec<PatchSource>,
}

const PATCH_SOURCES: &str = "patches.json";

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Observation> {
        self.patches.frames()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.patches.save(dir)?;
        let json = serde_json::to_string_pretty(&self.sources).expect("sources serialize");
        write_string(&dir.join(PATCH_SOURCES), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let patches = Dataset::load(dir)?;
        let path = dir.join(PATCH_SOURCES);
        let sources: Vec<PatchSource> = serde_json::from_str(&read_string(&path)?).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if sources.len() != patches.total_transitions() {
            return Err(Error::Format {
                path,
                reason: format!("{} sources for {} patches", sources.len(), patches.total_transitions()),
            });
        }
        Ok(Self { patches, sources })
    }
}

/// Saliency → threshold → components → masked patches for one frame.
pub fn frame_patches<P: ActionProbabilities + ?Sized>(
    policy: &P,
    obs: &Observation,
    config: &SaliencyConfig,
) -> Result<Vec<Observation>> {
    let sal = saliency_map(policy, obs, config)?;
    connected_components(&threshold_mask(&sal))
        .iter()
        .map(|c| masked_patch(obs, &c.mask))
        .collect()
}

pub fn build_patch_dataset<P: ActionProbabilities + Sync + ?Sized>(
    dataset: &Dataset,
    policy: &P,
    config: &PatchConfig,
) -> Result<PatchDataset> {
    if dataset.total_transitions() == 0 {
        return Err(Error::InvalidArgument("patch extraction needs a non-empty dataset".into()));
    }
    let stride = config.frame_stride.max(1);
    let work: Vec<(usize, usize)> = dataset
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).step_by(stride).map(move |t| (e, t)))
        .collect();
    let extract = |items: &[(usize, usize)]| -> Result<Vec<Vec<Observation>>> {
        items
            .iter()
            .map(|&(e, t)| frame_patches(policy, &dataset.episodes[e].transitions[t].s, &config.saliency))
            .collect()
    };
    let jobs = config.jobs.max(1);
    let per_frame: Vec<Vec<Observation>> = if jobs == 1 {
        extract(&work)?
    } else {
        let chunk = work.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = work.chunks(chunk.max(1)).map(|c| s.spawn(move || extract(c))).collect();
            let mut all = Vec::with_capacity(work.len());
            for h in handles {
                all.extend(h.join().expect("patch worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut episodes: Vec<Episode> = Vec::new();
    let mut sources = Vec::new();
    let mut current: Option<usize> = None;
    for (&(e, t), patches) in work.iter().zip(per_frame) {
        for (component, patch) in patches.into_iter().enumerate() {
            if current != Some(e) {
                episodes.push(Episode {
                    info: dataset.episodes[e].info.clone(),
                    transitions: Vec::new(),
                });
                current = Some(e);
            }
            episodes.last_mut().expect("just pushed").transitions.push(Transition {
                s: patch,
                a: Action::COAST,
                r: 0.0,
                d: false,
            });
            sources.push(PatchSource { episode: e, t, component });
        }
    }
    let mut patches = Dataset::new(episodes);
    patches.provenance = serde_json::json!({ "patches": config, "source_provenance": dataset.provenance });
    Ok(PatchDataset { patches, sources })
}

/// Encodes every patch to its mean latent and clusters the latents.
pub fn fit_concepts<T: Scalar>(
    patches: &PatchDataset,
    vae: &Vae<T>,
    config: &KMeansConfig,
) -> Result<(ConceptModel<T>, KMeansFit)> {
    if patches.len() < config.n_clusters {
        return Err(Error::InvalidArgument(format!(
            "{} patches cannot form {} clusters",
            patches.len(),
            config.n_clusters
        )));
    }
    let z = vae.encode_means(patches.frames())?;
    let points: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    let fit = kmeans(&points, config)?;
    let flat: Vec<T> = fit.centers.iter().flatten().map(|&v| T::lit(v)).collect();
    let model = ConceptModel::new(Tensor::from_vec(&[fit.centers.len(), vae.latent_dim()], flat)?)?;
    Ok((model, fit))
}

/// Writes a grid of patches as a PNG: one row per cluster, up to `per_row`
/// examples each, separated by a 2-pixel border.
pub fn write_contact_sheet(path: &Path, rows: &[Vec<&Observation>], per_row: usize) -> Result<()> {
    let gap = 2;
    let cols = per_row.max(1);
    let width = cols * (WIDTH + gap) + gap;
    let height = rows.len().max(1) * (HEIGHT + gap) + gap;
    let mut rgb = vec![32u8; width * height * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, obs) in row.iter().take(cols).enumerate() {
            let (oy, ox) = (gap + ri * (HEIGHT + gap), gap + ci * (WIDTH + gap));
            for r in 0..HEIGHT {
                let dst = ((oy + r) * width + ox) * 3;
                let src = r * WIDTH * CHANNELS;
                rgb[dst..dst + WIDTH * 3].copy_from_slice(&obs.pixels()[src..src + WIDTH * CHANNELS]);
            }
        }
    }
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let png_error = |e: png::EncodingError| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(png_error)?;
        writer.write_image_data(&rgb).map_err(png_error)?;
    }
    write_atomic(path, &bytes)
}
