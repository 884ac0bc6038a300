//! Feature-robustness analysis: clean/noisy similarity per encoder scale
//! (cosine and linear CKA) and a content-separation statistic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, FeaturePyramid, FrozenEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::NoiseSpec;
use crate::rng::{derive_seed, mix};
use crate::tensor::{Element, Tensor};

/// Seeds averaged per noise spec when the caller has no preference.
pub const DEFAULT_SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

/// Scales covered by the analyses.
pub const ANALYSIS_LEVELS: usize = 4;

fn check_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Cosine of the angle between the fully flattened maps.
pub fn cosine_similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same_shape(a, b)?;
    cosine_flat(a.data(), b.data())
}

fn cosine_flat<T: Element>(a: &[T], b: &[T]) -> Result<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::param("features", "zero-norm input; cosine similarity is undefined"));
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Column-centered `channels × positions` matrix (row-major) of a map.
fn centered_channels<T: Element>(t: &Tensor<T>) -> (Vec<f64>, usize, usize) {
    let [n, c, h, w] = t.shape();
    let p = n * h * w;
    let mut m = vec![0.0f64; c * p];
    for ci in 0..c {
        let row = &mut m[ci * p..(ci + 1) * p];
        for ni in 0..n {
            for (dst, v) in row[ni * h * w..(ni + 1) * h * w].iter_mut().zip(t.plane(ni, ci)) {
                *dst = v.f64();
            }
        }
        let mean = row.iter().sum::<f64>() / p as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    (m, c, p)
}

/// `C = A·B` for strided row/column layouts; `A` is `m×k`, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn matmul(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    // SAFETY: strides describe in-bounds views of `a` and `b`, and `c` is a
    // dense m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA with spatial positions as samples and channels as features.
/// The maps must share batch and spatial size; channel counts may differ.
pub fn cka_similarity<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let [na, _, ha, wa] = a.shape();
    let [nb, _, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "CKA needs equal spatial sizes: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.data() == b.data() && a.shape() == b.shape() {
        let (x, _, _) = centered_channels(a);
        if frob_sq(&x) == 0.0 {
            return Err(Error::param("features", "constant input; CKA is undefined"));
        }
        return Ok(1.0);
    }
    let (x, cx, p) = centered_channels(a);
    let (y, cy, _) = centered_channels(b);
    if frob_sq(&x) == 0.0 || frob_sq(&y) == 0.0 {
        return Err(Error::param("features", "constant input; CKA is undefined"));
    }
    let pi = p as isize;
    let (num, den) = if p < cx + cy {
        // Sample-space Gram matrices: ‖YᵀX‖² = ⟨XXᵀ, YYᵀ⟩.
        let kx = matmul(p, cx, p, &x, 1, pi, &x, pi, 1);
        let ky = matmul(p, cy, p, &y, 1, pi, &y, pi, 1);
        let num: f64 = kx.iter().zip(&ky).map(|(u, v)| u * v).sum();
        (num, frob_sq(&kx).sqrt() * frob_sq(&ky).sqrt())
    } else {
        let yx = matmul(cy, p, cx, &y, pi, 1, &x, 1, pi);
        let xx = matmul(cx, p, cx, &x, pi, 1, &x, 1, pi);
        let yy = matmul(cy, p, cy, &y, pi, 1, &y, 1, pi);
        (frob_sq(&yx), frob_sq(&xx).sqrt() * frob_sq(&yy).sqrt())
    };
    Ok((num / den).clamp(0.0, 1.0))
}

/// One CSV row of a similarity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub variant: String,
    pub image: String,
    pub kind: String,
    /// Noise level in the kind's own convention.
    pub level: f64,
    pub scale: usize,
    pub cosine: f64,
    pub cka: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityReport {
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<SimilarityReport> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SimilarityRow>, _>>()?;
        Ok(SimilarityReport { rows })
    }

    /// Rows for one noise spec label, ordered by scale.
    pub fn cosines(&self, kind: &str, level: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind && r.level == level)
            .map(|r| r.cosine)
            .collect()
    }

    pub fn extend(&mut self, other: SimilarityReport) {
        self.rows.extend(other.rows);
    }
}

/// Corrupts `clean` with each spec under every seed and records the per-scale
/// similarity between clean and noisy features, averaged over seeds.
pub fn similarity_sweep(
    enc: &FrozenEncoder,
    clean: &Image,
    image_id: &str,
    specs: &[NoiseSpec],
    seeds: &[u64],
) -> Result<SimilarityReport> {
    if specs.is_empty() {
        return Err(Error::param("specs", "at least one noise spec is required"));
    }
    if seeds.is_empty() {
        return Err(Error::param("seeds", "at least one seed is required"));
    }
    let levels = ANALYSIS_LEVELS.min(enc.max_level());
    let reference: FeaturePyramid = extract_features(enc, clean, levels)?;
    let mut report = SimilarityReport::default();
    for spec in specs {
        let mut cos = vec![0.0f64; levels];
        let mut cka = vec![0.0f64; levels];
        for &s in seeds {
            let noisy = spec.with_seed(derive_seed(spec.seed(), &[s])).apply(clean)?;
            let feats = extract_features(enc, &noisy, levels)?;
            for i in 1..=levels {
                cos[i - 1] += cosine_similarity(reference.level(i), feats.level(i))?;
                cka[i - 1] += cka_similarity(reference.level(i), feats.level(i))?;
            }
        }
        let k = seeds.len() as f64;
        for i in 0..levels {
            report.rows.push(SimilarityRow {
                variant: enc.variant().as_str().to_string(),
                image: image_id.to_string(),
                kind: spec.kind().name().to_string(),
                level: spec.kind().level(),
                scale: i + 1,
                cosine: cos[i] / k,
                cka: cka[i] / k,
            });
        }
    }
    Ok(report)
}

/// Per-scale outcome of [`content_separation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub scale: usize,
    /// Mean cosine distance between draws of different images.
    pub inter: f64,
    /// Mean cosine distance between draws of the same image.
    pub intra: f64,
    pub ratio: f64,
}

/// Low-dimensional projection of one noisy draw at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub image: usize,
    pub draw: usize,
    pub scale: usize,
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub rows: Vec<SeparationRow>,
    pub embeddings: Vec<Embedding>,
}

impl SeparationReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ratio).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `image,draw,scale,p0,…` rows for external embedding tools.
    pub fn write_embeddings_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dims = self.embeddings.first().map_or(0, |e| e.coords.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image".to_string(), "draw".into(), "scale".into()];
        header.extend((0..dims).map(|d| format!("p{d}")));
        w.write_record(&header)?;
        for e in &self.embeddings {
            let mut rec = vec![e.image.to_string(), e.draw.to_string(), e.scale.to_string()];
            rec.extend(e.coords.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Signed feature hashing into `dims` buckets; preserves inner products in
/// expectation and costs one pass over the features.
fn project(features: &[f64], dims: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0f64; dims];
    for (i, v) in features.iter().enumerate() {
        let h = mix(seed ^ mix(i as u64));
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        out[(h % dims as u64) as usize] += sign * v;
    }
    out
}

/// Measures how well encoder features separate image content from noise.
///
/// Each image is corrupted `draws` times. Per scale, the ratio of the mean
/// cosine distance across images to the mean distance across draws of the
/// same image is reported. Draw `d` of image `j` uses noise seed
/// `derive_seed(seed, [j, d])`. Every draw is also projected to
/// `embed_dims` coordinates for plotting.
pub fn content_separation(
    enc: &FrozenEncoder,
    images: &[Image],
    spec: &NoiseSpec,
    draws: usize,
    seed: u64,
    embed_dims: usize,
) -> Result<SeparationReport> {
    if images.len() < 2 {
        return Err(Error::param("images", format!("need at least 2 images, got {}", images.len())));
    }
    if draws < 2 {
        return Err(Error::param("draws", format!("need at least 2 noise draws, got {draws}")));
    }
    if images.iter().any(|im| !im.same_shape(&images[0])) {
        return Err(Error::Shape("content separation needs images of one size".into()));
    }
    let levels = ANALYSIS_LEVELS.min(enc.max_level());
    // Sums of unit-normalized features per image and scale: the mean pairwise
    // cosine within and across groups follows from their norms and dots.
    let mut sums: Vec<Vec<Vec<f64>>> = Vec::with_capacity(images.len());
    let mut embeddings = Vec::new();
    for (j, img) in images.iter().enumerate() {
        let mut per_scale: Vec<Vec<f64>> = Vec::with_capacity(levels);
        for d in 0..draws {
            let noisy = spec.with_seed(derive_seed(seed, &[j as u64, d as u64])).apply(img)?;
            let feats = extract_features(enc, &noisy, levels)?;
            for i in 1..=levels {
                let f: Vec<f64> = feats.level(i).data().iter().map(|v| v.f64()).collect();
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::param("features", format!("all-zero features at scale {i}")));
                }
                let unit: Vec<f64> = f.iter().map(|v| v / norm).collect();
                if embed_dims > 0 {
                    embeddings.push(Embedding {
                        image: j,
                        draw: d,
                        scale: i,
                        coords: project(&unit, embed_dims, derive_seed(seed, &[0xe3b, i as u64])),
                    });
                }
                if d == 0 {
                    per_scale.push(unit);
                } else {
                    per_scale[i - 1].iter_mut().zip(&unit).for_each(|(s, u)| *s += u);
                }
            }
        }
        sums.push(per_scale);
    }
    let m = images.len() as f64;
    let k = draws as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rows = Vec::with_capacity(levels);
    for i in 0..levels {
        // Σ over unordered same-image pairs of u·v, per image: (‖s‖² − k)/2.
        let intra_sim: f64 = sums.iter().map(|s| (dot(&s[i], &s[i]) - k) / 2.0).sum();
        let intra_pairs = m * k * (k - 1.0) / 2.0;
        let total: Vec<f64> = (0..sums[0][i].len())
            .map(|t| sums.iter().map(|s| s[i][t]).sum())
            .collect();
        let all_sim = (dot(&total, &total) - m * k) / 2.0;
        let inter_sim = all_sim - intra_sim;
        let inter_pairs = m * (m - 1.0) / 2.0 * k * k;
        let intra = 1.0 - intra_sim / intra_pairs;
        let inter = 1.0 - inter_sim / inter_pairs;
        let ratio = if intra > 0.0 { inter / intra } else { f64::INFINITY };
        rows.push(SeparationRow {
            scale: i + 1,
            inter,
            intra,
            ratio,
        });
    }
    Ok(SeparationReport { rows, embeddings })
}
