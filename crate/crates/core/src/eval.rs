//! Image-quality metrics and the benchmark harness.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Denoiser, Mode};
use crate::noise::NoiseSpec;
use crate::rng::{derive_seed, label};

/// Side of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `db` is `+∞` exactly when the inputs
/// are identical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
}

impl Psnr {
    pub fn is_identity(self) -> bool {
        self.db == f64::INFINITY
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over every sample of both images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    check_pair(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::param("peak", format!("must be > 0, got {peak}")));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.data().len() as f64;
    let db = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    Ok(Psnr { db })
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable weighted sums over every fully contained window.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity: 11×11 Gaussian window (σ 1.5) over the valid
/// region, constants K1 = 0.01, K2 = 0.03 scaled by the range's peak,
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    if a.range() != b.range() {
        return Err(Error::Shape(format!(
            "images use different ranges: {} vs {}",
            a.range().as_str(),
            b.range().as_str()
        )));
    }
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let peak = a.range().peak();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let taps = ssim_taps();
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &Image| -> Vec<f64> { (0..h * w).map(|p| img.data()[p * c + ch] as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let myy = filter_valid(&prod(&y, &y), h, w, &taps);
        let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Anything that maps a noisy image to a restored one of the same shape.
pub trait Restorer {
    fn restore(&self, noisy: &Image) -> Result<Image>;
}

impl Restorer for Denoiser {
    fn restore(&self, noisy: &Image) -> Result<Image> {
        if self.mode() != Mode::Eval {
            return Err(Error::param("mode", "benchmarks run the denoiser in eval mode"));
        }
        self.forward(noisy, 0)
    }
}

/// Returns its input; scores the noisy images themselves.
#[derive(Clone, Copy, Debug, Default)]
pub struct Passthrough;

impl Restorer for Passthrough {
    fn restore(&self, noisy: &Image) -> Result<Image> {
        Ok(noisy.clone())
    }
}

/// Mean quality of one restorer on one dataset under one noise spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub noise: String,
    pub psnr: f64,
    /// Set when at least one image was restored exactly (PSNR `+∞`).
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub images: usize,
    /// Unreadable files skipped while loading the dataset.
    pub skipped: usize,
    pub checkpoint: String,
}

/// Noise seed of image `index` of dataset `id` under `spec`.
pub fn corruption_seed(seed: u64, spec: &NoiseSpec, dataset_id: &str, index: usize) -> u64 {
    derive_seed(seed, &[spec.seed(), label(dataset_id), index as u64])
}

/// Corrupts every image of every dataset with every spec, restores it and
/// averages PSNR/SSIM against the clean image. Records are ordered by
/// dataset, then spec.
pub fn run_benchmark(
    restorer: &dyn Restorer,
    checkpoint_id: &str,
    datasets: &[Dataset],
    specs: &[NoiseSpec],
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    if specs.is_empty() {
        return Err(Error::param("specs", "at least one noise spec is required"));
    }
    let mut records = Vec::with_capacity(datasets.len() * specs.len());
    for ds in datasets {
        if ds.is_empty() {
            return Err(Error::Dataset(format!("dataset `{}` is empty (empty dataset)", ds.id)));
        }
        for spec in specs {
            let (mut p_sum, mut s_sum, mut infinite) = (0.0, 0.0, false);
            for (i, clean) in ds.images.iter().enumerate() {
                let noisy = spec.with_seed(corruption_seed(seed, spec, &ds.id, i)).apply(clean)?;
                let restored = restorer.restore(&noisy)?;
                let p = psnr(&restored, clean, clean.range().peak())?;
                infinite |= p.is_identity();
                p_sum += p.db;
                s_sum += ssim(&restored, clean)?;
                log::debug!("{} {} {}: {:.3} dB", ds.id, spec, ds.names[i], p.db);
            }
            let n = ds.len() as f64;
            records.push(EvalRecord {
                dataset: ds.id.clone(),
                noise: spec.label(),
                psnr: p_sum / n,
                psnr_infinite: infinite,
                ssim: s_sum / n,
                images: ds.len(),
                skipped: ds.skipped.len(),
                checkpoint: checkpoint_id.to_string(),
            });
        }
    }
    Ok(records)
}

pub fn write_records_csv(records: &[EvalRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?)
}

/// Plain-text table: one row per noise spec, one `PSNR/SSIM` column per
/// dataset.
pub fn format_table(records: &[EvalRecord]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut noises: Vec<&str> = Vec::new();
    for r in records {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !noises.contains(&r.noise.as_str()) {
            noises.push(&r.noise);
        }
    }
    let cell = |noise: &str, ds: &str| -> String {
        records
            .iter()
            .find(|r| r.noise == noise && r.dataset == ds)
            .map_or_else(|| "-".into(), |r| format!("{:.2}/{:.3}", r.psnr, r.ssim))
    };
    let mut header = vec!["noise".to_string()];
    header.extend(datasets.iter().map(|d| d.to_string()));
    let mut rows = vec![header];
    for n in &noises {
        let mut row = vec![n.to_string()];
        row.extend(datasets.iter().map(|d| cell(n, d)));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (v, &w))| if j == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}
