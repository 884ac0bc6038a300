//! One function per subcommand. Each validates everything it needs before
//! computing anything.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use featdenoise::analyze::{content_separation, similarity_sweep, SimilarityReport};
use featdenoise::backbone::{load_encoder, random_weights, save_weights, Arch, FrozenEncoder, Variant};
use featdenoise::checkpoint::Checkpoint;
use featdenoise::dataset::Dataset;
use featdenoise::eval::{format_table, run_benchmark, write_records_csv, Passthrough, Restorer};
use featdenoise::model::Denoiser;
use featdenoise::train::Trainer;
use featdenoise::Image;

use crate::config::{EncoderSection, LoadedConfig};
use crate::error::{validation, CliError};

pub const SNAPSHOT: &str = "config.toml";
pub const BENCHMARK_CSV: &str = "benchmark.csv";
pub const BENCHMARK_TABLE: &str = "benchmark.txt";

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime(featdenoise::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare_out(cfg: &LoadedConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let snap = out.join(SNAPSHOT);
    std::fs::write(&snap, cfg.config.snapshot()).map_err(|e| io(&snap, e))?;
    Ok(out)
}

fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    section
        .as_ref()
        .ok_or_else(|| CliError::Validation(format!("`{name}`: section is required for this command")))
}

/// Variant named in the section, checked against `expected` when given.
fn section_variant(section: &EncoderSection, expected: Option<Variant>, field: &str) -> Result<Variant, CliError> {
    match (section.variant, expected) {
        (Some(v), Some(e)) if v != e => Err(CliError::Validation(format!(
            "`{field}.variant`: {v} does not match the model's backbone {e}"
        ))),
        (Some(v), _) => Ok(v),
        (None, Some(e)) => Ok(e),
        (None, None) => Ok(Variant::Rn50),
    }
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<Image>, CliError> {
    Ok(paths.iter().map(Image::load).collect::<Result<Vec<_>, _>>()?)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn train(cfg: &LoadedConfig) -> Result<(), CliError> {
    let c = &cfg.config;
    let resume = c.resume.as_ref().map(|p| cfg.existing("resume", p)).transpose()?;
    let ckpt = resume.as_ref().map(Checkpoint::load).transpose().map_err(validation)?;
    let model_cfg = match &ckpt {
        Some(k) => k.meta.model.clone(),
        None => c.model.clone().unwrap_or_default(),
    };
    model_cfg.validate().map_err(validation)?;
    let train_cfg = match &ckpt {
        Some(k) => {
            let saved = k
                .meta
                .training
                .as_ref()
                .ok_or_else(|| CliError::Validation("`resume`: checkpoint carries no training state".into()))?;
            if c.train.as_ref().is_some_and(|t| *t != saved.config) {
                return Err(CliError::Validation(
                    "`train`: differs from the configuration stored in the resumed checkpoint".into(),
                ));
            }
            saved.config.clone()
        }
        None => require(&c.train, "train")?.clone(),
    };
    train_cfg.validate().map_err(validation)?;
    let enc_section = cfg.encoder_section()?;
    let variant = section_variant(enc_section, Some(model_cfg.backbone_variant), "encoder")?;
    let weights = cfg.weights("encoder", enc_section, variant)?;
    let data = require(&c.data, "data")?;
    let data_path = data
        .train
        .as_ref()
        .ok_or_else(|| CliError::Validation("`data.train`: required for training".into()))?;
    let data_path = cfg.existing("data.train", data_path)?;
    let out = cfg.out_dir()?;

    let mut dataset = Dataset::open(&data_path, data.lenient)?;
    for img in &mut dataset.images {
        if img.channels() != model_cfg.channels_in {
            *img = if model_cfg.channels_in == 1 { img.to_gray() } else { img.to_rgb() };
        }
    }
    let encoder = load_encoder(&weights, variant, model_cfg.levels())?;
    prepare_out(cfg)?;
    let trainer = match &ckpt {
        Some(k) => {
            log::info!("resuming from iteration {}", k.meta.iteration);
            Trainer::resume(k, encoder, &dataset, Some(&out))?
        }
        None => {
            let model = Denoiser::new(encoder, model_cfg, c.seed)?;
            let (frozen, learnable) = model.count_parameters();
            log::info!("parameters: {frozen} frozen, {learnable} learnable");
            Trainer::new(model, &dataset, train_cfg, Some(&out))?
        }
    };
    let outcome = trainer.finish()?;
    log::info!(
        "done: initial loss {:.5}, final running loss {:.5}, checkpoint sha256 {}",
        outcome.initial_loss,
        outcome.final_running_loss,
        outcome.checkpoint.digest()?
    );
    Ok(())
}

/// Loads a checkpoint and the encoder it was trained on.
fn restore(cfg: &LoadedConfig, ckpt_path: &Path) -> Result<(Denoiser, String), CliError> {
    let ckpt = Checkpoint::load(ckpt_path).map_err(validation)?;
    let enc_section = cfg.encoder_section()?;
    let variant = section_variant(enc_section, Some(ckpt.meta.model.backbone_variant), "encoder")?;
    let weights = cfg.weights("encoder", enc_section, variant)?;
    let encoder = load_encoder(&weights, variant, ckpt.meta.model.levels())?;
    let digest = ckpt.digest()?;
    let id = format!("{}@{}", file_stem(ckpt_path), &digest[..12]);
    Ok((ckpt.restore(encoder)?, id))
}

pub fn denoise(cfg: &LoadedConfig) -> Result<(), CliError> {
    let section = require(&cfg.config.denoise, "denoise")?;
    let ckpt = section
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Validation("`denoise.checkpoint`: required".into()))?;
    let ckpt = cfg.existing("denoise.checkpoint", ckpt)?;
    if section.inputs.is_empty() {
        return Err(CliError::Validation("`denoise.inputs`: at least one image is required".into()));
    }
    let inputs = section
        .inputs
        .iter()
        .map(|p| cfg.existing("denoise.inputs", p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut stems = BTreeSet::new();
    for p in &inputs {
        if !stems.insert(file_stem(p)) {
            return Err(CliError::Validation(format!(
                "`denoise.inputs`: two inputs would both be written as {}.png",
                file_stem(p)
            )));
        }
    }
    cfg.out_dir()?;
    let (model, _) = restore(cfg, &ckpt)?;
    let out = prepare_out(cfg)?;
    for p in &inputs {
        let img = Image::load(p)?;
        let restored = model.forward(&img, 0)?;
        let dst = out.join(format!("{}.png", file_stem(p)));
        restored.save_png(&dst)?;
        log::info!("{} -> {}", p.display(), dst.display());
    }
    Ok(())
}

pub fn analyze(cfg: &LoadedConfig) -> Result<(), CliError> {
    let section = require(&cfg.config.analyze, "analyze")?;
    if section.images.is_empty() {
        return Err(CliError::Validation("`analyze.images`: at least one image is required".into()));
    }
    if section.noise.is_empty() && section.separation.is_none() {
        return Err(CliError::Validation(
            "`analyze.noise`: give at least one noise spec or a `separation` study".into(),
        ));
    }
    if section.seeds.is_empty() {
        return Err(CliError::Validation("`analyze.seeds`: at least one seed is required".into()));
    }
    if let Some(sep) = &section.separation {
        if sep.draws < 2 {
            return Err(CliError::Validation(format!(
                "`analyze.separation.draws`: needs at least 2, got {}",
                sep.draws
            )));
        }
        if section.images.len() < 2 {
            return Err(CliError::Validation("`analyze.images`: separation needs at least 2 images".into()));
        }
    }
    let images = section
        .images
        .iter()
        .map(|p| cfg.existing("analyze.images", p))
        .collect::<Result<Vec<_>, _>>()?;
    let sections: Vec<(String, EncoderSection)> = if section.encoders.is_empty() {
        vec![("encoder".into(), cfg.encoder_section()?.clone())]
    } else {
        section
            .encoders
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("analyze.encoders[{i}]"), s.clone()))
            .collect()
    };
    let mut encoders = Vec::new();
    let mut variants = std::collections::HashSet::new();
    for (field, s) in &sections {
        let variant = section_variant(s, None, field)?;
        if !variants.insert(variant) {
            return Err(CliError::Validation(format!("`{field}`: variant {variant} listed twice")));
        }
        encoders.push((variant, cfg.weights(field, s, variant)?));
    }
    cfg.out_dir()?;

    let pictures: Vec<Image> = load_images(&images)?.into_iter().map(|i| i.to_rgb()).collect();
    let out = prepare_out(cfg)?;
    for (variant, weights) in encoders {
        let enc: FrozenEncoder = load_encoder(&weights, variant, 4)?;
        let tag = variant.as_str();
        if !section.noise.is_empty() {
            let mut report = SimilarityReport::default();
            for (img, path) in pictures.iter().zip(&images) {
                report.extend(similarity_sweep(&enc, img, &file_stem(path), &section.noise, &section.seeds)?);
            }
            report.write_csv(out.join(format!("similarity_{tag}.csv")))?;
        }
        if let Some(sep) = &section.separation {
            let rep = content_separation(&enc, &pictures, &sep.noise, sep.draws, cfg.config.seed, sep.embed_dims)?;
            for row in &rep.rows {
                log::info!("{tag} scale {}: separation ratio {:.3}", row.scale, row.ratio);
            }
            rep.write_csv(out.join(format!("separation_{tag}.csv")))?;
            if sep.embed_dims > 0 {
                rep.write_embeddings_csv(out.join(format!("embeddings_{tag}.csv")))?;
            }
        }
    }
    Ok(())
}

pub fn benchmark(cfg: &LoadedConfig) -> Result<(), CliError> {
    let section = require(&cfg.config.benchmark, "benchmark")?;
    if section.datasets.is_empty() {
        return Err(CliError::Validation("`benchmark.datasets`: at least one dataset is required".into()));
    }
    if section.noise.is_empty() {
        return Err(CliError::Validation("`benchmark.noise`: at least one noise spec is required".into()));
    }
    let ckpt = match (&section.checkpoint, section.passthrough) {
        (Some(_), true) => {
            return Err(CliError::Validation(
                "`benchmark.passthrough`: cannot be combined with `benchmark.checkpoint`".into(),
            ))
        }
        (None, false) => {
            return Err(CliError::Validation(
                "`benchmark.checkpoint`: required unless `benchmark.passthrough` is set".into(),
            ))
        }
        (Some(p), false) => Some(cfg.existing("benchmark.checkpoint", p)?),
        (None, true) => None,
    };
    let manifests = section
        .datasets
        .iter()
        .map(|p| cfg.existing("benchmark.datasets", p))
        .collect::<Result<Vec<_>, _>>()?;
    cfg.out_dir()?;
    let datasets = manifests
        .iter()
        .map(|m| Dataset::open(m, section.lenient))
        .collect::<Result<Vec<_>, _>>()?;
    for ds in &datasets {
        if !ds.skipped.is_empty() {
            log::warn!("dataset `{}`: skipped {} unreadable file(s)", ds.id, ds.skipped.len());
        }
    }
    let (restorer, id): (Box<dyn Restorer>, String) = match &ckpt {
        Some(p) => {
            let (model, id) = restore(cfg, p)?;
            (Box::new(model), id)
        }
        None => (Box::new(Passthrough), "passthrough".into()),
    };
    let out = prepare_out(cfg)?;
    let records = run_benchmark(restorer.as_ref(), &id, &datasets, &section.noise, cfg.config.seed)?;
    write_records_csv(&records, out.join(BENCHMARK_CSV))?;
    let table = format_table(&records);
    let path = out.join(BENCHMARK_TABLE);
    std::fs::write(&path, &table).map_err(|e| io(&path, e))?;
    print!("{table}");
    Ok(())
}

/// Writes randomly initialized encoder weights in the published layout.
pub fn init_weights(variant: Variant, arch: Option<Arch>, max_level: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let arch = match (variant.arch(), arch) {
        (Some(a), None) => a,
        (None, Some(a)) => a,
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(format!(
                "`--width`/`--layers` only apply to custom encoders, not {variant}"
            )))
        }
        (None, None) => {
            return Err(CliError::Validation("custom encoders need `--width` and `--layers`".into()));
        }
    };
    if !(4..=5).contains(&max_level) {
        return Err(CliError::Validation(format!("`--max-level`: must be 4 or 5, got {max_level}")));
    }
    let map = random_weights(arch, max_level, seed)?;
    save_weights(&map, out)?;
    log::info!("wrote {} ({} tensors)", out.display(), map.len());
    Ok(())
}
