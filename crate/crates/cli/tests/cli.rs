use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featdenoise::{scenes, RangeTag};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_featdenoise");

fn run(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("FEATDENOISE_WEIGHTS_DIR").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Temporary workspace with tiny encoder weights, a few scenes and a manifest.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let weights = dir.path().join("weights");
        std::fs::create_dir_all(&weights).unwrap();
        let o = run(
            &[
                "init-weights",
                "--variant",
                "custom",
                "--width",
                "8",
                "--layers",
                "1,1,1,1",
                "--seed",
                "3",
                "--out",
                weights.join("custom.safetensors").to_str().unwrap(),
            ],
            &[],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let data = dir.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        let mut manifest = String::from("dataset=scenes\nrange=byte\n");
        for i in 0..4 {
            let name = format!("s{i}.png");
            scenes::scene(40, 36, 3, i).save_png(data.join(&name)).unwrap();
            manifest.push_str(&format!("{name}\n"));
        }
        std::fs::write(data.join("scenes.txt"), manifest).unwrap();
        scenes::scene(40, 36, 1, 9).save_png(dir.path().join("gray.png")).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn cli(&self, cmd: &str, config: &Path, out: &str) -> Output {
        let out = self.path(out);
        run(
            &[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
            &[],
        )
    }
}

const ENCODER: &str = "[encoder]\nvariant = \"custom\"\nweight_path = \"weights/custom.safetensors\"\n";

const TRAIN: &str = "seed = 5
[model]
backbone_variant = \"custom\"
decoder_widths = [4, 4, 4, 4, 4]
[train]
iterations = 3
batch_size = 2
patch_size = 32
checkpoint_every = 2
log_every = 1
train_noise = { kind = \"gaussian\", sigma = 15.0 }
[data]
train = \"data\"
";

fn trained(f: &Fixture, out: &str) -> PathBuf {
    let cfg = f.config("train.toml", &format!("{TRAIN}{ENCODER}"));
    let o = f.cli("train", &cfg, out);
    assert!(o.status.success(), "{}", stderr(&o));
    f.path(out).join("checkpoint.safetensors")
}

#[test]
fn train_writes_checkpoint_log_and_snapshot_reproducibly() {
    let f = Fixture::new();
    let a = trained(&f, "run_a");
    let b = trained(&f, "run_b");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(f.path("run_a/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");
    assert!(f.path("run_a/checkpoints").is_dir());
    let snap = std::fs::read_to_string(f.path("run_a/config.toml")).unwrap();
    assert!(snap.contains("seed = 5"), "{snap}");
    assert!(!snap.contains("run_a"), "{snap}");
}

#[test]
fn missing_weights_are_a_validation_error_naming_the_field() {
    let f = Fixture::new();
    let cfg = f.config("train.toml", &format!("{TRAIN}[encoder]\nvariant = \"custom\"\n"));
    let o = f.cli("train", &cfg, "run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("encoder.weight_path"), "{}", stderr(&o));
    assert!(!f.path("run").exists());

    // The environment directory fills in the weights by variant name.
    let weights = f.path("weights");
    let out = f.path("env_run");
    let o = run(
        &["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("FEATDENOISE_WEIGHTS_DIR", &weights)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn bad_configs_and_flags_exit_with_one() {
    let f = Fixture::new();
    let cfg = f.config("typo.toml", "sed = 1\n");
    let o = f.cli("train", &cfg, "run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sed"), "{}", stderr(&o));
    assert_eq!(run(&["train"], &[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(run(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn seed_flag_overrides_config() {
    let f = Fixture::new();
    let a = trained(&f, "run_a");
    let cfg = f.path("train.toml");
    let out = f.path("run_b");
    let o = run(
        &["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "6"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(std::fs::read(a).unwrap(), std::fs::read(out.join("checkpoint.safetensors")).unwrap());
    let snap = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snap.contains("seed = 6"), "{snap}");
}

#[test]
fn denoise_keeps_shape_and_is_deterministic() {
    let f = Fixture::new();
    let ckpt = trained(&f, "run");
    let body = format!(
        "{ENCODER}[denoise]\ncheckpoint = \"{}\"\ninputs = [\"data/s0.png\", \"data/s1.png\"]\n",
        ckpt.display()
    );
    let cfg = f.config("denoise.toml", &body);
    for out in ["den_a", "den_b"] {
        let o = f.cli("denoise", &cfg, out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["s0.png", "s1.png"] {
        let img = featdenoise::Image::load(f.path("den_a").join(name)).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (40, 36, 3));
        assert_eq!(
            std::fs::read(f.path("den_a").join(name)).unwrap(),
            std::fs::read(f.path("den_b").join(name)).unwrap()
        );
    }
}

#[test]
fn denoise_rejects_gray_input_on_a_color_model() {
    let f = Fixture::new();
    let ckpt = trained(&f, "run");
    let body = format!("{ENCODER}[denoise]\ncheckpoint = \"{}\"\ninputs = [\"gray.png\"]\n", ckpt.display());
    let cfg = f.config("denoise.toml", &body);
    let o = f.cli("denoise", &cfg, "den");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("adapter"), "{}", stderr(&o));

    let body = format!(
        "{ENCODER}[denoise]\ncheckpoint = \"{}\"\ninputs = [\"data/s0.png\", \"other/s0.png\"]\n",
        ckpt.display()
    );
    std::fs::create_dir_all(f.path("other")).unwrap();
    std::fs::copy(f.path("data/s0.png"), f.path("other/s0.png")).unwrap();
    let cfg = f.config("dup.toml", &body);
    let o = f.cli("denoise", &cfg, "dup");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_without_noise_reports_perfect_similarity() {
    let f = Fixture::new();
    std::fs::copy(f.path("weights/custom.safetensors"), f.path("weights/other.safetensors")).unwrap();
    let body = "[analyze]
images = [\"data/s0.png\", \"data/s1.png\", \"data/s2.png\"]
noise = [{ kind = \"gaussian\", sigma = 0.0 }]
seeds = [0, 1]
encoders = [{ variant = \"custom\", weight_path = \"weights/custom.safetensors\" }]
[analyze.separation]
noise = { kind = \"gaussian\", sigma = 25.0 }
draws = 3
embed_dims = 2
";
    let cfg = f.config("analyze.toml", body);
    let o = f.cli("analyze", &cfg, "an");
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(f.path("an/similarity_custom.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let cos = headers.iter().position(|h| h == "cosine").unwrap();
    let cka = headers.iter().position(|h| h == "cka").unwrap();
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 4);
    for r in &rows {
        assert_eq!(r[cos].parse::<f64>().unwrap(), 1.0);
        assert!((r[cka].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
    assert!(f.path("an/separation_custom.csv").is_file());
    assert!(f.path("an/embeddings_custom.csv").is_file());

    let listed_twice = body.replace(
        "encoders = [{ variant = \"custom\", weight_path = \"weights/custom.safetensors\" }]",
        "encoders = [{ variant = \"custom\", weight_path = \"weights/custom.safetensors\" }, \
         { variant = \"custom\", weight_path = \"weights/other.safetensors\" }]",
    );
    let cfg = f.config("twice.toml", &listed_twice);
    assert_eq!(f.cli("analyze", &cfg, "twice").status.code(), Some(1));
}

#[test]
fn analyze_rejects_unknown_noise_kinds() {
    let f = Fixture::new();
    let body = format!("{ENCODER}[analyze]\nimages = [\"data/s0.png\"]\nnoise = [{{ kind = \"pink\", sigma = 1.0 }}]\n");
    let cfg = f.config("analyze.toml", &body);
    let o = f.cli("analyze", &cfg, "an");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expected one of"), "{}", stderr(&o));
}

#[test]
fn passthrough_benchmark_prints_a_table_and_repeats_exactly() {
    let f = Fixture::new();
    let body = "seed = 2
[benchmark]
passthrough = true
datasets = [\"data/scenes.txt\"]
noise = [{ kind = \"gaussian\", sigma = 15.0 }, { kind = \"salt_pepper\", d = 0.05 }]
";
    let cfg = f.config("bench.toml", body);
    let a = f.cli("benchmark", &cfg, "b1");
    assert!(a.status.success(), "{}", stderr(&a));
    let table = String::from_utf8(a.stdout).unwrap();
    assert!(table.contains("scenes") && table.contains("gaussian"), "{table}");
    assert!(f.cli("benchmark", &cfg, "b2").status.success());
    let csv_a = std::fs::read(f.path("b1/benchmark.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(f.path("b2/benchmark.csv")).unwrap());
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), 3);
}

#[test]
fn benchmark_scores_a_checkpoint_and_rejects_empty_datasets() {
    let f = Fixture::new();
    let ckpt = trained(&f, "run");
    let body = format!(
        "{ENCODER}[benchmark]\ncheckpoint = \"{}\"\ndatasets = [\"data/scenes.txt\"]\nnoise = [{{ kind = \"gaussian\", sigma = 25.0 }}]\n",
        ckpt.display()
    );
    let cfg = f.config("bench.toml", &body);
    let o = f.cli("benchmark", &cfg, "b");
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(f.path("b/benchmark.csv")).unwrap();
    assert!(csv.contains("checkpoint@"), "{csv}");

    std::fs::write(f.path("data/empty.txt"), "dataset=empty\n# nothing here\n").unwrap();
    let body = "[benchmark]\npassthrough = true\ndatasets = [\"data/empty.txt\"]\nnoise = [{ kind = \"gaussian\", sigma = 5.0 }]\n";
    let cfg = f.config("empty.toml", body);
    let o = f.cli("benchmark", &cfg, "e");
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("empty dataset"), "{}", stderr(&o));
}

#[test]
fn byte_range_manifest_is_honoured() {
    let ds = featdenoise::dataset::Dataset::open(Fixture::new().path("data/scenes.txt"), false).unwrap();
    assert_eq!(ds.range, RangeTag::Byte);
    assert_eq!(ds.images.len(), 4);
}
