//! Image collections: directories of lossless images and text manifests.
//!
//! A manifest is a UTF-8 text file. `dataset=<id>` and `range=<unit|byte>`
//! lines set metadata; blank lines and lines starting with `#` are ignored;
//! every other line is an image path, relative to the manifest's directory
//! unless absolute.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, RangeTag};

const IMAGE_EXTENSIONS: [&str; 8] = ["png", "tif", "tiff", "bmp", "ppm", "pgm", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub id: String,
    pub range: RangeTag,
    pub paths: Vec<PathBuf>,
}

impl Manifest {
    pub fn parse(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut range = RangeTag::Unit;
        let mut paths = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("dataset=") {
                id = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("range=") {
                range = v.trim().parse().map_err(|e: String| {
                    Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
            } else {
                let p = Path::new(line);
                paths.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
            }
        }
        if paths.is_empty() {
            return Err(Error::Dataset(format!("manifest {} lists no images (empty dataset)", path.display())));
        }
        Ok(Manifest { id, range, paths })
    }

    /// Every image file directly inside `dir`, sorted by name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("directory {} contains no images (empty dataset)", dir.display())));
        }
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Manifest {
            id,
            range: RangeTag::Unit,
            paths,
        })
    }

    /// A directory or a manifest file.
    pub fn open(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        if path.is_dir() {
            Manifest::from_dir(path)
        } else {
            Manifest::parse(path)
        }
    }
}

/// Decoded images of one dataset, in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub range: RangeTag,
    pub images: Vec<Image>,
    pub names: Vec<String>,
    /// Files that could not be decoded (lenient loading only).
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn from_images(id: impl Into<String>, images: Vec<Image>) -> Result<Dataset> {
        if images.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let range = images[0].range();
        let names = (0..images.len()).map(|i| format!("{i:04}")).collect();
        Ok(Dataset {
            id: id.into(),
            range,
            images,
            names,
            skipped: Vec::new(),
        })
    }

    /// Decodes every listed image into the manifest's range. With `lenient`,
    /// unreadable files are skipped with a warning and recorded.
    pub fn load(manifest: &Manifest, lenient: bool) -> Result<Dataset> {
        let mut ds = Dataset {
            id: manifest.id.clone(),
            range: manifest.range,
            ..Dataset::default()
        };
        for path in &manifest.paths {
            match Image::load(path) {
                Ok(img) => {
                    ds.images.push(img.to_range(manifest.range));
                    ds.names.push(
                        path.file_name()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                    );
                }
                Err(e) if lenient => {
                    log::warn!("skipping {}: {e}", path.display());
                    ds.skipped.push((path.clone(), e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
        if ds.images.is_empty() {
            return Err(Error::Dataset(format!("dataset `{}` has no readable images", ds.id)));
        }
        Ok(ds)
    }

    pub fn open(path: impl AsRef<Path>, lenient: bool) -> Result<Dataset> {
        Dataset::load(&Manifest::open(path)?, lenient)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes;

    #[test]
    fn manifest_resolves_relative_paths_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        scenes::scene(16, 16, 3, 1).save_png(dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"nope").unwrap();
        let m = dir.path().join("set.txt");
        std::fs::write(&m, "# test set\ndataset=toy\nrange=byte\na.png\nbroken.png\n").unwrap();
        let man = Manifest::parse(&m).unwrap();
        assert_eq!(man.id, "toy");
        assert_eq!(man.range, RangeTag::Byte);
        assert_eq!(man.paths[0], dir.path().join("a.png"));
        assert!(Dataset::load(&man, false).is_err());
        let ds = Dataset::load(&man, true).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.skipped.len(), 1);
        assert_eq!(ds.images[0].range(), RangeTag::Byte);
    }

    #[test]
    fn empty_manifest_and_directory_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("empty.txt");
        std::fs::write(&m, "dataset=none\n").unwrap();
        let msg = Manifest::parse(&m).unwrap_err().to_string();
        assert!(msg.contains("empty dataset"), "{msg}");
        let sub = dir.path().join("imgs");
        std::fs::create_dir(&sub).unwrap();
        assert!(Manifest::from_dir(&sub).is_err());
    }

    #[test]
    fn bad_range_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        std::fs::write(&m, "range=percent\nx.png\n").unwrap();
        let msg = Manifest::parse(&m).unwrap_err().to_string();
        assert!(msg.contains(":1:") && msg.contains("unit, byte"), "{msg}");
    }
}
