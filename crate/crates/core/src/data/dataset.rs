//! Datasets on disk.
//!
//! Layout written by the synthesizer and expected by the loaders:
//!
//! ```text
//! <root>/manifest.txt         one image path per line, relative to <root>
//! <root>/images/img_0000.png  input image
//! <root>/images/img_0000.txt  detection annotation (ICDAR line format)
//! <root>/clean/img_0000.png   text-free target (STR supervision only)
//! ```
//!
//! Every file opened through a [`DatasetReader`] is recorded so callers can
//! audit which supervision a stage actually read.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use super::annotation::{format_detection_file, parse_detection_file};
use super::image_io::{decode_image, resize_nearest, save_image};
use super::AnnotatedImage;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn annotation_path(image: &Path) -> PathBuf {
    image.with_extension("txt")
}

/// `<dir>/images/x.png` maps to `<dir>/clean/x.png`.
pub fn clean_path(image: &Path) -> PathBuf {
    let name = image.file_name().unwrap_or_default();
    match image.parent().and_then(Path::parent) {
        Some(root) => root.join("clean").join(name),
        None => PathBuf::from("clean").join(name),
    }
}

/// Image paths listed in a manifest, resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "manifest",
            path: path.to_path_buf(),
        },
        _ => e.into(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}

#[derive(Debug, Default)]
pub struct DatasetReader {
    opened: RefCell<Vec<PathBuf>>,
}

impl DatasetReader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every path this reader has opened, in order.
    pub fn opened(&self) -> Vec<PathBuf> {
        self.opened.borrow().clone()
    }

    fn read(&self, path: &Path, what: &'static str) -> Result<Vec<u8>> {
        self.opened.borrow_mut().push(path.to_path_buf());
        fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what,
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })
    }

    fn load_one(&self, image_path: &Path, size: usize, with_clean: bool, need_annotation: bool) -> Result<AnnotatedImage> {
        let image = decode_image(&self.read(image_path, "image")?, image_path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let ann_path = annotation_path(image_path);
        let polygons = if need_annotation || ann_path.exists() {
            let bytes = self.read(&ann_path, "annotation")?;
            let text = String::from_utf8_lossy(&bytes);
            parse_detection_file(&text).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", ann_path.display()),
                },
                other => other,
            })?
        } else {
            Vec::new()
        };
        let clean = if with_clean {
            let p = clean_path(image_path);
            let c = decode_image(&self.read(&p, "clean target")?, &p)?;
            if c.shape() != image.shape() {
                return Err(Error::shape("clean target", image.shape(), c.shape()));
            }
            Some(resize_nearest(&c, size, size))
        } else {
            None
        };
        let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
        Ok(AnnotatedImage {
            image: resize_nearest(&image, size, size),
            polygons: polygons.iter().map(|p| p.scaled(sx, sy)).collect(),
            clean,
        })
    }

    /// Images plus detection annotations. Clean targets are never opened.
    pub fn load_detection(&self, manifest: &Path, size: usize) -> Result<Vec<AnnotatedImage>> {
        read_manifest(manifest)?
            .iter()
            .map(|p| self.load_one(p, size, false, true))
            .collect()
    }

    /// Images plus clean targets; annotations are loaded when present.
    pub fn load_supervised(&self, manifest: &Path, size: usize) -> Result<Vec<AnnotatedImage>> {
        read_manifest(manifest)?
            .iter()
            .map(|p| self.load_one(p, size, true, false))
            .collect()
    }
}

/// Writes samples in the layout above and returns the manifest path.
pub fn write_dataset(root: &Path, samples: &[AnnotatedImage]) -> Result<PathBuf> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("clean"))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/img_{i:04}.png");
        let image_path = root.join(&rel);
        save_image(&image_path, &s.image)?;
        fs::write(annotation_path(&image_path), format_detection_file(&s.polygons, &[])?)?;
        if let Some(c) = &s.clean {
            save_image(&clean_path(&image_path), c)?;
        }
        manifest.push_str(&rel);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST_NAME);
    fs::write(&path, manifest)?;
    Ok(path)
}
