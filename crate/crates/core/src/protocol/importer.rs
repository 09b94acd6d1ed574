//! Import of real images laid out as `<root>/<domain>/<class>/*.{pgm,ppm}`.
//!
//! Domain and class directories are taken in name order. Every domain must
//! hold the same class directories. Images are resized to a square side
//! and graymaps are expanded to RGB. Each `(class, domain)` pair keeps the
//! first `n` files by name, `n` being the smallest pair count.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::corpus::{Corpus, CorpusInfo, CHANNELS};
use crate::error::{Error, Result};

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn import_directory(root: &Path, image_size: usize) -> Result<Corpus> {
    if image_size == 0 {
        return Err(Error::Corpus("image size must be positive".into()));
    }
    let domains = sorted_dirs(root)?;
    if domains.is_empty() {
        return Err(Error::Corpus(format!("{} has no domain directories", root.display())));
    }
    let class_names: Vec<String> = sorted_dirs(&domains[0])?.iter().map(|p| file_name(p)).collect();
    if class_names.is_empty() {
        return Err(Error::Corpus(format!("{} has no class directories", domains[0].display())));
    }
    let mut files: Vec<Vec<Vec<PathBuf>>> = Vec::with_capacity(class_names.len());
    for class in &class_names {
        let mut per_domain = Vec::with_capacity(domains.len());
        for d in &domains {
            let dir = d.join(class);
            if !dir.is_dir() {
                return Err(Error::Corpus(format!("domain {} lacks class {class}", file_name(d))));
            }
            per_domain.push(sorted_images(&dir)?);
        }
        files.push(per_domain);
    }
    for d in &domains[1..] {
        let names: Vec<String> = sorted_dirs(d)?.iter().map(|p| file_name(p)).collect();
        if names != class_names {
            return Err(Error::Corpus(format!("domain {} has a different class set", file_name(d))));
        }
    }
    let per_pair = files.iter().flatten().map(Vec::len).min().unwrap_or(0);
    if per_pair == 0 {
        return Err(Error::Corpus("some (class, domain) pair has no images".into()));
    }
    let info = CorpusInfo {
        name: file_name(root),
        classes: class_names.len(),
        domain_names: domains.iter().map(|d| file_name(d)).collect(),
        per_pair,
        image_size,
        channels: CHANNELS,
    };
    let side = image_size as u32;
    let mut pixels = Vec::with_capacity(info.sample_count() * info.image_len());
    for per_domain in &files {
        for list in per_domain {
            for path in &list[..per_pair] {
                let img = image::open(path)?.to_rgb8();
                let img = if img.width() == side && img.height() == side {
                    img
                } else {
                    image::imageops::resize(&img, side, side, FilterType::Triangle)
                };
                pixels.extend_from_slice(img.as_raw());
            }
        }
    }
    Corpus::from_parts(info, pixels)
}
