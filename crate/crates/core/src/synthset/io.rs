//! On-disk dataset layout: `images/<id>.png`, `masks/<id>.png`, `labels.csv`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{BinaryMask, Image, SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    label: usize,
    bg_family: usize,
    split: Split,
}

fn ingest(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes records in the directory layout read by [`load_directory`].
pub fn export_dataset(records: &[SampleRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let mut written = Vec::with_capacity(2 * records.len() + 1);
    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    for r in records {
        let ip = images.join(format!("{}.png", r.id));
        let mp = masks.join(format!("{}.png", r.id));
        r.image.to_rgb8().save(&ip)?;
        r.mask.to_luma8().save(&mp)?;
        w.serialize(LabelRow {
            id: r.id.clone(),
            label: r.label,
            bg_family: r.bg_family,
            split: r.split,
        })?;
        written.push(ip);
        written.push(mp);
    }
    w.flush()?;
    written.push(labels);
    Ok(written)
}

/// Reads a dataset directory. Masks are binarized at 128 (0.5 of full scale).
pub fn load_directory(dir: &Path) -> Result<Vec<SampleRecord>> {
    let labels = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels).map_err(|e| ingest(&labels, e.to_string()))?;
    let rows: Vec<LabelRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ingest(&labels, e.to_string()))?;

    let listed: HashSet<&str> = rows.iter().map(|r| r.id.as_str()).collect();
    let images_dir = dir.join("images");
    let entries = fs::read_dir(&images_dir).map_err(|e| ingest(&images_dir, e.to_string()))?;
    let mut unlisted: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| !listed.contains(s))
        })
        .collect();
    unlisted.sort();
    if let Some(p) = unlisted.first() {
        return Err(ingest(p, "image has no entry in labels.csv"));
    }

    rows.into_iter()
        .map(|row| {
            let ip = images_dir.join(format!("{}.png", row.id));
            let mp = dir.join("masks").join(format!("{}.png", row.id));
            let img = image::open(&ip).map_err(|e| ingest(&ip, e.to_string()))?.to_rgb8();
            if !mp.exists() {
                return Err(ingest(&mp, format!("missing mask for image `{}`", row.id)));
            }
            let mask = image::open(&mp).map_err(|e| ingest(&mp, e.to_string()))?.to_luma8();
            if img.dimensions() != mask.dimensions() {
                return Err(ingest(
                    &mp,
                    format!("mask is {:?} but image is {:?}", mask.dimensions(), img.dimensions()),
                ));
            }
            SampleRecord::new(
                row.id,
                Image::from_rgb8(&img)?,
                BinaryMask::from_luma8(&mask)?,
                row.label,
                row.bg_family,
                row.split,
            )
        })
        .collect()
}
