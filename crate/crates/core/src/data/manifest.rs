use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Label, Split, SplitRatios};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
pub const MANIFEST_HEADER: &str = "id,path,label,split";

/// A labelled image before splitting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    /// Known when the manifest was produced in-process.
    pub seed: Option<u64>,
    pub ratios: Option<SplitRatios>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, label: Label, split: Split) -> usize {
        self.split(split).filter(|s| s.label == label).count()
    }
}

/// Lists `<root>/COVID` and `<root>/Normal` image files (sorted by name) and
/// checks that each one decodes.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.dir_name());
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                        IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())
                    })
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Empty(format!("class directory {}", dir.display())));
        }
        files.sort();
        files.par_iter().try_for_each(|p| -> Result<()> {
            image::open(p).map(drop).map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })
        })?;
        entries.extend(files.into_iter().map(|path| Entry {
            id: format!(
                "{}/{}",
                label.dir_name(),
                path.file_name().unwrap_or_default().to_string_lossy()
            ),
            path,
            label,
        }));
    }
    Ok(entries)
}

/// Writes `id,path,label,split` CSV with LF line endings.
pub fn write_manifest(manifest: &Manifest, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for s in &manifest.samples {
        w.serialize(s).map_err(csv_error)?;
    }
    if manifest.samples.is_empty() {
        w.write_record(MANIFEST_HEADER.split(','))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(input: impl Read) -> Result<Manifest> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != MANIFEST_HEADER {
        return Err(Error::invalid(
            "manifest",
            format!(
                "expected header {MANIFEST_HEADER:?}, got {:?}",
                header.join(",")
            ),
        ));
    }
    let samples = r
        .deserialize()
        .collect::<std::result::Result<Vec<Sample>, _>>()
        .map_err(csv_error)?;
    Ok(Manifest {
        samples,
        seed: None,
        ratios: None,
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::invalid("manifest", e.to_string())
}
