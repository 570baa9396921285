//! Dataset directories: `manifest.txt` plus `images/<id>.ppm`.

use std::collections::BTreeMap;
use std::path::Path;

use cgans_core::datagen::{Dataset, FaceSample, ManifestRecord, SampleKind, MANIFEST_HEADER};
use cgans_core::{Error, Result};

use crate::ppm::{read_ppm, write_ppm};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let records = dataset.manifest();
    let samples = dataset.sequences.iter().flatten().chain(&dataset.singles);
    let mut text = format!("{MANIFEST_HEADER}\n");
    for (rec, s) in records.iter().zip(samples) {
        write_ppm(&dir.join(&rec.path), &s.image)?;
        text.push_str(&format!("{rec}\n"));
    }
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Loads a dataset directory. Images carry their 8-bit quantisation.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest.display())))?;
    let mut sequences: BTreeMap<usize, Vec<FaceSample>> = BTreeMap::new();
    let mut singles = Vec::new();
    let mut size = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let rec: ManifestRecord = line
            .parse()
            .map_err(|e| Error::Data(format!("{} line {}: {e}", manifest.display(), n + 1)))?;
        let image = read_ppm(&dir.join(&rec.path))?;
        let s = image.dims()[2];
        if *size.get_or_insert(s) != s || image.dims()[1] != s {
            return Err(Error::Data(format!("{}: images must share one square size", rec.path)));
        }
        let sample = FaceSample {
            image,
            identity: rec.identity,
            group: rec.group,
            seed: rec.seed,
        };
        match rec.kind {
            SampleKind::Sequence => sequences.entry(rec.identity_id).or_default().push(sample),
            SampleKind::Single => singles.push(sample),
        }
    }
    let size = size.ok_or_else(|| Error::Data(format!("{} lists no samples", manifest.display())))?;
    let sequences = sequences
        .into_values()
        .map(|mut seq| {
            seq.sort_by_key(|s| s.group);
            seq
        })
        .collect();
    let ds = Dataset::from_parts(size, sequences, singles)?;
    ds.validate()?;
    Ok(ds)
}
