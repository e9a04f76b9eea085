//! On-disk datasets: one volume pair per sample plus a `manifest.json`
//! listing every file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::proximity_map;
use crate::synth::SyntheticSample;
use crate::trainer::{Dataset, TrainSample};
use crate::volume::{read_volume, write_centerline, write_volume};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Base name of the image volume pair (`<image>.json` + `<image>.raw`).
    pub image: String,
    pub label: String,
    /// Centerline JSON file name.
    pub centerline: String,
    /// Base name of the normalized proximity-target volume pair.
    pub proximity: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SampleEntry>,
    pub size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub d_max: f64,
}

/// Write samples, their proximity targets and the manifest into `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[SyntheticSample],
    size: usize,
    seed: u64,
    alpha: f64,
    d_max: f64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let base = format!("sample{i:03}");
        let prox = proximity_map(s.label.shape(), &s.centerline, alpha, d_max)?;
        write_volume(dir.join(format!("{base}.image")), &s.image)?;
        write_volume(dir.join(format!("{base}.label")), &s.label)?;
        write_centerline(dir.join(format!("{base}.centerline.json")), &s.centerline)?;
        write_volume(dir.join(format!("{base}.proximity")), &prox.normalized)?;
        entries.push(SampleEntry {
            image: format!("{base}.image"),
            label: format!("{base}.label"),
            centerline: format!("{base}.centerline.json"),
            proximity: format!("{base}.proximity"),
        });
    }
    let manifest = DatasetManifest {
        samples: entries,
        size,
        seed,
        alpha,
        d_max,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join("manifest.json");
    serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::Data(format!("malformed dataset manifest {path:?}: {e}")))
}

/// Load every sample referenced by the directory's manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let image = read_volume(dir.join(&e.image))?;
        let label = read_volume(dir.join(&e.label))?;
        let proximity = read_volume(dir.join(&e.proximity))?;
        if !label.is_binary() {
            return Err(Error::Data(format!("label {:?} is not binary", e.label)));
        }
        samples.push(TrainSample {
            image,
            label,
            proximity,
        });
    }
    Ok(Dataset { samples })
}
