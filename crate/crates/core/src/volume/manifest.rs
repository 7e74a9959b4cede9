use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_image, IntensityRange};
use crate::error::{Error, Result};

/// One (image, labels) pair; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Preprocessing manifest: per-split file lists plus the training intensity range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
    pub global_min: f64,
    pub global_max: f64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    /// First `floor(0.8 n)` samples train, the rest test.
    pub fn split(samples: Vec<SampleEntry>, range: IntensityRange, base_dir: &Path) -> Self {
        let cut = split_point(samples.len());
        let mut train = samples;
        let test = train.split_off(cut);
        Self {
            train,
            test,
            global_min: range.global_min,
            global_max: range.global_max,
            base_dir: base_dir.to_path_buf(),
        }
    }

    pub fn range(&self) -> Result<IntensityRange> {
        IntensityRange::new(self.global_min, self.global_max)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.range()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Number of training samples for a dataset of `n`.
pub fn split_point(n: usize) -> usize {
    n * 4 / 5
}

/// Min and max over every voxel of every listed image.
pub fn dataset_intensity_range(paths: &[PathBuf]) -> Result<IntensityRange> {
    if paths.is_empty() {
        return Err(Error::invalid("intensity range", "no volumes given"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in paths {
        let (a, b) = read_image(p)?.min_max();
        lo = lo.min(a as f64);
        hi = hi.max(b as f64);
    }
    IntensityRange::new(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{write_volume, Volume};

    fn write(dir: &Path, name: &str, values: &[f32]) -> PathBuf {
        let p = dir.join(name);
        let v = Volume::new([1, 1, values.len()], [1.0; 3], values.to_vec()).unwrap();
        write_volume(&v, &p).unwrap();
        p
    }

    #[test]
    fn range_examples() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a", &[0.0, 5.0]);
        assert_eq!(
            dataset_intensity_range(&[a]).unwrap(),
            IntensityRange::new(0.0, 5.0).unwrap()
        );
        let b = write(dir.path(), "b", &[0.0, 1.0, 2.0, 3.0]);
        let c = write(dir.path(), "c", &[-2.0, -1.0, 0.0, 1.0]);
        assert_eq!(
            dataset_intensity_range(&[b, c]).unwrap(),
            IntensityRange::new(-2.0, 3.0).unwrap()
        );
        assert!(dataset_intensity_range(&[]).is_err());
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_point(10), 8);
        assert_eq!(split_point(5), 4);
        assert_eq!(split_point(2), 1);
        assert_eq!(split_point(20), 16);
    }

    #[test]
    fn manifest_round_trip_and_strict_schema() {
        let dir = tempfile::tempdir().unwrap();
        let samples = (0..5)
            .map(|i| SampleEntry {
                id: format!("case_{i}"),
                image: format!("img_{i}.mivol").into(),
                labels: format!("lbl_{i}.mivol").into(),
            })
            .collect();
        let m = Manifest::split(samples, IntensityRange::new(-1.0, 2.0).unwrap(), dir.path());
        assert_eq!((m.train.len(), m.test.len()), (4, 1));
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);

        fs::write(
            &p,
            r#"{"train":[],"test":[],"global_min":0,"global_max":1,"extra":1}"#,
        )
        .unwrap();
        assert!(Manifest::load(&p).is_err());
    }
}
