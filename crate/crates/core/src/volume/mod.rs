//! Spacing-aware volumes, their file format, resampling and intensity normalization.

mod io;
mod manifest;
mod resample;

pub use io::{read_image, read_labels, read_volume, write_volume, VolumeFile, VolumeRef};
pub use manifest::{dataset_intensity_range, split_point, Manifest, SampleEntry};
pub use resample::{resample, resample_labels, resample_labels_to_grid, resample_to_grid};

use crate::error::{Error, Result};

/// Voxel counts in `(nz, ny, nx)` order; x varies fastest in memory.
pub type Dims = [usize; 3];

/// Millimetres per voxel in `(sx, sy, sz)` order.
pub type Spacing = [f64; 3];

/// Scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f32>,
    pub provenance: String,
}

/// Integer label map; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: Vec<u8>,
    pub num_classes: u8,
}

/// Global intensity bounds used to map a dataset onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntensityRange {
    pub global_min: f64,
    pub global_max: f64,
}

pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

fn check_grid(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(
            "volume",
            format!("dims {dims:?} must all be >= 1"),
        ));
    }
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::invalid(
            "volume",
            format!("spacing {spacing:?} must be positive"),
        ));
    }
    if len != voxel_count(dims) {
        return Err(Error::invalid(
            "volume",
            format!("data length {len} != voxel count of {dims:?}"),
        ));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        Ok(Self {
            dims,
            spacing,
            data,
            provenance: String::new(),
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.provenance = tag.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_grid(self.dims, self.spacing, self.data.len())
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>, num_classes: u8) -> Result<Self> {
        let v = Self {
            dims,
            spacing,
            labels,
            num_classes,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn background(dims: Dims, spacing: Spacing, num_classes: u8) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        check_grid(self.dims, self.spacing, self.labels.len())?;
        if self.num_classes < 1 {
            return Err(Error::invalid("labels", "num_classes must be >= 1"));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} >= num_classes {}", self.num_classes),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[self.index(z, y, x)]
    }

    /// Voxel count of `label`.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// True when `other` lives on the same grid.
    pub fn same_grid(&self, dims: Dims, spacing: Spacing) -> bool {
        self.dims == dims && self.spacing == spacing
    }
}

impl IntensityRange {
    pub fn new(global_min: f64, global_max: f64) -> Result<Self> {
        let r = Self {
            global_min,
            global_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global_min.is_finite() && self.global_max.is_finite())
            || self.global_min >= self.global_max
        {
            return Err(Error::invalid(
                "intensity range",
                format!(
                    "need min < max, got [{}, {}]",
                    self.global_min, self.global_max
                ),
            ));
        }
        Ok(())
    }
}

/// Maps `r` affinely onto `[-1, 1]` and clamps values outside the range.
pub fn normalize_intensity(v: &Volume, r: &IntensityRange) -> Result<Volume> {
    r.validate()?;
    let span = r.global_max - r.global_min;
    let data = v
        .data
        .iter()
        .map(|&x| (2.0 * (x as f64 - r.global_min) / span - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Volume { data, ..v.clone() })
}
