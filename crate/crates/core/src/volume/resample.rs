//! Grid resampling with voxel-centre alignment and clamp-to-border sampling.
//!
//! Output voxel `o` along an axis sits at source coordinate
//! `(o + 0.5) * out_spacing / in_spacing - 0.5`.

use super::{voxel_count, Dims, LabelVolume, Spacing, Volume};
use crate::error::{Error, Result};

/// Maps axis position in `dims` order (z, y, x) to its index in `spacing` order (x, y, z).
const SPACING_AXIS: [usize; 3] = [2, 1, 0];

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(
            "spacing",
            format!("{spacing:?} must be positive"),
        ))
    }
}

/// Output dims `round(n * spacing / target)`, at least 1 per axis.
pub fn resampled_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Dims {
    let mut out = [1; 3];
    for a in 0..3 {
        let s = SPACING_AXIS[a];
        out[a] = ((dims[a] as f64 * spacing[s] / target[s]).round() as usize).max(1);
    }
    out
}

fn source_coords(n_in: usize, n_out: usize, ratio: f64) -> Vec<f64> {
    (0..n_out)
        .map(|o| ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64))
        .collect()
}

/// Linear interpolation taps `(lo, hi, weight of hi)` per output index.
fn linear_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    source_coords(n_in, n_out, ratio)
        .into_iter()
        .map(|u| {
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, u - lo as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<usize> {
    source_coords(n_in, n_out, ratio)
        .into_iter()
        .map(|u| ((u + 0.5).floor() as usize).min(n_in - 1))
        .collect()
}

fn ratios(from: Spacing, to: Spacing) -> [f64; 3] {
    let mut r = [1.0; 3];
    for a in 0..3 {
        let s = SPACING_AXIS[a];
        r[a] = to[s] / from[s];
    }
    r
}

/// Trilinear resampling of `v` onto an explicit grid.
pub fn resample_to_grid(v: &Volume, dims: Dims, spacing: Spacing) -> Result<Volume> {
    v.validate()?;
    check_spacing(spacing)?;
    if dims.contains(&0) {
        return Err(Error::invalid("resample", "target dims must be >= 1"));
    }
    let r = ratios(v.spacing, spacing);
    let tz = linear_taps(v.dims[0], dims[0], r[0]);
    let ty = linear_taps(v.dims[1], dims[1], r[1]);
    let tx = linear_taps(v.dims[2], dims[2], r[2]);
    let mut data = Vec::with_capacity(voxel_count(dims));
    let at = |z: usize, y: usize, x: usize| v.get(z, y, x) as f64;
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + (b - a) * w };
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), wx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), wx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), wx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), wx);
                let c0 = lerp(c00, c01, wy);
                let c1 = lerp(c10, c11, wy);
                data.push(lerp(c0, c1, wz) as f32);
            }
        }
    }
    Ok(Volume {
        dims,
        spacing,
        data,
        provenance: v.provenance.clone(),
    })
}

/// Nearest-neighbour resampling of a label map onto an explicit grid.
pub fn resample_labels_to_grid(
    l: &LabelVolume,
    dims: Dims,
    spacing: Spacing,
) -> Result<LabelVolume> {
    l.validate()?;
    check_spacing(spacing)?;
    if dims.contains(&0) {
        return Err(Error::invalid("resample", "target dims must be >= 1"));
    }
    let r = ratios(l.spacing, spacing);
    let tz = nearest_taps(l.dims[0], dims[0], r[0]);
    let ty = nearest_taps(l.dims[1], dims[1], r[1]);
    let tx = nearest_taps(l.dims[2], dims[2], r[2]);
    let mut labels = Vec::with_capacity(voxel_count(dims));
    for &z in &tz {
        for &y in &ty {
            for &x in &tx {
                labels.push(l.get(z, y, x));
            }
        }
    }
    Ok(LabelVolume {
        dims,
        spacing,
        labels,
        num_classes: l.num_classes,
    })
}

/// Resamples an image to `target` spacing (trilinear).
pub fn resample(v: &Volume, target: Spacing) -> Result<Volume> {
    check_spacing(target)?;
    v.validate()?;
    resample_to_grid(v, resampled_dims(v.dims, v.spacing, target), target)
}

/// Resamples a label map to `target` spacing (nearest neighbour).
pub fn resample_labels(l: &LabelVolume, target: Spacing) -> Result<LabelVolume> {
    check_spacing(target)?;
    l.validate()?;
    resample_labels_to_grid(l, resampled_dims(l.dims, l.spacing, target), target)
}
