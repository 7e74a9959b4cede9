//! Overlap and surface-distance metrics on label maps, and their CSV records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

fn check_same_grid(pred: &LabelVolume, gt: &LabelVolume, spacing: bool) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!(
            "prediction dims {:?} != ground truth dims {:?}",
            pred.dims, gt.dims
        )));
    }
    if spacing && pred.spacing != gt.spacing {
        return Err(Error::Shape(format!(
            "prediction spacing {:?} != ground truth spacing {:?}",
            pred.spacing, gt.spacing
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)` for one organ label; 1 when both masks are empty.
pub fn dsc_metric(pred: &LabelVolume, gt: &LabelVolume, organ: u8) -> Result<f64> {
    check_same_grid(pred, gt, false)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (ia, ib) = (a == organ, b == organ);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Voxels of `organ` with at least one of their six face neighbours outside the mask.
/// Neighbours beyond the grid count as outside.
pub fn surface_voxels(v: &LabelVolume, organ: u8) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = v.dims;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < nz
            && (y as usize) < ny
            && (x as usize) < nx
            && v.labels[((z as usize) * ny + y as usize) * nx + x as usize] == organ
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if v.labels[(z * ny + y) * nx + x] != organ {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let interior = inside(zi - 1, yi, xi)
                    && inside(zi + 1, yi, xi)
                    && inside(zi, yi - 1, xi)
                    && inside(zi, yi + 1, xi)
                    && inside(zi, yi, xi - 1)
                    && inside(zi, yi, xi + 1);
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn to_mm(points: &[[usize; 3]], spacing: [f64; 3]) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|&[z, y, x]| {
            [
                z as f64 * spacing[2],
                y as f64 * spacing[1],
                x as f64 * spacing[0],
            ]
        })
        .collect()
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Squared directed Hausdorff distance; the inner scan stops once a point is closer than the
/// running maximum, which cannot change the result.
fn directed_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut worst = 0.0f64;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d = sq_dist(a, b);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance in millimetres between the surfaces of one organ's masks;
/// `None` when either mask is empty.
pub fn hausdorff_mm(pred: &LabelVolume, gt: &LabelVolume, organ: u8) -> Result<Option<f64>> {
    check_same_grid(pred, gt, true)?;
    let a = to_mm(&surface_voxels(pred, organ), pred.spacing);
    let b = to_mm(&surface_voxels(gt, organ), gt.spacing);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    Ok(Some(directed_sq(&a, &b).max(directed_sq(&b, &a)).sqrt()))
}

/// Per-sample, per-organ evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sample_id: String,
    pub organ: u8,
    pub dsc: f64,
    /// Empty in CSV when undefined.
    pub hd_mm: Option<f64>,
    #[serde(default)]
    pub noise_std: f64,
}

/// DSC and Hausdorff records for every foreground organ `1..num_classes`.
pub fn evaluate_pair(
    sample_id: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    noise_std: f64,
) -> Result<Vec<MetricsRecord>> {
    (1..gt.num_classes)
        .map(|organ| {
            Ok(MetricsRecord {
                sample_id: sample_id.to_string(),
                organ,
                dsc: dsc_metric(pred, gt, organ)?,
                hd_mm: hausdorff_mm(pred, gt, organ)?,
                noise_std,
            })
        })
        .collect()
}

pub fn write_records_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let records: std::result::Result<Vec<MetricsRecord>, _> = r.deserialize().collect();
    records.map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(dims: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> LabelVolume {
        let mut v = LabelVolume::background(dims, spacing, 2).unwrap();
        for &[z, y, x] in on {
            v.labels[(z * dims[1] + y) * dims[2] + x] = 1;
        }
        v
    }

    #[test]
    fn dsc_hand_cases() {
        let d = [2, 2, 2];
        let s = [1.0; 3];
        let a = labels(d, s, &[[0, 0, 0], [0, 0, 1]]);
        let b = labels(d, s, &[[0, 0, 1], [1, 1, 1]]);
        assert_eq!(dsc_metric(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dsc_metric(&a, &a, 1).unwrap(), 1.0);
        let c = labels(d, s, &[[1, 0, 0]]);
        assert_eq!(dsc_metric(&a, &c, 1).unwrap(), 0.0);
        let empty = labels(d, s, &[]);
        assert_eq!(dsc_metric(&empty, &empty, 1).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_hand_cases() {
        let d = [1, 1, 4];
        let s = [2.0, 2.0, 3.0];
        let a = labels(d, s, &[[0, 0, 0]]);
        let b = labels(d, s, &[[0, 0, 3]]);
        assert_eq!(hausdorff_mm(&a, &b, 1).unwrap(), Some(6.0));
        assert_eq!(hausdorff_mm(&a, &a, 1).unwrap(), Some(0.0));
        let empty = labels(d, s, &[]);
        assert_eq!(hausdorff_mm(&a, &empty, 1).unwrap(), None);
        let other = LabelVolume::background(d, [1.0; 3], 2).unwrap();
        assert!(hausdorff_mm(&a, &other, 1).is_err());
    }

    #[test]
    fn interior_voxels_are_not_surface() {
        let mut v = LabelVolume::background([5, 5, 5], [1.0; 3], 2).unwrap();
        v.labels.iter_mut().for_each(|l| *l = 1);
        let s = surface_voxels(&v, 1);
        assert_eq!(s.len(), 125 - 27);
        assert!(!s.contains(&[2, 2, 2]));
    }

    #[test]
    fn csv_round_trip_with_undefined_distance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricsRecord {
                sample_id: "case_000".into(),
                organ: 1,
                dsc: 0.75,
                hd_mm: Some(3.5),
                noise_std: 0.01,
            },
            MetricsRecord {
                sample_id: "case_001".into(),
                organ: 2,
                dsc: 0.0,
                hd_mm: None,
                noise_std: 0.0,
            },
        ];
        write_records_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,organ,dsc,hd_mm,noise_std\n"));
        assert!(text.contains("case_001,2,0.0,,0.0"));
        assert_eq!(read_records_csv(&path).unwrap(), rows);
    }

    fn mask_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (
            prop::collection::vec(0u8..2, 27),
            prop::collection::vec(0u8..2, 27),
        )
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric((a, b) in mask_pair()) {
            let mk = |l: Vec<u8>| LabelVolume::new([3, 3, 3], [1.0, 2.0, 0.5], l, 2).unwrap();
            let (a, b) = (mk(a), mk(b));
            prop_assert_eq!(dsc_metric(&a, &b, 1).unwrap(), dsc_metric(&b, &a, 1).unwrap());
            prop_assert_eq!(hausdorff_mm(&a, &b, 1).unwrap(), hausdorff_mm(&b, &a, 1).unwrap());
            let d = dsc_metric(&a, &b, 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
