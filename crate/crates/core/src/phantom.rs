//! Synthetic abdominal phantoms: non-overlapping ellipsoidal organs on a textured background.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::volume::{
    dataset_intensity_range, write_volume, Dims, LabelVolume, Manifest, SampleEntry, Spacing,
    Volume,
};

const PLACEMENT_RETRIES: usize = 64;
const SHRINK_FACTOR: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub label: u8,
    /// Base intensity interval; one base value is drawn per organ instance.
    pub intensity: [f32; 2],
    /// Semi-axis bounds in voxels, `(z, y, x)`.
    pub semi_axes_min: [f64; 3],
    pub semi_axes_max: [f64; 3],
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

/// Optional body outline: voxels outside a centred ellipsoid are set to a fixed "air" value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    /// Semi-axes as fractions of the half-extent per axis `(z, y, x)`.
    pub extent_fraction: [f64; 3],
    pub outside_intensity: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub num_classes: u8,
    pub organs: Vec<OrganSpec>,
    pub background_intensity: [f32; 2],
    pub texture_noise_std: f32,
    #[serde(default)]
    pub body: Option<BodySpec>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomConfig {
    /// 48x48x24 voxels at 2x2x3 mm with three foreground organs.
    fn default() -> Self {
        Self {
            dims: [24, 48, 48],
            spacing_mm: [2.0, 2.0, 3.0],
            num_classes: 4,
            organs: vec![
                OrganSpec {
                    label: 1,
                    intensity: [0.10, 0.14],
                    semi_axes_min: [4.0, 8.0, 8.0],
                    semi_axes_max: [6.0, 11.0, 11.0],
                    count: 1,
                },
                OrganSpec {
                    label: 2,
                    intensity: [0.20, 0.24],
                    semi_axes_min: [3.0, 5.0, 4.0],
                    semi_axes_max: [4.0, 7.0, 6.0],
                    count: 1,
                },
                OrganSpec {
                    label: 3,
                    intensity: [-0.06, -0.02],
                    semi_axes_min: [3.0, 4.0, 4.0],
                    semi_axes_max: [4.0, 6.0, 6.0],
                    count: 1,
                },
            ],
            background_intensity: [0.02, 0.06],
            texture_noise_std: 0.01,
            body: Some(BodySpec {
                extent_fraction: [1.2, 0.95, 0.95],
                outside_intensity: -1.0,
            }),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("phantom config", r));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?} must be >= 1", self.dims));
        }
        if !self.spacing_mm.iter().all(|s| *s > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.num_classes < 1 {
            return bad("num_classes must be >= 1".into());
        }
        let in_unit = |iv: [f32; 2]| iv[0] <= iv[1] && iv[0] >= -1.0 && iv[1] <= 1.0;
        if !in_unit(self.background_intensity) {
            return bad("background interval must be ordered and inside [-1, 1]".into());
        }
        if !(self.texture_noise_std >= 0.0) {
            return bad("texture_noise_std must be >= 0".into());
        }
        let mut seen = Vec::new();
        for o in &self.organs {
            if o.label == 0 || o.label >= self.num_classes || seen.contains(&o.label) {
                return bad(format!(
                    "organ label {} must be distinct and in [1, C-1]",
                    o.label
                ));
            }
            seen.push(o.label);
            if !in_unit(o.intensity) {
                return bad(format!(
                    "organ {} intensity must be ordered and inside [-1, 1]",
                    o.label
                ));
            }
            for a in 0..3 {
                let (lo, hi) = (o.semi_axes_min[a], o.semi_axes_max[a]);
                if !(lo >= 1.0 && lo <= hi && 2.0 * hi + 1.0 <= self.dims[a] as f64) {
                    return bad(format!("organ {} semi-axes do not fit the volume", o.label));
                }
            }
        }
        if let Some(b) = &self.body {
            if !b.extent_fraction.iter().all(|f| *f > 0.0)
                || !(-1.0..=1.0).contains(&b.outside_intensity)
            {
                return bad("body extent must be positive and outside intensity in [-1, 1]".into());
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Inclusive voxel bounding box clipped to `dims`.
    fn bbox(&self, dims: Dims) -> [(usize, usize); 3] {
        let mut b = [(0, 0); 3];
        for a in 0..3 {
            let lo = (self.center[a] - self.semi[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.semi[a]).ceil() as usize).min(dims[a] - 1);
            b[a] = (lo, hi);
        }
        b
    }

    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a]) / self.semi[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    fn voxels(&self, dims: Dims) -> Vec<[usize; 3]> {
        let [(z0, z1), (y0, y1), (x0, x1)] = self.bbox(dims);
        let mut out = Vec::new();
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains([z, y, x]) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn body_ellipsoid(cfg: &PhantomConfig) -> Option<Ellipsoid> {
    cfg.body.as_ref().map(|b| {
        let mut center = [0.0; 3];
        let mut semi = [0.0; 3];
        for a in 0..3 {
            center[a] = (cfg.dims[a] as f64 - 1.0) / 2.0;
            semi[a] = (cfg.dims[a] as f64 / 2.0 * b.extent_fraction[a]).max(0.5);
        }
        Ellipsoid { center, semi }
    })
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Generates sample `sample_index`; a pure function of `(cfg, sample_index)`.
pub fn generate_phantom(cfg: &PhantomConfig, sample_index: u64) -> Result<(Volume, LabelVolume)> {
    cfg.validate()?;
    let dims = cfg.dims;
    let n = dims.iter().product::<usize>();
    let idx = |p: [usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
    let mut geo = stream(cfg.seed, Domain::Phantom, &[sample_index, 0]);
    let body = body_ellipsoid(cfg);

    let mut labels = vec![0u8; n];
    let mut base = vec![
        uniform(
            &mut geo,
            cfg.background_intensity[0] as f64,
            cfg.background_intensity[1] as f64
        );
        n
    ];
    if let (Some(b), Some(spec)) = (&body, &cfg.body) {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    if !b.contains([z, y, x]) {
                        base[idx([z, y, x])] = spec.outside_intensity as f64;
                    }
                }
            }
        }
    }

    for organ in &cfg.organs {
        for _ in 0..organ.count {
            let mut semi = [0.0; 3];
            for a in 0..3 {
                semi[a] = uniform(&mut geo, organ.semi_axes_min[a], organ.semi_axes_max[a]);
            }
            let voxels = 'place: loop {
                for _ in 0..PLACEMENT_RETRIES {
                    let mut center = [0.0; 3];
                    for a in 0..3 {
                        center[a] = uniform(&mut geo, semi[a], dims[a] as f64 - 1.0 - semi[a]);
                    }
                    let e = Ellipsoid { center, semi };
                    let vox = e.voxels(dims);
                    let free = !vox.is_empty()
                        && vox.iter().all(|&p| {
                            labels[idx(p)] == 0 && body.as_ref().is_none_or(|b| b.contains(p))
                        });
                    if free {
                        break 'place vox;
                    }
                }
                if semi.iter().any(|s| s * SHRINK_FACTOR < 1.0) {
                    return Err(Error::invalid(
                        "phantom",
                        format!(
                            "organ {} cannot be placed in sample {sample_index}",
                            organ.label
                        ),
                    ));
                }
                for s in &mut semi {
                    *s *= SHRINK_FACTOR;
                }
            };
            let level = uniform(
                &mut geo,
                organ.intensity[0] as f64,
                organ.intensity[1] as f64,
            );
            for p in voxels {
                labels[idx(p)] = organ.label;
                base[idx(p)] = level;
            }
        }
    }

    let mut tex = stream(cfg.seed, Domain::Phantom, &[sample_index, 1]);
    let noise = Normal::new(0.0, cfg.texture_noise_std as f64)
        .map_err(|e| Error::invalid("phantom", e.to_string()))?;
    let data = base
        .iter()
        .map(|&b| (b + noise.sample(&mut tex)) as f32)
        .collect();
    let image = Volume::new(dims, cfg.spacing_mm, data)?
        .with_provenance(format!("phantom seed={} index={sample_index}", cfg.seed));
    let labels = LabelVolume::new(dims, cfg.spacing_mm, labels, cfg.num_classes)?;
    Ok((image, labels))
}

/// Writes `n` phantoms plus `manifest.json` into `out_dir`; returns the manifest.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, out_dir: &Path) -> Result<Manifest> {
    if n < 2 {
        return Err(Error::invalid(
            "dataset",
            format!("need at least 2 samples, got {n}"),
        ));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples: Vec<SampleEntry> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (img, lbl) = generate_phantom(cfg, i as u64)?;
            let entry = SampleEntry {
                id: format!("case_{i:03}"),
                image: format!("case_{i:03}_image.mivol").into(),
                labels: format!("case_{i:03}_labels.mivol").into(),
            };
            write_volume(&img, &out_dir.join(&entry.image))?;
            write_volume(&lbl, &out_dir.join(&entry.labels))?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let cut = crate::volume::split_point(n);
    let train_paths: Vec<_> = samples[..cut]
        .iter()
        .map(|s| out_dir.join(&s.image))
        .collect();
    let range = dataset_intensity_range(&train_paths)?;
    let manifest = Manifest::split(samples, range, out_dir);
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Adds i.i.d. `Normal(mean, std)` noise per voxel from the stream of `seed`; no clamping.
pub fn add_gaussian_noise(v: &Volume, mean: f64, std: f64, seed: u64) -> Result<Volume> {
    if !(std >= 0.0) || !mean.is_finite() {
        return Err(Error::invalid(
            "noise",
            format!("std must be >= 0, got {std}"),
        ));
    }
    if std == 0.0 && mean == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = stream(seed, Domain::Noise, &[]);
    let dist = Normal::new(mean, std).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let data = v
        .data
        .iter()
        .map(|&x| (x as f64 + dist.sample(&mut rng)) as f32)
        .collect();
    Ok(Volume { data, ..v.clone() })
}
