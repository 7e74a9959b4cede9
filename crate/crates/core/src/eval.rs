//! Sliding-window inference, noise sweeps over a test split and paired model comparison.

use std::collections::BTreeMap;
use std::path::Path;

use afaseg_autodiff::Tensor;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, MetricsRecord};
use crate::net::SegNet;
use crate::phantom::add_gaussian_noise;
use crate::rng::{stream, Domain};
use crate::stats::{mann_whitney_u, Alternative};
use crate::volume::{
    normalize_intensity, read_image, read_labels, resample, resample_labels_to_grid, Dims,
    LabelVolume, Manifest, SampleEntry, Spacing, Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub noise_stds: Vec<f64>,
    pub noise_mean: f64,
    /// Noise realisations per (sample, std).
    pub seeds_per_std: usize,
    /// Window in `(z, y, x)` voxels.
    pub window: [usize; 3],
    pub overlap: f64,
    /// Grid the network was trained on.
    pub target_spacing: Spacing,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            noise_stds: vec![0.0, 0.0005, 0.001, 0.005, 0.01],
            noise_mean: 0.0,
            seeds_per_std: 1,
            window: [16, 32, 32],
            overlap: 0.8,
            target_spacing: [2.0, 2.0, 3.0],
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_stds.is_empty() || !self.noise_stds.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid("sweep.noise_stds", "need at least one finite std >= 0"));
        }
        if !self.noise_mean.is_finite() {
            return Err(Error::invalid("sweep.noise_mean", "must be finite"));
        }
        if self.seeds_per_std == 0 {
            return Err(Error::invalid("sweep.seeds_per_std", "must be >= 1"));
        }
        check_window(self.window, self.overlap)?;
        if !self.target_spacing.iter().all(|s| *s > 0.0) {
            return Err(Error::invalid("sweep.target_spacing", "must be positive"));
        }
        Ok(())
    }
}

fn check_window(window: [usize; 3], overlap: f64) -> Result<()> {
    if window.contains(&0) {
        return Err(Error::invalid("window", "must be >= 1 per axis"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid("overlap", format!("{overlap} not in [0, 1)")));
    }
    Ok(())
}

/// Per-voxel class probabilities, `(C, Z, Y, X)` channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub classes: usize,
    pub data: Vec<f32>,
}

/// Window stride along one axis.
pub fn window_stride(window: usize, overlap: f64) -> usize {
    (((1.0 - overlap) * window as f64).round() as usize).max(1)
}

/// Window start offsets along one axis of length `dim >= window`, the last snapped to the edge.
pub fn window_starts(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    let s = window_stride(window, overlap);
    let last = dim - window;
    let mut starts: Vec<usize> = (0..last).step_by(s).collect();
    starts.push(last);
    starts
}

/// Window corners over a volume at least as large as the window, z-major.
pub fn window_corners(dims: Dims, window: [usize; 3], overlap: f64) -> Vec<[usize; 3]> {
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(dims[a], window[a], overlap));
    let mut corners = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                corners.push([z, y, x]);
            }
        }
    }
    corners
}

/// Number of windows covering each voxel under [`window_corners`].
pub fn coverage_counts(dims: Dims, window: [usize; 3], overlap: f64) -> Vec<u32> {
    let [_, ny, nx] = dims;
    let mut count = vec![0u32; dims.iter().product()];
    for [cz, cy, cx] in window_corners(dims, window, overlap) {
        for z in cz..cz + window[0] {
            for y in cy..cy + window[1] {
                let row = (z * ny + y) * nx + cx;
                count[row..row + window[2]].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    count
}

fn pad_edge(v: &Volume, dims: Dims) -> Volume {
    if v.dims == dims {
        return v.clone();
    }
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                data.push(v.get(z.min(v.dims[0] - 1), y.min(v.dims[1] - 1), x.min(v.dims[2] - 1)));
            }
        }
    }
    Volume {
        dims,
        data,
        ..v.clone()
    }
}

fn softmax_channels(logits: &[f32], classes: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; logits.len()];
    for v in 0..spatial {
        let max = (0..classes).map(|c| logits[c * spatial + v]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for c in 0..classes {
            let e = (logits[c * spatial + v] - max).exp();
            out[c * spatial + v] = e;
            sum += e;
        }
        for c in 0..classes {
            out[c * spatial + v] /= sum;
        }
    }
    out
}

/// Windows evaluated per forward pass.
const WINDOW_BATCH: usize = 4;

/// Averages window softmax outputs uniformly over every window covering a voxel.
pub fn sliding_window_predict(
    net: &SegNet<f32>,
    v: &Volume,
    window: [usize; 3],
    overlap: f64,
) -> Result<ProbVolume> {
    check_window(window, overlap)?;
    v.validate()?;
    net.config().check_patch(window)?;
    let classes = net.config().num_classes;
    let dims: Dims = std::array::from_fn(|a| v.dims[a].max(window[a]));
    let padded = pad_edge(v, dims);
    let [nz, ny, nx] = dims;
    let spatial = nz * ny * nx;
    let wn: usize = window.iter().product();

    let corners = window_corners(dims, window, overlap);
    let mut sum = vec![0.0f32; classes * spatial];
    let mut count = vec![0u32; spatial];
    for chunk in corners.chunks(WINDOW_BATCH) {
        let mut input = Vec::with_capacity(chunk.len() * wn);
        for &[cz, cy, cx] in chunk {
            for z in 0..window[0] {
                for y in 0..window[1] {
                    let start = ((cz + z) * ny + cy + y) * nx + cx;
                    input.extend_from_slice(&padded.data[start..start + window[2]]);
                }
            }
        }
        let x = Tensor::from_vec(&[chunk.len(), 1, window[0], window[1], window[2]], input)?;
        let logits = net.predict_logits(&x)?;
        for (k, &[cz, cy, cx]) in chunk.iter().enumerate() {
            let probs = softmax_channels(&logits.data()[k * classes * wn..(k + 1) * classes * wn], classes, wn);
            for z in 0..window[0] {
                for y in 0..window[1] {
                    let row = ((cz + z) * ny + cy + y) * nx + cx;
                    let src = (z * window[1] + y) * window[2];
                    count[row..row + window[2]].iter_mut().for_each(|c| *c += 1);
                    for c in 0..classes {
                        let dst = &mut sum[c * spatial + row..c * spatial + row + window[2]];
                        let p = &probs[c * wn + src..c * wn + src + window[2]];
                        dst.iter_mut().zip(p).for_each(|(d, p)| *d += p);
                    }
                }
            }
        }
    }

    let [oz, oy, ox] = v.dims;
    let mut data = Vec::with_capacity(classes * oz * oy * ox);
    for c in 0..classes {
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let i = (z * ny + y) * nx + x;
                    data.push(sum[c * spatial + i] / count[i] as f32);
                }
            }
        }
    }
    Ok(ProbVolume {
        dims: v.dims,
        spacing: v.spacing,
        classes,
        data,
    })
}

/// Per-voxel argmax; ties go to the lower class index.
pub fn predict_labels(p: &ProbVolume) -> LabelVolume {
    let spatial: usize = p.dims.iter().product();
    let labels = (0..spatial)
        .map(|v| {
            let mut best = 0;
            for c in 1..p.classes {
                if p.data[c * spatial + v] > p.data[best * spatial + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume {
        dims: p.dims,
        spacing: p.spacing,
        labels,
        num_classes: p.classes as u8,
    }
}

/// Seed of the noise realisation for one (sample, std, repetition); both models of a
/// comparison see the same corrupted input.
pub fn noise_seed(seed: u64, sample: u64, std: f64, rep: u64) -> u64 {
    stream(seed, Domain::Noise, &[sample, std.to_bits(), rep]).next_u64()
}

/// Predicted labels on the sample's own grid for a noisy copy of its image.
pub fn predict_sample(
    net: &SegNet<f32>,
    manifest: &Manifest,
    image: &Volume,
    cfg: &SweepConfig,
    noise_std: f64,
    noise_seed: u64,
) -> Result<LabelVolume> {
    let resampled = normalize_intensity(&resample(image, cfg.target_spacing)?, &manifest.range()?)?;
    let noisy = add_gaussian_noise(&resampled, cfg.noise_mean, noise_std, noise_seed)?;
    let probs = sliding_window_predict(net, &noisy, cfg.window, cfg.overlap)?;
    resample_labels_to_grid(&predict_labels(&probs), image.dims, image.spacing)
}

fn record_id(e: &SampleEntry, rep: usize, reps: usize) -> String {
    if reps == 1 {
        e.id.clone()
    } else {
        format!("{}#{rep}", e.id)
    }
}

/// Metrics of every sample in `entries` at every configured noise std, ordered by
/// (std, sample, repetition, organ).
pub fn evaluate_dataset(
    net: &SegNet<f32>,
    manifest: &Manifest,
    entries: &[SampleEntry],
    cfg: &SweepConfig,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let per_sample: Vec<Vec<Vec<MetricsRecord>>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let image = read_image(&manifest.resolve(&e.image))?;
            let gt = read_labels(&manifest.resolve(&e.labels))?;
            if gt.dims != image.dims {
                return Err(Error::Shape(format!(
                    "{}: labels {:?} vs image {:?}",
                    e.id, gt.dims, image.dims
                )));
            }
            let mut by_std = Vec::with_capacity(cfg.noise_stds.len());
            for &std in &cfg.noise_stds {
                let mut rows = Vec::new();
                for rep in 0..cfg.seeds_per_std {
                    let seed = noise_seed(cfg.seed, i as u64, std, rep as u64);
                    let pred = predict_sample(net, manifest, &image, cfg, std, seed)?;
                    rows.extend(evaluate_pair(&record_id(e, rep, cfg.seeds_per_std), &pred, &gt, std)?);
                }
                by_std.push(rows);
            }
            Ok(by_std)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for s in 0..cfg.noise_stds.len() {
        for sample in &per_sample {
            out.extend(sample[s].iter().cloned());
        }
    }
    Ok(out)
}

/// Loads a checkpoint and evaluates one manifest split.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Manifest,
    entries: &[SampleEntry],
    cfg: &SweepConfig,
) -> Result<Vec<MetricsRecord>> {
    let (net, _) = SegNet::<f32>::load_checkpoint(checkpoint)?;
    evaluate_dataset(&net, manifest, entries, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value); `None` for no values.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

/// One (noise std, organ) cell; `organ = None` is the organ-averaged column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub noise_std: f64,
    pub organ: Option<u8>,
    pub n: usize,
    pub dsc_a: MeanStd,
    pub dsc_b: MeanStd,
    pub hd_a: Option<MeanStd>,
    pub hd_b: Option<MeanStd>,
    /// `mean DSC(a) - mean DSC(b)`.
    pub improvement: f64,
    /// Two-sided rank test on per-sample DSC.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<ComparisonRow>,
}

type Key = (u64, u8, String);

fn index(records: &[MetricsRecord], which: &str) -> Result<BTreeMap<Key, MetricsRecord>> {
    let mut map = BTreeMap::new();
    for r in records {
        if !(r.noise_std >= 0.0) {
            return Err(Error::invalid("records", format!("negative noise std in {which}")));
        }
        let key = (r.noise_std.to_bits(), r.organ, r.sample_id.clone());
        if map.insert(key, r.clone()).is_some() {
            return Err(Error::invalid(
                "records",
                format!("{which} repeats ({}, organ {}, std {})", r.sample_id, r.organ, r.noise_std),
            ));
        }
    }
    Ok(map)
}

/// Per-std, per-organ comparison of two record sets over identical keys, plus an
/// organ-averaged row per std whose test runs on per-sample organ means.
pub fn compare_models(
    a: &[MetricsRecord],
    b: &[MetricsRecord],
    model_a: &str,
    model_b: &str,
) -> Result<MetricsTable> {
    let (ia, ib) = (index(a, model_a)?, index(b, model_b)?);
    if let Some(k) = ia.keys().find(|k| !ib.contains_key(*k)).or_else(|| ib.keys().find(|k| !ia.contains_key(*k))) {
        return Err(Error::invalid(
            "records",
            format!("key ({}, organ {}, std {}) not in both sets", k.2, k.1, f64::from_bits(k.0)),
        ));
    }
    if ia.is_empty() {
        return Err(Error::invalid("records", "no records to compare"));
    }
    // (std, organ) -> aligned per-sample rows
    let mut cells: BTreeMap<(u64, u8), Vec<(&MetricsRecord, &MetricsRecord)>> = BTreeMap::new();
    for (k, ra) in &ia {
        cells.entry((k.0, k.1)).or_default().push((ra, &ib[k]));
    }
    let mut rows = Vec::new();
    let stds: Vec<u64> = {
        let mut s: Vec<u64> = cells.keys().map(|k| k.0).collect();
        s.dedup();
        s
    };
    for bits in stds {
        let std = f64::from_bits(bits);
        let mut per_sample: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((_, organ), pairs) in cells.range((bits, 0)..=(bits, u8::MAX)) {
            let da: Vec<f64> = pairs.iter().map(|p| p.0.dsc).collect();
            let db: Vec<f64> = pairs.iter().map(|p| p.1.dsc).collect();
            let ha: Vec<f64> = pairs.iter().filter_map(|p| p.0.hd_mm).collect();
            let hb: Vec<f64> = pairs.iter().filter_map(|p| p.1.hd_mm).collect();
            for p in pairs {
                let e = per_sample.entry(p.0.sample_id.as_str()).or_default();
                e.0.push(p.0.dsc);
                e.1.push(p.1.dsc);
            }
            rows.push(row(std, Some(*organ), &da, &db, mean_std(&ha), mean_std(&hb))?);
        }
        let organ_rows: Vec<&ComparisonRow> = rows.iter().filter(|r| r.noise_std.to_bits() == bits).collect();
        let avg = |f: &dyn Fn(&ComparisonRow) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = organ_rows.iter().filter_map(|r| f(r)).collect();
            (v.len() == organ_rows.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let avg_ms = |f: &dyn Fn(&ComparisonRow) -> Option<MeanStd>| -> Option<MeanStd> {
            Some(MeanStd {
                mean: avg(&|r| f(r).map(|m| m.mean))?,
                std: avg(&|r| f(r).map(|m| m.std))?,
            })
        };
        let sa: Vec<f64> = per_sample.values().map(|v| v.0.iter().sum::<f64>() / v.0.len() as f64).collect();
        let sb: Vec<f64> = per_sample.values().map(|v| v.1.iter().sum::<f64>() / v.1.len() as f64).collect();
        let p_value = mann_whitney_u(&sa, &sb, Alternative::TwoSided)?.p;
        let average = ComparisonRow {
            noise_std: std,
            organ: None,
            n: sa.len(),
            dsc_a: avg_ms(&|r| Some(r.dsc_a)).expect("dsc present"),
            dsc_b: avg_ms(&|r| Some(r.dsc_b)).expect("dsc present"),
            hd_a: avg_ms(&|r| r.hd_a),
            hd_b: avg_ms(&|r| r.hd_b),
            improvement: avg(&|r| Some(r.improvement)).expect("improvement present"),
            p_value,
        };
        rows.push(average);
    }
    Ok(MetricsTable {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        rows,
    })
}

fn row(
    noise_std: f64,
    organ: Option<u8>,
    da: &[f64],
    db: &[f64],
    hd_a: Option<MeanStd>,
    hd_b: Option<MeanStd>,
) -> Result<ComparisonRow> {
    let (dsc_a, dsc_b) = (mean_std(da).expect("non-empty cell"), mean_std(db).expect("non-empty cell"));
    Ok(ComparisonRow {
        noise_std,
        organ,
        n: da.len(),
        dsc_a,
        dsc_b,
        hd_a,
        hd_b,
        improvement: dsc_a.mean - dsc_b.mean,
        p_value: mann_whitney_u(da, db, Alternative::TwoSided)?.p,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    noise_std: f64,
    organ: &'a str,
    n: usize,
    dsc_a_mean: f64,
    dsc_a_std: f64,
    dsc_b_mean: f64,
    dsc_b_std: f64,
    hd_a_mean: Option<f64>,
    hd_a_std: Option<f64>,
    hd_b_mean: Option<f64>,
    hd_b_std: Option<f64>,
    improvement: f64,
    p_value: f64,
}

impl MetricsTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for r in &self.rows {
            let organ = r.organ.map_or_else(|| "average".to_string(), |o| o.to_string());
            w.serialize(CsvRow {
                noise_std: r.noise_std,
                organ: &organ,
                n: r.n,
                dsc_a_mean: r.dsc_a.mean,
                dsc_a_std: r.dsc_a.std,
                dsc_b_mean: r.dsc_b.mean,
                dsc_b_std: r.dsc_b.std,
                hd_a_mean: r.hd_a.map(|m| m.mean),
                hd_a_std: r.hd_a.map(|m| m.std),
                hd_b_mean: r.hd_b.map(|m| m.mean),
                hd_b_std: r.hd_b.map(|m| m.std),
                improvement: r.improvement,
                p_value: r.p_value,
            })
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `{model_a, model_b, per_std: [{noise_std, organs: [...], average: {...}}]}`.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut per_std: Vec<serde_json::Value> = Vec::new();
        let mut current: Option<u64> = None;
        for r in &self.rows {
            if current != Some(r.noise_std.to_bits()) {
                current = Some(r.noise_std.to_bits());
                per_std.push(serde_json::json!({"noise_std": r.noise_std, "organs": []}));
            }
            let entry = per_std.last_mut().expect("pushed above");
            let cell = serde_json::json!({
                "improvement": r.improvement,
                "p_value": r.p_value,
                "dsc_a": r.dsc_a.mean,
                "dsc_b": r.dsc_b.mean,
            });
            match r.organ {
                Some(o) => {
                    let mut cell = cell;
                    cell["organ"] = o.into();
                    entry["organs"].as_array_mut().expect("array").push(cell);
                }
                None => entry["average"] = cell,
            }
        }
        serde_json::json!({
            "model_a": self.model_a,
            "model_b": self.model_b,
            "per_std": per_std,
        })
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> SegNet<f32> {
        SegNet::build(NetConfig {
            depth: 2,
            base_channels: 2,
            num_classes: 3,
            seed: 5,
            ..NetConfig::default()
        })
        .unwrap()
    }

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, [2.0, 2.0, 3.0], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_window_equals_direct_forward() {
        let net = tiny_net();
        let v = random_volume([4, 6, 8], 1);
        let p = sliding_window_predict(&net, &v, [4, 6, 8], 0.8).unwrap();
        let logits = net.predict_logits(&Tensor::from_vec(&[1, 1, 4, 6, 8], v.data.clone()).unwrap()).unwrap();
        let direct = softmax_channels(logits.data(), 3, 4 * 6 * 8);
        assert_eq!(p.data, direct);
    }

    #[test]
    fn constant_input_gives_constant_probabilities() {
        let net = SegNet::<f32>::build(NetConfig {
            depth: 2,
            base_channels: 2,
            num_classes: 3,
            kernel_size: 1,
            seed: 9,
            ..NetConfig::default()
        })
        .unwrap();
        let v = Volume::filled([6, 10, 9], [1.0; 3], 0.3).unwrap();
        let spatial = 6 * 10 * 9;
        let reference = sliding_window_predict(&net, &v, [6, 10, 9].map(|d: usize| d & !1), 0.0).unwrap();
        for overlap in [0.0, 0.5, 0.8] {
            let p = sliding_window_predict(&net, &v, [2, 4, 4], overlap).unwrap();
            for c in 0..3 {
                let want = reference.data[c * spatial];
                assert!(p.data[c * spatial..(c + 1) * spatial].iter().all(|x| (x - want).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn small_volumes_are_padded_and_cropped() {
        let net = tiny_net();
        let v = random_volume([3, 5, 4], 2);
        let p = sliding_window_predict(&net, &v, [4, 8, 4], 0.8).unwrap();
        assert_eq!(p.dims, [3, 5, 4]);
        assert_eq!(p.data.len(), 3 * 60);
    }

    #[test]
    fn argmax_tie_break_and_hot_index() {
        let uniform = ProbVolume {
            dims: [1, 1, 2],
            spacing: [1.0; 3],
            classes: 3,
            data: vec![1.0 / 3.0; 6],
        };
        assert_eq!(predict_labels(&uniform).labels, vec![0, 0]);
        let hot = ProbVolume {
            data: vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0],
            ..uniform
        };
        assert_eq!(predict_labels(&hot).labels, vec![2, 1]);
    }

    #[test]
    fn starts_snap_to_the_edge() {
        assert_eq!(window_starts(24, 16, 0.8), vec![0, 3, 6, 8]);
        assert_eq!(window_starts(16, 16, 0.8), vec![0]);
        assert_eq!(window_starts(10, 4, 0.0), vec![0, 4, 6]);
        assert_eq!(window_stride(2, 0.8), 1);
    }

    fn records(dsc: &[f64], shift: f64) -> Vec<MetricsRecord> {
        dsc.iter()
            .enumerate()
            .flat_map(|(i, &d)| {
                (1..=2).map(move |organ| MetricsRecord {
                    sample_id: format!("s{i}"),
                    organ,
                    dsc: d + shift + organ as f64 * 0.01,
                    hd_mm: Some(2.0 * organ as f64),
                    noise_std: 0.01,
                })
            })
            .collect()
    }

    #[test]
    fn identical_models_have_zero_improvement() {
        let a = records(&[0.7, 0.8, 0.75, 0.6], 0.0);
        let t = compare_models(&a, &a, "a", "a").unwrap();
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r.improvement == 0.0 && r.p_value == 1.0));
        assert_eq!(t.rows[2].organ, None);
    }

    #[test]
    fn constant_shift_is_the_improvement() {
        let b = records(&[0.5, 0.55, 0.6, 0.4], 0.0);
        let a = records(&[0.5, 0.55, 0.6, 0.4], 0.1);
        let t = compare_models(&a, &b, "a", "b").unwrap();
        assert!(t.rows.iter().all(|r| (r.improvement - 0.1).abs() < 1e-12));
        let mut missing = b.clone();
        missing.pop();
        assert!(compare_models(&a, &missing, "a", "b").is_err());
    }

    #[test]
    fn report_files() {
        let a = records(&[0.7, 0.8], 0.0);
        let t = compare_models(&a, &a, "x", "y").unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(&dir.path().join("t.csv")).unwrap();
        t.write_summary(&dir.path().join("s.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert!(csv.lines().nth(3).unwrap().starts_with("0.01,average,2,"));
        let s = t.summary_json();
        assert_eq!(s["per_std"][0]["average"]["p_value"], 1.0);
        assert_eq!(s["per_std"][0]["organs"].as_array().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn swapping_models_negates_improvement(
            a in prop::collection::vec(0.0f64..1.0, 3..7),
            b in prop::collection::vec(0.0f64..1.0, 7),
        ) {
            let ra = records(&a, 0.0);
            let rb = records(&b[..a.len()], 0.0);
            let ab = compare_models(&ra, &rb, "a", "b").unwrap();
            let ba = compare_models(&rb, &ra, "b", "a").unwrap();
            for (x, y) in ab.rows.iter().zip(&ba.rows) {
                prop_assert_eq!(x.improvement, -y.improvement);
                prop_assert!((x.p_value - y.p_value).abs() < 1e-12);
            }
        }

        #[test]
        fn window_average_stays_on_the_simplex(seed in 0u64..50) {
            let net = tiny_net();
            let v = random_volume([5, 6, 7], seed);
            let p = sliding_window_predict(&net, &v, [2, 4, 4], 0.8).unwrap();
            let spatial = 5 * 6 * 7;
            for i in 0..spatial {
                let s: f32 = (0..3).map(|c| p.data[c * spatial + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
