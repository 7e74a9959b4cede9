//! Patch sampling, Mixup, the adaptive-moment optimizer and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use afaseg_autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::afa::{afa_training_loss, AfaConfig};
use crate::error::{Error, Result};
use crate::loss::{one_hot, seg_loss_from_logits, LossConfig};
use crate::net::{NetConfig, SegNet};
use crate::rng::{stream, Domain};
use crate::volume::{
    normalize_intensity, read_image, read_labels, resample, resample_labels, LabelVolume, Manifest,
    Spacing, Volume,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub manifest: PathBuf,
    #[serde(default)]
    pub out_dir: PathBuf,
    /// Patch size in `(z, y, x)` voxels.
    #[serde(default = "default_patch")]
    pub patch_size: [usize; 3],
    #[serde(default = "default_patches_per_scan")]
    pub patches_per_scan: usize,
    /// Scans drawn per step; the batch holds `scans_per_batch * patches_per_scan` patches.
    #[serde(default = "default_scans")]
    pub scans_per_batch: usize,
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_mixup")]
    pub mixup_alpha: f64,
    /// Absent for the plain segmentation baseline.
    #[serde(default)]
    pub afa: Option<AfaConfig>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_spacing")]
    pub target_spacing: Spacing,
    #[serde(default)]
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

fn default_patch() -> [usize; 3] {
    [16, 32, 32]
}
fn default_patches_per_scan() -> usize {
    4
}
fn default_scans() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_mixup() -> f64 {
    0.2
}
fn default_depth() -> usize {
    3
}
fn default_base() -> usize {
    8
}
fn default_spacing() -> Spacing {
    [2.0, 2.0, 3.0]
}

impl TrainConfig {
    /// Desk-scale defaults for everything but paths, iteration count and seed.
    pub fn new(manifest: PathBuf, out_dir: PathBuf, iterations: usize, seed: u64) -> Self {
        Self {
            manifest,
            out_dir,
            patch_size: default_patch(),
            patches_per_scan: default_patches_per_scan(),
            scans_per_batch: default_scans(),
            iterations,
            learning_rate: default_lr(),
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            mixup_alpha: default_mixup(),
            afa: None,
            loss: LossConfig::default(),
            depth: default_depth(),
            base_channels: default_base(),
            target_spacing: default_spacing(),
            seed,
            checkpoint_interval: 0,
        }
    }

    pub fn net_config(&self, num_classes: usize) -> NetConfig {
        NetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            num_classes,
            seed: self.seed,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("train.iterations", "must be >= 1"));
        }
        if self.patches_per_scan == 0 || self.scans_per_batch == 0 {
            return Err(Error::invalid("train batch", "patch and scan counts must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train.learning_rate", "must be > 0"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::invalid("train.betas", "each decay must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("train.adam_eps", "must be > 0"));
        }
        if !(self.mixup_alpha >= 0.0) {
            return Err(Error::invalid("train.mixup_alpha", "must be >= 0"));
        }
        if !self.target_spacing.iter().all(|s| *s > 0.0) {
            return Err(Error::invalid("train.target_spacing", "must be positive"));
        }
        self.loss.validate()?;
        let net = self.net_config(2);
        net.validate()?;
        net.check_patch(self.patch_size)?;
        if let Some(afa) = &self.afa {
            afa.validate(self.depth)?;
        }
        Ok(())
    }
}

/// Images `(B, 1, Z, Y, X)` and soft or one-hot targets `(B, C, Z, Y, X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub targets: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `(z, y, x)` corner in the source volume.
    pub corner: [usize; 3],
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

/// `n` patches at uniformly random corners in `[0, dim - patch]` per axis.
pub fn sample_patches(
    v: &Volume,
    l: &LabelVolume,
    n: usize,
    patch: [usize; 3],
    rng: &mut impl Rng,
) -> Result<Vec<Patch>> {
    if v.dims != l.dims {
        return Err(Error::Shape(format!("image {:?} vs labels {:?}", v.dims, l.dims)));
    }
    if (0..3).any(|a| v.dims[a] < patch[a]) {
        return Err(Error::Shape(format!(
            "volume {:?} smaller than patch {patch:?}",
            v.dims
        )));
    }
    let [_, ny, nx] = v.dims;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let corner: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=v.dims[a] - patch[a]));
        let mut image = Vec::with_capacity(patch.iter().product());
        let mut labels = Vec::with_capacity(image.capacity());
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                let start = ((corner[0] + z) * ny + corner[1] + y) * nx + corner[2];
                image.extend_from_slice(&v.data[start..start + patch[2]]);
                labels.extend_from_slice(&l.labels[start..start + patch[2]]);
            }
        }
        out.push(Patch { corner, image, labels });
    }
    Ok(out)
}

pub fn assemble_batch(patches: &[Patch], patch: [usize; 3], classes: usize) -> Result<Batch> {
    let b = patches.len();
    let images: Vec<f32> = patches.iter().flat_map(|p| p.image.iter().copied()).collect();
    let labels: Vec<u8> = patches.iter().flat_map(|p| p.labels.iter().copied()).collect();
    Ok(Batch {
        images: Tensor::from_vec(&[b, 1, patch[0], patch[1], patch[2]], images)?,
        targets: one_hot(&labels, b, classes, patch)?,
    })
}

/// `beta * a + (1 - beta) * b` for images and targets.
pub fn mixup_with(a: &Batch, b: &Batch, beta: f32) -> Result<Batch> {
    let mix = |p: &Tensor<f32>, q: &Tensor<f32>| p.zip_map(q, "mixup", |u, v| beta * u + (1.0 - beta) * v);
    Ok(Batch {
        images: mix(&a.images, &b.images)?,
        targets: mix(&a.targets, &b.targets)?,
    })
}

/// Mixup with `beta ~ Beta(alpha, alpha)`; `alpha = 0` returns `a` unchanged.
pub fn mixup(a: &Batch, b: &Batch, alpha: f64, rng: &mut impl Rng) -> Result<Batch> {
    if alpha < 0.0 {
        return Err(Error::invalid("mixup alpha", "must be >= 0"));
    }
    if alpha == 0.0 {
        a.images.expect_same_shape(&b.images, "mixup")?;
        return Ok(a.clone());
    }
    let dist = Beta::new(alpha, alpha).map_err(|e| Error::invalid("mixup alpha", e.to_string()))?;
    let beta: f64 = dist.sample(rng);
    mixup_with(a, b, beta as f32)
}

/// The batch with its items reordered by `perm`.
pub fn permute_batch(a: &Batch, perm: &[usize]) -> Result<Batch> {
    let pick = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let item = t.len() / t.shape()[0];
        let data = perm
            .iter()
            .flat_map(|&i| t.data()[i * item..(i + 1) * item].iter().copied())
            .collect();
        Ok(Tensor::from_vec(t.shape(), data)?)
    };
    Ok(Batch {
        images: pick(&a.images)?,
        targets: pick(&a.targets)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn optimizer_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "optimizer_step")?;
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let step_size = (cfg.lr / c1) as f32;
    let (b1, b2, c2, eps) = (b1 as f32, b2 as f32, c2 as f32, cfg.eps as f32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *w -= step_size * *mi / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// A scan resampled to the training grid and normalized to `[-1, 1]`, with its labels.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Reads, resamples and normalizes the listed samples of a manifest.
pub fn load_split(manifest: &Manifest, entries: &[crate::volume::SampleEntry], spacing: Spacing) -> Result<Vec<Scan>> {
    let range = manifest.range()?;
    entries
        .iter()
        .map(|e| {
            let image = read_image(&manifest.resolve(&e.image))?;
            let labels = read_labels(&manifest.resolve(&e.labels))?;
            let image = normalize_intensity(&resample(&image, spacing)?, &range)?;
            let labels = resample_labels(&labels, spacing)?;
            Ok(Scan {
                id: e.id.clone(),
                image,
                labels,
            })
        })
        .collect()
}

/// Losses of one step; adversarial entries are empty for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total_loss: f64,
    pub clean_loss: f64,
    pub adv_losses: Vec<(f64, f64)>,
    pub grad_l1_norm: Option<f64>,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("step".into(), json!(self.step));
        m.insert("total_loss".into(), json!(self.total_loss));
        m.insert("L_clean".into(), json!(self.clean_loss));
        for (r, l) in &self.adv_losses {
            m.insert(format!("L_{r}"), json!(l));
        }
        if let Some(n) = self.grad_l1_norm {
            m.insert("grad_l1_norm".into(), json!(n));
        }
        m.insert("wall_ms".into(), json!(self.wall_ms));
        Value::Object(m)
    }
}

/// Stateful trainer over in-memory scans.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: SegNet<f32>,
    pub adam: AdamState,
    scans: Vec<Scan>,
    classes: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, scans: Vec<Scan>) -> Result<Self> {
        cfg.validate()?;
        let first = scans.first().ok_or_else(|| Error::invalid("training set", "no scans"))?;
        let classes = first.labels.num_classes as usize;
        if let Some(s) = scans.iter().find(|s| s.labels.num_classes as usize != classes) {
            return Err(Error::invalid(
                "training set",
                format!("{} has {} classes, expected {classes}", s.id, s.labels.num_classes),
            ));
        }
        let net = SegNet::build(cfg.net_config(classes))?;
        let adam = AdamState::new(net.params());
        Ok(Self {
            cfg,
            net,
            adam,
            scans,
            classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// The (pre-Mixup) batch of step `step`: scans drawn with replacement, then patches.
    pub fn draw_batch(&self, step: u64) -> Result<Batch> {
        let mut pick = stream(self.cfg.seed, Domain::Batches, &[step]);
        let mut patches = Vec::new();
        for s in 0..self.cfg.scans_per_batch {
            let scan = &self.scans[pick.random_range(0..self.scans.len())];
            let mut rng = stream(self.cfg.seed, Domain::Patches, &[step, s as u64]);
            patches.extend(sample_patches(
                &scan.image,
                &scan.labels,
                self.cfg.patches_per_scan,
                self.cfg.patch_size,
                &mut rng,
            )?);
        }
        assemble_batch(&patches, self.cfg.patch_size, self.classes)
    }

    /// The batch actually trained on at `step`, after Mixup with a shuffled copy of itself.
    pub fn training_batch(&self, step: u64) -> Result<Batch> {
        let batch = self.draw_batch(step)?;
        if self.cfg.mixup_alpha == 0.0 {
            return Ok(batch);
        }
        let mut rng = stream(self.cfg.seed, Domain::Mixup, &[step]);
        let mut perm: Vec<usize> = (0..batch.images.shape()[0]).collect();
        perm.shuffle(&mut rng);
        let partner = permute_batch(&batch, &perm)?;
        mixup(&batch, &partner, self.cfg.mixup_alpha, &mut rng)
    }

    /// One optimization step; `step` is 0-based.
    pub fn step(&mut self, step: u64) -> Result<StepRecord> {
        let start = Instant::now();
        let batch = self.training_batch(step)?;
        let mut g = Graph::new();
        let b = self.net.bind(&mut g);
        let x = g.constant(batch.images);
        let t = g.constant(batch.targets);
        let (total, clean, adv, grad_l1) = match &self.cfg.afa {
            Some(afa) => {
                let mut rng = stream(self.cfg.seed, Domain::Attack, &[step]);
                let s = afa_training_loss(&self.net, &mut g, &b, x, t, afa, &self.cfg.loss, &mut rng)?;
                let d = s.diagnostics;
                (d.total_loss, d.clean_loss, d.adv_losses, Some(d.grad_l1_norm))
            }
            None => {
                let logits = self.net.forward_clean(&mut g, &b, x)?;
                let l = seg_loss_from_logits(&mut g, logits, t, &self.cfg.loss)?;
                g.backward(l)?;
                let v = g.value(l).item() as f64;
                (v, v, Vec::new(), None)
            }
        };
        if !total.is_finite() {
            return Err(Error::invalid("training", format!("non-finite loss at step {}", step + 1)));
        }
        let grads = self.net.grads(&g, &b);
        drop(g);
        let adam = AdamConfig {
            lr: self.cfg.learning_rate,
            betas: self.cfg.betas,
            eps: self.cfg.adam_eps,
        };
        optimizer_step(self.net.params_mut(), &grads, &mut self.adam, &adam)?;
        Ok(StepRecord {
            step: step + 1,
            total_loss: total,
            clean_loss: clean,
            adv_losses: adv,
            grad_l1_norm: grad_l1,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<StepRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Runs the full loop from a manifest, logging every step and checkpointing at the
/// configured interval and at the end.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let scans = load_split(&manifest, &manifest.train, cfg.target_spacing)?;
    train_on(cfg, scans)
}

pub fn train_on(cfg: &TrainConfig, scans: Vec<Scan>) -> Result<TrainOutput> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut trainer = Trainer::new(cfg.clone(), scans)?;
    let log = cfg.out_dir.join(LOG_FILE);
    let file = File::create(&log).map_err(|e| Error::io(&log, e))?;
    let mut w = BufWriter::new(file);
    let mut records = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations as u64 {
        let rec = trainer.step(step)?;
        writeln!(w, "{}", rec.to_json()).map_err(|e| Error::io(&log, e))?;
        if rec.step % 100 == 0 {
            log::info!("step {} loss {:.4}", rec.step, rec.total_loss);
        }
        let n = rec.step;
        records.push(rec);
        if cfg.checkpoint_interval > 0 && n % cfg.checkpoint_interval as u64 == 0 && n < cfg.iterations as u64 {
            w.flush().map_err(|e| Error::io(&log, e))?;
            trainer.net.save_checkpoint(&cfg.out_dir.join(checkpoint_name(n)), n)?;
        }
    }
    w.flush().map_err(|e| Error::io(&log, e))?;
    let checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    trainer.net.save_checkpoint(&checkpoint, cfg.iterations as u64)?;
    Ok(TrainOutput {
        checkpoint,
        log,
        records,
    })
}

/// Reads the loss columns of a training log.
pub fn read_log(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(dims: [usize; 3]) -> (Volume, LabelVolume) {
        let n: usize = dims.iter().product();
        let v = Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f32).collect()).unwrap();
        let l = LabelVolume::new(dims, [1.0; 3], (0..n).map(|i| (i % 3) as u8).collect(), 3).unwrap();
        (v, l)
    }

    #[test]
    fn whole_volume_patch() {
        let (v, l) = volume([2, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patches(&v, &l, 3, [2, 4, 4], &mut rng).unwrap();
        assert!(p.iter().all(|p| p.corner == [0, 0, 0] && p.image == v.data && p.labels == l.labels));
        assert!(sample_patches(&v, &l, 1, [3, 4, 4], &mut rng).is_err());
    }

    #[test]
    fn corners_in_bounds_and_reproducible() {
        let (v, l) = volume([6, 9, 7]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_patches(&v, &l, 50, [2, 4, 4], &mut rng).unwrap()
        };
        let a = draw(3);
        for p in &a {
            assert!(p.corner[0] <= 4 && p.corner[1] <= 5 && p.corner[2] <= 3);
            let [z, y, x] = p.corner;
            assert_eq!(p.image[0], v.get(z, y, x));
            assert_eq!(*p.image.last().unwrap(), v.get(z + 1, y + 3, x + 3));
        }
        assert_eq!(a, draw(3));
    }

    fn batch(value: f32, label: u8) -> Batch {
        let p = Patch {
            corner: [0; 3],
            image: vec![value; 8],
            labels: vec![label; 8],
        };
        assemble_batch(&[p.clone(), p], [2, 2, 2], 3).unwrap()
    }

    #[test]
    fn mixup_endpoints() {
        let (a, b) = (batch(0.5, 1), batch(-1.0, 2));
        assert_eq!(mixup_with(&a, &b, 1.0).unwrap(), a);
        let mid = mixup_with(&a, &b, 0.5).unwrap();
        assert!(mid.images.data().iter().all(|&v| v == -0.25));
        assert!(mid.targets.data().chunks(8).skip(1).take(2).all(|c| c.iter().all(|&v| v == 0.5)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mixup(&a, &b, 0.0, &mut rng).unwrap(), a);
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0f32, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::from_vec(&[3], vec![0.3f32, -2.0, 0.0]).unwrap()];
        let mut s = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        let d = p[0].data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
        assert!(optimizer_step(&mut p, &[], &mut s, &AdamConfig::default()).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let text = r#"{"iterations": 5, "epzilon": 0.1}"#;
        let err = serde_json::from_str::<TrainConfig>(text).unwrap_err().to_string();
        assert!(err.contains("epzilon"));
        let mut cfg = TrainConfig::new("m".into(), "o".into(), 5, 1);
        assert!(cfg.validate().is_ok());
        cfg.patch_size = [16, 30, 32];
        assert!(cfg.validate().is_err());
        cfg.patch_size = [16, 32, 32];
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn mixup_stays_in_range_and_on_the_simplex(
            a in prop::collection::vec(-1.0f32..=1.0, 8),
            b in prop::collection::vec(-1.0f32..=1.0, 8),
            la in prop::collection::vec(0u8..3, 8),
            lb in prop::collection::vec(0u8..3, 8),
            seed in 0u64..1000,
        ) {
            let mk = |image: Vec<f32>, labels: Vec<u8>| {
                assemble_batch(&[Patch { corner: [0; 3], image, labels }], [2, 2, 2], 3).unwrap()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mixup(&mk(a, la), &mk(b, lb), 0.2, &mut rng).unwrap();
            prop_assert!(m.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for v in 0..8 {
                let s: f32 = (0..3).map(|c| m.targets.data()[c * 8 + v]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
