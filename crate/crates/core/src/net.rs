//! Miniature U-shaped encoder-decoder with named encoder blocks.
//!
//! Layout for depth `L` and base width `b` (channels `c_i = b * 2^(i-1)`):
//!
//! * `e1`: conv-act at full resolution.
//! * `e2..eL`: stride-2 conv-act (down-sampling) followed by conv-act.
//! * `d1..d(L-1)`: nearest up-sampling, concat with the matching encoder output, conv-act.
//! * `head`: 1x1x1 conv to `C` logits.
//!
//! The output of encoder block `i` is the tap point; its shape is
//! `(B, c_i, Z/2^(i-1), Y/2^(i-1), X/2^(i-1))`.

use std::fs;
use std::path::Path;

use afaseg_autodiff::{Graph, NodeId, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

const CKPT_MAGIC: &[u8; 8] = b"MICKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_in_channels() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            num_classes: 4,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("net config", r.to_string()));
        if self.depth < 2 {
            return bad("depth must be >= 2");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        Ok(())
    }

    /// Channels of encoder block `i` (1-based).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Spatial dims must be divisible by `2^(depth-1)`.
    pub fn check_patch(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::invalid(
                "patch size",
                format!("{dims:?} must be divisible by {f} for depth {}", self.depth),
            ));
        }
        Ok(())
    }

    /// Shape of the tap at block `i` for an input of shape `(B, _, Z, Y, X)`.
    pub fn tap_shape(&self, input: &[usize], i: usize) -> Vec<usize> {
        let f = 1 << (i - 1);
        vec![
            input[0],
            self.channels(i),
            input[2] / f,
            input[3] / f,
            input[4] / f,
        ]
    }

    /// Default attacked block: the middle of the encoder, rounded up.
    pub fn default_attack_layer(&self) -> usize {
        self.depth.div_ceil(2)
    }

    /// `(name, shape)` of every parameter in declared order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("e1.conv".into(), self.channels(1), self.in_channels, k);
        for i in 2..=self.depth {
            conv(
                format!("e{i}.down"),
                self.channels(i),
                self.channels(i - 1),
                k,
            );
            conv(format!("e{i}.conv"), self.channels(i), self.channels(i), k);
        }
        for j in 1..self.depth {
            let level = self.depth - j;
            conv(
                format!("d{j}.conv"),
                self.channels(level),
                self.channels(level + 1) + self.channels(level),
                k,
            );
        }
        conv("head".into(), self.num_classes, self.channels(1), 1);
        out
    }
}

/// Parameter leaves of one net bound into a graph, in declared order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> SegNet<T> {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (idx, (name, shape)) in config.layout().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 5 {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = stream(config.seed, Domain::Init, &[idx as u64]);
                (0..n)
                    .map(|_| T::lit(rng.random_range(-bound..bound)))
                    .collect()
            } else {
                vec![T::zero(); n]
            };
            names.push(name);
            params.push(Tensor::from_vec(&shape, data)?);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds the parameters to `g` as gradient-tracked leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.param(p.clone())).collect())
    }

    /// Adds the parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.constant(p.clone())).collect())
    }

    /// Parameter gradients after `backward`; unreached parameters get zeros.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .0
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| p.zeros_like()))
            .collect()
    }

    fn conv_act(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: NodeId,
        param: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let pad = self.params[param].shape()[2] / 2;
        let c = g.conv3d(x, b.0[param], b.0[param + 1], [stride; 3], [pad; 3])?;
        Ok(g.relu(c)?)
    }

    /// Index of the first parameter of encoder block `i`.
    fn enc_param(&self, i: usize) -> usize {
        if i == 1 {
            0
        } else {
            2 + 4 * (i - 2)
        }
    }

    fn dec_param(&self, j: usize) -> usize {
        2 + 4 * (self.config.depth - 1) + 2 * (j - 1)
    }

    fn encoder_block(&self, g: &mut Graph<T>, b: &Bound, prev: NodeId, i: usize) -> Result<NodeId> {
        let p = self.enc_param(i);
        if i == 1 {
            self.conv_act(g, b, prev, p, 1)
        } else {
            let down = self.conv_act(g, b, prev, p, 2)?;
            self.conv_act(g, b, down, p + 2, 1)
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected (B, {}, Z, Y, X), got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_patch([shape[2], shape[3], shape[4]])
    }

    /// Outputs of encoder blocks `1..=upto`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: NodeId,
        upto: usize,
    ) -> Result<Vec<NodeId>> {
        self.check_input(g.value(x).shape())?;
        let mut feats = Vec::with_capacity(upto);
        let mut cur = x;
        for i in 1..=upto {
            cur = self.encoder_block(g, b, cur, i)?;
            feats.push(cur);
        }
        Ok(feats)
    }

    /// Finishes the forward pass given the outputs of the first `feats.len()` encoder blocks.
    pub fn finish(&self, g: &mut Graph<T>, b: &Bound, feats: &[NodeId]) -> Result<NodeId> {
        let depth = self.config.depth;
        let mut feats = feats.to_vec();
        if feats.is_empty() {
            return Err(Error::invalid(
                "forward",
                "at least one encoder output required",
            ));
        }
        for i in feats.len() + 1..=depth {
            let next = self.encoder_block(g, b, *feats.last().expect("non-empty"), i)?;
            feats.push(next);
        }
        let mut cur = feats[depth - 1];
        for j in 1..depth {
            let up = g.upsample_nearest(cur, 2)?;
            let cat = g.concat_channels(up, feats[depth - 1 - j])?;
            cur = self.conv_act(g, b, cat, self.dec_param(j), 1)?;
        }
        let h = self.dec_param(depth);
        Ok(g.conv3d(cur, b.0[h], b.0[h + 1], [1; 3], [0; 3])?)
    }

    pub fn forward_clean(&self, g: &mut Graph<T>, b: &Bound, x: NodeId) -> Result<NodeId> {
        let feats = self.encode(g, b, x, self.config.depth)?;
        self.finish(g, b, &feats)
    }

    fn check_layer(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.config.depth {
            return Err(Error::invalid(
                "attack layer",
                format!("{i} outside 1..={}", self.config.depth),
            ));
        }
        Ok(())
    }

    /// Clean forward that also returns the tagged output of encoder block `i`.
    pub fn forward_with_tap(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: NodeId,
        i: usize,
    ) -> Result<(NodeId, NodeId)> {
        self.check_layer(i)?;
        let feats = self.encode(g, b, x, self.config.depth)?;
        g.tap(feats[i - 1], &format!("e{i}"));
        let logits = self.finish(g, b, &feats)?;
        Ok((logits, feats[i - 1]))
    }

    /// Forward pass with encoder block `i`'s output replaced by a leaf holding `replacement`.
    ///
    /// Every consumer of block `i` (the next encoder block and the skip connection)
    /// sees the replacement.
    pub fn forward_with_injection(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: NodeId,
        i: usize,
        replacement: Tensor<T>,
    ) -> Result<NodeId> {
        self.check_layer(i)?;
        let expected = self.config.tap_shape(g.value(x).shape(), i);
        if replacement.shape() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "replacement for block {i} has shape {:?}, expected {expected:?}",
                replacement.shape()
            )));
        }
        let prefix = self.encode(g, b, x, i - 1)?;
        let leaf = g.constant(replacement);
        self.forward_injected(g, b, &prefix, i, leaf)
    }

    /// Injection variant reusing already computed outputs of blocks `1..i`.
    pub fn forward_injected(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        prefix: &[NodeId],
        i: usize,
        replacement: NodeId,
    ) -> Result<NodeId> {
        self.check_layer(i)?;
        if prefix.len() != i - 1 {
            return Err(Error::invalid("injection", "prefix must hold blocks 1..i"));
        }
        let expected = if let Some(&last) = prefix.last() {
            let s = g.value(last).shape();
            let f = if i >= 2 { 2 } else { 1 };
            vec![s[0], self.config.channels(i), s[2] / f, s[3] / f, s[4] / f]
        } else {
            g.value(replacement).shape().to_vec()
        };
        let got = g.value(replacement).shape();
        if got != expected.as_slice() || got[1] != self.config.channels(i) {
            return Err(Error::Shape(format!(
                "replacement for block {i} has shape {got:?}, expected {expected:?}"
            )));
        }
        let mut feats = prefix.to_vec();
        feats.push(replacement);
        self.finish(g, b, &feats)
    }

    /// Logits for `x` without gradient tracking.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let xi = g.constant(x.clone());
        let out = self.forward_clean(&mut g, &b, xi)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: NetConfig,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

impl SegNet<f32> {
    /// `MICKPT01`, `u32` LE header length, JSON header, then parameters as LE `f32`.
    pub fn encode_checkpoint(&self, step: u64) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            step,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path, step: u64) -> Result<()> {
        let bytes = self.encode_checkpoint(step)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Returns the network and the training step stored with it.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let format = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 12 + h {
            return Err(format("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..12 + h]).map_err(|e| format(e.to_string()))?;
        let mut net = Self::build(header.config.clone()).map_err(|e| format(e.to_string()))?;
        let layout = header.config.layout();
        if layout.len() != header.params.len()
            || layout
                .iter()
                .zip(&header.params)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(format("parameter layout does not match config".into()));
        }
        let payload = &bytes[12 + h..];
        if payload.len() != net.param_count() * 4 {
            return Err(format(format!("payload has {} bytes", payload.len())));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for p in &mut net.params {
            for v in p.data_mut() {
                *v = floats.next().expect("length checked");
            }
        }
        Ok((net, header.step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = stream(seed, Domain::Test, &[]);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    fn small() -> NetConfig {
        NetConfig {
            depth: 3,
            base_channels: 2,
            num_classes: 3,
            seed: 5,
            ..NetConfig::default()
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let net = SegNet::<f32>::build(NetConfig {
            depth: 2,
            base_channels: 4,
            num_classes: 3,
            ..NetConfig::default()
        })
        .unwrap();
        // e1.conv 1->4: 4*1*27 + 4 = 112
        // e2.down 4->8: 8*4*27 + 8 = 872
        // e2.conv 8->8: 8*8*27 + 8 = 1736
        // d1.conv 12->4: 4*12*27 + 4 = 1300
        // head 4->3 (1x1x1): 3*4 + 3 = 15
        assert_eq!(net.param_count(), 112 + 872 + 1736 + 1300 + 15);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = SegNet::<f32>::build(small()).unwrap();
        let b = SegNet::<f32>::build(small()).unwrap();
        assert_eq!(a, b);
        let c = SegNet::<f32>::build(NetConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig {
            depth: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            num_classes: 1,
            ..small()
        }
        .validate()
        .is_err());
        assert!(small().check_patch([8, 16, 16]).is_ok());
        assert!(small().check_patch([6, 16, 16]).is_err());
    }

    #[test]
    fn logits_shape_contract() {
        let net = SegNet::<f32>::build(NetConfig {
            num_classes: 4,
            ..small()
        })
        .unwrap();
        let logits = net.predict_logits(&input(&[1, 1, 16, 16, 8], 1)).unwrap();
        assert_eq!(logits.shape(), &[1, 4, 16, 16, 8]);
        let bad = input(&[1, 1, 6, 16, 8], 1);
        assert!(net.predict_logits(&bad).is_err());
    }

    #[test]
    fn batch_items_are_independent() {
        let net = SegNet::<f32>::build(small()).unwrap();
        let one = input(&[1, 1, 8, 8, 8], 2);
        let mut twice = one.data().to_vec();
        twice.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 1, 8, 8, 8], twice).unwrap();
        let out = net.predict_logits(&two).unwrap();
        let half = out.len() / 2;
        assert_eq!(&out.data()[..half], &out.data()[half..]);
        assert_eq!(
            &out.data()[..half],
            net.predict_logits(&one).unwrap().data()
        );
    }

    #[test]
    fn tap_shapes_and_identity_injection() {
        let net = SegNet::<f32>::build(small()).unwrap();
        let x = input(&[2, 1, 8, 16, 8], 3);
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let xi = g.constant(x.clone());
        let clean = net.forward_clean(&mut g, &b, xi).unwrap();
        let clean = g.value(clean).clone();
        for i in 1..=3 {
            let (logits, tap) = net.forward_with_tap(&mut g, &b, xi, i).unwrap();
            assert_eq!(g.value(logits), &clean);
            assert_eq!(
                g.value(tap).shape(),
                small().tap_shape(x.shape(), i).as_slice()
            );
            assert!(g.value(tap).data().iter().all(|&v| v >= 0.0));
            assert_eq!(g.tag(tap), Some(format!("e{i}").as_str()));
            let tap_value = g.value(tap).clone();
            let injected = net
                .forward_with_injection(&mut g, &b, xi, i, tap_value)
                .unwrap();
            assert_eq!(g.value(injected), &clean, "block {i}");
        }
    }

    #[test]
    fn injection_checks_layer_and_shape() {
        let net = SegNet::<f32>::build(small()).unwrap();
        let x = input(&[1, 1, 8, 8, 8], 4);
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let xi = g.constant(x);
        assert!(net.forward_with_tap(&mut g, &b, xi, 0).is_err());
        assert!(net.forward_with_tap(&mut g, &b, xi, 4).is_err());
        let wrong = Tensor::zeros(&[1, 4, 8, 8, 8]).unwrap();
        assert!(net
            .forward_with_injection(&mut g, &b, xi, 2, wrong)
            .is_err());
    }

    #[test]
    fn injected_leaf_blocks_gradient_to_earlier_path() {
        // With injection at block 1 the only path from x to the loss is replaced, so
        // block-1 parameters get no gradient; later blocks do.
        let net = SegNet::<f32>::build(small()).unwrap();
        let x = input(&[1, 1, 8, 8, 8], 5);
        let mut g = Graph::new();
        let b = net.bind(&mut g);
        let xi = g.constant(x);
        let repl = Tensor::full(&[1, 2, 8, 8, 8], 0.5).unwrap();
        let logits = net.forward_with_injection(&mut g, &b, xi, 1, repl).unwrap();
        let loss = g.mean(logits).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(b.nodes()[0]).is_none());
        assert!(g.grad(b.nodes()[1]).is_none());
        assert!(g.grad(*b.nodes().last().unwrap()).is_some());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        let net = SegNet::<f32>::build(small()).unwrap();
        net.save_checkpoint(&p, 17).unwrap();
        let (back, step) = SegNet::load_checkpoint(&p).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back, net);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"MICKPT01");
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(SegNet::load_checkpoint(&p).is_err());
    }
}
