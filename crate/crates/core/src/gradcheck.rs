//! Central finite-difference checks of every differentiable graph op and of the
//! segmentation loss through a tiny network, all in `f64`.

use std::time::Instant;

use afaseg_autodiff::{finite_difference_gradient, max_relative_error, Graph, NodeId, Tensor};
pub use afaseg_autodiff::OpKind;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{one_hot, seg_loss_from_logits, LossConfig};
use crate::net::{NetConfig, SegNet};
use crate::rng::{stream, Domain, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Corrupts the analytic gradient of one check; only for exercising the failure path.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
    pub elapsed_s: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }
}

type Build = fn(&mut Graph<f64>, &[NodeId], &mut StreamRng) -> Result<NodeId>;
type Inputs = fn(&mut StreamRng) -> Vec<Tensor<f64>>;

struct Case {
    op: OpKind,
    inputs: Inputs,
    build: Build,
}

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values with magnitude in `[0.1, 1)` so no element sits near a kink at 0.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, 0.1, 1.0).map_signs(rng)
}

trait MapSigns {
    fn map_signs(self, rng: &mut StreamRng) -> Self;
}

impl MapSigns for Tensor<f64> {
    fn map_signs(mut self, rng: &mut StreamRng) -> Self {
        for v in self.data_mut() {
            if rng.random_bool(0.5) {
                *v = -*v;
            }
        }
        self
    }
}

const SHAPE: [usize; 5] = [2, 3, 2, 2, 3];

fn cases() -> Vec<Case> {
    fn conv_inputs(rng: &mut StreamRng, x: [usize; 5], k: [usize; 3]) -> Vec<Tensor<f64>> {
        vec![
            uniform(rng, &x, -1.0, 1.0),
            uniform(rng, &[3, x[1], k[0], k[1], k[2]], -0.5, 0.5),
            uniform(rng, &[3], -0.5, 0.5),
        ]
    }
    vec![
        Case {
            op: OpKind::Conv3d,
            inputs: |r| conv_inputs(r, [2, 2, 3, 4, 5], [3, 3, 3]),
            build: |g, x, _| Ok(g.conv3d(x[0], x[1], x[2], [1; 3], [1; 3])?),
        },
        Case {
            op: OpKind::Conv3d,
            inputs: |r| conv_inputs(r, [1, 2, 4, 4, 5], [3, 2, 3]),
            build: |g, x, _| Ok(g.conv3d(x[0], x[1], x[2], [2; 3], [1, 0, 1])?),
        },
        Case {
            op: OpKind::Conv3d,
            inputs: |r| conv_inputs(r, [2, 4, 2, 3, 2], [1, 1, 1]),
            build: |g, x, _| Ok(g.conv3d(x[0], x[1], x[2], [1; 3], [0; 3])?),
        },
        Case {
            op: OpKind::Relu,
            inputs: |r| vec![away_from_zero(r, &SHAPE)],
            build: |g, x, _| Ok(g.relu(x[0])?),
        },
        Case {
            op: OpKind::UpsampleNearest,
            inputs: |r| vec![uniform(r, &[1, 2, 2, 2, 3], -1.0, 1.0)],
            build: |g, x, _| Ok(g.upsample_nearest(x[0], 2)?),
        },
        Case {
            op: OpKind::ConcatChannels,
            inputs: |r| vec![uniform(r, &[2, 2, 2, 2, 2], -1.0, 1.0), uniform(r, &[2, 3, 2, 2, 2], -1.0, 1.0)],
            build: |g, x, _| Ok(g.concat_channels(x[0], x[1])?),
        },
        Case {
            op: OpKind::SoftmaxChannels,
            inputs: |r| vec![uniform(r, &SHAPE, -3.0, 3.0)],
            build: |g, x, _| Ok(g.softmax_channels(x[0])?),
        },
        Case {
            op: OpKind::Add,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0), uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, _| Ok(g.add(x[0], x[1])?),
        },
        Case {
            op: OpKind::Mul,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0), uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, _| Ok(g.mul(x[0], x[1])?),
        },
        Case {
            op: OpKind::Div,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0), uniform(r, &SHAPE, 0.5, 1.5).map_signs(r)],
            build: |g, x, _| Ok(g.div(x[0], x[1])?),
        },
        Case {
            op: OpKind::Scale,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, r| Ok(g.scale(x[0], r.random_range(-2.0..2.0))?),
        },
        Case {
            op: OpKind::AddScalar,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, r| Ok(g.add_scalar(x[0], r.random_range(-2.0..2.0))?),
        },
        Case {
            op: OpKind::Sum,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, _| Ok(g.sum(x[0])?),
        },
        Case {
            op: OpKind::Mean,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, _| Ok(g.mean(x[0])?),
        },
        Case {
            op: OpKind::SumPerChannel,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, _| Ok(g.sum_per_channel(x[0])?),
        },
        Case {
            op: OpKind::Log,
            inputs: |r| vec![uniform(r, &SHAPE, 0.5, 2.0)],
            build: |g, x, _| Ok(g.log(x[0])?),
        },
        Case {
            op: OpKind::ClampMin,
            inputs: |r| vec![away_from_zero(r, &SHAPE)],
            build: |g, x, _| Ok(g.clamp_min(x[0], 0.0)?),
        },
        Case {
            op: OpKind::MomentInject,
            inputs: |r| vec![uniform(r, &SHAPE, -1.0, 1.0)],
            build: |g, x, r| {
                let gain: Vec<f64> = (0..SHAPE[1]).map(|_| r.random_range(0.5..2.0)).collect();
                let offset: Vec<f64> = (0..SHAPE[1]).map(|_| r.random_range(-1.0..1.0)).collect();
                Ok(g.moment_inject(x[0], &gain, &offset, 1e-6)?)
            },
        },
    ]
}

fn corrupt(grads: &mut [Tensor<f64>]) {
    let g = &mut grads[grads.len().min(2) - 1];
    let d = g.data_mut();
    d[0] += 1e-2 * d[0].abs().max(1.0);
}

/// Reduces the op output to a scalar with fixed random weights so every output element
/// contributes a distinct coefficient.
fn scalar_of(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = stream(seed, Domain::Test, &[u64::MAX]);
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let weighted = g.mul(out, w)?;
    Ok(g.sum(weighted)?)
}

fn check_case(case: &Case, index: usize, seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let mut rng = stream(seed, Domain::Test, &[index as u64]);
    let inputs = (case.inputs)(&mut rng);
    let build_state = rng.clone();
    let eval = |inputs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let mut r = build_state.clone();
        let out = (case.build)(&mut g, &ids, &mut r)?;
        let loss = scalar_of(&mut g, out, seed)?;
        Ok((g, ids, loss))
    };
    let (mut g, ids, loss) = eval(&inputs)?;
    g.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(&inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect();
    if opts.fault == Some(case.op) {
        corrupt(&mut analytic);
    }
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let mut probe = inputs.clone();
        let numeric = finite_difference_gradient(
            |t| {
                probe[k] = t.clone();
                let (g, _, l) = eval(&probe).expect("shapes fixed by the first evaluation");
                g.value(l).item()
            },
            &inputs[k],
            opts.step,
        );
        worst = worst.max(max_relative_error(&analytic[k], &numeric, opts.floor));
    }
    Ok(worst)
}

/// Tiny network, random input and one-hot target, biases randomised so every unit is live.
fn network_fixture(seed: u64) -> Result<(SegNet<f64>, Tensor<f64>, Tensor<f64>)> {
    let mut net = SegNet::<f64>::build(NetConfig {
        depth: 2,
        base_channels: 2,
        num_classes: 3,
        seed,
        ..NetConfig::default()
    })?;
    let mut rng = stream(seed, Domain::Test, &[u64::MAX - 1]);
    for p in net.params_mut() {
        if p.shape().len() == 1 {
            *p = uniform(&mut rng, p.shape(), -0.2, 0.2);
        }
    }
    let dims = [2, 4, 4];
    let x = uniform(&mut rng, &[2, 1, 2, 4, 4], -1.0, 1.0);
    let labels: Vec<u8> = (0..2 * 32).map(|_| rng.random_range(0..3)).collect();
    let t = one_hot(&labels, 2, 3, dims)?;
    Ok((net, x, t))
}

fn network_loss(net: &SegNet<f64>, x: &Tensor<f64>, t: &Tensor<f64>) -> Result<(Graph<f64>, crate::net::Bound, NodeId)> {
    let mut g = Graph::new();
    let b = net.bind(&mut g);
    let xi = g.constant(x.clone());
    let ti = g.constant(t.clone());
    let logits = net.forward_clean(&mut g, &b, xi)?;
    let l = seg_loss_from_logits(&mut g, logits, ti, &LossConfig::default())?;
    Ok((g, b, l))
}

fn check_network(seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let (net, x, t) = network_fixture(seed)?;
    let (mut g, b, l) = network_loss(&net, &x, &t)?;
    g.backward(l)?;
    let analytic = net.grads(&g, &b);
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut probe = net.clone();
        let numeric = finite_difference_gradient(
            |p| {
                probe.params_mut()[k] = p.clone();
                let (g, _, l) = network_loss(&probe, &x, &t).expect("fixture shapes are valid");
                g.value(l).item()
            },
            &net.params()[k],
            opts.step,
        );
        worst = worst.max(max_relative_error(a, &numeric, opts.floor));
    }
    Ok(worst)
}

/// Name of the whole-network check in the report.
pub const NETWORK_CHECK: &str = "seg_loss(tiny_net)";

/// Runs every check for `opts.seeds` seeds and reports the worst relative error per op.
pub fn run_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let start = Instant::now();
    let cases = cases();
    let mut ops: Vec<OpReport> = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        for seed in 0..opts.seeds {
            worst = worst.max(check_case(case, i, seed, opts)?);
        }
        let name = case.op.name();
        match ops.iter_mut().find(|o| o.op == name) {
            Some(o) => o.max_rel_err = o.max_rel_err.max(worst),
            None => ops.push(OpReport {
                op: name.to_string(),
                seeds: opts.seeds,
                max_rel_err: worst,
                passed: false,
            }),
        }
    }
    let mut worst = 0.0f64;
    for seed in 0..opts.seeds {
        worst = worst.max(check_network(seed, opts)?);
    }
    ops.push(OpReport {
        op: NETWORK_CHECK.to_string(),
        seeds: opts.seeds,
        max_rel_err: worst,
        passed: false,
    });
    for o in &mut ops {
        o.passed = o.max_rel_err <= opts.tolerance;
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        ops,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Every op kind except leaves, the set the report must cover.
pub const DIFFERENTIABLE_OPS: [OpKind; 16] = [
    OpKind::Conv3d,
    OpKind::Relu,
    OpKind::UpsampleNearest,
    OpKind::ConcatChannels,
    OpKind::SoftmaxChannels,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::SumPerChannel,
    OpKind::Log,
    OpKind::ClampMin,
    OpKind::MomentInject,
];

pub fn op_by_name(name: &str) -> Option<OpKind> {
    DIFFERENTIABLE_OPS.into_iter().find(|o| o.name() == name)
}
