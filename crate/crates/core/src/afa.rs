//! Adversarial feature augmentation: sign-gradient attacks on an encoder feature map,
//! moment-matched injection of the attacked statistics, and the combined training objective.

use afaseg_autodiff::{channel_moments, Graph, NodeId, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{seg_loss_from_logits, LossConfig};
use crate::net::{Bound, SegNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AfaConfig {
    /// Encoder block to attack, 1-based; `None` picks the middle block.
    pub attack_layer: Option<usize>,
    pub epsilon: f64,
    /// Constraint ratios `k`; each yields one adversarial branch.
    pub ratios: Vec<f64>,
    pub sigma_eps: f64,
    /// Standard deviation of the additive Gaussian start `lambda`.
    pub lambda_std: f64,
    /// Draw a fresh `lambda` for every ratio instead of sharing one per batch.
    pub lambda_per_ratio: bool,
    pub clean_weight: f64,
    /// Weight of the mean adversarial loss.
    pub adv_weight: f64,
}

impl Default for AfaConfig {
    fn default() -> Self {
        Self {
            attack_layer: None,
            epsilon: 0.003,
            ratios: vec![0.1, 0.05, 0.025, 0.0125],
            sigma_eps: 1e-6,
            lambda_std: 1.0,
            lambda_per_ratio: false,
            clean_weight: 1.0,
            adv_weight: 1.0,
        }
    }
}

impl AfaConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.epsilon) {
            return Err(Error::invalid(
                "afa.epsilon",
                format!("{} must be >= 0", self.epsilon),
            ));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::invalid(
                "afa.ratios",
                format!("ratio {r} must be > 0"),
            ));
        }
        if !(self.sigma_eps > 0.0) {
            return Err(Error::invalid("afa.sigma_eps", "must be positive"));
        }
        for (name, v) in [
            ("afa.lambda_std", self.lambda_std),
            ("afa.clean_weight", self.clean_weight),
            ("afa.adv_weight", self.adv_weight),
        ] {
            if !finite_nonneg(v) {
                return Err(Error::invalid(name, format!("{v} must be >= 0")));
            }
        }
        let layer = self.layer(depth);
        if layer == 0 || layer > depth {
            return Err(Error::invalid(
                "afa.attack_layer",
                format!("{layer} outside 1..={depth}"),
            ));
        }
        Ok(())
    }

    pub fn layer(&self, depth: usize) -> usize {
        self.attack_layer.unwrap_or(depth.div_ceil(2))
    }
}

/// Per-channel mean and population standard deviation over batch and spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

pub fn compute_moments<T: Scalar>(f: &Tensor<T>) -> Moments<T> {
    let (mu, sigma) = channel_moments(f);
    Moments { mu, sigma }
}

/// One attack's transient state.
#[derive(Debug, Clone)]
pub struct AttackDraw<T> {
    /// One entry when shared across ratios, otherwise one per ratio.
    pub lambda: Vec<Tensor<T>>,
    pub grad: Tensor<T>,
    pub adv_features: Vec<Tensor<T>>,
    pub clean_moments: Moments<T>,
    pub adv_moments: Vec<Moments<T>>,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Clamps `f` elementwise to `[(1 - r) min(f_clean), (1 + r) max(f_clean)]`.
pub fn clamp_sr<T: Scalar>(f: &Tensor<T>, f_clean: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    if !(r > 0.0) {
        return Err(Error::invalid(
            "constraint ratio",
            format!("{r} must be > 0"),
        ));
    }
    f.expect_same_shape(f_clean, "clamp_sr")?;
    let r = T::lit(r);
    let lo = (T::one() - r) * f_clean.min_value();
    let hi = (T::one() + r) * f_clean.max_value();
    Ok(f.map(|v| v.max(lo).min(hi)))
}

/// `clamp_sr(f_clean + lambda + eps * sign(grad), f_clean, r)` with `sign(0) = 0`.
pub fn fgsm_feature<T: Scalar>(
    f_clean: &Tensor<T>,
    grad: &Tensor<T>,
    lambda: &Tensor<T>,
    eps: f64,
    r: f64,
) -> Result<Tensor<T>> {
    f_clean.expect_same_shape(grad, "fgsm_feature")?;
    f_clean.expect_same_shape(lambda, "fgsm_feature")?;
    let eps = T::lit(eps);
    let data = f_clean
        .data()
        .iter()
        .zip(grad.data())
        .zip(lambda.data())
        .map(|((&f, &g), &l)| f + l + eps * sign(g))
        .collect();
    let stepped = Tensor::from_vec(f_clean.shape(), data)?;
    clamp_sr(&stepped, f_clean, r)
}

/// Graph node re-normalizing `f_clean` per channel to the moments of `f_adv`.
pub fn inject_moments_node<T: Scalar>(
    g: &mut Graph<T>,
    f_clean: NodeId,
    adv: &Moments<T>,
    sigma_eps: f64,
) -> Result<NodeId> {
    Ok(g.moment_inject(f_clean, &adv.sigma, &adv.mu, T::lit(sigma_eps))?)
}

/// `sigma_adv * (f_clean - mu_clean) / (sigma_clean + sigma_eps) + mu_adv`, per channel.
pub fn inject_moments<T: Scalar>(
    f_clean: &Tensor<T>,
    f_adv: &Tensor<T>,
    sigma_eps: f64,
) -> Result<Tensor<T>> {
    f_clean.expect_same_shape(f_adv, "inject_moments")?;
    let mut g = Graph::new();
    let x = g.constant(f_clean.clone());
    let out = inject_moments_node(&mut g, x, &compute_moments(f_adv), sigma_eps)?;
    Ok(g.value(out).clone())
}

pub fn gaussian_like<T: Scalar>(
    shape: &[usize],
    std: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Ok(Tensor::from_vec(shape, data)?)
}

/// Clean forward with a tap at block `i`, segmentation loss, and backward.
///
/// Returns the tap value, its gradient and the loss value.
pub fn feature_gradient<T: Scalar>(
    net: &SegNet<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    i: usize,
    loss: &LossConfig,
) -> Result<(Tensor<T>, Tensor<T>, T)> {
    let mut g = Graph::new();
    let b = net.bind(&mut g);
    let xi = g.constant(x.clone());
    let ti = g.constant(target.clone());
    let (logits, tap) = net.forward_with_tap(&mut g, &b, xi, i)?;
    let l = seg_loss_from_logits(&mut g, logits, ti, loss)?;
    g.backward(l)?;
    let grad = g
        .grad(tap)
        .cloned()
        .unwrap_or_else(|| g.value(tap).zeros_like());
    Ok((g.value(tap).clone(), grad, g.value(l).item()))
}

/// Per-step losses of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AfaDiagnostics {
    pub total_loss: f64,
    pub clean_loss: f64,
    /// `(ratio, loss)` in configured order.
    pub adv_losses: Vec<(f64, f64)>,
    pub grad_l1_norm: f64,
}

impl AfaDiagnostics {
    pub fn mean_adv(&self) -> Option<f64> {
        (!self.adv_losses.is_empty()).then(|| {
            self.adv_losses.iter().map(|(_, l)| l).sum::<f64>() / self.adv_losses.len() as f64
        })
    }
}

pub struct AfaStep<T> {
    pub total: NodeId,
    pub diagnostics: AfaDiagnostics,
    pub draw: AttackDraw<T>,
}

/// Builds `clean_weight * L_clean + adv_weight * mean_k L_k` on `g` and leaves the gradient
/// of that total in `g`.
///
/// The clean pass is differentiated first to obtain the tap gradient that drives the attack.
/// The adversarial branches reuse the clean encoder prefix, receive `f_clean` as data, and
/// their gradients are accumulated on top, so parameter gradients equal those of a single
/// backward over the total.
#[allow(clippy::too_many_arguments)]
pub fn afa_training_loss<T: Scalar>(
    net: &SegNet<T>,
    g: &mut Graph<T>,
    b: &Bound,
    x: NodeId,
    target: NodeId,
    cfg: &AfaConfig,
    loss: &LossConfig,
    rng: &mut impl Rng,
) -> Result<AfaStep<T>> {
    let depth = net.config().depth;
    cfg.validate(depth)?;
    let i = cfg.layer(depth);
    let feats = net.encode(g, b, x, depth)?;
    g.tap(feats[i - 1], &format!("e{i}"));
    let logits = net.finish(g, b, &feats)?;
    let l_clean = seg_loss_from_logits(g, logits, target, loss)?;
    g.backward(l_clean)?;

    let f_clean = g.value(feats[i - 1]).clone();
    let grad = g
        .grad(feats[i - 1])
        .cloned()
        .unwrap_or_else(|| f_clean.zeros_like());
    let grad_l1_norm = grad
        .data()
        .iter()
        .map(|v| v.abs().to_f64().unwrap_or(0.0))
        .sum();
    let draws = if cfg.lambda_per_ratio {
        cfg.ratios.len()
    } else {
        1
    };
    let lambda = (0..draws)
        .map(|_| gaussian_like::<T>(f_clean.shape(), cfg.lambda_std, rng))
        .collect::<Result<Vec<_>>>()?;

    let clean_moments = compute_moments(&f_clean);
    let mut adv_features = Vec::with_capacity(cfg.ratios.len());
    let mut adv_moments = Vec::with_capacity(cfg.ratios.len());
    let mut adv_nodes = Vec::with_capacity(cfg.ratios.len());
    for (k, &r) in cfg.ratios.iter().enumerate() {
        let lam = &lambda[if cfg.lambda_per_ratio { k } else { 0 }];
        let f_adv = fgsm_feature(&f_clean, &grad, lam, cfg.epsilon, r)?;
        let m = compute_moments(&f_adv);
        let data = g.constant(f_clean.clone());
        let noisy = inject_moments_node(g, data, &m, cfg.sigma_eps)?;
        let out = net.forward_injected(g, b, &feats[..i - 1], i, noisy)?;
        adv_nodes.push(seg_loss_from_logits(g, out, target, loss)?);
        adv_features.push(f_adv);
        adv_moments.push(m);
    }

    let value = |g: &Graph<T>, id: NodeId| g.value(id).item().to_f64().unwrap_or(f64::NAN);
    let adv_losses: Vec<(f64, f64)> = cfg
        .ratios
        .iter()
        .zip(&adv_nodes)
        .map(|(&r, &id)| (r, value(g, id)))
        .collect();

    // rest = (clean_weight - 1) * L_clean + adv_weight * mean_k L_k
    let mut rest: Option<NodeId> = None;
    let mut push = |g: &mut Graph<T>, term: NodeId| -> Result<()> {
        rest = Some(match rest {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        Ok(())
    };
    if !adv_nodes.is_empty() {
        let mut sum = adv_nodes[0];
        for &n in &adv_nodes[1..] {
            sum = g.add(sum, n)?;
        }
        let w = T::lit(cfg.adv_weight / adv_nodes.len() as f64);
        let adv = g.scale(sum, w)?;
        push(g, adv)?;
    }
    if cfg.clean_weight != 1.0 {
        let extra = g.scale(l_clean, T::lit(cfg.clean_weight - 1.0))?;
        push(g, extra)?;
    }
    let total = match rest {
        Some(r) => {
            g.backward_accumulate(r)?;
            g.add(l_clean, r)?
        }
        None => l_clean,
    };

    let diagnostics = AfaDiagnostics {
        total_loss: value(g, total),
        clean_loss: value(g, l_clean),
        adv_losses,
        grad_l1_norm,
    };
    Ok(AfaStep {
        total,
        diagnostics,
        draw: AttackDraw {
            lambda,
            grad,
            adv_features,
            clean_moments,
            adv_moments,
        },
    })
}
