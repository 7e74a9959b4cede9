//! Combined soft Dice and cross-entropy segmentation loss, built on the graph.

use afaseg_autodiff::{Graph, NodeId, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor applied before the logarithm in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the Dice term; cross-entropy receives `1 - gamma`.
    pub gamma: f64,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            smooth_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(
                "loss.gamma",
                format!("{} not in [0, 1]", self.gamma),
            ));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::invalid("loss.smooth_eps", "must be positive"));
        }
        Ok(())
    }
}

/// One-hot encodes `labels` (one per voxel, `items` items of `spatial` voxels) as `(B, C, Z, Y, X)`.
pub fn one_hot<T: Scalar>(
    labels: &[u8],
    items: usize,
    classes: usize,
    dims: [usize; 3],
) -> Result<Tensor<T>> {
    let spatial: usize = dims.iter().product();
    if labels.len() != items * spatial {
        return Err(Error::Shape(format!(
            "{} labels for {items} items of {spatial} voxels",
            labels.len()
        )));
    }
    let mut data = vec![T::zero(); items * classes * spatial];
    for b in 0..items {
        for (v, &l) in labels[b * spatial..(b + 1) * spatial].iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::invalid(
                    "labels",
                    format!("value {l} >= {classes} classes"),
                ));
            }
            data[(b * classes + l) * spatial + v] = T::one();
        }
    }
    Ok(Tensor::from_vec(
        &[items, classes, dims[0], dims[1], dims[2]],
        data,
    )?)
}

fn check_pair<T: Scalar>(g: &Graph<T>, probs: NodeId, target: NodeId) -> Result<usize> {
    let (p, t) = (g.value(probs), g.value(target));
    p.expect_same_shape(t, "segmentation loss")?;
    let (_, c, _) = p.bcs()?;
    if c < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {c}")));
    }
    Ok(c)
}

/// Mean over foreground classes of `1 - (2 sum p g + eps) / (sum p + sum g + eps)`.
pub fn dice_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    target: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let c = check_pair(g, probs, target)?;
    let eps = T::lit(eps);
    let pg = g.mul(probs, target)?;
    let inter = g.sum_per_channel(pg)?;
    let psum = g.sum_per_channel(probs)?;
    let gsum = g.sum_per_channel(target)?;
    let num = g.scale(inter, T::lit(2.0))?;
    let num = g.add_scalar(num, eps)?;
    let den = g.add(psum, gsum)?;
    let den = g.add_scalar(den, eps)?;
    let ratio = g.div(num, den)?;
    let mut mask = vec![T::one(); c];
    mask[0] = T::zero();
    let mask = g.constant(Tensor::from_vec(&[c], mask)?);
    let fg = g.mul(ratio, mask)?;
    let total = g.sum(fg)?;
    let neg = g.scale(total, -T::one() / T::lit((c - 1) as f64))?;
    Ok(g.add_scalar(neg, T::one())?)
}

/// Mean over voxels of `-sum_c g_c log(max(p_c, 1e-12))`.
pub fn cross_entropy_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let c = check_pair(g, probs, target)?;
    let voxels = g.value(probs).len() / c;
    let clamped = g.clamp_min(probs, T::lit(CE_FLOOR))?;
    let logp = g.log(clamped)?;
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -T::one() / T::lit(voxels as f64))?)
}

/// `gamma * dice + (1 - gamma) * cross_entropy`.
pub fn seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    target: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let dice = dice_loss(g, probs, target, cfg.smooth_eps)?;
    let ce = cross_entropy_loss(g, probs, target)?;
    let dice = g.scale(dice, T::lit(cfg.gamma))?;
    let ce = g.scale(ce, T::lit(1.0 - cfg.gamma))?;
    Ok(g.add(dice, ce)?)
}

/// Softmax over channels followed by [`seg_loss`].
pub fn seg_loss_from_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    target: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let probs = g.softmax_channels(logits)?;
    seg_loss(g, probs, target, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(
        probs: Tensor<f64>,
        target: Tensor<f64>,
        f: impl Fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>,
    ) -> f64 {
        let mut g = Graph::new();
        let p = g.param(probs);
        let t = g.constant(target);
        let l = f(&mut g, p, t).unwrap();
        g.value(l).item()
    }

    fn two_class(p1: f64, labels: &[u8]) -> (Tensor<f64>, Tensor<f64>) {
        let n = labels.len();
        let mut probs = vec![1.0 - p1; n];
        probs.extend(vec![p1; n]);
        let probs = Tensor::from_vec(&[1, 2, 1, 1, n], probs).unwrap();
        (probs, one_hot(labels, 1, 2, [1, 1, n]).unwrap())
    }

    #[test]
    fn dice_of_half_probabilities_on_all_foreground() {
        let (p, t) = two_class(0.5, &[1; 10]);
        let d = eval(p, t, |g, p, t| dice_loss(g, p, t, 0.0));
        assert!((d - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dice_limits() {
        let labels = [0, 1, 1, 0, 1];
        let t = one_hot::<f64>(&labels, 1, 2, [1, 1, 5]).unwrap();
        let perfect = eval(t.clone(), t.clone(), |g, p, t| dice_loss(g, p, t, 1e-5));
        assert!(perfect.abs() < 1e-6);
        let flipped = one_hot::<f64>(&labels.map(|l| 1 - l), 1, 2, [1, 1, 5]).unwrap();
        let disjoint = eval(flipped, t, |g, p, t| dice_loss(g, p, t, 1e-5));
        assert!((disjoint - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_of_uniform_and_exact_predictions() {
        for c in [2usize, 4] {
            let n = 6;
            let probs = Tensor::full(&[2, c, 1, 1, n], 1.0 / c as f64).unwrap();
            let labels: Vec<u8> = (0..2 * n).map(|i| (i % c) as u8).collect();
            let t = one_hot(&labels, 2, c, [1, 1, n]).unwrap();
            let ce = eval(probs, t.clone(), cross_entropy_loss);
            assert!((ce - (c as f64).ln()).abs() < 1e-12);
            assert!(eval(t.clone(), t, cross_entropy_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_endpoints_and_midpoint() {
        let (p, t) = two_class(0.3, &[0, 1, 1, 0, 1, 1]);
        let dice = eval(p.clone(), t.clone(), |g, p, t| dice_loss(g, p, t, 1e-5));
        let ce = eval(p.clone(), t.clone(), cross_entropy_loss);
        let at = |gamma| {
            let cfg = LossConfig {
                gamma,
                smooth_eps: 1e-5,
            };
            eval(p.clone(), t.clone(), move |g, p, t| seg_loss(g, p, t, &cfg))
        };
        assert_eq!(at(1.0), dice);
        assert_eq!(at(0.0), ce);
        assert!((at(0.5) - 0.5 * (dice + ce)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[1, 2, 1, 1, 3], 0.5).unwrap());
        let t = g.constant(Tensor::full(&[1, 2, 1, 1, 4], 0.5).unwrap());
        assert!(dice_loss(&mut g, p, t, 1e-5).is_err());
        assert!(LossConfig {
            gamma: 1.5,
            smooth_eps: 1e-5
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            gamma: 0.5,
            smooth_eps: 0.0
        }
        .validate()
        .is_err());
        assert!(one_hot::<f32>(&[0, 3], 1, 3, [1, 1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn losses_are_bounded_and_combined_convexly(
            logits in prop::collection::vec(-3.0f64..3.0, 24),
            labels in prop::collection::vec(0u8..3, 8),
            gamma in 0.0f64..=1.0,
        ) {
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(&[1, 3, 2, 2, 2], logits).unwrap());
            let p = g.softmax_channels(x).unwrap();
            let t = g.constant(one_hot(&labels, 1, 3, [2, 2, 2]).unwrap());
            let d = dice_loss(&mut g, p, t, 1e-5).unwrap();
            let ce = cross_entropy_loss(&mut g, p, t).unwrap();
            let s = seg_loss(&mut g, p, t, &LossConfig { gamma, smooth_eps: 1e-5 }).unwrap();
            let (d, ce, s) = (g.value(d).item(), g.value(ce).item(), g.value(s).item());
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(ce >= 0.0);
            prop_assert!((s - (gamma * d + (1.0 - gamma) * ce)).abs() < 1e-12);
        }
    }
}
