//! 3D cross-correlation: a direct kernel for unit stride, GEMM over chunked im2col otherwise.

use std::ops::Range;

use crate::direct::{self, Direct};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Static geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        };
        if input.len() != 5 || weight.len() != 5 || input[1] != weight[1] {
            return Err(mismatch());
        }
        if bias != [weight[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: bias.to_vec(),
                rhs: vec![weight[0]],
            });
        }
        if stride.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: stride.to_vec(),
                reason: "stride must be positive".into(),
            });
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = input[2 + a] + 2 * padding[a];
            if padded < weight[2 + a] {
                return Err(mismatch());
            }
            out_dims[a] = (padded - weight[2 + a]) / stride[a] + 1;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            in_dims: [input[2], input[3], input[4]],
            kernel: [weight[2], weight[3], weight[4]],
            stride,
            padding,
            out_dims,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Unit-stride kernels whose transpose is again a correlation with non-negative padding.
    fn is_direct(&self) -> bool {
        !self.is_pointwise()
            && self.stride == [1, 1, 1]
            && (0..3).all(|a| self.padding[a] < self.kernel[a])
    }

    fn direct(&self) -> Direct {
        let p = self.padding;
        Direct {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            padded: [0, 1, 2].map(|a| self.in_dims[a] + 2 * p[a]),
            kernel: self.kernel,
            out_dims: self.out_dims,
        }
    }

    /// 1x1x1 kernels with unit stride read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Column-buffer budget in elements; output rows are processed in chunks that fit it.
const COL_BUDGET: usize = 1 << 18;

/// Visits every im2col row segment for the flattened output rows `rows` (`oz * OY + oy`).
///
/// The callback receives the destination offset inside the chunk's column buffer, the
/// output row width, the valid `[ox_lo, ox_hi)` span, and the input index of `ox_lo`
/// (or `None` when the whole output row falls into padding).
fn for_each_row<F>(g: &ConvGeometry, rows: Range<usize>, mut f: F)
where
    F: FnMut(usize, usize, usize, usize, Option<usize>),
{
    let [iz_n, iy_n, ix_n] = g.in_dims;
    let [_, oy_n, ox_n] = g.out_dims;
    let [kz_n, ky_n, kx_n] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.padding;
    let p = rows.len() * ox_n;
    let in_vol = g.in_volume();
    for ci in 0..g.in_channels {
        for kz in 0..kz_n {
            for ky in 0..ky_n {
                for kx in 0..kx_n {
                    let row = ((ci * kz_n + kz) * ky_n + ky) * kx_n + kx;
                    // valid ox: 0 <= ox*sx + kx - px < ix_n
                    let lo = if kx >= px { 0 } else { (px - kx).div_ceil(sx) };
                    let hi = if ix_n + px > kx {
                        ((ix_n + px - kx - 1) / sx + 1).min(ox_n)
                    } else {
                        0
                    };
                    for (r, flat) in rows.clone().enumerate() {
                        let (oz, oy) = (flat / oy_n, flat % oy_n);
                        let iz = (oz * sz + kz) as isize - pz as isize;
                        let iy = (oy * sy + ky) as isize - py as isize;
                        let dst = row * p + r * ox_n;
                        let inside = iz >= 0
                            && (iz as usize) < iz_n
                            && iy >= 0
                            && (iy as usize) < iy_n
                            && lo < hi;
                        if inside {
                            let src = ci * in_vol
                                + (iz as usize * iy_n + iy as usize) * ix_n
                                + (lo * sx + kx - px);
                            f(dst, ox_n, lo, hi, Some(src));
                        } else {
                            f(dst, ox_n, 0, 0, None);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, rows: Range<usize>, input: &[T], col: &mut [T]) {
    let sx = g.stride[2];
    for_each_row(g, rows, |dst, width, lo, hi, src| {
        let out = &mut col[dst..dst + width];
        match src {
            None => out.fill(T::zero()),
            Some(src) => {
                out[..lo].fill(T::zero());
                out[hi..].fill(T::zero());
                if sx == 1 {
                    out[lo..hi].copy_from_slice(&input[src..src + (hi - lo)]);
                } else {
                    for (j, o) in out[lo..hi].iter_mut().enumerate() {
                        *o = input[src + j * sx];
                    }
                }
            }
        }
    });
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, rows: Range<usize>, col: &[T], grad_input: &mut [T]) {
    let sx = g.stride[2];
    for_each_row(g, rows, |dst, _width, lo, hi, src| {
        if let Some(src) = src {
            let row = &col[dst + lo..dst + hi];
            if sx == 1 {
                for (gi, &c) in grad_input[src..src + (hi - lo)].iter_mut().zip(row) {
                    *gi += c;
                }
            } else {
                for (j, &c) in row.iter().enumerate() {
                    grad_input[src + j * sx] += c;
                }
            }
        }
    });
}

/// Chunks of flattened output rows whose column buffers stay within [`COL_BUDGET`].
fn row_chunks(g: &ConvGeometry) -> impl Iterator<Item = Range<usize>> {
    let total = g.out_dims[0] * g.out_dims[1];
    let per_row = g.patch_len() * g.out_dims[2];
    let step = (COL_BUDGET / per_row.max(1)).clamp(1, total);
    (0..total)
        .step_by(step)
        .map(move |s| s..(s + step).min(total))
}

/// Forward cross-correlation: `out[b, co] = bias[co] + sum_ci,k w[co, ci, k] * in[b, ci, . + k]`.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<(Tensor<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let (in_item, out_item) = (
        g.in_channels * g.in_volume(),
        g.out_channels * g.out_volume(),
    );
    let (k, p, ox) = (g.patch_len(), g.out_volume(), g.out_dims[2]);
    let mut out = vec![T::zero(); g.batch * out_item];
    let mut col = Vec::new();
    for b in 0..g.batch {
        let x = &input.data()[b * in_item..(b + 1) * in_item];
        let y = &mut out[b * out_item..(b + 1) * out_item];
        for (co, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        if g.is_direct() {
            let (xp, _) = direct::pad(x, g.in_channels, g.in_dims, g.padding);
            direct::correlate(&g.direct(), &xp, weight.data(), y);
            continue;
        }
        if g.is_pointwise() {
            T::gemm(
                g.out_channels,
                k,
                p,
                T::one(),
                weight.data(),
                (k as isize, 1),
                x,
                (p as isize, 1),
                T::one(),
                y,
                (p as isize, 1),
            );
            continue;
        }
        for rows in row_chunks(&g) {
            let n = rows.len() * ox;
            col.resize(k * n, T::zero());
            let start = rows.start * ox;
            im2col(&g, rows, x, &mut col);
            T::gemm(
                g.out_channels,
                k,
                n,
                T::one(),
                weight.data(),
                (k as isize, 1),
                &col,
                (n as isize, 1),
                T::one(),
                &mut y[start..],
                (p as isize, 1),
            );
        }
    }
    Ok((Tensor::from_vec(&g.out_shape(), out)?, g))
}

/// Kernel of the adjoint correlation: channels swapped and every spatial axis reversed.
fn flip_transpose<T: Scalar>(g: &ConvGeometry, w: &[T]) -> Vec<T> {
    let [kz, ky, kx] = g.kernel;
    let kv = kz * ky * kx;
    let (cin, cout) = (g.in_channels, g.out_channels);
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..kv {
                out[(ci * cout + co) * kv + (kv - 1 - t)] = w[(co * cin + ci) * kv + t];
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to (input, weight, bias).
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (in_item, out_item) = (
        g.in_channels * g.in_volume(),
        g.out_channels * g.out_volume(),
    );
    let (k, p, ox) = (g.patch_len(), g.out_volume(), g.out_dims[2]);
    let cout = g.out_channels;
    let mut d_in = need[0].then(|| vec![T::zero(); input.len()]);
    let mut d_w = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut d_b = need[2].then(|| vec![T::zero(); cout]);
    let (mut col, mut d_col) = (Vec::new(), Vec::new());
    let flipped = (g.is_direct() && need[0]).then(|| flip_transpose(g, weight.data()));
    for b in 0..g.batch {
        let dy = &grad_out.data()[b * out_item..(b + 1) * out_item];
        let x = &input.data()[b * in_item..(b + 1) * in_item];
        if let Some(db) = d_b.as_mut() {
            for (co, row) in dy.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if g.is_direct() {
            if let Some(dw) = d_w.as_mut() {
                let (xp, _) = direct::pad(x, g.in_channels, g.in_dims, g.padding);
                direct::weight_grad(&g.direct(), &xp, dy, dw);
            }
            if let (Some(dx), Some(wf)) = (d_in.as_mut(), flipped.as_ref()) {
                let back = [0, 1, 2].map(|a| g.kernel[a] - 1 - g.padding[a]);
                let (dyp, padded) = direct::pad(dy, cout, g.out_dims, back);
                let t = Direct {
                    in_channels: cout,
                    out_channels: g.in_channels,
                    padded,
                    kernel: g.kernel,
                    out_dims: g.in_dims,
                };
                direct::correlate(&t, &dyp, wf, &mut dx[b * in_item..(b + 1) * in_item]);
            }
            continue;
        }
        if g.is_pointwise() {
            if let Some(dw) = d_w.as_mut() {
                // dW (Cout x K) += dY (Cout x P) * X^T (P x K)
                T::gemm(
                    cout,
                    p,
                    k,
                    T::one(),
                    dy,
                    (p as isize, 1),
                    x,
                    (1, p as isize),
                    T::one(),
                    dw,
                    (k as isize, 1),
                );
            }
            if let Some(dx) = d_in.as_mut() {
                let dx = &mut dx[b * in_item..(b + 1) * in_item];
                T::gemm(
                    k,
                    cout,
                    p,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    dy,
                    (p as isize, 1),
                    T::one(),
                    dx,
                    (p as isize, 1),
                );
            }
            continue;
        }
        for rows in row_chunks(g) {
            let n = rows.len() * ox;
            let dy_chunk = &dy[rows.start * ox..];
            if let Some(dw) = d_w.as_mut() {
                col.resize(k * n, T::zero());
                im2col(g, rows.clone(), x, &mut col);
                // dW (Cout x K) += dY (Cout x n) * cols^T (n x K)
                T::gemm(
                    cout,
                    n,
                    k,
                    T::one(),
                    dy_chunk,
                    (p as isize, 1),
                    &col,
                    (1, n as isize),
                    T::one(),
                    dw,
                    (k as isize, 1),
                );
            }
            if let Some(dx) = d_in.as_mut() {
                d_col.resize(k * n, T::zero());
                // dCols (K x n) = W^T (K x Cout) * dY (Cout x n)
                T::gemm(
                    k,
                    cout,
                    n,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    dy_chunk,
                    (p as isize, 1),
                    T::zero(),
                    &mut d_col,
                    (n as isize, 1),
                );
                col2im_add(g, rows, &d_col, &mut dx[b * in_item..(b + 1) * in_item]);
            }
        }
    }
    let wrap = |data: Vec<T>, shape: &[usize]| Tensor::from_vec(shape, data).expect("shape");
    ConvGrads {
        input: d_in.map(|d| wrap(d, input.shape())),
        weight: d_w.map(|d| wrap(d, weight.shape())),
        bias: d_b.map(|d| wrap(d, &[cout])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop reference (batch, out channel, in channel, 3 output axes, folded kernel loops).
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let od: Vec<usize> = (0..3)
            .map(|a| (xs[2 + a] + 2 * pad[a] - ws[2 + a]) / stride[a] + 1)
            .collect();
        let mut out = vec![0.0; xs[0] * ws[0] * od[0] * od[1] * od[2]];
        let at = |t: &[f64], s: &[usize], i: [usize; 5]| {
            t[(((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]]
        };
        let mut idx = 0;
        for bi in 0..xs[0] {
            for co in 0..ws[0] {
                for oz in 0..od[0] {
                    for oy in 0..od[1] {
                        for ox in 0..od[2] {
                            let mut acc = b.data()[co];
                            for ci in 0..xs[1] {
                                for kz in 0..ws[2] {
                                    for ky in 0..ws[3] {
                                        for kx in 0..ws[4] {
                                            let iz =
                                                (oz * stride[0] + kz) as isize - pad[0] as isize;
                                            let iy =
                                                (oy * stride[1] + ky) as isize - pad[1] as isize;
                                            let ix =
                                                (ox * stride[2] + kx) as isize - pad[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz as usize >= xs[2]
                                                || iy as usize >= xs[3]
                                                || ix as usize >= xs[4]
                                            {
                                                continue;
                                            }
                                            acc += at(w.data(), ws, [co, ci, kz, ky, kx])
                                                * at(
                                                    x.data(),
                                                    xs,
                                                    [bi, ci, iz as usize, iy as usize, ix as usize],
                                                );
                                        }
                                    }
                                }
                            }
                            out[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[xs[0], ws[0], od[0], od[1], od[2]], out).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_naive_reference_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = [
            ([2, 2, 5, 4, 6], [3, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 2, 6, 6, 4], [4, 2, 3, 3, 3], [2, 2, 2], [1, 1, 1]),
            ([1, 3, 4, 5, 3], [2, 3, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
            ([2, 1, 5, 5, 5], [2, 1, 3, 2, 3], [2, 1, 3], [0, 1, 2]),
        ];
        for (xs, ws, s, p) in cases {
            let x = random(&xs, &mut rng);
            let w = random(&ws, &mut rng);
            let b = random(&[ws[0]], &mut rng);
            let (fast, _) = conv3d_forward(&x, &w, &b, s, p).unwrap();
            let slow = naive_conv(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_kernel_and_box_sum() {
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0f32).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let (y, _) = conv3d_forward(&x, &w, &b, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y, x);

        let ones = Tensor::full(&[1, 1, 3, 3, 3], 1.0f32).unwrap();
        let k = Tensor::full(&[1, 1, 3, 3, 3], 1.0f32).unwrap();
        let (y, _) = conv3d_forward(&ones, &k, &b, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.item(), 27.0);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3, 3]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        assert!(conv3d_forward(&x, &w, &b, [1, 1, 1], [1, 1, 1]).is_err());
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // y = conv(x, w) + b is linear in each argument, so <dx, x> = <dw, w> = <y - b, dy>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([2, 2, 5, 6, 4], [3, 2, 3, 3, 3], [2, 1, 2], [1, 1, 1]),
            ([2, 5, 4, 7, 9], [6, 5, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 3, 5, 4, 6], [5, 3, 3, 2, 3], [1, 1, 1], [0, 1, 2]),
            ([1, 4, 3, 3, 3], [4, 4, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ];
        for (xs, ws, s, p) in cases {
            let x = random(&xs, &mut rng);
            let w = random(&ws, &mut rng);
            let b = random(&[ws[0]], &mut rng);
            let (y, g) = conv3d_forward(&x, &w, &b, s, p).unwrap();
            let dy = random(y.shape(), &mut rng);
            let grads = conv3d_backward(&g, &x, &w, &dy, [true, true, true]);
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let (items, cout) = (xs[0] * ws[0], ws[0]);
            let per = y.len() / items;
            let bias_part: f64 = (0..items)
                .map(|i| b.data()[i % cout] * dy.data()[i * per..(i + 1) * per].iter().sum::<f64>())
                .sum();
            let rhs = dot(&y, &dy) - bias_part;
            let close = |lhs: f64, rhs: f64| (lhs - rhs).abs() < 1e-9 * rhs.abs().max(1.0);
            assert!(close(dot(grads.input.as_ref().unwrap(), &x), rhs));
            assert!(close(dot(grads.weight.as_ref().unwrap(), &w), rhs));
            assert!(close(dot(grads.bias.as_ref().unwrap(), &b), bias_part));
        }
    }

    #[test]
    fn single_precision_agrees_with_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 6, 5, 7, 70], &mut rng);
        let w = random(&[5, 6, 3, 3, 3], &mut rng);
        let b = random(&[5], &mut rng);
        let (y64, g) = conv3d_forward(&x, &w, &b, [1, 1, 1], [1, 1, 1]).unwrap();
        let (y32, g32) =
            conv3d_forward(&x.cast::<f32>(), &w.cast(), &b.cast(), [1, 1, 1], [1, 1, 1]).unwrap();
        for (a, b) in y32.data().iter().zip(y64.data()) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
        let dy = random(y64.shape(), &mut rng);
        let d64 = conv3d_backward(&g, &x, &w, &dy, [true, true, false]);
        let d32 = conv3d_backward(
            &g32,
            &x.cast::<f32>(),
            &w.cast(),
            &dy.cast(),
            [true, true, false],
        );
        for (a, b) in d32
            .weight
            .unwrap()
            .data()
            .iter()
            .zip(d64.weight.unwrap().data())
        {
            assert!((*a as f64 - b).abs() < 1e-3 * b.abs().max(1.0));
        }
        for (a, b) in d32
            .input
            .unwrap()
            .data()
            .iter()
            .zip(d64.input.unwrap().data())
        {
            assert!((*a as f64 - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }
}
