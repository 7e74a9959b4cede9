//! Direct stride-1 correlation over a zero-padded input, vectorized along x.

use crate::scalar::Scalar;

/// Shapes of one direct correlation: `out[co] += sum_ci w[co, ci] * xp[ci]` over kernel offsets.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Direct {
    pub in_channels: usize,
    pub out_channels: usize,
    pub padded: [usize; 3],
    pub kernel: [usize; 3],
    pub out_dims: [usize; 3],
}

/// Copies `x` (`channels` planes of `dims`) into a zero border of width `pad`, followed by
/// `TILE` zeros of slack so tiles may run past the last row.
pub(crate) fn pad<T: Scalar>(
    x: &[T],
    channels: usize,
    dims: [usize; 3],
    pad: [usize; 3],
) -> (Vec<T>, [usize; 3]) {
    let pd = [
        dims[0] + 2 * pad[0],
        dims[1] + 2 * pad[1],
        dims[2] + 2 * pad[2],
    ];
    let (iv, pv) = (dims.iter().product::<usize>(), pd.iter().product::<usize>());
    let mut out = vec![T::zero(); channels * pv + TILE];
    for c in 0..channels {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let src = c * iv + (z * dims[1] + y) * dims[2];
                let dst = c * pv + ((z + pad[0]) * pd[1] + y + pad[1]) * pd[2] + pad[2];
                out[dst..dst + dims[2]].copy_from_slice(&x[src..src + dims[2]]);
            }
        }
    }
    (out, pd)
}

pub(crate) fn correlate<T: Scalar>(d: &Direct, xp: &[T], w: &[T], out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { correlate_avx512(d, xp, w, out) };
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            return unsafe { correlate_avx2(d, xp, w, out) };
        }
    }
    correlate_impl::<T, false>(d, xp, w, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn correlate_avx512<T: Scalar>(d: &Direct, xp: &[T], w: &[T], out: &mut [T]) {
    correlate_impl::<T, true>(d, xp, w, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_avx2<T: Scalar>(d: &Direct, xp: &[T], w: &[T], out: &mut [T]) {
    correlate_impl::<T, true>(d, xp, w, out)
}

#[inline(always)]
fn madd<T: Scalar, const FMA: bool>(a: T, b: T, c: T) -> T {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Output channels processed together so each input row load feeds several accumulators.
const BLOCK: usize = 4;

/// Output positions per register tile.
const TILE: usize = 64;

/// Flat input offsets of every (ci, kz, ky, kx) tap relative to an output position.
fn tap_offsets(d: &Direct) -> Vec<usize> {
    let [kz_n, ky_n, kx_n] = d.kernel;
    let pd = d.padded;
    let (plane, pv) = (pd[1] * pd[2], pd.iter().product::<usize>());
    let mut offs = Vec::with_capacity(d.in_channels * kz_n * ky_n * kx_n);
    for ci in 0..d.in_channels {
        for kz in 0..kz_n {
            for ky in 0..ky_n {
                for kx in 0..kx_n {
                    offs.push(ci * pv + kz * plane + ky * pd[2] + kx);
                }
            }
        }
    }
    offs
}

/// Length of one z-slice of outputs laid on the padded row pitch, rounded up to whole tiles.
fn slice_run(d: &Direct) -> (usize, usize) {
    let run = (d.out_dims[1] - 1) * d.padded[2] + d.out_dims[2];
    (run, run.div_ceil(TILE) * TILE)
}

#[inline(always)]
fn tile<T: Scalar, const FMA: bool>(
    xp: &[T],
    start: usize,
    offs: &[usize],
    wp: &[T],
) -> [[T; TILE]; BLOCK] {
    let mut acc = [[T::zero(); TILE]; BLOCK];
    for (t, &o) in offs.iter().enumerate() {
        let s: &[T; TILE] = xp[start + o..start + o + TILE].try_into().unwrap();
        let wt: &[T; BLOCK] = wp[t * BLOCK..(t + 1) * BLOCK].try_into().unwrap();
        for j in 0..BLOCK {
            for i in 0..TILE {
                acc[j][i] = madd::<T, FMA>(wt[j], s[i], acc[j][i]);
            }
        }
    }
    acc
}

/// Outputs of one z-slice are computed on the padded row pitch so every kernel tap reads one
/// contiguous input run; wrap-around columns and the tile overhang are discarded.
#[inline(always)]
fn correlate_impl<T: Scalar, const FMA: bool>(d: &Direct, xp: &[T], w: &[T], out: &mut [T]) {
    let [oz_n, oy_n, ox_n] = d.out_dims;
    let pd = d.padded;
    let (ov, plane) = (oz_n * oy_n * ox_n, pd[1] * pd[2]);
    let (_, tiled) = slice_run(d);
    let offs = tap_offsets(d);
    let taps = offs.len();
    let mut wp = vec![T::zero(); taps * BLOCK];
    let mut acc = vec![[[T::zero(); TILE]; BLOCK]; tiled / TILE];
    let mut co0 = 0;
    while co0 < d.out_channels {
        let nb = (d.out_channels - co0).min(BLOCK);
        wp.fill(T::zero());
        for j in 0..nb {
            for t in 0..taps {
                wp[t * BLOCK + j] = w[(co0 + j) * taps + t];
            }
        }
        for oz in 0..oz_n {
            for (q, a) in acc.iter_mut().enumerate() {
                *a = tile::<T, FMA>(xp, oz * plane + q * TILE, &offs, &wp);
            }
            for j in 0..nb {
                for oy in 0..oy_n {
                    let o = (co0 + j) * ov + (oz * oy_n + oy) * ox_n;
                    for (x, y) in out[o..o + ox_n].iter_mut().enumerate() {
                        let p = oy * pd[2] + x;
                        *y += acc[p / TILE][j][p % TILE];
                    }
                }
            }
        }
        co0 += nb;
    }
}

/// Weight gradient of a stride-1 correlation: `dw[co, ci, k] += sum_o dy[co, o] * xp[ci, o + k]`.
pub(crate) fn weight_grad<T: Scalar>(d: &Direct, xp: &[T], dy: &[T], dw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { weight_grad_avx512(d, xp, dy, dw) };
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            return unsafe { weight_grad_avx2(d, xp, dy, dw) };
        }
    }
    weight_grad_impl::<T, false>(d, xp, dy, dw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn weight_grad_avx512<T: Scalar>(d: &Direct, xp: &[T], dy: &[T], dw: &mut [T]) {
    weight_grad_impl::<T, true>(d, xp, dy, dw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_avx2<T: Scalar>(d: &Direct, xp: &[T], dy: &[T], dw: &mut [T]) {
    weight_grad_impl::<T, true>(d, xp, dy, dw)
}

#[inline(always)]
fn weight_grad_impl<T: Scalar, const FMA: bool>(d: &Direct, xp: &[T], dy: &[T], dw: &mut [T]) {
    let [oz_n, oy_n, ox_n] = d.out_dims;
    let pd = d.padded;
    let (ov, plane) = (oz_n * oy_n * ox_n, pd[1] * pd[2]);
    let (_, tiled) = slice_run(d);
    let offs = tap_offsets(d);
    let taps = offs.len();
    // dy re-laid on the padded row pitch with zeros in the wrap-around and overhang columns
    let mut g = vec![T::zero(); oz_n * tiled * BLOCK];
    let mut part = vec![[[T::zero(); LANES]; BLOCK]; taps];
    let mut co0 = 0;
    while co0 < d.out_channels {
        let nb = (d.out_channels - co0).min(BLOCK);
        g.fill(T::zero());
        for j in 0..nb {
            for oz in 0..oz_n {
                for oy in 0..oy_n {
                    let o = (co0 + j) * ov + (oz * oy_n + oy) * ox_n;
                    let a = (oz * BLOCK + j) * tiled + oy * pd[2];
                    g[a..a + ox_n].copy_from_slice(&dy[o..o + ox_n]);
                }
            }
        }
        part.iter_mut()
            .for_each(|p| *p = [[T::zero(); LANES]; BLOCK]);
        for oz in 0..oz_n {
            for q in 0..tiled / TILE {
                let mut gt = [[T::zero(); TILE]; BLOCK];
                for (j, row) in gt.iter_mut().enumerate() {
                    let a = (oz * BLOCK + j) * tiled + q * TILE;
                    row.copy_from_slice(&g[a..a + TILE]);
                }
                let start = oz * plane + q * TILE;
                for (t, &o) in offs.iter().enumerate() {
                    let s: &[T; TILE] = xp[start + o..start + o + TILE].try_into().unwrap();
                    let mut p = part[t];
                    for j in 0..BLOCK {
                        for c in 0..TILE / LANES {
                            for l in 0..LANES {
                                let i = c * LANES + l;
                                p[j][l] = madd::<T, FMA>(gt[j][i], s[i], p[j][l]);
                            }
                        }
                    }
                    part[t] = p;
                }
            }
        }
        for (t, p) in part.iter().enumerate() {
            for j in 0..nb {
                dw[(co0 + j) * taps + t] += p[j].iter().copied().sum::<T>();
            }
        }
        co0 += nb;
    }
}

const LANES: usize = 16;
