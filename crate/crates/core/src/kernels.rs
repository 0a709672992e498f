//! Raw forward/backward kernels on flat CHW and row-major buffers.
//!
//! These are used by the autograd tape and by a few non-differentiable paths
//! (point-cloud pooling, augmentation resizes).

use crate::tensor::{gemm_into, Real};

/// Output size of a 3x3 convolution with padding 1.
pub fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// Output columns `ox` whose input column `ox*stride + kx - 1` is inside `0..w`.
fn valid_cols(w: usize, wo: usize, stride: usize, kx: usize) -> (usize, usize) {
    let lo = usize::from(kx == 0);
    let hi = (w + 1 - kx).div_ceil(stride).min(wo);
    (lo, hi.max(lo))
}

/// Unfolds 3x3 padded patches: `cols[(ci*9 + ky*3 + kx), oy*wo + ox]`.
pub fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, stride: usize) -> (Vec<F>, usize, usize) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let mut cols = vec![F::zero(); c * 9 * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let (lo, hi) = valid_cols(w, wo, stride, kx);
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let src = &plane[(iy - 1) * w..iy * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                    } else {
                        for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[(ox + lo) * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize, stride: usize, dx: &mut [F]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let (lo, hi) = valid_cols(w, wo, stride, kx);
                let row = (ci * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[(iy - 1) * w..iy * w];
                    if stride == 1 {
                        for (d, &g) in dst[lo + kx - 1..hi + kx - 1].iter_mut().zip(&src[lo..hi]) {
                            *d += g;
                        }
                    } else {
                        for (ox, &g) in src[lo..hi].iter().enumerate() {
                            dst[(ox + lo) * stride + kx - 1] += g;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, padding 1. `weight` is `[cout, cin*9]`, `bias` is `[cout]`.
/// Returns the output and the unfolded input (kept for the backward pass).
#[allow(clippy::too_many_arguments)]
pub fn conv3x3<F: Real>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[F],
    bias: &[F],
    cout: usize,
    stride: usize,
) -> (Vec<F>, Vec<F>, usize, usize) {
    let (cols, ho, wo) = im2col(x, cin, h, w, stride);
    let mut y = vec![F::zero(); cout * ho * wo];
    for (co, chunk) in y.chunks_mut(ho * wo).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm_into(weight, cout, cin * 9, false, &cols, cin * 9, ho * wo, false, &mut y, F::one());
    (y, cols, ho, wo)
}

/// Per-group statistics: returns normalized values and reciprocal std per group.
pub fn normalize_groups<F: Real>(x: &[F], groups: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let n = x.len() / groups;
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    let inv_n = F::one() / F::c(n as f64);
    for g in 0..groups {
        let seg = &x[g * n..(g + 1) * n];
        let mean = seg.iter().copied().sum::<F>() * inv_n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
        let r = F::one() / (var + eps).sqrt();
        for (o, &v) in xhat[g * n..(g + 1) * n].iter_mut().zip(seg) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Backward of [`normalize_groups`] given the gradient w.r.t. `xhat`.
pub fn normalize_groups_backward<F: Real>(dxhat: &[F], xhat: &[F], rstd: &[F], dx: &mut [F]) {
    let groups = rstd.len();
    let n = xhat.len() / groups;
    let inv_n = F::one() / F::c(n as f64);
    for g in 0..groups {
        let dh = &dxhat[g * n..(g + 1) * n];
        let xh = &xhat[g * n..(g + 1) * n];
        let mean_dh = dh.iter().copied().sum::<F>() * inv_n;
        let mean_dhx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_n;
        for ((o, &a), &b) in dx[g * n..(g + 1) * n].iter_mut().zip(dh).zip(xh) {
            *o += rstd[g] * (a - mean_dh - b * mean_dhx);
        }
    }
}

/// Source indices and weights for x2 bilinear upsampling (half-pixel centers,
/// edge clamped).
pub fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn upsample2x<F: Real>(x: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![F::zero(); c * ho * wo];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut y[ci * ho * wo..(ci + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::c(wy0), F::c(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::c(wx0), F::c(wx1));
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    y
}

pub fn upsample2x_backward<F: Real>(dy: &[F], c: usize, h: usize, w: usize, dx: &mut [F]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for ci in 0..c {
        let src = &dy[ci * ho * wo..(ci + 1) * ho * wo];
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (F::c(wy0), F::c(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (F::c(wx0), F::c(wx1));
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
}

/// Mean over non-overlapping `block x block` cells of an `h x w x c`
/// (channel-last) image; returns `c x (h/block) x (w/block)` (channel-first).
pub fn block_mean_hwc(x: &[f32], h: usize, w: usize, c: usize, block: usize) -> Vec<f64> {
    let (hv, wv) = (h / block, w / block);
    let mut out = vec![0.0f64; c * hv * wv];
    let inv = 1.0 / (block * block) as f64;
    for by in 0..hv {
        for bx in 0..wv {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for y in by * block..(by + 1) * block {
                    for xx in bx * block..(bx + 1) * block {
                        acc += f64::from(x[(y * w + xx) * c + ch]);
                    }
                }
                out[ch * hv * wv + by * wv + bx] = acc * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, stride: usize) -> Vec<f64> {
        let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
        let mut y = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[co * cin * 9 + ci * 9 + ky * 3 + kx]
                                        * x[ci * h * w + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                    y[co * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (cin, cout, h, w, stride) in
            [(3, 1, 5, 7, 1), (2, 5, 6, 6, 2), (4, 3, 7, 5, 2), (1, 2, 1, 1, 1), (32, 16, 8, 8, 1)]
        {
            let x: crate::tensor::Tensor<f64> = init_normal(&mut rng, &[cin * h * w], 1.0);
            let wt: crate::tensor::Tensor<f64> = init_normal(&mut rng, &[cout * cin * 9], 1.0);
            let (y, _, _, _) = conv3x3(x.data(), cin, h, w, wt.data(), &vec![0.0; cout], cout, stride);
            let want = direct_conv(x.data(), cin, h, w, wt.data(), cout, stride);
            assert!(y.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10), "{cin} {cout} {h} {w} {stride}");
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (c, h, w, stride) in [(2, 5, 7, 1), (3, 6, 5, 2), (1, 4, 4, 2)] {
            let x: crate::tensor::Tensor<f64> = init_normal(&mut rng, &[c * h * w], 1.0);
            let (cols, ho, wo) = im2col(x.data(), c, h, w, stride);
            let r: crate::tensor::Tensor<f64> = init_normal(&mut rng, &[c * 9 * ho * wo], 1.0);
            let mut back = vec![0.0; c * h * w];
            col2im(r.data(), c, h, w, stride, &mut back);
            let lhs: f64 = cols.iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
