//! Raw compute kernels behind the tape ops.
//!
//! Convolutions are im2col + gemm, parallelized over the batch dimension.
//! Every output element is produced by exactly one task with a fixed
//! accumulation order, and cross-sample reductions (weight gradients,
//! batch-norm statistics) run over fixed-size chunks reduced in index
//! order, so results are bit-identical for any worker-thread count.

use super::{Scalar, Tensor};
use rayon::prelude::*;

/// Sample-chunk size for cross-batch reductions. Fixed (not derived from
/// the thread count) to keep floating-point reduction order stable.
const REDUCE_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.stride, g.pad);
    let (oh, ow) = (g.oh, g.ow);
    let spatial = oh * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.stride, g.pad);
    let (oh, ow) = (g.oh, g.ow);
    let spatial = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// x: [N, Cin, H, W], weight: [Cout, Cin, K, K], bias: [Cout].
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let spatial = g.oh * g.ow;
    let ckk = g.col_rows();
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let xs = x.data();
    let ws = weight.data();
    out.data_mut()
        .par_chunks_mut(g.cout * spatial)
        .enumerate()
        .for_each(|(n, out_n)| {
            let mut col = vec![T::ZERO; ckk * spatial];
            im2col(&xs[n * g.cin * g.h * g.w..], g, &mut col);
            unsafe {
                T::gemm(
                    g.cout,
                    ckk,
                    spatial,
                    T::ONE,
                    ws.as_ptr(),
                    ckk as isize,
                    1,
                    col.as_ptr(),
                    spatial as isize,
                    1,
                    T::ZERO,
                    out_n.as_mut_ptr(),
                    spatial as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                for (co, row) in out_n.chunks_mut(spatial).enumerate() {
                    let bv = b.data()[co];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        });
    out
}

/// Gradient w.r.t. the convolution input: col2im(Wᵀ · gout).
pub fn conv2d_backward_input<T: Scalar>(
    gout: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let spatial = g.oh * g.ow;
    let ckk = g.col_rows();
    let mut gin = Tensor::zeros(&[g.n, g.cin, g.h, g.w]);
    let gs = gout.data();
    let ws = weight.data();
    gin.data_mut()
        .par_chunks_mut(g.cin * g.h * g.w)
        .enumerate()
        .for_each(|(n, gin_n)| {
            let mut col = vec![T::ZERO; ckk * spatial];
            unsafe {
                T::gemm(
                    ckk,
                    g.cout,
                    spatial,
                    T::ONE,
                    ws.as_ptr(),
                    1,
                    ckk as isize,
                    gs[n * g.cout * spatial..].as_ptr(),
                    spatial as isize,
                    1,
                    T::ZERO,
                    col.as_mut_ptr(),
                    spatial as isize,
                    1,
                );
            }
            col2im_add(&col, g, gin_n);
        });
    gin
}

/// Gradient w.r.t. the convolution weights: Σ_n gout_n · colᵀ(x_n).
pub fn conv2d_backward_weights<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let spatial = g.oh * g.ow;
    let ckk = g.col_rows();
    let xs = x.data();
    let gs = gout.data();
    let sample_ids: Vec<usize> = (0..g.n).collect();
    let partials: Vec<Vec<T>> = sample_ids
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut gw = vec![T::ZERO; g.cout * ckk];
            let mut col = vec![T::ZERO; ckk * spatial];
            for &n in chunk {
                im2col(&xs[n * g.cin * g.h * g.w..], g, &mut col);
                unsafe {
                    T::gemm(
                        g.cout,
                        spatial,
                        ckk,
                        T::ONE,
                        gs[n * g.cout * spatial..].as_ptr(),
                        spatial as isize,
                        1,
                        col.as_ptr(),
                        1,
                        spatial as isize,
                        T::ONE,
                        gw.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
            }
            gw
        })
        .collect();
    let mut gw = Tensor::zeros(&[g.cout, g.cin, g.k, g.k]);
    for part in partials {
        for (acc, v) in gw.data_mut().iter_mut().zip(part) {
            *acc += v;
        }
    }
    gw
}

/// Per-channel sum of an NCHW gradient (bias gradient).
pub fn channel_sums<T: Scalar>(gout: &Tensor<T>, channels: usize) -> Vec<T> {
    let n = gout.dim(0);
    let spatial = gout.numel() / n / channels;
    let gs = gout.data();
    (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = (ni * channels + c) * spatial;
                for v in &gs[base..base + spatial] {
                    acc += v.to_f64();
                }
            }
            T::from_f64(acc)
        })
        .collect()
}

/// x: [N, D], weight: [C, D], bias: [C] -> [N, C].
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.dim(0), x.dim(1));
    let c = weight.dim(0);
    let mut out = Tensor::zeros(&[n, c]);
    unsafe {
        T::gemm(
            n,
            d,
            c,
            T::ONE,
            x.data().as_ptr(),
            d as isize,
            1,
            weight.data().as_ptr(),
            1,
            d as isize,
            T::ZERO,
            out.data_mut().as_mut_ptr(),
            c as isize,
            1,
        );
    }
    for row in out.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (n, d) = (x.dim(0), x.dim(1));
    let c = weight.dim(0);
    let mut gx = Tensor::zeros(&[n, d]);
    let mut gw = Tensor::zeros(&[c, d]);
    unsafe {
        // gx = gout · W
        T::gemm(
            n,
            c,
            d,
            T::ONE,
            gout.data().as_ptr(),
            c as isize,
            1,
            weight.data().as_ptr(),
            d as isize,
            1,
            T::ZERO,
            gx.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
        // gw = goutᵀ · x
        T::gemm(
            c,
            n,
            d,
            T::ONE,
            gout.data().as_ptr(),
            1,
            c as isize,
            x.data().as_ptr(),
            d as isize,
            1,
            T::ZERO,
            gw.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
    }
    let mut gb = vec![0.0f64; c];
    for row in gout.data().chunks(c) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v.to_f64();
        }
    }
    (gx, gw, gb.into_iter().map(T::from_f64).collect())
}

/// Training-mode batch norm over NCHW. Returns (y, mean, inv_std) with the
/// biased variance used for normalization; statistics accumulate at f64.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let spatial = x.numel() / n / c;
    let m = (n * spatial) as f64;
    let xs = x.data();
    let stats: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * spatial;
                for v in &xs[base..base + spatial] {
                    let f = v.to_f64();
                    sum += f;
                    sumsq += f * f;
                }
            }
            let mean = sum / m;
            let var = (sumsq / m - mean * mean).max(0.0);
            (T::from_f64(mean), T::from_f64(1.0 / (var + eps).sqrt()))
        })
        .collect();
    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let inv_std: Vec<T> = stats.iter().map(|s| s.1).collect();
    let mut y = Tensor::zeros(x.shape());
    y.data_mut()
        .par_chunks_mut(c * spatial)
        .enumerate()
        .for_each(|(ni, yrow)| {
            for ci in 0..c {
                let mu = mean[ci];
                let is = inv_std[ci];
                let ga = gamma[ci];
                let be = beta[ci];
                let base = (ni * c + ci) * spatial;
                for (yv, xv) in yrow[ci * spatial..(ci + 1) * spatial]
                    .iter_mut()
                    .zip(&xs[base..base + spatial])
                {
                    *yv = (*xv - mu) * is * ga + be;
                }
            }
        });
    (y, mean, inv_std)
}

/// Batch-norm backward; returns (gx, ggamma, gbeta).
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let spatial = x.numel() / n / c;
    let m = (n * spatial) as f64;
    let xs = x.data();
    let gs = gout.data();
    // Per-channel reductions: Σg and Σ g·xhat.
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mu = mean[ci].to_f64();
            let is = inv_std[ci].to_f64();
            let mut sg = 0.0f64;
            let mut sgx = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * spatial;
                for (gv, xv) in gs[base..base + spatial].iter().zip(&xs[base..base + spatial]) {
                    let gf = gv.to_f64();
                    sg += gf;
                    sgx += gf * (xv.to_f64() - mu) * is;
                }
            }
            (sg, sgx)
        })
        .collect();
    let mut gx = Tensor::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(c * spatial)
        .enumerate()
        .for_each(|(ni, grow)| {
            for ci in 0..c {
                let mu = mean[ci];
                let is = inv_std[ci];
                let ga = gamma[ci];
                let (sg, sgx) = sums[ci];
                let mean_g = T::from_f64(sg / m);
                let mean_gx = T::from_f64(sgx / m);
                let base = (ni * c + ci) * spatial;
                for ((gxv, gv), xv) in grow[ci * spatial..(ci + 1) * spatial]
                    .iter_mut()
                    .zip(&gs[base..base + spatial])
                    .zip(&xs[base..base + spatial])
                {
                    let xhat = (*xv - mu) * is;
                    *gxv = ga * is * (*gv - mean_g - xhat * mean_gx);
                }
            }
        });
    let ggamma = sums.iter().map(|s| T::from_f64(s.1)).collect();
    let gbeta = sums.iter().map(|s| T::from_f64(s.0)).collect();
    (gx, ggamma, gbeta)
}
