//! Hand-rolled layer kernels in double precision: same-padded convolution,
//! instance normalization, ReLU, max pooling, nearest-neighbor upsampling, and
//! channel concatenation, each with forward and backward passes.
//!
//! Feature maps are `(H, W, D, C)` in C order, so a voxel's channel vector is
//! contiguous. Convolutions gather a per-voxel patch of `taps * Cin` values
//! and reduce it with one long dot product per output channel. All loops are
//! partitioned by the helpers in [`crate::par`], so the parallel and
//! sequential builds produce bit-identical results.

use ndarray::ArrayD;

use crate::par::{self, axpy, dot};
use crate::FeatureMap;

/// Voxels per parallel work unit for spatially partitioned loops.
const VOXEL_CHUNK: usize = 1024;

/// Epsilon inside the instance-norm square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Extents {
    h: usize,
    w: usize,
    d: usize,
}

impl Extents {
    fn of(map: &FeatureMap) -> Self {
        let s = map.shape();
        Extents {
            h: s[0],
            w: s[1],
            d: s[2],
        }
    }

    fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    #[inline]
    fn unflatten(&self, v: usize) -> (usize, usize, usize) {
        let k = v % self.d;
        let rest = v / self.d;
        (rest / self.w, rest % self.w, k)
    }
}

fn flat(map: &FeatureMap) -> &[f64] {
    map.as_slice().expect("feature maps are standard layout")
}

fn flat_mut(map: &mut FeatureMap) -> &mut [f64] {
    map.as_slice_mut().expect("feature maps are standard layout")
}

/// Weight geometry for a convolution, derived from the weight array shape
/// `(Cout, kh, kw, kd, Cin)`. Padding is `(k - 1) / 2` per axis (same-size
/// output, stride 1).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub c_in: usize,
}

impl ConvGeometry {
    pub fn of(weights: &ArrayD<f64>) -> Self {
        let s = weights.shape();
        assert_eq!(s.len(), 5, "conv weights are (Cout, kh, kw, kd, Cin)");
        ConvGeometry {
            c_out: s[0],
            kernel: [s[1], s[2], s[3]],
            c_in: s[4],
        }
    }

    fn taps(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn pad(&self) -> [usize; 3] {
        [
            (self.kernel[0] - 1) / 2,
            (self.kernel[1] - 1) / 2,
            (self.kernel[2] - 1) / 2,
        ]
    }
}

/// Fills `patch` (length `taps * c_in`) with the input neighborhood of output
/// voxel `(i, j, k)`, zero-padding out-of-bounds taps. Returns nothing; the
/// caller reuses the buffer across voxels.
#[inline]
fn gather_patch(
    x: &[f64],
    ext: Extents,
    c_in: usize,
    kernel: [usize; 3],
    pad: [usize; 3],
    (i, j, k): (usize, usize, usize),
    patch: &mut [f64],
) {
    let interior = i >= pad[0]
        && i + kernel[0] - 1 - pad[0] < ext.h
        && j >= pad[1]
        && j + kernel[1] - 1 - pad[1] < ext.w
        && k >= pad[2]
        && k + kernel[2] - 1 - pad[2] < ext.d;
    let mut t = 0;
    if interior {
        for di in 0..kernel[0] {
            let si = i + di - pad[0];
            for dj in 0..kernel[1] {
                let sj = j + dj - pad[1];
                let base = ((si * ext.w + sj) * ext.d + (k - pad[2])) * c_in;
                let src = &x[base..base + kernel[2] * c_in];
                patch[t..t + kernel[2] * c_in].copy_from_slice(src);
                t += kernel[2] * c_in;
            }
        }
    } else {
        for di in 0..kernel[0] {
            let si = (i + di).wrapping_sub(pad[0]);
            for dj in 0..kernel[1] {
                let sj = (j + dj).wrapping_sub(pad[1]);
                for dk in 0..kernel[2] {
                    let sk = (k + dk).wrapping_sub(pad[2]);
                    let dst = &mut patch[t..t + c_in];
                    if si < ext.h && sj < ext.w && sk < ext.d {
                        let base = ((si * ext.w + sj) * ext.d + sk) * c_in;
                        dst.copy_from_slice(&x[base..base + c_in]);
                    } else {
                        dst.fill(0.0);
                    }
                    t += c_in;
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `weights` is `(Cout, kh, kw, kd, Cin)`,
/// `bias` has `Cout` entries.
pub fn conv_forward(x: &FeatureMap, weights: &ArrayD<f64>, bias: &[f64]) -> FeatureMap {
    let geo = ConvGeometry::of(weights);
    let ext = Extents::of(x);
    assert_eq!(x.shape()[3], geo.c_in, "input channels match weights");
    assert_eq!(bias.len(), geo.c_out);
    let taps = geo.taps();
    let pad = geo.pad();
    let xs = flat(x);
    let ws = weights.as_slice().expect("weights are standard layout");
    let row = taps * geo.c_in;

    let mut out = FeatureMap::zeros((ext.h, ext.w, ext.d, geo.c_out));
    let os = flat_mut(&mut out);
    if taps == 1 {
        // 1x1x1 convolution: the input row is the patch.
        par::for_each_chunk_mut(os, VOXEL_CHUNK * geo.c_out, |ci, chunk| {
            let v0 = ci * VOXEL_CHUNK;
            for (dv, orow) in chunk.chunks_mut(geo.c_out).enumerate() {
                let xrow = &xs[(v0 + dv) * geo.c_in..(v0 + dv + 1) * geo.c_in];
                for (co, o) in orow.iter_mut().enumerate() {
                    *o = bias[co] + dot(&ws[co * row..(co + 1) * row], xrow);
                }
            }
        });
        return out;
    }
    par::for_each_chunk_mut(os, VOXEL_CHUNK * geo.c_out, |ci, chunk| {
        let mut patch = vec![0.0; row];
        let v0 = ci * VOXEL_CHUNK;
        for (dv, orow) in chunk.chunks_mut(geo.c_out).enumerate() {
            let pos = ext.unflatten(v0 + dv);
            gather_patch(xs, ext, geo.c_in, geo.kernel, pad, pos, &mut patch);
            for (co, o) in orow.iter_mut().enumerate() {
                *o = bias[co] + dot(&ws[co * row..(co + 1) * row], &patch);
            }
        }
    });
    out
}

/// Gradients of [`conv_forward`] with respect to input, weights, and bias.
pub fn conv_backward(
    x: &FeatureMap,
    weights: &ArrayD<f64>,
    grad_out: &FeatureMap,
) -> (FeatureMap, ArrayD<f64>, Vec<f64>) {
    let geo = ConvGeometry::of(weights);
    let ext = Extents::of(x);
    let taps = geo.taps();
    let pad = geo.pad();
    let row = taps * geo.c_in;
    let xs = flat(x);
    let gos = flat(grad_out);
    let ws = weights.as_slice().expect("standard layout");
    let voxels = ext.voxels();

    // Bias: plain per-channel reduction over voxels.
    let bias_partials = par::chunk_partials(voxels, par::REDUCE_CHUNK, |r| {
        let mut acc = vec![0.0; geo.c_out];
        for v in r {
            let go = &gos[v * geo.c_out..(v + 1) * geo.c_out];
            for (a, g) in acc.iter_mut().zip(go) {
                *a += g;
            }
        }
        acc
    });
    let mut grad_bias = vec![0.0; geo.c_out];
    for p in bias_partials {
        for (a, b) in grad_bias.iter_mut().zip(&p) {
            *a += b;
        }
    }

    // Weights: per-chunk dense partials combined in chunk order.
    let w_partials = par::chunk_partials(voxels, VOXEL_CHUNK * 4, |r| {
        let mut acc = vec![0.0; geo.c_out * row];
        let mut patch = vec![0.0; row];
        for v in r {
            let pos = ext.unflatten(v);
            gather_patch(xs, ext, geo.c_in, geo.kernel, pad, pos, &mut patch);
            let go = &gos[v * geo.c_out..(v + 1) * geo.c_out];
            for (co, &g) in go.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &patch, &mut acc[co * row..(co + 1) * row]);
                }
            }
        }
        acc
    });
    let mut grad_w_flat = vec![0.0; geo.c_out * row];
    for p in w_partials {
        for (a, b) in grad_w_flat.iter_mut().zip(&p) {
            *a += b;
        }
    }
    let grad_weights = ArrayD::from_shape_vec(weights.raw_dim(), grad_w_flat)
        .expect("gradient shape matches weights");

    // Input: gather formulation over transposed weights, wt[tap][ci][co].
    let mut wt = vec![0.0; row * geo.c_out];
    for co in 0..geo.c_out {
        for t in 0..taps {
            for ci in 0..geo.c_in {
                wt[(t * geo.c_in + ci) * geo.c_out + co] = ws[co * row + t * geo.c_in + ci];
            }
        }
    }
    let mut grad_x = FeatureMap::zeros(x.raw_dim());
    let gxs = flat_mut(&mut grad_x);
    let kernel = geo.kernel;
    par::for_each_chunk_mut(gxs, VOXEL_CHUNK * geo.c_in, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, gxrow) in chunk.chunks_mut(geo.c_in).enumerate() {
            let (i, j, k) = ext.unflatten(v0 + dv);
            let mut t = 0;
            for di in 0..kernel[0] {
                // Output voxel o = v - (tap - pad); reuse wrapping arithmetic
                // to reject out-of-range positions.
                let oi = (i + pad[0]).wrapping_sub(di);
                for dj in 0..kernel[1] {
                    let oj = (j + pad[1]).wrapping_sub(dj);
                    for dk in 0..kernel[2] {
                        let ok = (k + pad[2]).wrapping_sub(dk);
                        if oi < ext.h && oj < ext.w && ok < ext.d {
                            let o = (oi * ext.w + oj) * ext.d + ok;
                            let gorow = &gos[o * geo.c_out..(o + 1) * geo.c_out];
                            for (ci, gx) in gxrow.iter_mut().enumerate() {
                                let wrow =
                                    &wt[(t * geo.c_in + ci) * geo.c_out..(t * geo.c_in + ci + 1) * geo.c_out];
                                *gx += dot(gorow, wrow);
                            }
                        }
                        t += 1;
                    }
                }
            }
        }
    });
    (grad_x, grad_weights, grad_bias)
}

/// Per-channel mean and inverse standard deviation cached by the forward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Instance normalization: per channel, normalize over all spatial positions
/// to zero mean and unit variance, then apply the learned scale and shift.
pub fn instance_norm_forward(
    x: &FeatureMap,
    gamma: &[f64],
    beta: &[f64],
) -> (FeatureMap, NormCache) {
    let ext = Extents::of(x);
    let c = x.shape()[3];
    let n = ext.voxels() as f64;
    let xs = flat(x);
    let partials = par::chunk_partials(ext.voxels(), par::REDUCE_CHUNK, |r| {
        let mut acc = vec![0.0; 2 * c];
        for v in r {
            let row = &xs[v * c..(v + 1) * c];
            for (ci, &val) in row.iter().enumerate() {
                acc[ci] += val;
                acc[c + ci] += val * val;
            }
        }
        acc
    });
    let mut sum = vec![0.0; c];
    let mut sumsq = vec![0.0; c];
    for p in partials {
        for ci in 0..c {
            sum[ci] += p[ci];
            sumsq[ci] += p[c + ci];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            1.0 / (var + NORM_EPS).sqrt()
        })
        .collect();

    let mut out = FeatureMap::zeros(x.raw_dim());
    let os = flat_mut(&mut out);
    let mean_ref = &mean;
    let istd_ref = &inv_std;
    par::for_each_chunk_mut(os, VOXEL_CHUNK * c, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, orow) in chunk.chunks_mut(c).enumerate() {
            let xrow = &xs[(v0 + dv) * c..(v0 + dv + 1) * c];
            for ci in 0..c {
                orow[ci] = gamma[ci] * (xrow[ci] - mean_ref[ci]) * istd_ref[ci] + beta[ci];
            }
        }
    });
    (out, NormCache { mean, inv_std })
}

/// Gradients of instance norm with respect to input, gamma, and beta.
pub fn instance_norm_backward(
    x: &FeatureMap,
    gamma: &[f64],
    cache: &NormCache,
    grad_out: &FeatureMap,
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let ext = Extents::of(x);
    let c = x.shape()[3];
    let n = ext.voxels() as f64;
    let xs = flat(x);
    let gos = flat(grad_out);

    // Reductions: sum(go) and sum(go * xhat) per channel.
    let partials = par::chunk_partials(ext.voxels(), par::REDUCE_CHUNK, |r| {
        let mut acc = vec![0.0; 2 * c];
        for v in r {
            let xrow = &xs[v * c..(v + 1) * c];
            let grow = &gos[v * c..(v + 1) * c];
            for ci in 0..c {
                let xhat = (xrow[ci] - cache.mean[ci]) * cache.inv_std[ci];
                acc[ci] += grow[ci];
                acc[c + ci] += grow[ci] * xhat;
            }
        }
        acc
    });
    let mut sum_go = vec![0.0; c];
    let mut sum_go_xhat = vec![0.0; c];
    for p in partials {
        for ci in 0..c {
            sum_go[ci] += p[ci];
            sum_go_xhat[ci] += p[c + ci];
        }
    }

    let grad_beta = sum_go.clone();
    let grad_gamma = sum_go_xhat.clone();

    let mut grad_x = FeatureMap::zeros(x.raw_dim());
    let gxs = flat_mut(&mut grad_x);
    let sum_go = &sum_go;
    let sum_go_xhat = &sum_go_xhat;
    par::for_each_chunk_mut(gxs, VOXEL_CHUNK * c, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, gxrow) in chunk.chunks_mut(c).enumerate() {
            let at = (v0 + dv) * c;
            let xrow = &xs[at..at + c];
            let grow = &gos[at..at + c];
            for ci in 0..c {
                let xhat = (xrow[ci] - cache.mean[ci]) * cache.inv_std[ci];
                gxrow[ci] = gamma[ci] * cache.inv_std[ci] / n
                    * (n * grow[ci] - sum_go[ci] - xhat * sum_go_xhat[ci]);
            }
        }
    });
    (grad_x, grad_gamma, grad_beta)
}

pub fn relu_forward(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    let os = flat_mut(&mut out);
    par::for_each_chunk_mut(os, par::REDUCE_CHUNK, |_, chunk| {
        for v in chunk.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    });
    out
}

/// ReLU backward from the cached *output* (the mask is `out > 0`).
pub fn relu_backward(out: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    let mut grad = grad_out.clone();
    let gs = flat_mut(&mut grad);
    let os = flat(out);
    par::for_each_chunk_mut(gs, par::REDUCE_CHUNK, |ci, chunk| {
        let base = ci * par::REDUCE_CHUNK;
        for (i, g) in chunk.iter_mut().enumerate() {
            if os[base + i] <= 0.0 {
                *g = 0.0;
            }
        }
    });
    grad
}

/// Argmax indices (flat spatial input voxel per output cell) cached by the
/// pooling forward pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Vec<u32>,
    pub in_shape: [usize; 4],
    pub window: [usize; 3],
}

/// Max pooling with stride equal to the window. Window extents must divide
/// the spatial extents.
pub fn max_pool_forward(x: &FeatureMap, window: [usize; 3]) -> (FeatureMap, PoolCache) {
    let ext = Extents::of(x);
    let c = x.shape()[3];
    assert!(
        ext.h % window[0] == 0 && ext.w % window[1] == 0 && ext.d % window[2] == 0,
        "pool window must divide spatial extents"
    );
    let (oh, ow, od) = (ext.h / window[0], ext.w / window[1], ext.d / window[2]);
    let out_ext = Extents { h: oh, w: ow, d: od };
    let xs = flat(x);
    let mut out = FeatureMap::zeros((oh, ow, od, c));
    let mut argmax = vec![0u32; oh * ow * od * c];

    // Compute argmax rows in parallel over output voxels, then fill values.
    {
        let am = &mut argmax[..];
        let os = flat_mut(&mut out);
        // Two mutable outputs: process in one pass over interleaved chunks by
        // chunking the argmax buffer and writing values afterwards from it.
        par::for_each_chunk_mut(am, VOXEL_CHUNK * c, |ci_chunk, chunk| {
            let v0 = ci_chunk * VOXEL_CHUNK;
            for (dv, arow) in chunk.chunks_mut(c).enumerate() {
                let (oi, oj, ok) = out_ext.unflatten(v0 + dv);
                for (ci, a) in arow.iter_mut().enumerate() {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for di in 0..window[0] {
                        for dj in 0..window[1] {
                            for dk in 0..window[2] {
                                let si = oi * window[0] + di;
                                let sj = oj * window[1] + dj;
                                let sk = ok * window[2] + dk;
                                let sv = (si * ext.w + sj) * ext.d + sk;
                                let val = xs[sv * c + ci];
                                if val > best {
                                    best = val;
                                    best_at = sv;
                                }
                            }
                        }
                    }
                    *a = best_at as u32;
                }
            }
        });
        let am = &argmax[..];
        par::for_each_chunk_mut(os, VOXEL_CHUNK * c, |ci_chunk, chunk| {
            let base = ci_chunk * VOXEL_CHUNK * c;
            for (i, o) in chunk.iter_mut().enumerate() {
                let ci = (base + i) % c;
                *o = xs[am[base + i] as usize * c + ci];
            }
        });
    }
    (
        out,
        PoolCache {
            argmax,
            in_shape: [ext.h, ext.w, ext.d, c],
            window,
        },
    )
}

/// Pool backward: routes each output gradient to the voxel that won the max.
pub fn max_pool_backward(cache: &PoolCache, grad_out: &FeatureMap) -> FeatureMap {
    let [h, w, d, c] = cache.in_shape;
    let win = cache.window;
    let (ow, od) = (w / win[1], d / win[2]);
    let gos = flat(grad_out);
    let mut grad_x = FeatureMap::zeros((h, w, d, c));
    let gxs = flat_mut(&mut grad_x);
    let in_ext = Extents { h, w, d };
    let am = &cache.argmax;
    par::for_each_chunk_mut(gxs, VOXEL_CHUNK * c, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, gxrow) in chunk.chunks_mut(c).enumerate() {
            let vi = v0 + dv;
            let (i, j, k) = in_ext.unflatten(vi);
            let ov = ((i / win[0]) * ow + j / win[1]) * od + k / win[2];
            for (ci, g) in gxrow.iter_mut().enumerate() {
                if am[ov * c + ci] as usize == vi {
                    *g = gos[ov * c + ci];
                }
            }
        }
    });
    grad_x
}

/// Nearest-neighbor upsampling by an integer factor per axis.
pub fn upsample_forward(x: &FeatureMap, factor: [usize; 3]) -> FeatureMap {
    let ext = Extents::of(x);
    let c = x.shape()[3];
    let (oh, ow, od) = (ext.h * factor[0], ext.w * factor[1], ext.d * factor[2]);
    let out_ext = Extents { h: oh, w: ow, d: od };
    let xs = flat(x);
    let mut out = FeatureMap::zeros((oh, ow, od, c));
    let os = flat_mut(&mut out);
    par::for_each_chunk_mut(os, VOXEL_CHUNK * c, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, orow) in chunk.chunks_mut(c).enumerate() {
            let (i, j, k) = out_ext.unflatten(v0 + dv);
            let sv = ((i / factor[0]) * ext.w + j / factor[1]) * ext.d + k / factor[2];
            orow.copy_from_slice(&xs[sv * c..(sv + 1) * c]);
        }
    });
    out
}

/// Upsample backward: each input cell accumulates the gradients of the cells
/// it was replicated into.
pub fn upsample_backward(grad_out: &FeatureMap, factor: [usize; 3]) -> FeatureMap {
    let oext = Extents::of(grad_out);
    let c = grad_out.shape()[3];
    let (ih, iw, id) = (
        oext.h / factor[0],
        oext.w / factor[1],
        oext.d / factor[2],
    );
    let in_ext = Extents { h: ih, w: iw, d: id };
    let gos = flat(grad_out);
    let mut grad_x = FeatureMap::zeros((ih, iw, id, c));
    let gxs = flat_mut(&mut grad_x);
    par::for_each_chunk_mut(gxs, VOXEL_CHUNK * c, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, gxrow) in chunk.chunks_mut(c).enumerate() {
            let (i, j, k) = in_ext.unflatten(v0 + dv);
            for di in 0..factor[0] {
                for dj in 0..factor[1] {
                    for dk in 0..factor[2] {
                        let ov = ((i * factor[0] + di) * oext.w + (j * factor[1] + dj)) * oext.d
                            + (k * factor[2] + dk);
                        let gorow = &gos[ov * c..(ov + 1) * c];
                        for ci in 0..c {
                            gxrow[ci] += gorow[ci];
                        }
                    }
                }
            }
        }
    });
    grad_x
}

/// Concatenates two maps along the channel axis.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!(&a.shape()[..3], &b.shape()[..3], "spatial shapes match");
    let ext = Extents::of(a);
    let (ca, cb) = (a.shape()[3], b.shape()[3]);
    let c = ca + cb;
    let asl = flat(a);
    let bsl = flat(b);
    let mut out = FeatureMap::zeros((ext.h, ext.w, ext.d, c));
    let os = flat_mut(&mut out);
    par::for_each_chunk_mut(os, VOXEL_CHUNK * c, |ci_chunk, chunk| {
        let v0 = ci_chunk * VOXEL_CHUNK;
        for (dv, orow) in chunk.chunks_mut(c).enumerate() {
            let v = v0 + dv;
            orow[..ca].copy_from_slice(&asl[v * ca..(v + 1) * ca]);
            orow[ca..].copy_from_slice(&bsl[v * cb..(v + 1) * cb]);
        }
    });
    out
}

/// Splits a channel-axis gradient back into the two concatenated parts.
pub fn split_channels(grad: &FeatureMap, ca: usize) -> (FeatureMap, FeatureMap) {
    let ext = Extents::of(grad);
    let c = grad.shape()[3];
    let cb = c - ca;
    let gs = flat(grad);
    let mut ga = FeatureMap::zeros((ext.h, ext.w, ext.d, ca));
    let mut gb = FeatureMap::zeros((ext.h, ext.w, ext.d, cb));
    {
        let gas = flat_mut(&mut ga);
        par::for_each_chunk_mut(gas, VOXEL_CHUNK * ca, |ci_chunk, chunk| {
            let v0 = ci_chunk * VOXEL_CHUNK;
            for (dv, row) in chunk.chunks_mut(ca).enumerate() {
                let v = v0 + dv;
                row.copy_from_slice(&gs[v * c..v * c + ca]);
            }
        });
    }
    {
        let gbs = flat_mut(&mut gb);
        par::for_each_chunk_mut(gbs, VOXEL_CHUNK * cb, |ci_chunk, chunk| {
            let v0 = ci_chunk * VOXEL_CHUNK;
            for (dv, row) in chunk.chunks_mut(cb).enumerate() {
                let v = v0 + dv;
                row.copy_from_slice(&gs[v * c + ca..(v + 1) * c]);
            }
        });
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::finite_difference_gradcheck;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: (usize, usize, usize, usize), seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn rand_weights(c_out: usize, kernel: [usize; 3], c_in: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(
            ndarray::IxDyn(&[c_out, kernel[0], kernel[1], kernel[2], c_in]),
            || rng.gen_range(-0.5..0.5),
        )
    }

    /// Scalar reference convolution, used as the independent oracle.
    fn conv_reference(x: &FeatureMap, w: &ArrayD<f64>, b: &[f64]) -> FeatureMap {
        let (h, wd, d, cin) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let geo = ConvGeometry::of(w);
        let pad = geo.pad();
        let mut out = FeatureMap::zeros((h, wd, d, geo.c_out));
        for i in 0..h {
            for j in 0..wd {
                for k in 0..d {
                    for co in 0..geo.c_out {
                        let mut acc = b[co];
                        for di in 0..geo.kernel[0] {
                            for dj in 0..geo.kernel[1] {
                                for dk in 0..geo.kernel[2] {
                                    let si = i as isize + di as isize - pad[0] as isize;
                                    let sj = j as isize + dj as isize - pad[1] as isize;
                                    let sk = k as isize + dk as isize - pad[2] as isize;
                                    if si >= 0
                                        && (si as usize) < h
                                        && sj >= 0
                                        && (sj as usize) < wd
                                        && sk >= 0
                                        && (sk as usize) < d
                                    {
                                        for ci in 0..cin {
                                            acc += x[[si as usize, sj as usize, sk as usize, ci]]
                                                * w[[co, di, dj, dk, ci]];
                                        }
                                    }
                                }
                            }
                        }
                        out[[i, j, k, co]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_scalar_reference() {
        let x = rand_map((5, 4, 3, 3), 1);
        let w = rand_weights(4, [3, 3, 3], 3, 2);
        let b: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
        let fast = conv_forward(&x, &w, &b);
        let slow = conv_reference(&x, &w, &b);
        for (a, e) in fast.iter().zip(slow.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_1x1_matches_scalar_reference() {
        let x = rand_map((4, 4, 2, 6), 3);
        let w = rand_weights(3, [1, 1, 1], 6, 4);
        let b = vec![0.3, -0.2, 0.0];
        let fast = conv_forward(&x, &w, &b);
        let slow = conv_reference(&x, &w, &b);
        for (a, e) in fast.iter().zip(slow.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_2d_kernel_matches_scalar_reference() {
        // Depth extent 1 with a (3, 3, 1) kernel, the 2D-mode configuration.
        let x = rand_map((6, 5, 1, 2), 5);
        let w = rand_weights(3, [3, 3, 1], 2, 6);
        let b = vec![0.0; 3];
        let fast = conv_forward(&x, &w, &b);
        let slow = conv_reference(&x, &w, &b);
        for (a, e) in fast.iter().zip(slow.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand_map((3, 3, 3, 2), 7);
        let w = rand_weights(2, [3, 3, 3], 2, 8);
        let b = vec![0.1, -0.1];
        let out = conv_forward(&x, &w, &b);
        // Scalar objective: weighted sum of outputs.
        let mix = rand_map((3, 3, 3, 2), 9);
        let grad_out: FeatureMap = mix.clone();
        let (gx, gw, gb) = conv_backward(&x, &w, &grad_out);
        let _ = out;

        // d/dx
        let xs = x.as_slice().unwrap().to_vec();
        let shape = x.raw_dim();
        let err = finite_difference_gradcheck(
            |p| {
                let xx = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                let o = conv_forward(&xx, &w, &b);
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            gx.as_slice().unwrap(),
            &xs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "x grad err {err}");

        // d/dw
        let ws = w.as_slice().unwrap().to_vec();
        let wshape = w.raw_dim();
        let err = finite_difference_gradcheck(
            |p| {
                let ww = ArrayD::from_shape_vec(wshape.clone(), p.to_vec()).unwrap();
                let o = conv_forward(&x, &ww, &b);
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            gw.as_slice().unwrap(),
            &ws,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "w grad err {err}");

        // d/db
        let err = finite_difference_gradcheck(
            |p| {
                let o = conv_forward(&x, &w, p);
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            &gb,
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "b grad err {err}");
    }

    #[test]
    fn instance_norm_normalizes_and_matches_fd() {
        let x = rand_map((4, 3, 2, 3), 11);
        let gamma = vec![1.2, 0.8, 1.0];
        let beta = vec![0.1, 0.0, -0.2];
        let (y, cache) = instance_norm_forward(&x, &gamma, &beta);
        // Per-channel moments of (y - beta) / gamma are (0, 1) up to eps.
        for ci in 0..3 {
            let vals: Vec<f64> = y
                .as_slice()
                .unwrap()
                .chunks(3)
                .map(|r| (r[ci] - beta[ci]) / gamma[ci])
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3, "eps shifts variance slightly");
        }

        let mix = rand_map((4, 3, 2, 3), 12);
        let (gx, ggamma, gbeta) = instance_norm_backward(&x, &gamma, &cache, &mix);
        let xs = x.as_slice().unwrap().to_vec();
        let shape = x.raw_dim();
        let err = finite_difference_gradcheck(
            |p| {
                let xx = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                let (o, _) = instance_norm_forward(&xx, &gamma, &beta);
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            gx.as_slice().unwrap(),
            &xs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "norm x grad err {err}");

        let err = finite_difference_gradcheck(
            |p| {
                let (o, _) = instance_norm_forward(&x, p, &beta);
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            &ggamma,
            &gamma,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "gamma grad err {err}");

        let err = finite_difference_gradcheck(
            |p| {
                let (o, _) = instance_norm_forward(&x, &gamma, p);
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            &gbeta,
            &beta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "beta grad err {err}");
    }

    #[test]
    fn relu_masks_gradient() {
        let x = rand_map((2, 2, 2, 2), 13);
        let y = relu_forward(&x);
        assert!(y.iter().all(|&v| v >= 0.0));
        let go = rand_map((2, 2, 2, 2), 14);
        let gx = relu_backward(&y, &go);
        for ((yv, gv), gxv) in y.iter().zip(go.iter()).zip(gx.iter()) {
            if *yv > 0.0 {
                assert_eq!(gxv, gv);
            } else {
                assert_eq!(*gxv, 0.0);
            }
        }
    }

    #[test]
    fn pool_selects_max_and_routes_gradient() {
        let x = rand_map((4, 4, 2, 3), 15);
        let (y, cache) = max_pool_forward(&x, [2, 2, 2]);
        assert_eq!(y.shape(), &[2, 2, 1, 3]);
        // Every output equals the max of its window.
        for i in 0..2 {
            for j in 0..2 {
                for ci in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                best = best.max(x[[2 * i + di, 2 * j + dj, dk, ci]]);
                            }
                        }
                    }
                    assert_eq!(y[[i, j, 0, ci]], best);
                }
            }
        }
        let go = rand_map((2, 2, 1, 3), 16);
        let gx = max_pool_backward(&cache, &go);
        // Gradient mass is conserved per channel.
        for ci in 0..3 {
            let a: f64 = go.slice(ndarray::s![.., .., .., ci]).sum();
            let b: f64 = gx.slice(ndarray::s![.., .., .., ci]).sum();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_2d_window_keeps_depth() {
        let x = rand_map((4, 4, 1, 2), 17);
        let (y, _) = max_pool_forward(&x, [2, 2, 1]);
        assert_eq!(y.shape(), &[2, 2, 1, 2]);
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let x = rand_map((2, 2, 1, 2), 18);
        let y = upsample_forward(&x, [2, 2, 1]);
        assert_eq!(y.shape(), &[4, 4, 1, 2]);
        for i in 0..4 {
            for j in 0..4 {
                for ci in 0..2 {
                    assert_eq!(y[[i, j, 0, ci]], x[[i / 2, j / 2, 0, ci]]);
                }
            }
        }
        let go = rand_map((4, 4, 1, 2), 19);
        let gx = upsample_backward(&go, [2, 2, 1]);
        for i in 0..2 {
            for j in 0..2 {
                for ci in 0..2 {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += go[[2 * i + di, 2 * j + dj, 0, ci]];
                        }
                    }
                    assert!((gx[[i, j, 0, ci]] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = rand_map((3, 2, 2, 3), 20);
        let b = rand_map((3, 2, 2, 5), 21);
        let y = concat_channels(&a, &b);
        assert_eq!(y.shape(), &[3, 2, 2, 8]);
        let (ga, gb) = split_channels(&y, 3);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}
