//! Cosine-similarity attention: per spatial position, the cosine between the
//! two branches' channel vectors becomes a scalar weight that gates the
//! image-branch features.

use crate::error::{Error, Result};
use crate::network::AttentionMode;
use crate::par;
use crate::{AttentionField, FeatureMap};

/// Norms below this are treated as dead features: the weight is defined as 0.
pub const NORM_GUARD: f64 = 1e-8;

const VOXEL_CHUNK: usize = 4096;

/// Per-voxel cosine similarity between the channel vectors of `f1` and `f2`.
///
/// `w[i,j,k] = (f1[i,j,k,:] . f2[i,j,k,:]) / (|f1[i,j,k,:]| * |f2[i,j,k,:]|)`,
/// clamped into `[-1, 1]`; positions where either norm falls below
/// [`NORM_GUARD`] get weight 0.
pub fn csam_weights(f1: &FeatureMap, f2: &FeatureMap) -> Result<AttentionField> {
    check_shapes(f1, f2)?;
    let s = f1.shape();
    let c = s[3];
    let f1s = f1.as_slice().expect("standard layout");
    let f2s = f2.as_slice().expect("standard layout");
    let mut out = AttentionField::zeros((s[0], s[1], s[2]));
    let os = out.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(os, VOXEL_CHUNK, |ci, chunk| {
        let v0 = ci * VOXEL_CHUNK;
        for (dv, w) in chunk.iter_mut().enumerate() {
            let at = (v0 + dv) * c;
            let a = &f1s[at..at + c];
            let b = &f2s[at..at + c];
            let d = par::dot(a, b);
            let n1 = par::dot(a, a).sqrt();
            let n2 = par::dot(b, b).sqrt();
            *w = if n1 < NORM_GUARD || n2 < NORM_GUARD {
                0.0
            } else {
                (d / (n1 * n2)).clamp(-1.0, 1.0)
            };
        }
    });
    Ok(out)
}

/// Gates every channel of `f1` by the per-voxel attention weight.
pub fn csam_apply(f1: &FeatureMap, w: &AttentionField) -> Result<FeatureMap> {
    if f1.shape()[..3] != w.shape()[..] {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} vs attention {:?}",
            f1.shape(),
            w.shape()
        )));
    }
    let c = f1.shape()[3];
    let ws = w.as_slice().expect("standard layout");
    let mut out = f1.clone();
    let os = out.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(os, VOXEL_CHUNK * c, |ci, chunk| {
        let v0 = ci * VOXEL_CHUNK;
        for (dv, row) in chunk.chunks_mut(c).enumerate() {
            let weight = ws[v0 + dv];
            for v in row {
                *v *= weight;
            }
        }
    });
    Ok(out)
}

fn check_shapes(f1: &FeatureMap, f2: &FeatureMap) -> Result<()> {
    if f1.shape() != f2.shape() {
        return Err(Error::ShapeMismatch(format!(
            "f1 {:?} vs f2 {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    Ok(())
}

/// Cache of the unguarded per-voxel statistics needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CsamCache {
    pub dot: Vec<f64>,
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
}

/// Fused forward: computes the weights and gates `f1` in one pass, caching
/// the dot products and norms.
pub(crate) fn csam_forward(
    f1: &FeatureMap,
    f2: &FeatureMap,
    mode: AttentionMode,
) -> (FeatureMap, CsamCache) {
    let s = f1.shape();
    let c = s[3];
    let voxels = s[0] * s[1] * s[2];
    let f1s = f1.as_slice().expect("standard layout");
    let f2s = f2.as_slice().expect("standard layout");
    let mut dotv = vec![0.0; voxels];
    let mut n1 = vec![0.0; voxels];
    let mut n2 = vec![0.0; voxels];
    // Stats first (three separate buffers written by one chunked pass each
    // would triple the traversal; pack them inline instead).
    {
        let partials = par::chunk_partials(voxels, VOXEL_CHUNK, |r| {
            let mut acc = Vec::with_capacity(r.len() * 3);
            for v in r {
                let a = &f1s[v * c..(v + 1) * c];
                let b = &f2s[v * c..(v + 1) * c];
                acc.push(par::dot(a, b));
                acc.push(par::dot(a, a).sqrt());
                acc.push(par::dot(b, b).sqrt());
            }
            acc
        });
        let mut v = 0;
        for p in partials {
            for trio in p.chunks(3) {
                dotv[v] = trio[0];
                n1[v] = trio[1];
                n2[v] = trio[2];
                v += 1;
            }
        }
    }
    let mut out = f1.clone();
    let os = out.as_slice_mut().expect("standard layout");
    let (dref, n1ref, n2ref) = (&dotv, &n1, &n2);
    par::for_each_chunk_mut(os, VOXEL_CHUNK * c, |ci, chunk| {
        let v0 = ci * VOXEL_CHUNK;
        for (dv, row) in chunk.chunks_mut(c).enumerate() {
            let v = v0 + dv;
            let gate = gate_value(dref[v], n1ref[v], n2ref[v], mode);
            for x in row {
                *x *= gate;
            }
        }
    });
    (
        out,
        CsamCache {
            dot: dotv,
            n1,
            n2,
        },
    )
}

#[inline]
fn gate_value(dot: f64, n1: f64, n2: f64, mode: AttentionMode) -> f64 {
    let w = if n1 < NORM_GUARD || n2 < NORM_GUARD {
        0.0
    } else {
        dot / (n1 * n2)
    };
    match mode {
        AttentionMode::Raw => w,
        AttentionMode::Shifted => 0.5 * (1.0 + w),
    }
}

/// Backward through the fused gate: returns gradients for both branches.
pub(crate) fn csam_backward(
    f1: &FeatureMap,
    f2: &FeatureMap,
    cache: &CsamCache,
    grad_out: &FeatureMap,
    mode: AttentionMode,
) -> (FeatureMap, FeatureMap) {
    let s = f1.shape();
    let c = s[3];
    let f1s = f1.as_slice().expect("standard layout");
    let f2s = f2.as_slice().expect("standard layout");
    let gos = grad_out.as_slice().expect("standard layout");
    let mut g1 = FeatureMap::zeros(f1.raw_dim());
    let mut g2 = FeatureMap::zeros(f2.raw_dim());
    // The two gradient buffers partition identically; fill g1 then g2 so each
    // pass stays a plain chunked map.
    let dgate = match mode {
        AttentionMode::Raw => 1.0,
        AttentionMode::Shifted => 0.5,
    };
    {
        let g1s = g1.as_slice_mut().expect("standard layout");
        par::for_each_chunk_mut(g1s, VOXEL_CHUNK * c, |ci, chunk| {
            let v0 = ci * VOXEL_CHUNK;
            for (dv, row) in chunk.chunks_mut(c).enumerate() {
                let v = v0 + dv;
                let at = v * c;
                let a = &f1s[at..at + c];
                let go = &gos[at..at + c];
                let n1 = cache.n1[v];
                let n2 = cache.n2[v];
                if n1 < NORM_GUARD || n2 < NORM_GUARD {
                    // Gate is the constant gate_value(.., 0): only the direct
                    // term survives and d(gate)/df is zero.
                    let gate = gate_value(cache.dot[v], n1, n2, mode);
                    for (g, &gov) in row.iter_mut().zip(go) {
                        *g = gov * gate;
                    }
                    continue;
                }
                let b = &f2s[at..at + c];
                let w = cache.dot[v] / (n1 * n2);
                let gate = match mode {
                    AttentionMode::Raw => w,
                    AttentionMode::Shifted => 0.5 * (1.0 + w),
                };
                let g_gate = par::dot(go, a) * dgate; // dL/d(gate) pooled over channels
                let inv = 1.0 / (n1 * n2);
                let wn1 = w / (n1 * n1);
                for cix in 0..c {
                    let dw = b[cix] * inv - a[cix] * wn1;
                    row[cix] = go[cix] * gate + g_gate * dw;
                }
            }
        });
    }
    {
        let g2s = g2.as_slice_mut().expect("standard layout");
        par::for_each_chunk_mut(g2s, VOXEL_CHUNK * c, |ci, chunk| {
            let v0 = ci * VOXEL_CHUNK;
            for (dv, row) in chunk.chunks_mut(c).enumerate() {
                let v = v0 + dv;
                let at = v * c;
                let n1 = cache.n1[v];
                let n2 = cache.n2[v];
                if n1 < NORM_GUARD || n2 < NORM_GUARD {
                    continue;
                }
                let a = &f1s[at..at + c];
                let b = &f2s[at..at + c];
                let go = &gos[at..at + c];
                let w = cache.dot[v] / (n1 * n2);
                let g_gate = par::dot(go, a) * dgate;
                let inv = 1.0 / (n1 * n2);
                let wn2 = w / (n2 * n2);
                for cix in 0..c {
                    let dw = a[cix] * inv - b[cix] * wn2;
                    row[cix] = g_gate * dw;
                }
            }
        });
    }
    (g1, g2)
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

    #[test]
    fn identical_vectors_give_weight_one() {
        let f = rand_map((2, 2, 2, 4), 1);
        let w = csam_weights(&f, &f).unwrap();
        for &v in w.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_and_antipodal_vectors() {
        let mut f1 = FeatureMap::zeros((1, 1, 2, 2));
        let mut f2 = FeatureMap::zeros((1, 1, 2, 2));
        // Position 0: (1,0) vs (0,1) -> 0. Position 1: (1,0) vs (-1,0) -> -1.
        f1[[0, 0, 0, 0]] = 1.0;
        f2[[0, 0, 0, 1]] = 1.0;
        f1[[0, 0, 1, 0]] = 1.0;
        f2[[0, 0, 1, 0]] = -1.0;
        let w = csam_weights(&f1, &f2).unwrap();
        assert_eq!(w[[0, 0, 0]], 0.0);
        assert_eq!(w[[0, 0, 1]], -1.0);
    }

    #[test]
    fn matches_per_voxel_scalar_oracle() {
        let f1 = rand_map((4, 4, 4, 8), 2);
        let f2 = rand_map((4, 4, 4, 8), 3);
        let w = csam_weights(&f1, &f2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let mut d = 0.0;
                    let mut n1 = 0.0;
                    let mut n2 = 0.0;
                    for c in 0..8 {
                        d += f1[[i, j, k, c]] * f2[[i, j, k, c]];
                        n1 += f1[[i, j, k, c]] * f1[[i, j, k, c]];
                        n2 += f2[[i, j, k, c]] * f2[[i, j, k, c]];
                    }
                    let expect = d / (n1.sqrt() * n2.sqrt());
                    assert!((w[[i, j, k]] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_norm_guard_gives_zero_weight() {
        let f1 = FeatureMap::zeros((1, 1, 1, 3));
        let f2 = rand_map((1, 1, 1, 3), 4);
        let w = csam_weights(&f1, &f2).unwrap();
        assert_eq!(w[[0, 0, 0]], 0.0);
    }

    #[test]
    fn weights_are_symmetric_and_scale_invariant() {
        let f1 = rand_map((3, 3, 2, 5), 5);
        let f2 = rand_map((3, 3, 2, 5), 6);
        let w12 = csam_weights(&f1, &f2).unwrap();
        let w21 = csam_weights(&f2, &f1).unwrap();
        for (a, b) in w12.iter().zip(w21.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let scaled = csam_weights(&f1.mapv(|v| 3.7 * v), &f2.mapv(|v| 0.2 * v)).unwrap();
        for (a, b) in w12.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_identity_and_suppression() {
        let f = rand_map((2, 3, 2, 4), 7);
        let ones = AttentionField::ones((2, 3, 2));
        assert_eq!(csam_apply(&f, &ones).unwrap(), f);
        let zeros = AttentionField::zeros((2, 3, 2));
        assert!(csam_apply(&f, &zeros).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_matches_elementwise_oracle() {
        let f = rand_map((3, 2, 2, 3), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = AttentionField::from_shape_simple_fn((3, 2, 2), || rng.gen_range(-1.0..1.0));
        let out = csam_apply(&f, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..2 {
                    for c in 0..3 {
                        assert_eq!(out[[i, j, k, c]], f[[i, j, k, c]] * w[[i, j, k]]);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f1 = rand_map((2, 2, 2, 3), 10);
        let f2 = rand_map((2, 2, 1, 3), 11);
        assert!(matches!(
            csam_weights(&f1, &f2),
            Err(Error::ShapeMismatch(_))
        ));
        let w = AttentionField::zeros((2, 2, 1));
        assert!(matches!(csam_apply(&f1, &w), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        for mode in [AttentionMode::Raw, AttentionMode::Shifted] {
            let f1 = rand_map((2, 2, 2, 4), 12);
            let f2 = rand_map((2, 2, 2, 4), 13);
            let mix = rand_map((2, 2, 2, 4), 14);
            let (_, cache) = csam_forward(&f1, &f2, mode);
            let (g1, g2) = csam_backward(&f1, &f2, &cache, &mix, mode);

            let shape = f1.raw_dim();
            let err = finite_difference_gradcheck(
                |p| {
                    let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                    let (o, _) = csam_forward(&x, &f2, mode);
                    o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
                },
                g1.as_slice().unwrap(),
                f1.as_slice().unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "f1 grad err {err} ({mode})");

            let err = finite_difference_gradcheck(
                |p| {
                    let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                    let (o, _) = csam_forward(&f1, &x, mode);
                    o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
                },
                g2.as_slice().unwrap(),
                f2.as_slice().unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "f2 grad err {err} ({mode})");
        }
    }

    #[test]
    fn composed_pipeline_passes_spec_gradcheck() {
        // csam_weights composed with csam_apply into a scalar.
        let f1 = rand_map((3, 3, 3, 6), 15);
        let f2 = rand_map((3, 3, 3, 6), 16);
        let mix = rand_map((3, 3, 3, 6), 17);
        let (_, cache) = csam_forward(&f1, &f2, AttentionMode::Raw);
        let (g1, _) = csam_backward(&f1, &f2, &cache, &mix, AttentionMode::Raw);
        let shape = f1.raw_dim();
        let err = finite_difference_gradcheck(
            |p| {
                let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                let w = csam_weights(&x, &f2).unwrap();
                let o = csam_apply(&x, &w).unwrap();
                o.iter().zip(mix.iter()).map(|(a, m)| a * m).sum()
            },
            g1.as_slice().unwrap(),
            f1.as_slice().unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "composed gradcheck err {err}");
    }
}
