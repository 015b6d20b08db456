//! Forward and backward passes of the encoder-decoder and its variants.
//!
//! The image-encoder walks level by level; under `dual_encoder` and
//! `priornet` the template-encoder runs first (it is never fused into), and at
//! each level the image features are fused with the template features — by a
//! learned 1x1 projection of their concatenation, or by cosine-similarity
//! gating. The fused features feed both the decoder skip at that scale and,
//! after pooling, the next encoder level.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::network::csam::{csam_backward, csam_forward, CsamCache};
use crate::network::layers::{
    concat_channels, conv_backward, conv_forward, instance_norm_backward, instance_norm_forward,
    max_pool_backward, max_pool_forward, relu_backward, relu_forward, split_channels,
    upsample_backward, upsample_forward, NormCache, PoolCache,
};
use crate::network::{NetworkConfig, Parameters, Variant};
use crate::volume::{spatial_extents, TemplateBundle, Volume};
use crate::FeatureMap;

/// Encoder branch selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Image,
    Template,
}

impl Branch {
    pub(crate) fn prefix(self) -> &'static str {
        match self {
            Branch::Image => "enc",
            Branch::Template => "tenc",
        }
    }
}

/// Cache of one conv-norm-relu x2 block.
#[derive(Debug)]
struct BlockCache {
    x_in: FeatureMap,
    conv0: FeatureMap,
    n0: NormCache,
    r0: FeatureMap,
    conv1: FeatureMap,
    n1: NormCache,
    out: FeatureMap,
}

fn block_forward(x: FeatureMap, params: &Parameters, prefix: &str) -> BlockCache {
    let conv0 = conv_forward(
        &x,
        params.get(&format!("{prefix}.conv0.w")),
        params.slice(&format!("{prefix}.conv0.b")),
    );
    let (norm0, n0) = instance_norm_forward(
        &conv0,
        params.slice(&format!("{prefix}.norm0.gamma")),
        params.slice(&format!("{prefix}.norm0.beta")),
    );
    let r0 = relu_forward(&norm0);
    let conv1 = conv_forward(
        &r0,
        params.get(&format!("{prefix}.conv1.w")),
        params.slice(&format!("{prefix}.conv1.b")),
    );
    let (norm1, n1) = instance_norm_forward(
        &conv1,
        params.slice(&format!("{prefix}.norm1.gamma")),
        params.slice(&format!("{prefix}.norm1.beta")),
    );
    let out = relu_forward(&norm1);
    BlockCache {
        x_in: x,
        conv0,
        n0,
        r0,
        conv1,
        n1,
        out,
    }
}

fn block_backward(
    cache: &BlockCache,
    params: &Parameters,
    prefix: &str,
    grad_out: &FeatureMap,
    grads: &mut Parameters,
) -> FeatureMap {
    let g = relu_backward(&cache.out, grad_out);
    let (g, ggamma, gbeta) = instance_norm_backward(
        &cache.conv1,
        params.slice(&format!("{prefix}.norm1.gamma")),
        &cache.n1,
        &g,
    );
    grads.add_assign_slice(&format!("{prefix}.norm1.gamma"), &ggamma);
    grads.add_assign_slice(&format!("{prefix}.norm1.beta"), &gbeta);
    let (g, gw, gb) = conv_backward(&cache.r0, params.get(&format!("{prefix}.conv1.w")), &g);
    grads.add_assign(&format!("{prefix}.conv1.w"), &gw);
    grads.add_assign_slice(&format!("{prefix}.conv1.b"), &gb);
    let g = relu_backward(&cache.r0, &g);
    let (g, ggamma, gbeta) = instance_norm_backward(
        &cache.conv0,
        params.slice(&format!("{prefix}.norm0.gamma")),
        &cache.n0,
        &g,
    );
    grads.add_assign_slice(&format!("{prefix}.norm0.gamma"), &ggamma);
    grads.add_assign_slice(&format!("{prefix}.norm0.beta"), &gbeta);
    let (g, gw, gb) = conv_backward(&cache.x_in, params.get(&format!("{prefix}.conv0.w")), &g);
    grads.add_assign(&format!("{prefix}.conv0.w"), &gw);
    grads.add_assign_slice(&format!("{prefix}.conv0.b"), &gb);
    g
}

/// Per-level fusion cache.
#[derive(Debug)]
enum FuseCache {
    None,
    Csam(CsamCache),
    /// Concatenated `(f1, f2)` input of the 1x1 projection.
    Dual(FeatureMap),
}

#[derive(Debug)]
struct DecLevelCache {
    /// Nearest-neighbor-upsampled features (input of the `up` convolution).
    nn_out: FeatureMap,
    block: BlockCache,
}

/// Every intermediate needed to run the backward pass of one forward call.
#[derive(Debug)]
pub struct Trace {
    image_blocks: Vec<BlockCache>,
    image_pools: Vec<PoolCache>,
    template_blocks: Vec<BlockCache>,
    template_pools: Vec<PoolCache>,
    fuse: Vec<FuseCache>,
    dec: Vec<DecLevelCache>,
    logits: FeatureMap,
}

impl Trace {
    pub fn logits(&self) -> &FeatureMap {
        &self.logits
    }
}

fn check_divisible(cfg: &NetworkConfig, shape: &[usize]) -> Result<()> {
    let factor = cfg.downsampling_factor();
    let (h, w, d) = spatial_extents(shape);
    let ok = h % factor == 0 && w % factor == 0 && (cfg.dimensionality == 2 || d % factor == 0);
    if !ok {
        return Err(Error::ShapeMismatch(format!(
            "spatial shape {shape:?} is not divisible by the downsampling factor {factor}"
        )));
    }
    Ok(())
}

/// Lifts a volume into a single-channel feature map `(H, W, D, 1)`.
pub fn volume_to_feature(v: &Volume) -> FeatureMap {
    let (h, w, d) = spatial_extents(v.shape());
    let mut out = FeatureMap::zeros((h, w, d, 1));
    out.as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(v.as_slice());
    out
}

/// Template-encoder input: the template image concatenated with its K
/// per-class foreground regions, `K + 1` channels in total.
pub fn bundle_to_feature(bundle: &TemplateBundle) -> FeatureMap {
    let (h, w, d) = spatial_extents(bundle.shape());
    let k = bundle.num_classes();
    let mut out = FeatureMap::zeros((h, w, d, k + 1));
    let os = out.as_slice_mut().expect("standard layout");
    let t = bundle.template.as_slice();
    for (v, chunk) in os.chunks_mut(k + 1).enumerate() {
        chunk[0] = t[v];
        for (c, ch) in bundle.foreground_channels.iter().enumerate() {
            chunk[c + 1] = ch.as_slice()[v];
        }
    }
    out
}

/// Single-encoder input: target, template, then the K foreground regions.
fn single_encoder_input(target: &FeatureMap, bundle: &TemplateBundle) -> FeatureMap {
    concat_channels(target, &bundle_to_feature(bundle))
}

/// Plain (unfused) encoder walk. Returns the per-level block outputs: level
/// `l` has spatial extents divided by `2^l` and `base_channels * 2^l`
/// channels.
pub fn encoder_forward(
    x: &FeatureMap,
    params: &Parameters,
    branch: Branch,
    cfg: &NetworkConfig,
) -> Result<Vec<FeatureMap>> {
    cfg.validate()?;
    let expect = cfg.branch_in_channels(branch);
    if x.shape()[3] != expect {
        return Err(Error::ShapeMismatch(format!(
            "{:?} branch expects {} input channels, got {}",
            branch,
            expect,
            x.shape()[3]
        )));
    }
    check_divisible(cfg, &x.shape()[..3])?;
    if branch == Branch::Template && !cfg.variant.has_template_encoder() {
        return Err(Error::Config(format!(
            "variant {} has no template encoder",
            cfg.variant
        )));
    }
    let window = [2, 2, cfg.depth_factor()];
    let prefix = branch.prefix();
    let mut outs = Vec::with_capacity(cfg.num_levels);
    let mut x = x.clone();
    for l in 0..cfg.num_levels {
        let block = block_forward(x, params, &format!("{prefix}.l{l}"));
        if l + 1 < cfg.num_levels {
            let (pooled, _) = max_pool_forward(&block.out, window);
            x = pooled;
        } else {
            x = FeatureMap::zeros((0, 0, 0, 0));
        }
        outs.push(block.out);
    }
    Ok(outs)
}

/// Decoder walk from the deepest feature map plus the shallower skips
/// (ordered shallow to deep, `num_levels - 1` of them). Returns logits with
/// `K + 1` channels at the skip-0 resolution.
pub fn decoder_forward(
    bottleneck: &FeatureMap,
    skips: &[FeatureMap],
    params: &Parameters,
    cfg: &NetworkConfig,
) -> Result<FeatureMap> {
    cfg.validate()?;
    if skips.len() != cfg.num_levels - 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected {} skips, got {}",
            cfg.num_levels - 1,
            skips.len()
        )));
    }
    for (l, s) in skips.iter().enumerate() {
        if s.shape()[3] != cfg.level_channels(l) {
            return Err(Error::ShapeMismatch(format!(
                "skip {l} has {} channels, expected {}",
                s.shape()[3],
                cfg.level_channels(l)
            )));
        }
    }
    if bottleneck.shape()[3] != cfg.level_channels(cfg.num_levels - 1) {
        return Err(Error::ShapeMismatch(format!(
            "bottleneck has {} channels, expected {}",
            bottleneck.shape()[3],
            cfg.level_channels(cfg.num_levels - 1)
        )));
    }
    let mut skips_owned: Vec<FeatureMap> = skips.to_vec();
    skips_owned.push(bottleneck.clone());
    let (logits, _) = run_decoder(&skips_owned, params, cfg, |a, b| {
        if a.shape()[..3] != b.shape()[..3] {
            Err(Error::ShapeMismatch(format!(
                "skip spatial shape {:?} inconsistent with decoder path {:?}",
                b.shape(),
                a.shape()
            )))
        } else {
            Ok(())
        }
    })?;
    Ok(logits)
}

fn run_decoder(
    skips: &[FeatureMap],
    params: &Parameters,
    cfg: &NetworkConfig,
    check: impl Fn(&FeatureMap, &FeatureMap) -> Result<()>,
) -> Result<(FeatureMap, Vec<DecLevelCache>)> {
    let levels = cfg.num_levels;
    let factor = [2, 2, cfg.depth_factor()];
    let mut dec = Vec::with_capacity(levels - 1);
    let mut x = skips[levels - 1].clone();
    for l in (0..levels - 1).rev() {
        let nn_out = upsample_forward(&x, factor);
        let up = conv_forward(
            &nn_out,
            params.get(&format!("dec.l{l}.up.w")),
            params.slice(&format!("dec.l{l}.up.b")),
        );
        check(&up, &skips[l])?;
        let cat = concat_channels(&up, &skips[l]);
        let block = block_forward(cat, params, &format!("dec.l{l}"));
        x = block.out.clone();
        dec.push(DecLevelCache { nn_out, block });
    }
    let logits = conv_forward(&x, params.get("head.w"), params.slice("head.b"));
    Ok((logits, dec))
}

/// Full forward pass with trace, dispatching on the variant. `bundle` must be
/// present exactly when the variant uses a template.
pub fn variant_forward_traced(
    target: &Volume,
    bundle: Option<&TemplateBundle>,
    params: &Parameters,
    cfg: &NetworkConfig,
) -> Result<Trace> {
    cfg.validate()?;
    if target.ndim() != cfg.dimensionality {
        return Err(Error::ShapeMismatch(format!(
            "target rank {} vs configured dimensionality {}",
            target.ndim(),
            cfg.dimensionality
        )));
    }
    check_divisible(cfg, target.shape())?;
    match (cfg.variant.uses_template(), bundle) {
        (true, None) => {
            return Err(Error::Config(format!(
                "variant {} requires a template bundle",
                cfg.variant
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Config(
                "baseline variant takes no template bundle".into(),
            ))
        }
        _ => {}
    }
    if let Some(b) = bundle {
        if b.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "template {:?} vs target {:?}",
                b.shape(),
                target.shape()
            )));
        }
        if b.num_classes() != cfg.num_classes {
            return Err(Error::Config(format!(
                "bundle has K={} but the network is configured for K={}",
                b.num_classes(),
                cfg.num_classes
            )));
        }
    }

    let target_fm = volume_to_feature(target);
    let image_in = match cfg.variant {
        Variant::SingleEncoder => single_encoder_input(&target_fm, bundle.expect("checked")),
        _ => target_fm,
    };
    let window = [2, 2, cfg.depth_factor()];
    let levels = cfg.num_levels;

    // Template branch first; it is never fused into.
    let mut template_blocks = Vec::new();
    let mut template_pools = Vec::new();
    if cfg.variant.has_template_encoder() {
        let mut x = bundle_to_feature(bundle.expect("checked"));
        for l in 0..levels {
            let block = block_forward(x, params, &format!("tenc.l{l}"));
            if l + 1 < levels {
                let (pooled, cache) = max_pool_forward(&block.out, window);
                template_pools.push(cache);
                x = pooled;
            } else {
                x = FeatureMap::zeros((0, 0, 0, 0));
            }
            template_blocks.push(block);
        }
    }

    // Image branch with per-level fusion.
    let mut image_blocks = Vec::new();
    let mut image_pools = Vec::new();
    let mut fuse = Vec::new();
    let mut skips = Vec::new();
    let mut x = image_in;
    for l in 0..levels {
        let block = block_forward(x, params, &format!("enc.l{l}"));
        let (fused, fcache) = match cfg.variant {
            Variant::PriorNet => {
                let f2 = &template_blocks[l].out;
                let (fused, cache) = csam_forward(&block.out, f2, cfg.attention);
                (fused, FuseCache::Csam(cache))
            }
            Variant::DualEncoder => {
                let f2 = &template_blocks[l].out;
                let cat = concat_channels(&block.out, f2);
                let fused = conv_forward(
                    &cat,
                    params.get(&format!("fuse.l{l}.w")),
                    params.slice(&format!("fuse.l{l}.b")),
                );
                (fused, FuseCache::Dual(cat))
            }
            _ => (block.out.clone(), FuseCache::None),
        };
        if l + 1 < levels {
            let (pooled, cache) = max_pool_forward(&fused, window);
            image_pools.push(cache);
            x = pooled;
        } else {
            x = FeatureMap::zeros((0, 0, 0, 0));
        }
        image_blocks.push(block);
        fuse.push(fcache);
        skips.push(fused);
    }

    let (logits, dec) = run_decoder(&skips, params, cfg, |_, _| Ok(()))?;
    Ok(Trace {
        image_blocks,
        image_pools,
        template_blocks,
        template_pools,
        fuse,
        skips,
        dec,
        logits,
    })
}

/// Backward pass over a [`Trace`], returning parameter gradients with the
/// same key set as `params`.
pub fn variant_backward(
    trace: &Trace,
    params: &Parameters,
    cfg: &NetworkConfig,
    grad_logits: &FeatureMap,
) -> Result<Parameters> {
    if grad_logits.shape() != trace.logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad logits {:?} vs logits {:?}",
            grad_logits.shape(),
            trace.logits.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let levels = cfg.num_levels;
    let factor = [2, 2, cfg.depth_factor()];

    // Head.
    let head_in = &trace.dec.last().expect("decoder has levels").block.out;
    let (mut g, gw, gb) = conv_backward(head_in, params.get("head.w"), grad_logits);
    grads.add_assign("head.w", &gw);
    grads.add_assign_slice("head.b", &gb);

    // Decoder, reverse of the forward order (dec[i] holds level l = levels-2-i).
    let mut skip_grads: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
    for (i, cache) in trace.dec.iter().enumerate().rev() {
        let l = levels - 2 - i;
        let g_cat = block_backward(&cache.block, params, &format!("dec.l{l}"), &g, &mut grads);
        let (g_up, g_skip) = split_channels(&g_cat, cfg.level_channels(l));
        skip_grads[l] = Some(g_skip);
        let (g_nn, gw, gb) = conv_backward(
            &cache.nn_out,
            params.get(&format!("dec.l{l}.up.w")),
            &g_up,
        );
        grads.add_assign(&format!("dec.l{l}.up.w"), &gw);
        grads.add_assign_slice(&format!("dec.l{l}.up.b"), &gb);
        g = upsample_backward(&g_nn, factor);
    }
    skip_grads[levels - 1] = Some(g);

    // Image encoder from deep to shallow; fusion routes gradient into the
    // template branch per level.
    let mut template_grads: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
    let mut carry: Option<FeatureMap> = None;
    for l in (0..levels).rev() {
        let mut g_fused = skip_grads[l].take().expect("every skip receives gradient");
        if let Some(c) = carry.take() {
            let g_pool = max_pool_backward(&trace.image_pools[l], &c);
            let gs = g_fused.as_slice_mut().expect("standard layout");
            let ps = g_pool.as_slice().expect("standard layout");
            for (a, b) in gs.iter_mut().zip(ps) {
                *a += b;
            }
        }
        let g_f1 = match &trace.fuse[l] {
            FuseCache::None => g_fused,
            FuseCache::Csam(cache) => {
                let f1 = &trace.image_blocks[l].out;
                let f2 = &trace.template_blocks[l].out;
                let (g1, g2) = csam_backward(f1, f2, cache, &g_fused, cfg.attention);
                template_grads[l] = Some(g2);
                g1
            }
            FuseCache::Dual(cat) => {
                let (g_cat, gw, gb) = conv_backward(
                    cat,
                    params.get(&format!("fuse.l{l}.w")),
                    &g_fused,
                );
                grads.add_assign(&format!("fuse.l{l}.w"), &gw);
                grads.add_assign_slice(&format!("fuse.l{l}.b"), &gb);
                let (g1, g2) = split_channels(&g_cat, cfg.level_channels(l));
                template_grads[l] = Some(g2);
                g1
            }
        };
        carry = Some(block_backward(
            &trace.image_blocks[l],
            params,
            &format!("enc.l{l}"),
            &g_f1,
            &mut grads,
        ));
    }

    // Template encoder, if present.
    if cfg.variant.has_template_encoder() {
        let mut carry: Option<FeatureMap> = None;
        for l in (0..levels).rev() {
            let mut g_out = template_grads[l]
                .take()
                .expect("fusion contributed a gradient at every level");
            if let Some(c) = carry.take() {
                let g_pool = max_pool_backward(&trace.template_pools[l], &c);
                let gs = g_out.as_slice_mut().expect("standard layout");
                let ps = g_pool.as_slice().expect("standard layout");
                for (a, b) in gs.iter_mut().zip(ps) {
                    *a += b;
                }
            }
            carry = Some(block_backward(
                &trace.template_blocks[l],
                params,
                &format!("tenc.l{l}"),
                &g_out,
                &mut grads,
            ));
        }
    }
    Ok(grads)
}

/// Forward pass returning logits shaped `spatial x (K + 1)` at the target's
/// rank: `(H, W, C)` for 2D networks, `(H, W, D, C)` for 3D.
pub fn variant_forward(
    target: &Volume,
    bundle: Option<&TemplateBundle>,
    params: &Parameters,
    cfg: &NetworkConfig,
) -> Result<ArrayD<f64>> {
    let trace = variant_forward_traced(target, bundle, params, cfg)?;
    Ok(squeeze_logits(trace.logits, cfg))
}

/// The full fused forward pass (template-guided attention at every level).
pub fn priornet_forward(
    target: &Volume,
    bundle: &TemplateBundle,
    params: &Parameters,
    cfg: &NetworkConfig,
) -> Result<ArrayD<f64>> {
    if cfg.variant != Variant::PriorNet {
        return Err(Error::Config(format!(
            "priornet_forward requires the priornet variant, got {}",
            cfg.variant
        )));
    }
    variant_forward(target, Some(bundle), params, cfg)
}

/// Drops the singleton depth axis of 2D logits.
pub(crate) fn squeeze_logits(logits: FeatureMap, cfg: &NetworkConfig) -> ArrayD<f64> {
    if cfg.dimensionality == 2 {
        let s = logits.shape().to_vec();
        logits
            .into_shape_with_order((s[0], s[1], s[3]))
            .expect("depth axis is singleton")
            .into_dyn()
    } else {
        logits.into_dyn()
    }
}
