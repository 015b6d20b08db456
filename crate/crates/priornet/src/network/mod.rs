//! The segmentation network: a U-Net-style encoder-decoder, an optional
//! Siamese template-encoder (same structure, separate weights), and
//! cosine-similarity attention fusing the two branches at every encoder level.
//!
//! Four variants share the machinery:
//! - `baseline`: plain encoder-decoder on the target image alone;
//! - `single_encoder`: one encoder on the concatenation of target, template,
//!   and the template's per-class foreground regions;
//! - `dual_encoder`: two encoders fused per level by channel concatenation
//!   followed by a learned 1x1 projection back to the level width;
//! - `priornet`: two encoders fused per level by cosine-similarity attention.

mod csam;
mod layers;
mod params;
mod unet;

pub use csam::{csam_apply, csam_weights};
pub use params::{init_parameters, Parameters};
pub use unet::{
    decoder_forward, encoder_forward, priornet_forward, variant_forward, variant_forward_traced,
    variant_backward, Branch, Trace,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture variant, matching the four rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    SingleEncoder,
    DualEncoder,
    PriorNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::SingleEncoder,
        Variant::DualEncoder,
        Variant::PriorNet,
    ];

    /// Whether this variant consumes a template bundle.
    pub fn uses_template(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    /// Whether this variant runs a separate template-encoder branch.
    pub fn has_template_encoder(self) -> bool {
        matches!(self, Variant::DualEncoder | Variant::PriorNet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::SingleEncoder => "single_encoder",
            Variant::DualEncoder => "dual_encoder",
            Variant::PriorNet => "priornet",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "single_encoder" => Ok(Variant::SingleEncoder),
            "dual_encoder" => Ok(Variant::DualEncoder),
            "priornet" => Ok(Variant::PriorNet),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// How the cosine attention weight gates the image features.
///
/// `Raw` multiplies by the cosine itself (weights in `[-1, 1]`, so features
/// may flip sign); `Shifted` rescales to `(1 + w) / 2` first. `Raw` is the
/// default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Raw,
    Shifted,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Raw => "raw",
            AttentionMode::Shifted => "shifted",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(AttentionMode::Raw),
            "shifted" => Ok(AttentionMode::Shifted),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Structural description of the network.
///
/// The default channel plan over 4 levels is `[16, 32, 64, 128]`: three
/// poolings, i.e. an overall downsampling factor of eight, at half the widths
/// of the original volumetric U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub dimensionality: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    pub variant: Variant,
    pub seed: u64,
    pub attention: AttentionMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            dimensionality: 3,
            num_classes: 1,
            base_channels: 16,
            num_levels: 4,
            variant: Variant::PriorNet,
            seed: 0,
            attention: AttentionMode::Raw,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimensionality != 2 && self.dimensionality != 3 {
            return Err(Error::Config(format!(
                "dimensionality must be 2 or 3, got {}",
                self.dimensionality
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.num_levels < 2 {
            return Err(Error::Config("num_levels must be >= 2".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial downsampling factor between the first and last level.
    pub fn downsampling_factor(&self) -> usize {
        1 << (self.num_levels - 1)
    }

    /// Channel count at level `l`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Number of output channels (background + K classes).
    pub fn out_channels(&self) -> usize {
        self.num_classes + 1
    }

    /// Input channel count for an encoder branch under this variant.
    pub fn branch_in_channels(&self, branch: Branch) -> usize {
        match (branch, self.variant) {
            (Branch::Image, Variant::SingleEncoder) => self.num_classes + 2,
            (Branch::Image, _) => 1,
            (Branch::Template, _) => self.num_classes + 1,
        }
    }

    /// Kernel extent along the depth axis: 1 for 2D networks, 3 for 3D.
    pub(crate) fn kernel_depth(&self) -> usize {
        if self.dimensionality == 2 {
            1
        } else {
            3
        }
    }

    /// Pooling/upsampling factor along the depth axis.
    pub(crate) fn depth_factor(&self) -> usize {
        if self.dimensionality == 2 {
            1
        } else {
            2
        }
    }
}
