use serde::{Deserialize, Serialize};

use crate::error::{Result, VdtError};

/// How observed frames enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CondScheme {
    /// Unconditional generation.
    #[default]
    None,
    /// Condition code fused into the adaptive layer-norm modulation.
    #[serde(alias = "adaptive_layer_norm")]
    Adaln,
    /// Noisy tokens attend to conditional tokens in an extra sub-layer.
    #[serde(alias = "cross_attention")]
    Xattn,
    /// Conditional tokens are prepended along the temporal axis.
    #[serde(alias = "token_concat")]
    Concat,
}

impl CondScheme {
    pub const ALL_CONDITIONAL: [CondScheme; 3] =
        [CondScheme::Adaln, CondScheme::Xattn, CondScheme::Concat];

    pub fn is_conditional(self) -> bool {
        self != CondScheme::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CondScheme::None => "none",
            CondScheme::Adaln => "adaln",
            CondScheme::Xattn => "xattn",
            CondScheme::Concat => "concat",
        }
    }
}

impl std::str::FromStr for CondScheme {
    type Err = VdtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CondScheme::None),
            "adaln" => Ok(CondScheme::Adaln),
            "xattn" | "cross_attention" => Ok(CondScheme::Xattn),
            "concat" | "token_concat" => Ok(CondScheme::Concat),
            other => Err(VdtError::InvalidConfig(format!(
                "unknown cond scheme `{other}`"
            ))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdtConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Number of generated (noisy) frames.
    pub frames: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
    /// Number of conditional frames used for training conditional schemes.
    #[serde(default)]
    pub cond_frames: usize,
    #[serde(default)]
    pub cond_scheme: CondScheme,
}

impl VdtConfig {
    /// Small configuration (12 layers, width 384) over 64x64 frames seen
    /// through an 8x downsampling tokenizer with 4 latent channels.
    pub fn vdt_s() -> Self {
        Self {
            layers: 12,
            hidden: 384,
            heads: 6,
            mlp_ratio: 4,
            patch: 2,
            frames: 16,
            latent_h: 8,
            latent_w: 8,
            latent_c: 4,
            cond_frames: 0,
            cond_scheme: CondScheme::None,
        }
    }

    pub fn vdt_l() -> Self {
        Self {
            layers: 28,
            hidden: 1152,
            heads: 16,
            ..Self::vdt_s()
        }
    }

    /// The 2-layer, width-16 configuration used by the gradient checks.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            heads: 2,
            mlp_ratio: 4,
            patch: 2,
            frames: 2,
            latent_h: 4,
            latent_w: 4,
            latent_c: 1,
            cond_frames: 0,
            cond_scheme: CondScheme::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch", self.patch),
            ("frames", self.frames),
            ("latent_h", self.latent_h),
            ("latent_w", self.latent_w),
            ("latent_c", self.latent_c),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(VdtError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(VdtError::Indivisible {
                dim: "hidden",
                value: self.hidden,
                divisor: self.heads,
            });
        }
        // 2-D sin-cos tables split the width into row/column halves
        if !self.hidden.is_multiple_of(4) {
            return Err(VdtError::Indivisible {
                dim: "hidden",
                value: self.hidden,
                divisor: 4,
            });
        }
        if !self.latent_h.is_multiple_of(self.patch) {
            return Err(VdtError::Indivisible {
                dim: "latent_h",
                value: self.latent_h,
                divisor: self.patch,
            });
        }
        if !self.latent_w.is_multiple_of(self.patch) {
            return Err(VdtError::Indivisible {
                dim: "latent_w",
                value: self.latent_w,
                divisor: self.patch,
            });
        }
        if self.cond_scheme.is_conditional() && self.cond_frames == 0 {
            return Err(VdtError::InvalidConfig(format!(
                "scheme `{}` needs cond_frames >= 1",
                self.cond_scheme.as_str()
            )));
        }
        Ok(())
    }

    pub fn patches_h(&self) -> usize {
        self.latent_h / self.patch
    }

    pub fn patches_w(&self) -> usize {
        self.latent_w / self.patch
    }

    /// Tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.patches_h() * self.patches_w()
    }

    /// Flattened patch length `N * N * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_c
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Scalar parameter counts per group, derived in closed form.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embed: usize,
    pub time_mlp: usize,
    pub temporal_attn: usize,
    pub spatial_attn: usize,
    pub ffn: usize,
    pub head: usize,
    pub cond: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embed
            + self.time_mlp
            + self.temporal_attn
            + self.spatial_attn
            + self.ffn
            + self.head
            + self.cond
    }
}

pub fn param_breakdown(cfg: &VdtConfig) -> ParamBreakdown {
    let d = cfg.hidden;
    let r = cfg.mlp_ratio;
    let l = cfg.layers;
    let pd = cfg.patch_dim();
    let linear = |i: usize, o: usize| i * o + o;
    // adaLN head + qkv + output projection
    let self_attn = linear(d, 2 * d) + linear(d, 3 * d) + linear(d, d);
    let ffn = linear(d, 2 * d) + linear(d, r * d) + linear(r * d, d);
    let cond = match cfg.cond_scheme {
        CondScheme::Adaln => 2 * linear(d, d),
        CondScheme::Xattn => {
            l * (linear(d, 2 * d) + linear(d, d) + linear(d, 2 * d) + linear(d, d))
        }
        CondScheme::None | CondScheme::Concat => 0,
    };
    ParamBreakdown {
        embed: linear(pd, d),
        time_mlp: 2 * linear(d, d),
        temporal_attn: l * self_attn,
        spatial_attn: l * self_attn,
        ffn: l * ffn,
        head: linear(d, pd),
        cond,
    }
}

/// Exact number of scalar parameters.
pub fn param_count(cfg: &VdtConfig) -> usize {
    param_breakdown(cfg).total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        VdtConfig::vdt_s().validate().unwrap();
        VdtConfig::vdt_l().validate().unwrap();
        VdtConfig::toy().validate().unwrap();
    }

    #[test]
    fn validation_errors() {
        let mut c = VdtConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = VdtConfig::toy();
        c.latent_h = 5;
        assert!(matches!(c.validate(), Err(VdtError::Indivisible { .. })));
        let mut c = VdtConfig::toy();
        c.cond_scheme = CondScheme::Concat;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("xattn".parse::<CondScheme>().unwrap(), CondScheme::Xattn);
        assert_eq!("concat".parse::<CondScheme>().unwrap(), CondScheme::Concat);
        assert!("bogus".parse::<CondScheme>().is_err());
        let s: CondScheme = serde_json::from_str("\"token_concat\"").unwrap();
        assert_eq!(s, CondScheme::Concat);
    }

    #[test]
    fn doubling_layers_doubles_block_params() {
        for scheme in [CondScheme::None, CondScheme::Xattn] {
            let mut c = VdtConfig::toy();
            c.cond_scheme = scheme;
            c.cond_frames = 1;
            let a = param_breakdown(&c);
            c.layers *= 2;
            let b = param_breakdown(&c);
            let blocks = |p: &ParamBreakdown| p.temporal_attn + p.spatial_attn + p.ffn;
            assert_eq!(blocks(&b), 2 * blocks(&a));
            assert_eq!(b.embed + b.time_mlp + b.head, a.embed + a.time_mlp + a.head);
            if scheme == CondScheme::Xattn {
                assert_eq!(b.cond, 2 * a.cond);
            }
        }
    }
}
