//! The video diffusion transformer backbone.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod network;
pub mod params;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::{param_breakdown, param_count, CondScheme, ParamBreakdown, VdtConfig};
pub use embed::{patchify, positional_embeddings, timestep_basis, unpatchify, TokenGrid};
pub use network::{ada_layer_norm, time_embedding, vdt_block, vdt_forward, ForwardOptions};
pub use params::{Param, ParamGroup, ParamStore};

use crate::conditioning::ConditionInput;
use crate::error::{Result, VdtError};
use crate::LatentClip;

/// A configured network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Vdt {
    pub config: VdtConfig,
    pub params: ParamStore,
}

impl Vdt {
    /// Freshly initialised model.
    pub fn new(config: VdtConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: VdtConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_matches(&config)?;
        Ok(Self { config, params })
    }

    pub fn forward(
        &self,
        xt: &LatentClip,
        t: usize,
        cond: Option<&ConditionInput>,
        opts: ForwardOptions,
    ) -> Result<LatentClip> {
        vdt_forward(&self.config, &self.params, xt, t, cond, opts)
    }

    /// Reject conditioning inputs the configured scheme cannot use.
    pub fn check_cond(&self, cond: Option<&ConditionInput>) -> Result<()> {
        match (self.config.cond_scheme, cond) {
            (CondScheme::None, Some(_)) => Err(VdtError::Conditioning(
                "conditional frames given to an unconditional model".into(),
            )),
            (s, None) if s.is_conditional() => Err(VdtError::Conditioning(format!(
                "scheme `{}` requires conditional frames",
                s.as_str()
            ))),
            _ => Ok(()),
        }
    }
}
