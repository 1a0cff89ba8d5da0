//! Video-prediction conditioning: adaptive layer-norm fusion, cross-attention
//! and token concatenation.
//!
//! Conditional frames always occupy absolute temporal positions `0..K` and
//! the noisy frames `K..K+F`, so every scheme shares one timeline.

use std::sync::Arc;

use ndarray::{concatenate, s, Axis};

use crate::autograd::{AttnGroup, Mat, Tape, Var};
use crate::error::{Result, VdtError};
use crate::model::config::{CondScheme, VdtConfig};
use crate::model::embed::TokenGrid;
use crate::model::network::{
    ada_ln_graph, check_latent, embed_graph, modulation_graph, patch_input,
};
use crate::model::params::{BoundParams, ParamStore};
use crate::LatentClip;

/// Latents of the observed frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInput {
    pub latent: LatentClip,
}

impl ConditionInput {
    pub fn new(latent: LatentClip) -> Result<Self> {
        if latent.dim().0 == 0 {
            return Err(VdtError::Conditioning("no conditional frames".into()));
        }
        Ok(Self { latent })
    }

    /// Number of conditional frames `K`.
    pub fn frames(&self) -> usize {
        self.latent.dim().0
    }
}

/// Which residual sub-layer a modulation pair feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    Temporal,
    Spatial,
    Cross,
    Ffn,
}

impl Sublayer {
    fn prefix(self, block: usize) -> String {
        let name = match self {
            Sublayer::Temporal => "temporal_attn",
            Sublayer::Spatial => "spatial_attn",
            Sublayer::Cross => "cross_attn",
            Sublayer::Ffn => "ffn",
        };
        format!("blocks.{block}.{name}")
    }
}

/// Mean-pooled conditional tokens through the two-layer condition encoder.
pub fn condition_code_graph(tape: &mut Tape, bound: &BoundParams, cond_tokens: Var) -> Result<Var> {
    let pooled = tape.mean_rows(cond_tokens);
    let (w1, b1) = bound.linear("cond_encoder.fc1")?;
    let (w2, b2) = bound.linear("cond_encoder.fc2")?;
    let h = tape.linear(pooled, w1, b1);
    let h = tape.silu(h);
    Ok(tape.linear(h, w2, b2))
}

/// Residual branch of the cross-attention sub-layer: queries from the noisy
/// tokens, keys and values from every conditional token.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_graph(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &VdtConfig,
    block: usize,
    x: Var,
    cond_tokens: Var,
    cond_act: Var,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let d = cfg.hidden;
    let prefix = Sublayer::Cross.prefix(block);
    let (scale, shift) = modulation_graph(tape, bound, &prefix, cond_act, d)?;
    let n = ada_ln_graph(tape, x, scale, shift);
    let (wq, bq) = bound.linear(&format!("{prefix}.q"))?;
    let (wkv, bkv) = bound.linear(&format!("{prefix}.kv"))?;
    let q = tape.linear(n, wq, bq);
    let kv = tape.linear(cond_tokens, wkv, bkv);
    let k = tape.slice_cols(kv, 0, d);
    let v = tape.slice_cols(kv, d, d);
    let groups = Arc::new(vec![AttnGroup {
        queries: (0..tape.value(x).nrows()).collect(),
        keys: (0..tape.value(cond_tokens).nrows()).collect(),
    }]);
    let o = tape.attention(q, k, v, groups, cfg.heads);
    attention.push(o);
    let (wp, bp) = bound.linear(&format!("{prefix}.proj"))?;
    Ok(tape.linear(o, wp, bp))
}

fn require_scheme(cfg: &VdtConfig, scheme: CondScheme) -> Result<()> {
    if cfg.cond_scheme != scheme {
        return Err(VdtError::Conditioning(format!(
            "model uses `{}`, operation needs `{}`",
            cfg.cond_scheme.as_str(),
            scheme.as_str()
        )));
    }
    Ok(())
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

fn embed_cond(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &VdtConfig,
    cond: &ConditionInput,
) -> Result<Var> {
    check_latent(cfg, &cond.latent).map_err(|e| VdtError::Conditioning(e.to_string()))?;
    let patches = patch_input(tape, cfg, &cond.latent, false)?;
    embed_graph(tape, bound, cfg, patches, cond.frames(), Some(0))
}

/// Conditioning vector `t_emb + encoder(cond)` that replaces the time
/// embedding under the adaptive layer-norm scheme.
pub fn condition_vector(
    cfg: &VdtConfig,
    params: &ParamStore,
    cond: &ConditionInput,
    t_emb: &[f64],
) -> Result<Vec<f64>> {
    require_scheme(cfg, CondScheme::Adaln)?;
    if t_emb.len() != cfg.hidden {
        return Err(VdtError::ShapeMismatch {
            expected: vec![cfg.hidden],
            got: vec![t_emb.len()],
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let ct = embed_cond(&mut tape, &bound, cfg, cond)?;
    let code = condition_code_graph(&mut tape, &bound, ct)?;
    let t = tape.constant(row(t_emb));
    let c = tape.add(t, code);
    Ok(tape.value(c).iter().copied().collect())
}

/// `(c_scale, c_shift)` for one sub-layer of one block under the adaptive
/// layer-norm scheme.
pub fn cond_adaln(
    cfg: &VdtConfig,
    params: &ParamStore,
    cond: &ConditionInput,
    t_emb: &[f64],
    block: usize,
    sublayer: Sublayer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = condition_vector(cfg, params, cond, t_emb)?;
    modulation_pair(cfg, params, &c, block, sublayer)
}

/// Modulation pair produced from an (un-activated) conditioning vector.
pub fn modulation_pair(
    cfg: &VdtConfig,
    params: &ParamStore,
    cond_vec: &[f64],
    block: usize,
    sublayer: Sublayer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let c = tape.constant(row(cond_vec));
    let act = tape.silu(c);
    let (scale, shift) =
        modulation_graph(&mut tape, &bound, &sublayer.prefix(block), act, cfg.hidden)?;
    Ok((
        tape.value(scale).iter().copied().collect(),
        tape.value(shift).iter().copied().collect(),
    ))
}

/// Apply the cross-attention sub-layer of `block` (with its residual) to the
/// noisy tokens.
pub fn cond_cross_attention(
    cfg: &VdtConfig,
    params: &ParamStore,
    noisy_tokens: &TokenGrid,
    cond: &ConditionInput,
    cond_vec: &[f64],
    block: usize,
) -> Result<TokenGrid> {
    require_scheme(cfg, CondScheme::Xattn)?;
    if noisy_tokens.width() != cfg.hidden
        || noisy_tokens.tokens_per_frame() != cfg.tokens_per_frame()
    {
        return Err(VdtError::ShapeMismatch {
            expected: vec![noisy_tokens.frames(), cfg.tokens_per_frame(), cfg.hidden],
            got: noisy_tokens.tokens.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let ct = embed_cond(&mut tape, &bound, cfg, cond)?;
    let x = tape.constant(noisy_tokens.to_rows());
    let c = tape.constant(row(cond_vec));
    let act = tape.silu(c);
    let mut attn = Vec::new();
    let br = cross_attention_graph(&mut tape, &bound, cfg, block, x, ct, act, &mut attn)?;
    let y = tape.add(x, br);
    TokenGrid::from_rows(
        tape.value(y).clone(),
        noisy_tokens.patches_h,
        noisy_tokens.patches_w,
    )
}

/// Bookkeeping to undo a token concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConcatSplit {
    pub cond_frames: usize,
    pub noisy_frames: usize,
}

impl ConcatSplit {
    /// Keep only the trailing noisy frames of a backbone output.
    pub fn split(&self, combined: &TokenGrid) -> Result<TokenGrid> {
        if combined.frames() != self.cond_frames + self.noisy_frames {
            return Err(VdtError::ShapeMismatch {
                expected: vec![self.cond_frames + self.noisy_frames],
                got: vec![combined.frames()],
            });
        }
        let tokens = combined
            .tokens
            .slice(s![self.cond_frames.., .., ..])
            .to_owned();
        TokenGrid::new(tokens, combined.patches_h, combined.patches_w)
    }

    /// Per-frame loss mask over the combined sequence: `true` on noisy frames.
    pub fn frame_mask(&self) -> Vec<bool> {
        (0..self.cond_frames + self.noisy_frames)
            .map(|f| f >= self.cond_frames)
            .collect()
    }
}

/// Prepend conditional tokens to the noisy tokens along the frame axis.
pub fn cond_token_concat(
    cond_tokens: &TokenGrid,
    noisy_tokens: &TokenGrid,
) -> Result<(TokenGrid, ConcatSplit)> {
    if cond_tokens.patches_h != noisy_tokens.patches_h
        || cond_tokens.patches_w != noisy_tokens.patches_w
        || cond_tokens.width() != noisy_tokens.width()
    {
        return Err(VdtError::Conditioning(format!(
            "token grids differ: {}x{}x{} vs {}x{}x{}",
            cond_tokens.patches_h,
            cond_tokens.patches_w,
            cond_tokens.width(),
            noisy_tokens.patches_h,
            noisy_tokens.patches_w,
            noisy_tokens.width()
        )));
    }
    let tokens = concatenate(
        Axis(0),
        &[cond_tokens.tokens.view(), noisy_tokens.tokens.view()],
    )
    .expect("matching trailing dims");
    let split = ConcatSplit {
        cond_frames: cond_tokens.frames(),
        noisy_frames: noisy_tokens.frames(),
    };
    Ok((
        TokenGrid::new(tokens, noisy_tokens.patches_h, noisy_tokens.patches_w)?,
        split,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::network::{time_embedding, vdt_forward, ForwardOptions};
    use crate::model::patchify;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> LatentClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentClip::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    fn cfg(scheme: CondScheme) -> VdtConfig {
        VdtConfig {
            cond_scheme: scheme,
            cond_frames: 2,
            ..VdtConfig::toy()
        }
    }

    fn store(cfg: &VdtConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::init(cfg, seed).unwrap();
        s.randomize(seed + 1, 0.3);
        s
    }

    #[test]
    fn adaln_zero_encoder_falls_back_to_time_modulation() {
        let c = cfg(CondScheme::Adaln);
        let mut p = store(&c, 1);
        for name in ["cond_encoder.fc2.weight", "cond_encoder.fc2.bias"] {
            p.get_mut(name).unwrap().value.fill(0.0);
        }
        let t_emb = time_embedding(&c, &p, 17, 100).unwrap();
        let cond = ConditionInput::new(randn4((2, 4, 4, 1), 2)).unwrap();
        let (s1, b1) = cond_adaln(&c, &p, &cond, &t_emb, 1, Sublayer::Spatial).unwrap();
        let (s0, b0) = modulation_pair(&c, &p, &t_emb, 1, Sublayer::Spatial).unwrap();
        assert_eq!((s1.len(), b1.len()), (16, 16));
        assert_eq!(s1, s0);
        assert_eq!(b1, b0);
    }

    #[test]
    fn adaln_depends_only_on_pooled_code() {
        // swapping frames leaves the mean-pooled tokens unchanged up to the
        // temporal codes; use identical frames to make the pool identical
        let c = cfg(CondScheme::Adaln);
        let p = store(&c, 3);
        let t_emb = vec![0.1; 16];
        let frame = randn4((1, 4, 4, 1), 4);
        let both = ndarray::concatenate(Axis(0), &[frame.view(), frame.view()]).unwrap();
        let a = ConditionInput::new(both.clone()).unwrap();
        let b = ConditionInput::new(both.select(Axis(0), &[1, 0])).unwrap();
        assert_eq!(
            cond_adaln(&c, &p, &a, &t_emb, 0, Sublayer::Ffn).unwrap(),
            cond_adaln(&c, &p, &b, &t_emb, 0, Sublayer::Ffn).unwrap()
        );
    }

    #[test]
    fn scheme_mismatch_is_rejected() {
        let c = cfg(CondScheme::Concat);
        let p = store(&c, 5);
        let cond = ConditionInput::new(randn4((2, 4, 4, 1), 6)).unwrap();
        assert!(cond_adaln(&c, &p, &cond, &[0.0; 16], 0, Sublayer::Ffn).is_err());
        assert!(ConditionInput::new(LatentClip::zeros((0, 4, 4, 1))).is_err());
    }

    #[test]
    fn cross_attention_zero_values_is_identity() {
        let c = cfg(CondScheme::Xattn);
        let mut p = store(&c, 7);
        p.get_mut("blocks.0.cross_attn.kv.weight")
            .unwrap()
            .value
            .fill(0.0);
        p.get_mut("blocks.0.cross_attn.kv.bias")
            .unwrap()
            .value
            .fill(0.0);
        p.get_mut("blocks.0.cross_attn.proj.bias")
            .unwrap()
            .value
            .fill(0.0);
        let grid = TokenGrid::new(Array3::from_elem((2, 4, 16), 0.3), 2, 2).unwrap();
        let cond = ConditionInput::new(randn4((3, 4, 4, 1), 8)).unwrap();
        let out = cond_cross_attention(&c, &p, &grid, &cond, &[0.2; 16], 0).unwrap();
        assert_eq!(out, grid);
    }

    #[test]
    fn cross_attention_single_key_weight_one_and_shape() {
        let c = VdtConfig {
            latent_h: 2,
            latent_w: 2,
            ..cfg(CondScheme::Xattn)
        };
        let p = store(&c, 9);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let cond = ConditionInput::new(randn4((1, 2, 2, 1), 10)).unwrap();
        let ct = embed_cond(&mut tape, &bound, &c, &cond).unwrap();
        assert_eq!(tape.value(ct).nrows(), 1);
        let x = tape.constant(Mat::from_elem((3, 16), 0.5));
        let act = tape.constant(Mat::ones((1, 16)));
        let mut attn = Vec::new();
        cross_attention_graph(&mut tape, &bound, &c, 0, x, ct, act, &mut attn).unwrap();
        for m in tape.attention_maps(attn[0]).unwrap() {
            assert!(m.iter().all(|&w| w == 1.0));
        }
        for k in [1, 2, 5] {
            let grid = TokenGrid::new(Array3::from_elem((3, 1, 16), 0.1), 1, 1).unwrap();
            let cond = ConditionInput::new(randn4((k, 2, 2, 1), 11)).unwrap();
            let out = cond_cross_attention(&c, &p, &grid, &cond, &[0.0; 16], 1).unwrap();
            assert_eq!(out.tokens.dim(), grid.tokens.dim());
        }
        let bad = ConditionInput::new(randn4((1, 4, 4, 1), 12)).unwrap();
        let grid = TokenGrid::new(Array3::zeros((1, 1, 16)), 1, 1).unwrap();
        assert!(cond_cross_attention(&c, &p, &grid, &bad, &[0.0; 16], 0).is_err());
    }

    #[test]
    fn concat_bookkeeping() {
        let cond = TokenGrid::new(Array3::from_elem((2, 4, 8), 1.0), 2, 2).unwrap();
        let noisy = TokenGrid::new(
            Array3::from_shape_fn((4, 4, 8), |(f, p, d)| (f * 100 + p * 10 + d) as f64),
            2,
            2,
        )
        .unwrap();
        let (combined, split) = cond_token_concat(&cond, &noisy).unwrap();
        assert_eq!(combined.frames() * combined.tokens_per_frame(), 24);
        assert_eq!(split.split(&combined).unwrap(), noisy);
        assert_eq!(
            split.frame_mask(),
            vec![false, false, true, true, true, true]
        );
        let cond3 = TokenGrid::new(Array3::zeros((3, 4, 8)), 2, 2).unwrap();
        let (c3, s3) = cond_token_concat(&cond3, &noisy).unwrap();
        assert_eq!(c3.frames(), 7);
        assert_eq!(s3.split(&c3).unwrap().frames(), 4);
        let other = TokenGrid::new(Array3::zeros((1, 4, 8)), 1, 4).unwrap();
        assert!(cond_token_concat(&other, &noisy).is_err());
    }

    #[test]
    fn schemes_share_output_shape_and_accept_any_k() {
        for scheme in CondScheme::ALL_CONDITIONAL {
            let c = cfg(scheme);
            let p = store(&c, 13);
            let xt = randn4((2, 4, 4, 1), 14);
            for k in 1..=4 {
                let cond = ConditionInput::new(randn4((k, 4, 4, 1), 15)).unwrap();
                let out =
                    vdt_forward(&c, &p, &xt, 9, Some(&cond), ForwardOptions::default()).unwrap();
                assert_eq!(out.dim(), xt.dim(), "{scheme:?} k={k}");
            }
            assert!(vdt_forward(&c, &p, &xt, 9, None, ForwardOptions::default()).is_err());
        }
        let c = VdtConfig::toy();
        let p = store(&c, 16);
        let cond = ConditionInput::new(randn4((1, 4, 4, 1), 17)).unwrap();
        assert!(vdt_forward(
            &c,
            &p,
            &randn4((2, 4, 4, 1), 18),
            3,
            Some(&cond),
            ForwardOptions::default()
        )
        .is_err());
    }

    #[test]
    fn concat_tokens_match_patchified_layout() {
        let x = randn4((2, 4, 4, 1), 19);
        let g = patchify(&x, 2).unwrap();
        let (combined, split) = cond_token_concat(&g, &g).unwrap();
        assert_eq!(split.split(&combined).unwrap(), g);
    }
}
