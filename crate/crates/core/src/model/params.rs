//! Named, shaped, group-tagged parameter storage.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Result, VdtError};
use crate::model::config::{CondScheme, VdtConfig};

/// Partition of the parameter set used for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SpatialAttn,
    TemporalAttn,
    Ffn,
    Embed,
    TimeMlp,
    Head,
    Cond,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::SpatialAttn,
        ParamGroup::TemporalAttn,
        ParamGroup::Ffn,
        ParamGroup::Embed,
        ParamGroup::TimeMlp,
        ParamGroup::Head,
        ParamGroup::Cond,
    ];

    /// Group implied by a parameter name.
    pub fn from_name(name: &str) -> Option<ParamGroup> {
        if name.starts_with("patch_embed.") {
            return Some(ParamGroup::Embed);
        }
        if name.starts_with("time_mlp.") {
            return Some(ParamGroup::TimeMlp);
        }
        if name.starts_with("final_layer.") {
            return Some(ParamGroup::Head);
        }
        if name.starts_with("cond_encoder.") {
            return Some(ParamGroup::Cond);
        }
        let rest = name.strip_prefix("blocks.")?;
        let (_, sub) = rest.split_once('.')?;
        match sub.split_once('.')?.0 {
            "temporal_attn" => Some(ParamGroup::TemporalAttn),
            "spatial_attn" => Some(ParamGroup::SpatialAttn),
            "ffn" => Some(ParamGroup::Ffn),
            "cross_attn" => Some(ParamGroup::Cond),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Stored as a matrix; vectors are `1 x d`.
    pub value: Mat,
}

impl Param {
    /// Logical shape: `[d]` for vectors, `[rows, cols]` otherwise.
    pub fn shape(&self) -> Vec<usize> {
        if self.name.ends_with(".bias") {
            vec![self.value.ncols()]
        } else {
            vec![self.value.nrows(), self.value.ncols()]
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Xavier,
    Zero,
}

/// `(name, rows, cols, init)` for every parameter of `cfg`, in a fixed order.
fn layout(cfg: &VdtConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.hidden;
    let pd = cfg.patch_dim();
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, prefix: &str, i: usize, o: usize, init: Init| {
        out.push((format!("{prefix}.weight"), i, o, init));
        out.push((format!("{prefix}.bias"), 1, o, Init::Zero));
    };
    linear(&mut out, "patch_embed", pd, d, Init::Xavier);
    linear(&mut out, "time_mlp.fc1", d, d, Init::Xavier);
    linear(&mut out, "time_mlp.fc2", d, d, Init::Xavier);
    if cfg.cond_scheme == CondScheme::Adaln {
        linear(&mut out, "cond_encoder.fc1", d, d, Init::Xavier);
        // zero so the conditioned modulation starts as the time-only one
        linear(&mut out, "cond_encoder.fc2", d, d, Init::Zero);
    }
    for b in 0..cfg.layers {
        for kind in ["temporal_attn", "spatial_attn"] {
            let p = format!("blocks.{b}.{kind}");
            linear(&mut out, &format!("{p}.ada"), d, 2 * d, Init::Zero);
            linear(&mut out, &format!("{p}.qkv"), d, 3 * d, Init::Xavier);
            linear(&mut out, &format!("{p}.proj"), d, d, Init::Xavier);
        }
        if cfg.cond_scheme == CondScheme::Xattn {
            let p = format!("blocks.{b}.cross_attn");
            linear(&mut out, &format!("{p}.ada"), d, 2 * d, Init::Zero);
            linear(&mut out, &format!("{p}.q"), d, d, Init::Xavier);
            linear(&mut out, &format!("{p}.kv"), d, 2 * d, Init::Xavier);
            linear(&mut out, &format!("{p}.proj"), d, d, Init::Xavier);
        }
        let p = format!("blocks.{b}.ffn");
        linear(&mut out, &format!("{p}.ada"), d, 2 * d, Init::Zero);
        linear(
            &mut out,
            &format!("{p}.fc1"),
            d,
            cfg.mlp_ratio * d,
            Init::Xavier,
        );
        linear(
            &mut out,
            &format!("{p}.fc2"),
            cfg.mlp_ratio * d,
            d,
            Init::Xavier,
        );
    }
    linear(&mut out, "final_layer.linear", d, pd, Init::Zero);
    out
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Build from explicit parameters; every name must map to a group.
    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if ParamGroup::from_name(&p.name) != Some(p.group) {
                return Err(VdtError::UntaggedParam(p.name.clone()));
            }
            if index.insert(p.name.clone(), i).is_some() {
                return Err(VdtError::InvalidInput(format!(
                    "duplicate parameter `{}`",
                    p.name
                )));
            }
        }
        Ok(Self { params, index })
    }

    /// Deterministic initialisation from `seed`.
    pub fn init(cfg: &VdtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(cfg)
            .into_iter()
            .map(|(name, r, c, init)| {
                let group = ParamGroup::from_name(&name)
                    .ok_or_else(|| VdtError::UntaggedParam(name.clone()))?;
                let value = match init {
                    Init::Xavier => xavier(&mut rng, r, c),
                    Init::Zero => Mat::zeros((r, c)),
                };
                Ok(Param {
                    name,
                    group,
                    trainable: true,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(params)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| VdtError::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let i = self.index_of(name)?;
        Ok(&mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(Param::len)
            .sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Re-draw every parameter of `group` as at initialisation, except that
    /// output projections are zeroed so the residual branch starts as identity.
    pub fn reinit_group(&mut self, cfg: &VdtConfig, group: ParamGroup, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, r, c, init) in layout(cfg) {
            if ParamGroup::from_name(&name) != Some(group) {
                continue;
            }
            let zero = init == Init::Zero || name.contains(".proj.");
            let value = if zero {
                Mat::zeros((r, c))
            } else {
                xavier(&mut rng, r, c)
            };
            let p = self.get_mut(&name)?;
            if p.value.dim() != value.dim() {
                return Err(VdtError::ShapeMismatch {
                    expected: vec![r, c],
                    got: vec![p.value.nrows(), p.value.ncols()],
                });
            }
            p.value = value;
        }
        Ok(())
    }

    /// Overwrite every value with `N(0, std^2)` draws. Used to move away from
    /// the zero-initialised heads when checking gradients.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        for p in &mut self.params {
            p.value.mapv_inplace(|_| normal.sample(&mut rng));
        }
    }

    /// Check that names and shapes agree with the layout implied by `cfg`.
    pub fn check_matches(&self, cfg: &VdtConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.params.len() {
            return Err(VdtError::InvalidConfig(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, r, c, _) in expected {
            let p = self.get(&name)?;
            if p.value.dim() != (r, c) {
                return Err(VdtError::ShapeMismatch {
                    expected: vec![r, c],
                    got: vec![p.value.nrows(), p.value.ncols()],
                });
            }
        }
        Ok(())
    }

    /// Put every parameter on `tape`; trainable ones as differentiable leaves
    /// when `track_grads` is set, everything else as constants.
    pub fn bind(&self, tape: &mut Tape, track_grads: bool) -> BoundParams<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if track_grads && p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams { store: self, vars }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.index_of(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// `(weight, bias)` of the linear layer `prefix`.
    pub fn linear(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(&format!("{prefix}.weight"))?,
            self.var(&format!("{prefix}.bias"))?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::param_count;

    #[test]
    fn count_matches_enumerated_shapes() {
        for scheme in [
            CondScheme::None,
            CondScheme::Adaln,
            CondScheme::Xattn,
            CondScheme::Concat,
        ] {
            let mut cfg = VdtConfig::toy();
            cfg.cond_scheme = scheme;
            cfg.cond_frames = 2;
            let store = ParamStore::init(&cfg, 0).unwrap();
            let enumerated: usize = store
                .iter()
                .map(|p| p.shape().iter().product::<usize>())
                .sum();
            assert_eq!(enumerated, param_count(&cfg), "{scheme:?}");
        }
    }

    #[test]
    fn every_param_is_tagged() {
        let mut cfg = VdtConfig::toy();
        cfg.cond_scheme = CondScheme::Xattn;
        cfg.cond_frames = 1;
        let store = ParamStore::init(&cfg, 0).unwrap();
        for p in store.iter() {
            assert_eq!(ParamGroup::from_name(&p.name), Some(p.group));
        }
        assert_eq!(ParamGroup::from_name("blocks.0.mystery.weight"), None);
        assert_eq!(ParamGroup::from_name("decoder.weight"), None);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = VdtConfig::toy();
        assert_eq!(
            ParamStore::init(&cfg, 5).unwrap(),
            ParamStore::init(&cfg, 5).unwrap()
        );
        assert_ne!(
            ParamStore::init(&cfg, 5).unwrap(),
            ParamStore::init(&cfg, 6).unwrap()
        );
    }

    #[test]
    fn reinit_zeroes_temporal_projection() {
        let cfg = VdtConfig::toy();
        let mut store = ParamStore::init(&cfg, 1).unwrap();
        store.randomize(2, 0.5);
        let before_spatial = store
            .get("blocks.0.spatial_attn.qkv.weight")
            .unwrap()
            .value
            .clone();
        store
            .reinit_group(&cfg, ParamGroup::TemporalAttn, 9)
            .unwrap();
        assert!(store
            .get("blocks.1.temporal_attn.proj.weight")
            .unwrap()
            .value
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            store.get("blocks.0.spatial_attn.qkv.weight").unwrap().value,
            before_spatial
        );
    }

    #[test]
    fn rejects_untagged_and_duplicates() {
        let p = Param {
            name: "mystery.weight".into(),
            group: ParamGroup::Head,
            trainable: true,
            value: Mat::zeros((1, 1)),
        };
        assert!(matches!(
            ParamStore::from_params(vec![p]),
            Err(VdtError::UntaggedParam(_))
        ));
        let q = Param {
            name: "final_layer.linear.bias".into(),
            group: ParamGroup::Head,
            trainable: true,
            value: Mat::zeros((1, 1)),
        };
        assert!(ParamStore::from_params(vec![q.clone(), q]).is_err());
    }
}
