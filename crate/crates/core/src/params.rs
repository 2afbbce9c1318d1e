//! Named parameter tensors with their initialization metadata.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Ones,
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: Init,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, init: Init) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {}", name)));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, init });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].tensor),
            None => Err(Error::Contract(format!("unknown parameter {}", name))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    init: p.init,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Every parameter tensor a config defines, with shapes and init, in a fixed
/// order. The model, the checkpoint format and the cost model all share it.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden;
    let std_default = (1.0 / (5.0 * h as f64)).sqrt();
    let std_out = (1.0 / (2.5 * h as f64 * cfg.depth as f64 * cfg.attn_dims() as f64)).sqrt();
    let normal = Init::Normal { std: std_default };
    let out = Init::Normal { std: std_out };
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    v.push(("embed".into(), vec![cfg.vocab, h], normal));
    if !cfg.tie_embeddings {
        v.push(("unembed".into(), vec![h, cfg.vocab], normal));
    }
    v.push(("final_norm".into(), vec![h], Init::Ones));
    if cfg.uses_residual_norm() {
        v.push(("residual_norm".into(), vec![h], Init::Ones));
    }
    for layer in 0..cfg.layer_sets() {
        let p = format!("layers.{}", layer);
        let mut kinds = vec![("sa", &cfg.sa)];
        if cfg.has_da() {
            kinds.push(("da", &cfg.da));
        }
        for (kind, a) in kinds {
            let qkv = (a.query_heads + 2 * a.kv_heads) * a.head_dim;
            let att = a.query_heads * a.head_dim;
            let m = format!("{}.{}", p, kind);
            v.push((format!("{}.norm", m), vec![h], Init::Ones));
            v.push((format!("{}.q_norm", m), vec![a.head_dim], Init::Ones));
            v.push((format!("{}.k_norm", m), vec![a.head_dim], Init::Ones));
            if cfg.uses_routed_projections() {
                let e = cfg.projection_experts();
                let r = cfg.projection_moe.query_dim;
                v.push((format!("{}.router.query", m), vec![h, r], normal));
                v.push((format!("{}.router.keys", m), vec![e, r], normal));
                v.push((format!("{}.qkv.experts", m), vec![e, h, qkv], normal));
                v.push((format!("{}.qkv.shared", m), vec![h, qkv], normal));
                v.push((format!("{}.out.experts", m), vec![e, att, h], out));
                v.push((format!("{}.out.shared", m), vec![att, h], out));
            } else {
                v.push((format!("{}.qkv", m), vec![h, qkv], normal));
                v.push((format!("{}.out", m), vec![att, h], out));
            }
        }
        let m = format!("{}.ea", p);
        let (e, f, q) = (cfg.ea.experts, cfg.ea.intermediate, cfg.ea.query_dim);
        v.push((format!("{}.norm", m), vec![h], Init::Ones));
        v.push((format!("{}.query", m), vec![h, q], normal));
        v.push((format!("{}.keys", m), vec![e, q], normal));
        v.push((format!("{}.gate", m), vec![e, h, f], normal));
        v.push((format!("{}.up", m), vec![e, h, f], normal));
        v.push((format!("{}.down", m), vec![e, f, h], out));
    }
    v
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Ones => vec![T::one(); n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        store.insert(name, Tensor::new(shape, data)?, init)?;
    }
    Ok(store)
}
