//! The dreamer layer and the models built from it.
//!
//! A [`Pass`] runs the layer on one graph: sequence attention (SA) over
//! tokens, depth attention (DA) over the depths of each token, and expert
//! attention (EA) over SwiGLU experts, combined by the configured composition.
//! Depth-recurrent variants apply one shared parameter set at every depth and
//! normalize the residual stream after each step; the layered baseline uses one
//! parameter set per depth.

use std::collections::BTreeMap;

use crate::analysis::{DaScoreRow, RoutingEvent, TelemetryLog};
use crate::attention::{AttnLayout, RopeSpec};
use crate::config::{Composition, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_params, layout, ParamStore};
use crate::routing::{fold_into, gate_values, moe_linear, RouterState};
use crate::tensor::{Scalar, Tensor};

/// Parameter names bound to graph variables.
#[derive(Clone, Debug, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn from_pairs(names: &[String], vars: &[Var]) -> Self {
        Self(names.iter().cloned().zip(vars.iter().copied()).collect())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {} is not bound", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    Sequence,
    Depth,
}

impl AttnKind {
    fn tag(self) -> &'static str {
        match self {
            AttnKind::Sequence => "sa",
            AttnKind::Depth => "da",
        }
    }
}

/// Module outputs of one depth step, kept for inspection.
#[derive(Clone, Debug)]
pub struct DepthTrace {
    pub input: Var,
    pub sa: Var,
    pub da: Option<Var>,
    pub ea: Var,
    pub output: Var,
}

/// Sequence K/V of earlier tokens for every depth, rows laid out as
/// `[batch, len, kv_width]`.
#[derive(Clone, Debug)]
pub struct CacheSet<T> {
    pub batch: usize,
    pub len: usize,
    pub seq: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    /// Present only for models with depth attention.
    pub depth: Option<DepthCache<T>>,
}

/// K/V of the current token at depths `0..=l`. Overwritten for every token.
#[derive(Clone, Debug)]
pub struct DepthCache<T> {
    pub entries: Vec<(Tensor<T>, Tensor<T>)>,
    pub high_water: usize,
}

impl<T: Scalar> CacheSet<T> {
    pub fn new(cfg: &ModelConfig, batch: usize) -> Self {
        Self {
            batch,
            len: 0,
            seq: vec![None; cfg.depth],
            depth: cfg.has_da().then(|| DepthCache {
                entries: Vec::new(),
                high_water: 0,
            }),
        }
    }

    fn append(&mut self, depth: usize, k: &Tensor<T>, v: &Tensor<T>, new_len: usize) -> Result<()> {
        let b = self.batch;
        let join = |old: Option<&Tensor<T>>, new: &Tensor<T>| -> Result<Tensor<T>> {
            let w = new.cols();
            let Some(old) = old else { return Ok(new.clone()) };
            let (so, sn) = (old.rows() / b, new_len);
            let mut data = Vec::with_capacity(old.len() + new.len());
            for bi in 0..b {
                data.extend_from_slice(&old.data()[bi * so * w..(bi + 1) * so * w]);
                data.extend_from_slice(&new.data()[bi * sn * w..(bi + 1) * sn * w]);
            }
            Tensor::new(vec![b * (so + sn), w], data)
        };
        let slot = &mut self.seq[depth];
        let next = (
            join(slot.as_ref().map(|s| &s.0), k)?,
            join(slot.as_ref().map(|s| &s.1), v)?,
        );
        *slot = Some(next);
        Ok(())
    }
}

/// One forward pass of the layer stack on a graph.
pub struct Pass<'a, T> {
    cfg: &'a ModelConfig,
    routers: &'a BTreeMap<String, RouterState>,
    bound: &'a Bound,
    folded: bool,
    batch: usize,
    len: usize,
    offset: usize,
    past: Option<&'a CacheSet<T>>,
    /// DA keys/values of depths `0..l` for every row.
    pub depth_kv: Vec<(Var, Var)>,
    /// SA keys/values of this pass's tokens, one pair per depth.
    pub new_kv: Vec<(Var, Var)>,
    /// Expert selections per router since the pass started.
    pub usage: BTreeMap<String, Vec<u64>>,
    pub telemetry: Option<TelemetryLog>,
    pub trace: Vec<DepthTrace>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn new(
        cfg: &'a ModelConfig,
        routers: &'a BTreeMap<String, RouterState>,
        bound: &'a Bound,
        folded: bool,
        batch: usize,
        len: usize,
    ) -> Self {
        Self {
            cfg,
            routers,
            bound,
            folded,
            batch,
            len,
            offset: 0,
            past: None,
            depth_kv: Vec::new(),
            new_kv: Vec::new(),
            usage: BTreeMap::new(),
            telemetry: None,
            trace: Vec::new(),
        }
    }

    /// Continues after the tokens held in `cache`.
    pub fn with_cache(mut self, cache: &'a CacheSet<T>) -> Self {
        self.offset = cache.len;
        self.past = Some(cache);
        self
    }

    pub fn with_telemetry(mut self) -> Self {
        self.telemetry = Some(TelemetryLog::new());
        self
    }

    fn rows(&self) -> usize {
        self.batch * self.len
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.bound.get(name)
    }

    fn set_prefix(&self, depth: usize) -> String {
        format!("layers.{}", if self.cfg.is_recurrent() { 0 } else { depth })
    }

    fn router(&self, name: &str) -> Result<&RouterState> {
        self.routers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no router state for {}", name)))
    }

    /// Routing logits `<rope_depth(x W_q), key_e> / sqrt(r)` for every row.
    fn routing_logits(&self, g: &mut Graph<T>, xn: Var, query: Var, keys: Var, depth: usize) -> Result<Var> {
        let r = g.shape(query)[1];
        let q = g.matmul(xn, query)?;
        let spec = RopeSpec::depth(self.cfg.da.rope_base, r, self.cfg.depth);
        let (c, s) = spec.tables::<T>(&vec![depth; self.rows()])?;
        let q = g.rope(q, c, s, r)?;
        let logits = g.matmul_t(q, keys, true)?;
        g.scale(logits, 1.0 / (r as f64).sqrt())
    }

    /// Chooses experts for every row with the router's bias-shifted top-k and
    /// registers the decision with the graph.
    fn route(&mut self, g: &mut Graph<T>, name: &str, logits: Var) -> Result<Vec<usize>> {
        let router = self.router(name)?;
        let e = router.experts();
        let mut ids = Vec::with_capacity(self.rows() * router.top_k);
        let vals = g.value(logits).to_f64_vec();
        for row in vals.chunks(e) {
            ids.extend(router.select(row)?);
        }
        let ids = g.select(ids)?;
        let counts = self.usage.entry(name.to_string()).or_insert_with(|| vec![0; e]);
        for &i in &ids {
            counts[i] += 1;
        }
        Ok(ids)
    }

    fn log_routing(&mut self, g: &Graph<T>, name: &str, ids: &[usize], gates: Var, k: usize, depth: usize) {
        let (len, offset) = (self.len, self.offset);
        let Some(log) = self.telemetry.as_mut() else { return };
        let gv = g.value(gates).to_f64_vec();
        for r in 0..ids.len() / k {
            log.routing.push(RoutingEvent {
                router: name.to_string(),
                depth,
                sequence: r / len,
                position: offset + r % len,
                experts: ids[r * k..(r + 1) * k].to_vec(),
                gates: gv[r * k..(r + 1) * k].to_vec(),
            });
        }
    }

    fn head_norm(&self, g: &mut Graph<T>, x: Var, heads: usize, hd: usize, gain: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let flat = g.reshape(x, &[rows * heads, hd])?;
        let n = g.rms_norm(flat, gain, self.cfg.norm_eps)?;
        g.reshape(n, &[rows, heads * hd])
    }

    /// SA or DA at `depth` on the module input `x`.
    pub fn attention(&mut self, g: &mut Graph<T>, x: Var, kind: AttnKind, depth: usize) -> Result<Var> {
        let a = match kind {
            AttnKind::Sequence => self.cfg.sa.clone(),
            AttnKind::Depth => self.cfg.da.clone(),
        };
        let m = format!("{}.{}", self.set_prefix(depth), kind.tag());
        let (qh, kvh, hd) = (a.query_heads, a.kv_heads, a.head_dim);
        let rows = self.rows();

        let xn = g.rms_norm(x, self.p(&format!("{}.norm", m))?, self.cfg.norm_eps)?;
        let routed = if self.cfg.uses_routed_projections() {
            let logits = self.routing_logits(
                g,
                xn,
                self.p(&format!("{}.router.query", m))?,
                self.p(&format!("{}.router.keys", m))?,
                depth,
            )?;
            let ids = self.route(g, &m, logits)?;
            let gate = gate_values(g, logits, ids.clone(), 1, false)?;
            self.log_routing(g, &m, &ids, gate, 1, depth);
            let stopped = g.detach(gate)?;
            Some((ids, gate, stopped))
        } else {
            None
        };
        let shared = |s: &Self, name: &str| -> Result<Option<Var>> {
            if s.folded {
                Ok(None)
            } else {
                Ok(Some(s.p(name)?))
            }
        };

        let qkv = match &routed {
            Some((ids, gate, stopped)) => {
                let sh = shared(self, &format!("{}.qkv.shared", m))?;
                moe_linear(g, xn, self.p(&format!("{}.qkv.experts", m))?, sh, ids, *gate, *stopped)?
            }
            None => g.matmul(xn, self.p(&format!("{}.qkv", m))?)?,
        };
        let q = g.slice_cols(qkv, 0, qh * hd)?;
        let k = g.slice_cols(qkv, qh * hd, kvh * hd)?;
        let v = g.slice_cols(qkv, (qh + kvh) * hd, kvh * hd)?;
        let q = self.head_norm(g, q, qh, hd, self.p(&format!("{}.q_norm", m))?)?;
        let k = self.head_norm(g, k, kvh, hd, self.p(&format!("{}.k_norm", m))?)?;

        let (spec, positions) = match kind {
            AttnKind::Sequence => (
                RopeSpec::sequence(a.rope_base, hd),
                (0..rows).map(|r| self.offset + r % self.len).collect::<Vec<_>>(),
            ),
            AttnKind::Depth => (RopeSpec::depth(a.rope_base, hd, self.cfg.depth), vec![depth; rows]),
        };
        let (c, s) = spec.tables::<T>(&positions)?;
        let q = g.rope(q, c.clone(), s.clone(), hd)?;
        let k = g.rope(k, c, s, hd)?;

        let att = match kind {
            AttnKind::Sequence => {
                self.new_kv.push((k, v));
                let (kk, vv, past) = match self.past.and_then(|p| p.seq.get(depth).cloned().flatten()) {
                    Some((pk, pv)) => {
                        let past = pk.rows() / self.batch;
                        let pk = g.constant(pk);
                        let pv = g.constant(pv);
                        (g.concat_seq(pk, k, self.batch)?, g.concat_seq(pv, v, self.batch)?, past)
                    }
                    None => (k, v, 0),
                };
                let lay = AttnLayout {
                    batch: self.batch,
                    q_len: self.len,
                    kv_len: past + self.len,
                    q_heads: qh,
                    kv_heads: kvh,
                    head_dim: hd,
                    q_offset: past,
                    causal: true,
                };
                g.attention(q, kk, vv, lay)?
            }
            AttnKind::Depth => {
                if self.depth_kv.len() != depth {
                    return Err(Error::Contract(format!(
                        "depth attention at depth {} with {} cached depths",
                        depth,
                        self.depth_kv.len()
                    )));
                }
                self.depth_kv.push((k, v));
                // every token becomes its own batch entry; depth is the sequence axis
                let ks: Vec<Var> = self.depth_kv.iter().map(|p| p.0).collect();
                let vs: Vec<Var> = self.depth_kv.iter().map(|p| p.1).collect();
                let kk = g.stack_depth(&ks)?;
                let vv = g.stack_depth(&vs)?;
                let lay = AttnLayout {
                    batch: rows,
                    q_len: 1,
                    kv_len: depth + 1,
                    q_heads: qh,
                    kv_heads: kvh,
                    head_dim: hd,
                    q_offset: depth,
                    causal: true,
                };
                let out = g.attention(q, kk, vv, lay)?;
                self.log_da(g, out, depth);
                out
            }
        };

        match &routed {
            Some((ids, gate, stopped)) => {
                let sh = shared(self, &format!("{}.out.shared", m))?;
                moe_linear(g, att, self.p(&format!("{}.out.experts", m))?, sh, ids, *gate, *stopped)
            }
            None => g.matmul(att, self.p(&format!("{}.out", m))?),
        }
    }

    fn log_da(&mut self, g: &Graph<T>, out: Var, depth: usize) {
        let (len, offset) = (self.len, self.offset);
        let Some(log) = self.telemetry.as_mut() else { return };
        let Some((lay, probs)) = g.attention_probs(out) else { return };
        let n = lay.kv_len;
        let heads = lay.q_heads;
        for r in 0..lay.batch {
            let mut scores = vec![0.0; n];
            for h in 0..heads {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s += probs[(r * heads + h) * n + j].to_f64_lossy() / heads as f64;
                }
            }
            log.da_rows.push(DaScoreRow {
                depth,
                sequence: r / len,
                position: offset + r % len,
                scores,
            });
        }
    }

    /// Expert attention: every row is sent through its `k` selected SwiGLU
    /// experts and the outputs are mixed with normalized sigmoid gates.
    pub fn experts(&mut self, g: &mut Graph<T>, x: Var, depth: usize) -> Result<Var> {
        let m = format!("{}.ea", self.set_prefix(depth));
        let k = self.cfg.ea.active;
        let xn = g.rms_norm(x, self.p(&format!("{}.norm", m))?, self.cfg.norm_eps)?;
        let logits = self.routing_logits(
            g,
            xn,
            self.p(&format!("{}.query", m))?,
            self.p(&format!("{}.keys", m))?,
            depth,
        )?;
        let ids = self.route(g, &m, logits)?;
        let gates = gate_values(g, logits, ids.clone(), k, true)?;
        self.log_routing(g, &m, &ids, gates, k, depth);

        let rep: Vec<usize> = (0..self.rows()).flat_map(|r| std::iter::repeat_n(r, k)).collect();
        let xr = g.gather_rows(xn, rep)?;
        let a = g.routed_linear(xr, self.p(&format!("{}.gate", m))?, &ids)?;
        let b = g.routed_linear(xr, self.p(&format!("{}.up", m))?, &ids)?;
        let a = g.silu(a)?;
        let hmid = g.mul(a, b)?;
        let y = g.routed_linear(hmid, self.p(&format!("{}.down", m))?, &ids)?;
        let y = g.mul_col(y, gates)?;
        g.segment_sum(y, k)
    }

    /// One application of the layer at `depth`: `x_l -> x_{l+1}`.
    pub fn step(&mut self, g: &mut Graph<T>, x: Var, depth: usize) -> Result<Var> {
        if depth >= self.cfg.depth {
            return Err(Error::Contract(format!("depth {} outside [0, {})", depth, self.cfg.depth)));
        }
        let da_on = self.cfg.has_da();
        let (sa, da, ea, y) = match self.cfg.composition {
            Composition::Sequential => {
                let (da, y) = if da_on {
                    let d = self.attention(g, x, AttnKind::Depth, depth)?;
                    (Some(d), g.add(x, d)?)
                } else {
                    (None, x)
                };
                let sa = self.attention(g, y, AttnKind::Sequence, depth)?;
                let y = g.add(y, sa)?;
                let ea = self.experts(g, y, depth)?;
                (sa, da, ea, g.add(y, ea)?)
            }
            Composition::PartialParallel => {
                let da = if da_on { Some(self.attention(g, x, AttnKind::Depth, depth)?) } else { None };
                let sa = self.attention(g, x, AttnKind::Sequence, depth)?;
                let mut y = x;
                if let Some(d) = da {
                    y = g.add(y, d)?;
                }
                let y = g.add(y, sa)?;
                let ea = self.experts(g, y, depth)?;
                (sa, da, ea, g.add(y, ea)?)
            }
            Composition::FullParallel => {
                let da = if da_on { Some(self.attention(g, x, AttnKind::Depth, depth)?) } else { None };
                let sa = self.attention(g, x, AttnKind::Sequence, depth)?;
                let ea = self.experts(g, x, depth)?;
                let mut y = x;
                if let Some(d) = da {
                    y = g.add(y, d)?;
                }
                let y = g.add(y, sa)?;
                (sa, da, ea, g.add(y, ea)?)
            }
        };
        let out = if self.cfg.uses_residual_norm() {
            g.rms_norm(y, self.p("residual_norm")?, self.cfg.norm_eps)?
        } else {
            y
        };
        self.trace.push(DepthTrace {
            input: x,
            sa,
            da,
            ea,
            output: out,
        });
        Ok(out)
    }

    /// Embedding, all depth steps, final norm and output projection. `tokens`
    /// holds `batch * len` ids; returns logits `[batch * len, vocab]`.
    pub fn logits(&mut self, g: &mut Graph<T>, tokens: &[usize]) -> Result<Var> {
        if tokens.len() != self.rows() {
            return Err(Error::Input(format!(
                "{} token ids for batch {} x length {}",
                tokens.len(),
                self.batch,
                self.len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Input(format!("token id {} outside vocab {}", bad, self.cfg.vocab)));
        }
        if self.offset + self.len > self.cfg.context {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context {}",
                self.offset + self.len,
                self.cfg.context
            )));
        }
        let embed = self.p("embed")?;
        let mut x = g.gather_rows(embed, tokens.to_vec())?;
        for l in 0..self.cfg.depth {
            x = self.step(g, x, l)?;
        }
        let x = g.rms_norm(x, self.p("final_norm")?, self.cfg.norm_eps)?;
        if self.cfg.tie_embeddings {
            g.matmul_t(x, embed, true)
        } else {
            g.matmul(x, self.p("unembed")?)
        }
    }
}

/// Router names and states a config needs.
pub fn default_routers(cfg: &ModelConfig) -> Result<BTreeMap<String, RouterState>> {
    let mut routers = BTreeMap::new();
    for set in 0..cfg.layer_sets() {
        let p = format!("layers.{}", set);
        routers.insert(
            format!("{}.ea", p),
            RouterState::new(cfg.ea.experts, cfg.ea.active, cfg.ea.bias_rate, true)?,
        );
        if cfg.uses_routed_projections() {
            let mut kinds = vec!["sa"];
            if cfg.has_da() {
                kinds.push("da");
            }
            for kind in kinds {
                routers.insert(
                    format!("{}.{}", p, kind),
                    RouterState::new(cfg.projection_experts(), 1, cfg.projection_moe.bias_rate, false)?,
                );
            }
        }
    }
    Ok(routers)
}

/// Batch of equal-length token sequences flattened row-major.
pub fn flatten_batch(tokens: &[Vec<usize>]) -> Result<(usize, usize, Vec<usize>)> {
    let len = tokens.first().map_or(0, |t| t.len());
    if tokens.is_empty() || len == 0 || tokens.iter().any(|t| t.len() != len) {
        return Err(Error::Input("batch needs nonempty sequences of equal length".into()));
    }
    Ok((tokens.len(), len, tokens.concat()))
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub routers: BTreeMap<String, RouterState>,
    pub folded: bool,
}

/// Greedy decode with the logits seen at every emitted token.
#[derive(Clone, Debug)]
pub struct DecodeTrace<T> {
    pub tokens: Vec<usize>,
    /// Logits used to pick each new token.
    pub logits: Vec<Vec<T>>,
    pub depth_high_water: usize,
    pub depth_cache_allocated: bool,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store after checking it against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in layout(&config) {
            let t = params
                .get(&name)
                .map_err(|_| Error::Config(format!("parameter {} missing for this config", name)))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        let routers = default_routers(&config)?;
        Ok(Self {
            config,
            params,
            routers,
            folded: false,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            routers: self.routers.clone(),
            folded: self.folded,
        }
    }

    /// Puts every parameter on the graph, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| (p.name.clone(), g.input(p.tensor.clone(), trainable)))
                .collect(),
        )
    }

    pub fn pass<'a>(&'a self, bound: &'a Bound, batch: usize, len: usize) -> Pass<'a, T> {
        Pass::new(&self.config, &self.routers, bound, self.folded, batch, len)
    }

    /// Logits `[batch, len, vocab]` for a batch of equal-length sequences.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor<T>> {
        self.forward_with(tokens, None)
    }

    /// As [`Model::forward`], appending routing and DA telemetry to `log`.
    pub fn forward_with(&self, tokens: &[Vec<usize>], log: Option<&mut TelemetryLog>) -> Result<Tensor<T>> {
        let (b, s, flat) = flatten_batch(tokens)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut pass = self.pass(&bound, b, s);
        if log.is_some() {
            pass = pass.with_telemetry();
        }
        let out = pass.logits(&mut g, &flat)?;
        if let (Some(log), Some(t)) = (log, pass.telemetry.take()) {
            log.routing.extend(t.routing);
            log.da_rows.extend(t.da_rows);
        }
        g.value(out).clone().reshape(&[b, s, self.config.vocab])
    }

    pub fn decode(&self, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
        Ok(self.decode_traced(prompt, n_new)?.tokens)
    }

    /// Greedy decoding with sequence caches. The prompt is processed in one
    /// pass; each new token then runs all depths with a fresh depth cache.
    pub fn decode_traced(&self, prompt: &[usize], n_new: usize) -> Result<DecodeTrace<T>> {
        if prompt.is_empty() {
            return Err(Error::Input("decode needs a nonempty prompt".into()));
        }
        if prompt.len() + n_new > self.config.context {
            return Err(Error::Input(format!(
                "prompt of {} plus {} new tokens exceeds context {}",
                prompt.len(),
                n_new,
                self.config.context
            )));
        }
        let mut tokens = prompt.to_vec();
        let mut trace = DecodeTrace {
            tokens: Vec::new(),
            logits: Vec::new(),
            depth_high_water: 0,
            depth_cache_allocated: false,
        };
        if n_new == 0 {
            trace.tokens = tokens;
            return Ok(trace);
        }
        let mut cache = CacheSet::new(&self.config, 1);
        let mut chunk: Vec<usize> = prompt.to_vec();
        let v = self.config.vocab;
        for _ in 0..n_new {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let mut pass = self.pass(&bound, 1, chunk.len()).with_cache(&cache);
            let out = pass.logits(&mut g, &chunk)?;
            let new_kv: Vec<(Tensor<T>, Tensor<T>)> = pass
                .new_kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect();
            let depth_kv: Vec<(Tensor<T>, Tensor<T>)> = pass
                .depth_kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect();
            drop(pass);

            for (l, (k, vv)) in new_kv.iter().enumerate() {
                cache.append(l, k, vv, chunk.len())?;
            }
            cache.len += chunk.len();
            if let Some(dc) = cache.depth.as_mut() {
                // only the newest token's depth states are kept
                let w = |t: &Tensor<T>| {
                    let c = t.cols();
                    Tensor::new(vec![1, c], t.data()[t.len() - c..].to_vec())
                };
                dc.entries.clear();
                for (k, vv) in &depth_kv {
                    dc.entries.push((w(k)?, w(vv)?));
                    dc.high_water = dc.high_water.max(dc.entries.len());
                }
                trace.depth_high_water = dc.high_water;
                trace.depth_cache_allocated = true;
            }

            let last = &g.data(out)[(chunk.len() - 1) * v..chunk.len() * v];
            let next = argmax(last);
            trace.logits.push(last.to_vec());
            tokens.push(next);
            chunk = vec![next];
        }
        trace.tokens = tokens;
        Ok(trace)
    }

    /// Adds each shared projection expert into its routable experts; the
    /// forward pass then skips the shared term.
    pub fn fold_shared(&mut self) -> Result<()> {
        if self.folded {
            return Err(Error::Contract("model is already folded".into()));
        }
        if !self.config.uses_routed_projections() {
            return Err(Error::Contract("model has no routed projections".into()));
        }
        let names: Vec<String> = self
            .params
            .names()
            .into_iter()
            .filter(|n| n.ends_with(".experts"))
            .collect();
        for name in names {
            let shared_name = name.replace(".experts", ".shared");
            let shared = self.params.get(&shared_name)?.clone();
            fold_into(self.params.get_mut(&name)?.data_mut(), shared.data());
        }
        self.folded = true;
        Ok(())
    }

    /// Adds pass usage into the router counts.
    pub fn record_usage(&mut self, usage: &BTreeMap<String, Vec<u64>>) -> Result<()> {
        for (name, counts) in usage {
            let r = self
                .routers
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no router {}", name)))?;
            for (c, &n) in r.counts.iter_mut().zip(counts) {
                *c += n;
            }
        }
        Ok(())
    }

    /// Balancing update of every router; returns the applied bias changes.
    pub fn update_balance(&mut self) -> BTreeMap<String, Vec<f64>> {
        self.routers
            .iter_mut()
            .map(|(n, r)| (n.clone(), r.update_balance()))
            .collect()
    }
}
