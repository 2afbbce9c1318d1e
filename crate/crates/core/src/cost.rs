//! Analytic parameter, FLOP and memory accounting, and the coordinate-descent
//! matcher that equalizes a candidate config with a baseline by adjusting
//! only the expert intermediate size and the expert count.
//!
//! FLOP convention: a multiply-add is 2 FLOPs, normalizations 4 per element,
//! rotary encoding 3 per element, softmax 5 per score, sigmoid 4 per element,
//! gate scaling and residual adds 1 per element, and top-k selection
//! `E log2 E` comparisons. Attention projections are counted after folding the
//! shared expert, as run at inference.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const DEFAULT_SEQ_LEN: usize = 1024;
pub const FF_RANGE: (usize, usize) = (8, 8192);
pub const EXPERT_MAX: usize = 16_384;

pub fn linear_params(inp: usize, out: usize) -> u64 {
    (inp * out) as u64
}

pub fn linear_flops(inp: usize, out: usize) -> f64 {
    2.0 * (inp * out) as f64
}

pub fn swiglu_params(hidden: usize, intermediate: usize) -> u64 {
    3 * linear_params(hidden, intermediate)
}

/// One SwiGLU expert on one token: three projections, SiLU and the product.
pub fn swiglu_flops(hidden: usize, intermediate: usize) -> f64 {
    3.0 * linear_flops(hidden, intermediate) + 5.0 * intermediate as f64
}

fn topk_flops(experts: usize) -> f64 {
    let e = experts as f64;
    if experts > 1 {
        e * e.log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops_per_token: f64,
    pub memory_bytes: u64,
    pub seq_len: usize,
    pub bytes_per_scalar: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub param_bytes: u64,
    pub seq_cache_bytes: u64,
    pub depth_cache_bytes: u64,
}

impl MemoryReport {
    pub fn total(&self) -> u64 {
        self.param_bytes + self.seq_cache_bytes + self.depth_cache_bytes
    }
}

fn attention_params(cfg: &ModelConfig, a: &crate::config::AttentionConfig) -> u64 {
    let h = cfg.hidden;
    let qkv = (a.query_heads + 2 * a.kv_heads) * a.head_dim;
    let att = a.query_heads * a.head_dim;
    let mut n = (h + 2 * a.head_dim) as u64;
    if cfg.uses_routed_projections() {
        let e = cfg.projection_experts() as u64;
        let r = cfg.projection_moe.query_dim;
        n += linear_params(h, r) + e * r as u64;
        n += (e + 1) * (linear_params(h, qkv) + linear_params(att, h));
    } else {
        n += linear_params(h, qkv) + linear_params(att, h);
    }
    n
}

fn expert_params(cfg: &ModelConfig) -> u64 {
    let (h, e) = (cfg.hidden, cfg.ea.experts as u64);
    h as u64 + linear_params(h, cfg.ea.query_dim) + e * cfg.ea.query_dim as u64 + e * swiglu_params(h, cfg.ea.intermediate)
}

/// Exact learnable scalar count. Router balancing biases are statistics, not
/// parameters, and are excluded.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let (h, v) = (cfg.hidden, cfg.vocab);
    let mut n = linear_params(v, h) + h as u64;
    if !cfg.tie_embeddings {
        n += linear_params(h, v);
    }
    if cfg.uses_residual_norm() {
        n += h as u64;
    }
    let mut layer = attention_params(cfg, &cfg.sa) + expert_params(cfg);
    if cfg.has_da() {
        layer += attention_params(cfg, &cfg.da);
    }
    n + cfg.layer_sets() as u64 * layer
}

/// One attention module for one token attending over `keys` positions.
fn attention_flops(cfg: &ModelConfig, a: &crate::config::AttentionConfig, keys: usize) -> f64 {
    let h = cfg.hidden;
    let (qh, kvh, hd) = (a.query_heads, a.kv_heads, a.head_dim);
    let qkv = (qh + 2 * kvh) * hd;
    let att = qh * hd;
    let mut f = 4.0 * h as f64;
    if cfg.uses_routed_projections() {
        let (e, r) = (cfg.projection_experts(), cfg.projection_moe.query_dim);
        f += linear_flops(h, r) + 3.0 * r as f64 + linear_flops(r, e) + topk_flops(e) + 4.0;
        // gate scaling of both expert outputs
        f += (qkv + h) as f64;
    }
    f += linear_flops(h, qkv);
    f += (4.0 + 3.0) * ((qh + kvh) * hd) as f64;
    let n = keys as f64;
    f += qh as f64 * (4.0 * hd as f64 * n + 5.0 * n);
    f += linear_flops(att, h);
    f + h as f64
}

fn expert_flops(cfg: &ModelConfig) -> f64 {
    let h = cfg.hidden;
    let (e, k, q) = (cfg.ea.experts, cfg.ea.active, cfg.ea.query_dim);
    let routing = linear_flops(h, q) + 3.0 * q as f64 + linear_flops(q, e) + topk_flops(e) + 6.0 * k as f64;
    let experts = k as f64 * (swiglu_flops(h, cfg.ea.intermediate) + h as f64);
    4.0 * h as f64 + routing + experts + h as f64
}

/// FLOPs of one token at sequence position `pos` (attending over `pos + 1`
/// cached positions).
pub fn token_flops(cfg: &ModelConfig, pos: usize) -> f64 {
    let h = cfg.hidden;
    let mut f = 0.0;
    for l in 0..cfg.depth {
        f += attention_flops(cfg, &cfg.sa, pos + 1);
        if cfg.has_da() {
            f += attention_flops(cfg, &cfg.da, l + 1);
        }
        f += expert_flops(cfg);
        if cfg.uses_residual_norm() {
            f += 4.0 * h as f64;
        }
    }
    f + 4.0 * h as f64 + linear_flops(h, cfg.vocab)
}

/// Average FLOPs per token over a generated sequence of `seq_len` tokens.
pub fn count_flops(cfg: &ModelConfig, seq_len: usize) -> f64 {
    let s = seq_len.max(1);
    // only SA cost depends on position, and it is linear in it
    let first = token_flops(cfg, 0);
    let slope = token_flops(cfg, 1) - first;
    first + slope * (s - 1) as f64 / 2.0
}

pub fn count_memory(cfg: &ModelConfig, seq_len: usize, bytes_per_scalar: usize) -> MemoryReport {
    let b = bytes_per_scalar as u64;
    let l = cfg.depth as u64;
    let seq = l * seq_len as u64 * (cfg.sa.kv_heads * cfg.sa.head_dim * 2) as u64 * b;
    let depth = if cfg.has_da() {
        l * (cfg.da.kv_heads * cfg.da.head_dim * 2) as u64 * b
    } else {
        0
    };
    MemoryReport {
        param_bytes: count_params(cfg) * b,
        seq_cache_bytes: seq,
        depth_cache_bytes: depth,
    }
}

pub fn cost_report(cfg: &ModelConfig, seq_len: usize, bytes_per_scalar: usize) -> CostReport {
    CostReport {
        params: count_params(cfg),
        flops_per_token: count_flops(cfg, seq_len),
        memory_bytes: count_memory(cfg, seq_len, bytes_per_scalar).total(),
        seq_len,
        bytes_per_scalar,
    }
}

/// Integer in `[lo, hi]` minimizing `|f(x) - target|` for a nondecreasing
/// `f`; ties go to the smaller value. Returns the value and whether it sits on
/// a range boundary while the target lies beyond it.
pub fn search_nearest(lo: usize, hi: usize, target: f64, mut f: impl FnMut(usize) -> f64) -> (usize, bool) {
    let (flo, fhi) = (f(lo), f(hi));
    if flo >= target {
        return (lo, flo > target);
    }
    if fhi <= target {
        // a plateau ending at `hi` ties with its first element
        return (lower_bound(lo, hi, fhi, &mut f), fhi < target);
    }
    let b = lower_bound(lo, hi, target, &mut f);
    let a = b - 1;
    let (fa, fb) = (f(a), f(b));
    if (target - fa).abs() <= (fb - target).abs() {
        (lower_bound(lo, a, fa, &mut f), false)
    } else {
        (b, false)
    }
}

/// Smallest `x` in `[lo, hi]` with `f(x) >= y`, given `f(hi) >= y`.
fn lower_bound(lo: usize, hi: usize, y: f64, f: &mut impl FnMut(usize) -> f64) -> usize {
    let (mut a, mut b) = (lo, hi);
    while a < b {
        let mid = a + (b - a) / 2;
        if f(mid) >= y {
            b = mid;
        } else {
            a = mid + 1;
        }
    }
    a
}

fn rel_err(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchStep {
    pub search: String,
    pub value: usize,
    pub at_boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub config: ModelConfig,
    pub baseline: CostReport,
    pub achieved: CostReport,
    pub flops_rel_error: f64,
    pub params_rel_error: f64,
    pub iterations: usize,
    pub steps: Vec<MatchStep>,
    /// Set when a search hit its range limit before reaching the target.
    pub boundary_warning: bool,
}

/// Expert intermediate size whose FLOPs are closest to `target`.
pub fn match_flops(cfg: &ModelConfig, target: f64, seq_len: usize) -> (ModelConfig, bool) {
    match_flops_in(cfg, target, seq_len, FF_RANGE.0, FF_RANGE.1)
}

pub fn match_flops_in(cfg: &ModelConfig, target: f64, seq_len: usize, lo: usize, hi: usize) -> (ModelConfig, bool) {
    let mut c = cfg.clone();
    let (d, edge) = search_nearest(lo, hi, target, |d| {
        c.ea.intermediate = d;
        count_flops(&c, seq_len)
    });
    c.ea.intermediate = d;
    (c, edge)
}

/// Expert count whose parameter total is closest to `target`.
pub fn match_params(cfg: &ModelConfig, target: u64) -> (ModelConfig, bool) {
    match_params_in(cfg, target, cfg.ea.active, EXPERT_MAX)
}

pub fn match_params_in(cfg: &ModelConfig, target: u64, lo: usize, hi: usize) -> (ModelConfig, bool) {
    let mut c = cfg.clone();
    let (e, edge) = search_nearest(lo.max(cfg.ea.active), hi, target as f64, |e| {
        c.ea.experts = e;
        count_params(&c) as f64
    });
    c.ea.experts = e;
    (c, edge)
}

/// FLOP match, parameter match, FLOP match again.
pub fn match_model(cfg: &ModelConfig, baseline: &ModelConfig, seq_len: usize) -> Result<MatchResult> {
    cfg.validate()?;
    baseline.validate()?;
    if cfg.depth != baseline.depth {
        return Err(Error::Config(format!(
            "depth differs: candidate {} vs baseline {}",
            cfg.depth, baseline.depth
        )));
    }
    let base = cost_report(baseline, seq_len, 4);
    let mut steps = Vec::new();
    let (c, e1) = match_flops(cfg, base.flops_per_token, seq_len);
    steps.push(MatchStep { search: "intermediate".into(), value: c.ea.intermediate, at_boundary: e1 });
    let (c, e2) = match_params(&c, base.params);
    steps.push(MatchStep { search: "experts".into(), value: c.ea.experts, at_boundary: e2 });
    let (c, e3) = match_flops(&c, base.flops_per_token, seq_len);
    steps.push(MatchStep { search: "intermediate".into(), value: c.ea.intermediate, at_boundary: e3 });
    let achieved = cost_report(&c, seq_len, 4);
    Ok(MatchResult {
        flops_rel_error: rel_err(achieved.flops_per_token, base.flops_per_token),
        params_rel_error: rel_err(achieved.params as f64, base.params as f64),
        config: c,
        baseline: base,
        achieved,
        iterations: steps.len(),
        boundary_warning: e1 || e2 || e3,
        steps,
    })
}
