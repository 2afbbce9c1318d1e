//! Sparse expert selection shared by expert attention and the attention
//! projection MoEs: sigmoid gates with bias-shifted top-k selection, median
//! based bias balancing, and linear expert banks with a gate-scaled shared
//! expert that can be folded into the routable experts.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Balancing state of one router. The bias only shifts which experts are
/// selected; it never enters gate values and is not touched by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub counts: Vec<u64>,
    pub update_rate: f64,
    pub top_k: usize,
    pub normalize_scores: bool,
}

impl RouterState {
    pub fn new(experts: usize, top_k: usize, update_rate: f64, normalize_scores: bool) -> Result<Self> {
        if experts == 0 || top_k == 0 || top_k > experts {
            return Err(Error::Config(format!(
                "router needs 1 <= k <= E, got k={} E={}",
                top_k, experts
            )));
        }
        Ok(Self {
            bias: vec![0.0; experts],
            counts: vec![0; experts],
            update_rate,
            top_k,
            normalize_scores,
        })
    }

    pub fn experts(&self) -> usize {
        self.bias.len()
    }

    /// Expert ids chosen for one token's logits.
    pub fn select(&self, logits: &[f64]) -> Result<Vec<usize>> {
        if logits.len() != self.experts() {
            return Err(shape_err(
                "router",
                format!("{} logits for {} experts", logits.len(), self.experts()),
            ));
        }
        let shifted: Vec<f64> = logits.iter().zip(&self.bias).map(|(x, b)| x + b).collect();
        Ok(top_k_indices(&shifted, self.top_k))
    }

    pub fn record(&mut self, ids: &[usize]) {
        for &e in ids {
            self.counts[e] += 1;
        }
    }

    /// `b <- b + rate * sign(median(N) - N)`, then clears the counts. Returns the
    /// applied change.
    pub fn update_balance(&mut self) -> Vec<f64> {
        let as_f: Vec<f64> = self.counts.iter().map(|&c| c as f64).collect();
        let m = median(&as_f);
        let delta: Vec<f64> = as_f
            .iter()
            .map(|&n| self.update_rate * sign(m - n))
            .collect();
        for (b, d) in self.bias.iter_mut().zip(&delta) {
            *b += d;
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
        delta
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Median with the midpoint convention for even lengths.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn sigmoid_f64(x: f64) -> f64 {
    crate::graph::sigmoid(x)
}

/// Sparse EA scores: sigmoid of the raw logits at the experts selected by
/// `logits + bias`, renormalized over the selected set when the router
/// normalizes. Unselected experts score zero.
pub fn ea_select(logits: &[f64], state: &RouterState) -> Result<Vec<f64>> {
    let ids = state.select(logits)?;
    let mut out = vec![0.0; logits.len()];
    for &e in &ids {
        out[e] = sigmoid_f64(logits[e]);
    }
    if state.normalize_scores {
        let total: f64 = ids.iter().map(|&e| out[e]).sum();
        for &e in &ids {
            out[e] /= total;
        }
    }
    Ok(out)
}

/// Graph form of the gate computation: gathers the selected logits (`ids` has
/// `k` entries per row) and returns `[rows, k]` gates.
pub fn gate_values<T: Scalar>(g: &mut Graph<T>, logits: Var, ids: Vec<usize>, k: usize, normalize: bool) -> Result<Var> {
    let picked = g.gather_elems(logits, ids, k)?;
    let gates = g.sigmoid(picked)?;
    if normalize {
        g.row_normalize(gates)
    } else {
        Ok(gates)
    }
}

/// Linear experts `W[E, in, out]` plus a shared expert `W_shared[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearExpertBank<T> {
    pub experts: Tensor<T>,
    pub shared: Tensor<T>,
    pub folded: bool,
}

impl<T: Scalar> LinearExpertBank<T> {
    pub fn new(experts: Tensor<T>, shared: Tensor<T>) -> Result<Self> {
        let se = experts.shape();
        if se.len() != 3 || shared.shape() != [se[1], se[2]] {
            return Err(shape_err(
                "expert_bank",
                format!("experts {:?}, shared {:?}", se, shared.shape()),
            ));
        }
        Ok(Self {
            experts,
            shared,
            folded: false,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.experts.shape();
        (s[0], s[1], s[2])
    }

    /// Adds the shared expert into every routable expert. Afterwards the
    /// forward pass is a single expert matmul.
    pub fn fold_shared(&self) -> Result<Self> {
        if self.folded {
            return Err(Error::Contract("expert bank is already folded".into()));
        }
        let mut experts = self.experts.clone();
        fold_into(experts.data_mut(), self.shared.data());
        Ok(Self {
            experts,
            shared: Tensor::zeros(self.shared.shape()),
            folded: true,
        })
    }
}

pub(crate) fn fold_into<T: Scalar>(experts: &mut [T], shared: &[T]) {
    for chunk in experts.chunks_mut(shared.len()) {
        for (w, &s) in chunk.iter_mut().zip(shared) {
            *w = *w + s;
        }
    }
}

/// `sigma_e * x W_e + sigma_e * x W_shared` for the single nonzero score
/// `sigma_e`; on a folded bank only the first term remains.
pub fn moe_linear_forward<T: Scalar>(x: &[T], scores: &[T], bank: &LinearExpertBank<T>) -> Result<Vec<T>> {
    let (e, din, dout) = bank.dims();
    if x.len() != din || scores.len() != e {
        return Err(shape_err(
            "moe_linear_forward",
            format!("x {} / scores {} for bank {:?}", x.len(), scores.len(), bank.dims()),
        ));
    }
    let active: Vec<usize> = (0..e).filter(|&i| !scores[i].is_zero()).collect();
    if active.len() != 1 {
        return Err(Error::Contract(format!(
            "top-1 expert forward needs exactly one nonzero score, got {}",
            active.len()
        )));
    }
    let ex = active[0];
    let s = scores[ex];
    let w = &bank.experts.data()[ex * din * dout..(ex + 1) * din * dout];
    let mut out = vec![T::zero(); dout];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * dout..(i + 1) * dout]) {
            *o = *o + xi * wv;
        }
    }
    if !bank.folded {
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&bank.shared.data()[i * dout..(i + 1) * dout]) {
                *o = *o + xi * wv;
            }
        }
    }
    Ok(out.into_iter().map(|v| v * s).collect())
}

/// Top-1 routed linear layer on the graph. `gate` holds one score per row; the
/// shared term is scaled by a stop-gradient copy of it.
pub fn moe_linear<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    experts: Var,
    shared: Option<Var>,
    ids: &[usize],
    gate: Var,
    gate_stopped: Var,
) -> Result<Var> {
    let routed = g.routed_linear(x, experts, ids)?;
    let routed = g.mul_col(routed, gate)?;
    match shared {
        Some(w) => {
            let base = g.matmul(x, w)?;
            let base = g.mul_col(base, gate_stopped)?;
            g.add(routed, base)
        }
        None => Ok(routed),
    }
}
