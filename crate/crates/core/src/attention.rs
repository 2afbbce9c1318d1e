//! Scaled dot-product attention, grouped-query attention, rotary position
//! encodings (sequence and half-reversed depth form) and RMSNorm kernels.
//!
//! The kernels here are plain functions over row-major slices. The graph ops in
//! [`crate::graph`] call into them and add the matching backward passes.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn new(query_heads: usize, kv_heads: usize, head_dim: usize, causal: bool) -> Result<Self> {
        let spec = Self {
            query_heads,
            kv_heads,
            head_dim,
            causal,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("attention heads and head_dim must be positive".into()));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "query_heads {} not divisible by kv_heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        Ok(())
    }

    pub fn softmax_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// The kv head a query head reads from.
    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / (self.query_heads / self.kv_heads)
    }
}

/// Shape bookkeeping for a batched (grouped-query) attention call.
///
/// Queries are rows `b * q_len + i`, keys/values rows `b * kv_len + j`; head `h`
/// occupies columns `h * head_dim .. (h + 1) * head_dim`. With `causal`, query
/// `i` sits at absolute position `q_offset + i` and sees keys `j <= q_offset + i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub q_offset: usize,
    pub causal: bool,
}

impl AttnLayout {
    pub fn check(&self, q: usize, k: usize, v: usize) -> Result<()> {
        if self.q_heads == 0 || self.kv_heads == 0 || self.q_heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "invalid head grouping {}/{}",
                self.q_heads, self.kv_heads
            )));
        }
        let want_q = self.batch * self.q_len * self.q_heads * self.head_dim;
        let want_kv = self.batch * self.kv_len * self.kv_heads * self.head_dim;
        if q != want_q || k != want_kv || v != want_kv {
            return Err(shape_err(
                "attention",
                format!(
                    "layout {:?} expects q={} kv={}, got q={} k={} v={}",
                    self, want_q, want_kv, q, k, v
                ),
            ));
        }
        if self.causal && self.q_offset + self.q_len > self.kv_len {
            return Err(shape_err(
                "attention",
                format!(
                    "causal queries end at {} but only {} keys",
                    self.q_offset + self.q_len,
                    self.kv_len
                ),
            ));
        }
        Ok(())
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            self.q_offset + i + 1
        } else {
            self.kv_len
        }
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.q_heads * self.q_len * self.kv_len
    }

    fn group(&self) -> usize {
        self.q_heads / self.kv_heads
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Returns `(output, probabilities)`; probabilities are laid out
/// `[batch, q_heads, q_len, kv_len]` with masked entries set to zero.
pub fn attn_forward<T: Scalar>(
    lay: &AttnLayout,
    q: &[T],
    k: &[T],
    v: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    lay.check(q.len(), k.len(), v.len())?;
    let d = lay.head_dim;
    let qw = lay.q_heads * d;
    let kw = lay.kv_heads * d;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); lay.probs_len()];
    for b in 0..lay.batch {
        for h in 0..lay.q_heads {
            let kvh = h / lay.group();
            for i in 0..lay.q_len {
                let qrow = &q[(b * lay.q_len + i) * qw + h * d..][..d];
                let n = lay.visible(i);
                let p = &mut probs[((b * lay.q_heads + h) * lay.q_len + i) * lay.kv_len..][..lay.kv_len];
                for (j, pj) in p.iter_mut().enumerate().take(n) {
                    let krow = &k[(b * lay.kv_len + j) * kw + kvh * d..][..d];
                    let dot = qrow.iter().zip(krow).fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                    *pj = dot * scale;
                }
                softmax_in_place(&mut p[..n]);
                let orow = &mut out[(b * lay.q_len + i) * qw + h * d..][..d];
                for (j, &pj) in p.iter().enumerate().take(n) {
                    let vrow = &v[(b * lay.kv_len + j) * kw + kvh * d..][..d];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o = *o + pj * vv;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv)` of [`attn_forward`].
pub fn attn_backward<T: Scalar>(
    lay: &AttnLayout,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = lay.head_dim;
    let qw = lay.q_heads * d;
    let kw = lay.kv_heads * d;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); lay.kv_len];
    for b in 0..lay.batch {
        for h in 0..lay.q_heads {
            let kvh = h / lay.group();
            for i in 0..lay.q_len {
                let n = lay.visible(i);
                let p = &probs[((b * lay.q_heads + h) * lay.q_len + i) * lay.kv_len..][..n];
                let orow = (b * lay.q_len + i) * qw + h * d;
                let go = &dout[orow..orow + d];
                let mut inner = T::zero();
                for j in 0..n {
                    let voff = (b * lay.kv_len + j) * kw + kvh * d;
                    let vrow = &v[voff..voff + d];
                    let g = go.iter().zip(vrow).fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                    dp[j] = g;
                    inner = inner + g * p[j];
                    for (dvv, &gg) in dv[voff..voff + d].iter_mut().zip(go) {
                        *dvv = *dvv + p[j] * gg;
                    }
                }
                for j in 0..n {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let koff = (b * lay.kv_len + j) * kw + kvh * d;
                    for c in 0..d {
                        dq[orow + c] = dq[orow + c] + ds * k[koff + c];
                        dk[koff + c] = dk[koff + c] + ds * q[orow + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Single-head attention over matrices `q[m,k]`, `k[n,k]`, `v[n,dv]`. With
/// `causal`, query `i` is aligned to key `n - m + i`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape_err("attention", "expected rank-2 operands"));
    }
    if q.cols() != k.cols() {
        return Err(shape_err(
            "attention",
            format!("query dim {} != key dim {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(shape_err(
            "attention",
            format!("{} keys but {} values", k.rows(), v.rows()),
        ));
    }
    let (m, n, dk, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    if causal && m > n {
        return Err(shape_err("attention", "more causal queries than keys"));
    }
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut out = vec![T::zero(); m * dv];
    let mut row = vec![T::zero(); n];
    for i in 0..m {
        let visible = if causal { n - m + i + 1 } else { n };
        for (j, r) in row.iter_mut().enumerate().take(visible) {
            *r = (0..dk).fold(T::zero(), |acc, c| acc + q.data()[i * dk + c] * k.data()[j * dk + c]) * scale;
        }
        softmax_in_place(&mut row[..visible]);
        for j in 0..visible {
            for c in 0..dv {
                out[i * dv + c] = out[i * dv + c] + row[j] * v.data()[j * dv + c];
            }
        }
    }
    Tensor::new(vec![m, dv], out)
}

/// Multi-head / grouped-query attention: `q[m, Hq*D]`, `k, v[n, Hkv*D]`.
pub fn grouped_query_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &AttentionSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let m = q.rows();
    let n = k.rows();
    if spec.causal && m > n {
        return Err(shape_err("grouped_query_attention", "more causal queries than keys"));
    }
    let lay = AttnLayout {
        batch: 1,
        q_len: m,
        kv_len: n,
        q_heads: spec.query_heads,
        kv_heads: spec.kv_heads,
        head_dim: spec.head_dim,
        q_offset: n - m.min(n),
        causal: spec.causal,
    };
    let (out, _) = attn_forward(&lay, q.data(), k.data(), v.data())?;
    Tensor::new(vec![m, spec.query_heads * spec.head_dim], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    Sequence,
    DepthHalfReversed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeSpec {
    pub base: f64,
    pub dim: usize,
    pub mode: RopeMode,
    /// Maximum depth `L` in depth mode; ignored for sequence positions.
    pub max_position: usize,
}

impl RopeSpec {
    pub fn sequence(base: f64, dim: usize) -> Self {
        Self {
            base,
            dim,
            mode: RopeMode::Sequence,
            max_position: usize::MAX,
        }
    }

    pub fn depth(base: f64, dim: usize, max_depth: usize) -> Self {
        Self {
            base,
            dim,
            mode: RopeMode::DepthHalfReversed,
            max_position: max_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("rope dim {} must be even", self.dim)));
        }
        if self.mode == RopeMode::DepthHalfReversed && self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "depth rope dim {} must be divisible by 4",
                self.dim
            )));
        }
        if !(self.base > 0.0) {
            return Err(Error::Config("rope base must be positive".into()));
        }
        Ok(())
    }

    fn inv_freq(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.dim as f64)
    }

    /// Rotation angle of every rotary pair for one position (sequence mode) or
    /// depth (depth mode).
    pub fn angles(&self, position: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let pairs = self.dim / 2;
        match self.mode {
            RopeMode::Sequence => Ok((0..pairs)
                .map(|i| position as f64 * self.inv_freq(i))
                .collect()),
            RopeMode::DepthHalfReversed => {
                if position >= self.max_position {
                    return Err(Error::Contract(format!(
                        "depth {} outside [0, {})",
                        position, self.max_position
                    )));
                }
                let reversed = self.max_position - 1 - position;
                Ok((0..pairs)
                    .map(|i| {
                        let p = if i < pairs / 2 { position } else { reversed };
                        p as f64 * self.inv_freq(i)
                    })
                    .collect())
            }
        }
    }

    /// `(cos, sin)` tables, one row of `dim / 2` entries per position.
    pub fn tables<T: Scalar>(&self, positions: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let pairs = self.dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &p in positions {
            for a in self.angles(p)? {
                cos.push(T::of(a.cos()));
                sin.push(T::of(a.sin()));
            }
        }
        Ok((cos, sin))
    }
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every head in every row. Row `r`
/// uses table row `r`; `inverse` applies the transposed rotation.
pub(crate) fn rotate_pairs<T: Scalar>(
    x: &mut [T],
    width: usize,
    dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) {
    let pairs = dim / 2;
    let heads = width / dim;
    for (r, row) in x.chunks_mut(width).enumerate() {
        let c = &cos[r * pairs..][..pairs];
        let s = &sin[r * pairs..][..pairs];
        for h in 0..heads {
            let head = &mut row[h * dim..(h + 1) * dim];
            for i in 0..pairs {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

/// Rotary encoding of `x[m, dim]` with one position per row.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], spec: &RopeSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if x.cols() != spec.dim || x.rows() != positions.len() {
        return Err(shape_err(
            "rope_apply",
            format!("x {:?} with {} positions, dim {}", x.shape(), positions.len(), spec.dim),
        ));
    }
    let (cos, sin) = spec.tables::<T>(positions)?;
    let mut out = x.clone();
    rotate_pairs(out.data_mut(), spec.dim, spec.dim, &cos, &sin, false);
    Ok(out)
}

/// Depth encoding of a single vector: the first half of the rotary pairs sees
/// depth `l`, the second half sees `max_depth - 1 - l`.
pub fn rope_depth_apply<T: Scalar>(x: &[T], depth: usize, max_depth: usize, base: f64) -> Result<Vec<T>> {
    let spec = RopeSpec::depth(base, x.len(), max_depth);
    spec.validate()?;
    let (cos, sin) = spec.tables::<T>(&[depth])?;
    let mut out = x.to_vec();
    rotate_pairs(&mut out, spec.dim, spec.dim, &cos, &sin, false);
    Ok(out)
}

/// Row-wise RMSNorm; returns the output and the per-row reciprocal rms.
pub(crate) fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d.max(1));
    let eps = T::of(eps);
    let dn = T::of(d as f64);
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gain) {
            *o = v * r * g;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(shape_err(
            "rms_norm",
            format!("x has {} elements, gain {}", x.len(), gain.len()),
        ));
    }
    Ok(rms_norm_rows(x, gain, eps).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let out = attention(&t(&[1, 2], &[0.3, -1.0]), &t(&[1, 2], &[2.0, 1.0]), &t(&[1, 2], &[7.0, 7.0]), true).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let out = attention(
            &t(&[1, 2], &[0.9, -0.4]),
            &t(&[2, 2], &[1.0, 2.0, 1.0, 2.0]),
            &t(&[2, 2], &[1.0, 3.0, 5.0, -1.0]),
            false,
        )
        .unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_example_matches_scalar_softmax() {
        // scores [1/sqrt(2), 0]
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((w0 - 0.6698).abs() < 1e-4);
        let out = attention(
            &t(&[1, 2], &[1.0, 0.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            false,
        )
        .unwrap();
        assert!((out.data()[0] - w0).abs() < 1e-12);
        assert!((out.data()[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn key_dim_mismatch_is_shape_error() {
        let r = attention(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 3], &[1.0, 0.0, 0.0]), &t(&[1, 1], &[1.0]), false);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn bad_grouping_is_config_error() {
        assert!(matches!(AttentionSpec::new(3, 2, 4, true), Err(Error::Config(_))));
    }

    #[test]
    fn gqa_heads_share_kv_by_group() {
        let spec = AttentionSpec::new(4, 2, 2, false).unwrap();
        assert_eq!(spec.kv_head_of(0), 0);
        assert_eq!(spec.kv_head_of(1), 0);
        assert_eq!(spec.kv_head_of(2), 1);
        assert_eq!(spec.kv_head_of(3), 1);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = t(&[1, 4], &[0.1, 0.2, -0.3, 0.4]);
        let y = rope_apply(&x, &[0], &RopeSpec::sequence(10000.0, 4)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_rejects_odd_dim() {
        let x = t(&[1, 3], &[0.1, 0.2, -0.3]);
        assert!(matches!(rope_apply(&x, &[1], &RopeSpec::sequence(10000.0, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn depth_rope_positions() {
        let spec = RopeSpec::depth(500.0, 8, 4);
        let a = spec.angles(0).unwrap();
        // forward pairs at depth 0, reversed pairs at depth 3
        assert_eq!(a[0], 0.0);
        assert_eq!(a[1], 0.0);
        assert!((a[2] - 3.0 * 500f64.powf(-0.5)).abs() < 1e-12);
        assert!((a[3] - 3.0 * 500f64.powf(-0.75)).abs() < 1e-12);
        assert!(matches!(spec.angles(4), Err(Error::Contract(_))));
    }

    #[test]
    fn depth_rope_single_depth_is_identity() {
        let x = vec![0.5, -0.25, 1.5, 2.0, -1.0, 0.0, 0.75, 0.3];
        assert_eq!(rope_depth_apply(&x, 0, 1, 500.0).unwrap(), x);
    }

    #[test]
    fn depth_rope_angles_move_in_opposite_directions() {
        let spec = RopeSpec::depth(500.0, 8, 4);
        let all: Vec<_> = (0..4).map(|l| spec.angles(l).unwrap()).collect();
        for l in 1..4 {
            for i in 0..2 {
                assert!(all[l][i] > all[l - 1][i] || (i > 0 && all[l][i] >= all[l - 1][i]));
            }
            for i in 2..4 {
                assert!(all[l][i] < all[l - 1][i]);
            }
        }
    }

    #[test]
    fn rms_norm_hand_values() {
        let y = rms_norm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.8485).abs() < 1e-4);
        assert!((y[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_of_constant_is_gain() {
        let y = rms_norm(&[2.5f64; 6], &[1.0; 6], NORM_EPS).unwrap();
        for v in y {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
