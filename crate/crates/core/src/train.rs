//! Training: AdamW with decoupled weight decay, linear warmup, global norm
//! clipping, synthetic tasks and token files, and the step loop that also
//! drives router balancing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::gini;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_lr: 4e-4,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            max_grad_norm: 0.5,
        }
    }
}

/// Linear warmup to `max_lr`, then constant.
pub fn lr_at(step: usize, max_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        return max_lr;
    }
    max_lr * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping; a non-finite norm aborts the step.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NumericOverflow { op: "clip_grad_norm" });
    }
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update. Weight decay uses the pre-step value:
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p_old`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr_t, wd, eps) = (T::of(lr), T::of(lr * c.weight_decay), T::of(c.eps));
        let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.tensor.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for {}", p.name)));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let mh = m[j] * ibc1;
                let vh = v[j] * ibc2;
                let old = *w;
                *w = old - lr_t * mh / (vh.sqrt() + eps) - wd * old;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularSumChain,
    TokenLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Tokens per training sequence, including the separator.
    pub seq_len: usize,
    pub vocab: usize,
    /// Modulus of the running-sum task.
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_file: Option<PathBuf>,
}

fn default_modulus() -> usize {
    7
}

impl TaskSpec {
    pub fn synthetic(kind: TaskKind, seq_len: usize, vocab: usize, seed: u64) -> Self {
        Self {
            kind,
            seq_len,
            vocab,
            modulus: default_modulus().min(vocab.saturating_sub(1).max(1)),
            seed,
            token_file: None,
        }
    }

    pub fn separator(&self) -> usize {
        self.vocab - 1
    }

    /// Payload length of the synthetic tasks: `payload, SEP, answer` fits in
    /// `seq_len` tokens.
    pub fn payload_len(&self) -> usize {
        (self.seq_len - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(Error::Config("task vocab must be at least 3".into()));
        }
        if self.seq_len < 3 {
            return Err(Error::Config("task seq_len must be at least 3".into()));
        }
        if self.kind == TaskKind::ModularSumChain && (self.modulus < 2 || self.modulus >= self.vocab) {
            return Err(Error::Config(format!(
                "modulus {} must be in 2..{} (below the separator)",
                self.modulus, self.vocab
            )));
        }
        if self.kind == TaskKind::TokenLm && self.token_file.is_none() {
            return Err(Error::Config("token_lm needs a token_file".into()));
        }
        Ok(())
    }
}

/// Answer of a synthetic task for a payload.
pub fn task_answer(kind: TaskKind, payload: &[usize], modulus: usize) -> Vec<usize> {
    match kind {
        TaskKind::Copy | TaskKind::TokenLm => payload.to_vec(),
        TaskKind::Reverse => payload.iter().rev().copied().collect(),
        TaskKind::ModularSumChain => payload
            .iter()
            .scan(0usize, |acc, &x| {
                *acc = (*acc + x) % modulus;
                Some(*acc)
            })
            .collect(),
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Payload and answer of synthetic sample `index`.
pub fn make_task(spec: &TaskSpec, index: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if spec.kind == TaskKind::TokenLm {
        return Err(Error::Config("token_lm samples come from a token file".into()));
    }
    let mut rng = sample_rng(spec.seed, index);
    let range = match spec.kind {
        TaskKind::ModularSumChain => spec.modulus,
        _ => spec.separator(),
    };
    let payload: Vec<usize> = (0..spec.payload_len()).map(|_| rng.random_range(0..range)).collect();
    let answer = task_answer(spec.kind, &payload, spec.modulus);
    Ok((payload, answer))
}

/// Next-token training pair: model input and per-position targets. Synthetic
/// tasks only score the answer tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

pub fn synthetic_example(spec: &TaskSpec, index: u64) -> Result<Example> {
    let (payload, answer) = make_task(spec, index)?;
    let n = payload.len();
    let mut seq = payload;
    seq.push(spec.separator());
    seq.extend(answer);
    let input = seq[..seq.len() - 1].to_vec();
    // position i predicts seq[i + 1]; the answer starts at n + 1
    let targets = (0..input.len()).map(|i| (i >= n).then(|| seq[i + 1])).collect();
    Ok(Example { input, targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFileMeta {
    pub vocab: usize,
    pub count: usize,
}

pub fn token_meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.toml");
    PathBuf::from(p)
}

pub fn write_token_file(path: &Path, tokens: &[u32], vocab: usize) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!("token {} outside vocab {}", bad, vocab)));
    }
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let meta = TokenFileMeta {
        vocab,
        count: tokens.len(),
    };
    fs::write(token_meta_path(path), toml::to_string(&meta).expect("meta serializes"))?;
    Ok(())
}

pub fn read_token_file(path: &Path) -> Result<(Vec<u32>, TokenFileMeta)> {
    let meta_text = fs::read_to_string(token_meta_path(path))?;
    let meta: TokenFileMeta = toml::from_str(&meta_text).map_err(|e| Error::Format(e.to_string()))?;
    let bytes = fs::read(path)?;
    if bytes.len() != meta.count * 4 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, metadata says {} tokens",
            path.display(),
            bytes.len(),
            meta.count
        )));
    }
    let tokens: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= meta.vocab) {
        return Err(Error::Format(format!("token {} outside vocab {}", bad, meta.vocab)));
    }
    Ok((tokens, meta))
}

/// Source of training examples.
pub enum DataSource {
    Synthetic(TaskSpec),
    Tokens { spec: TaskSpec, tokens: Vec<u32> },
}

impl DataSource {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        match (&spec.kind, &spec.token_file) {
            (TaskKind::TokenLm, Some(path)) => {
                let (tokens, meta) = read_token_file(path)?;
                if meta.vocab > spec.vocab {
                    return Err(Error::Config(format!(
                        "token file vocab {} exceeds task vocab {}",
                        meta.vocab, spec.vocab
                    )));
                }
                if tokens.len() < spec.seq_len + 1 {
                    return Err(Error::EmptyData(format!(
                        "token file has {} tokens, need at least {}",
                        tokens.len(),
                        spec.seq_len + 1
                    )));
                }
                Ok(DataSource::Tokens { spec, tokens })
            }
            _ => Ok(DataSource::Synthetic(spec)),
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        match self {
            DataSource::Synthetic(s) | DataSource::Tokens { spec: s, .. } => s,
        }
    }

    pub fn example(&self, index: u64) -> Result<Example> {
        match self {
            DataSource::Synthetic(spec) => synthetic_example(spec, index),
            DataSource::Tokens { spec, tokens } => {
                let window = spec.seq_len + 1;
                let start = sample_rng(spec.seed, index).random_range(0..=tokens.len() - window);
                let w: Vec<usize> = tokens[start..start + window].iter().map(|&t| t as usize).collect();
                Ok(Example {
                    input: w[..spec.seq_len].to_vec(),
                    targets: w[1..].iter().map(|&t| Some(t)).collect(),
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Emit a checkpoint every this many steps (0 disables periodic ones).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stop once a step's loss is at or below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub usage: BTreeMap<String, Vec<u64>>,
    pub usage_gini: BTreeMap<String, f64>,
}

pub enum TrainEvent<'a, T> {
    Step(&'a StepMetrics),
    Checkpoint { step: usize, model: &'a Model<T>, optimizer: &'a AdamW<T> },
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub data: DataSource,
    pub config: TrainConfig,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, data: DataSource, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if model.folded {
            return Err(Error::Contract("cannot train a folded model".into()));
        }
        if data.spec().vocab > model.config.vocab {
            return Err(Error::Config(format!(
                "task vocab {} exceeds model vocab {}",
                data.spec().vocab,
                model.config.vocab
            )));
        }
        if data.spec().seq_len > model.config.context {
            return Err(Error::Config(format!(
                "task seq_len {} exceeds context {}",
                data.spec().seq_len,
                model.config.context
            )));
        }
        let optimizer = AdamW::new(config.optim.clone(), &model.params);
        Ok(Self {
            model,
            optimizer,
            data,
            config,
            step: 0,
        })
    }

    /// Loss and gradients (in parameter-store order) for one batch.
    pub fn loss_and_grads(&self, examples: &[Example]) -> Result<(f64, Vec<Tensor<T>>, BTreeMap<String, Vec<u64>>)> {
        let len = examples[0].input.len();
        let mut tokens = Vec::with_capacity(examples.len() * len);
        let mut targets = Vec::with_capacity(examples.len() * len);
        for e in examples {
            if e.input.len() != len {
                return Err(Error::Input("examples in a batch differ in length".into()));
            }
            tokens.extend_from_slice(&e.input);
            targets.extend_from_slice(&e.targets);
        }
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let mut pass = self.model.pass(&bound, examples.len(), len);
        let logits = pass.logits(&mut g, &tokens)?;
        let usage = std::mem::take(&mut pass.usage);
        drop(pass);
        let loss = g.cross_entropy(logits, targets)?;
        let grads = g.backward(loss)?;
        let per_param = self
            .model
            .params
            .iter()
            .map(|p| bound.get(&p.name).map(|v| grads.get(v)))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.data(loss)[0].to_f64_lossy(), per_param, usage))
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let b = self.config.batch_size;
        let examples = (0..b)
            .map(|j| self.data.example((self.step * b + j) as u64))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads, usage) = self.loss_and_grads(&examples)?;
        if !loss.is_finite() {
            return Err(Error::NumericOverflow { op: "loss" });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.optim.max_grad_norm)?;
        let lr = lr_at(self.step, self.config.optim.max_lr, self.config.optim.warmup_steps);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.model.record_usage(&usage)?;
        self.model.update_balance();
        let usage_gini = usage
            .iter()
            .filter_map(|(n, c)| gini(c).ok().map(|v| (n.clone(), v)))
            .collect();
        let m = StepMetrics {
            step: self.step,
            loss,
            grad_norm,
            lr,
            usage,
            usage_gini,
        };
        self.step += 1;
        Ok(m)
    }

    /// Runs the configured number of steps. The hook sees every step's metrics
    /// and every checkpoint (one before the first step, then at the cadence
    /// and after the last step).
    pub fn run(&mut self, mut hook: impl FnMut(TrainEvent<'_, T>) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        hook(TrainEvent::Checkpoint {
            step: self.step,
            model: &self.model,
            optimizer: &self.optimizer,
        })?;
        while self.step < self.config.steps {
            let m = self.train_step()?;
            hook(TrainEvent::Step(&m))?;
            let stop = self.config.stop_at_loss.is_some_and(|t| m.loss <= t);
            history.push(m);
            let every = self.config.checkpoint_every;
            let last = stop || self.step == self.config.steps;
            if (every > 0 && self.step % every == 0) || last {
                hook(TrainEvent::Checkpoint {
                    step: self.step,
                    model: &self.model,
                    optimizer: &self.optimizer,
                })?;
            }
            if stop {
                break;
            }
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn schedule_examples() {
        assert!((lr_at(0, 4e-4, 500) - 8e-7).abs() < 1e-18);
        assert_eq!(lr_at(499, 4e-4, 500), 4e-4);
        assert_eq!(lr_at(10_000, 4e-4, 500), 4e-4);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[2.0, 0.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 0.5).unwrap(), 2.0);
        assert_eq!(g[0].data(), &[0.5, 0.0]);
        let mut g = vec![Tensor::<f64>::from_f64(&[1], &[0.3]).unwrap()];
        clip_grad_norm(&mut g, 0.5).unwrap();
        assert_eq!(g[0].data(), &[0.3]);
        let mut g = vec![Tensor::<f64>::from_f64(&[1], &[f64::NAN]).unwrap()];
        assert!(matches!(clip_grad_norm(&mut g, 0.5), Err(Error::NumericOverflow { .. })));
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[v]).unwrap(), Init::Ones).unwrap();
        s
    }

    #[test]
    fn adamw_examples() {
        for (wd, want) in [(0.0, 0.9), (0.1, 0.89)] {
            let mut p = scalar_store(1.0);
            let cfg = OptimConfig { weight_decay: wd, ..Default::default() };
            let mut opt = AdamW::new(cfg, &p);
            opt.step(&mut p, &[Tensor::from_f64(&[1], &[1.0]).unwrap()], 0.1).unwrap();
            assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-7);
        }
        let mut p = scalar_store(0.7);
        let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..Default::default() }, &p);
        opt.step(&mut p, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn task_examples() {
        assert_eq!(task_answer(TaskKind::Copy, &[3, 1, 4], 7), vec![3, 1, 4]);
        assert_eq!(task_answer(TaskKind::Reverse, &[3, 1, 4], 7), vec![4, 1, 3]);
        assert_eq!(task_answer(TaskKind::ModularSumChain, &[3, 5, 6], 7), vec![3, 1, 0]);
    }

    #[test]
    fn copy_example_layout() {
        let spec = TaskSpec::synthetic(TaskKind::Copy, 7, 10, 1);
        let e = synthetic_example(&spec, 0).unwrap();
        assert_eq!(e.input.len(), 6);
        assert_eq!(e.input[3], 9);
        let (payload, _) = make_task(&spec, 0).unwrap();
        let scored: Vec<usize> = e.targets.iter().flatten().copied().collect();
        assert_eq!(scored, payload);
        assert_eq!(synthetic_example(&spec, 0).unwrap(), e);
        assert_ne!(synthetic_example(&spec, 1).unwrap(), e);
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.bin");
        write_token_file(&path, &[1, 2, 3, 0], 4).unwrap();
        let (t, meta) = read_token_file(&path).unwrap();
        assert_eq!(t, vec![1, 2, 3, 0]);
        assert_eq!(meta, TokenFileMeta { vocab: 4, count: 4 });
        assert!(write_token_file(&path, &[9], 4).is_err());
    }
}
