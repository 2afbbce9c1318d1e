//! Central finite-difference oracle for the graph's backward pass.

use crate::error::{Error, Result};
use crate::graph::{Decisions, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero up
    /// to round-off are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn build<F>(f: &F, graph: &mut Graph<f64>, inputs: &[(String, Tensor<f64>)]) -> Result<(Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let out = f(graph, &vars)?;
    if graph.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar output".into()));
    }
    Ok((vars, out))
}

/// Backward-pass gradients for every input, plus the decisions taken while
/// building the graph.
pub fn analytic_gradients<F>(
    f: &F,
    inputs: &[(String, Tensor<f64>)],
) -> Result<(Vec<Tensor<f64>>, Decisions<f64>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let (vars, out) = build(f, &mut graph, inputs)?;
    let grads = graph.backward(out)?;
    let per_input = vars.iter().map(|&v| grads.get(v)).collect();
    Ok((per_input, graph.decisions().clone()))
}

/// Central differences `(f(x+h) - f(x-h)) / 2h`, replaying `decisions` so
/// selections and stop-gradient values stay fixed.
pub fn numeric_gradients<F>(
    f: &F,
    inputs: &[(String, Tensor<f64>)],
    decisions: &Decisions<f64>,
    step: f64,
) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut graph = Graph::replaying(decisions.clone());
        let (_, out) = build(f, &mut graph, inputs)?;
        Ok(graph.data(out)[0])
    };
    let mut work: Vec<(String, Tensor<f64>)> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[p].1.shape());
        for i in 0..inputs[p].1.len() {
            let orig = inputs[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[p].1.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[p].1.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        result.push(grad);
    }
    Ok(result)
}

pub fn compare(
    names: &[String],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let params = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let mut best = ParamCheck {
                name: name.clone(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
                let e = relative_error(x, y, cfg.floor);
                if e > best.max_rel_error || e.is_nan() {
                    best.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                    best.worst_index = i;
                    best.analytic = x;
                    best.numeric = y;
                }
            }
            best
        })
        .collect();
    GradCheckReport {
        params,
        tolerance: cfg.tolerance,
    }
}

/// Compares backward gradients against central finite differences for every
/// named input of `f`.
pub fn grad_check<F>(
    f: F,
    inputs: &[(String, Tensor<f64>)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (analytic, decisions) = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, &decisions, cfg.step)?;
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    Ok(compare(&names, &analytic, &numeric, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn linear_loss(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let y = g.matmul(v[0], v[1])?;
        let t = g.constant(Tensor::from_f64(&[3, 2], &[0.3, -0.2, 0.5, 0.1, -0.7, 0.9])?);
        let p = g.mul(y, t)?;
        g.sum(p)
    }

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![("x".to_string(), random(&[3, 4], &mut rng)), ("w".to_string(), random(&[4, 2], &mut rng))];
        let report = grad_check(linear_loss, &inputs, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![("x".to_string(), random(&[3, 4], &mut rng)), ("w".to_string(), random(&[4, 2], &mut rng))];
        let (mut analytic, dec) = analytic_gradients(&linear_loss, &inputs).unwrap();
        let numeric = numeric_gradients(&linear_loss, &inputs, &dec, 1e-5).unwrap();
        analytic[1].data_mut()[3] += 0.1;
        let names = vec!["x".to_string(), "w".to_string()];
        let report = compare(&names, &analytic, &numeric, &GradCheckConfig::default());
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().name, "w");
    }

    #[test]
    fn softmax_cross_entropy_three_logits() {
        let inputs = vec![("logits".to_string(), Tensor::from_f64(&[1, 3], &[0.2, -1.3, 0.7]).unwrap())];
        let f = |g: &mut Graph<f64>, v: &[Var]| g.cross_entropy(v[0], vec![Some(1)]);
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            ..Default::default()
        };
        let report = grad_check(f, &inputs, &cfg).unwrap();
        assert!(report.passed(), "{:?}", report);
    }
}
