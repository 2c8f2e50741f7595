//! Central finite-difference comparison against recorded gradients.

use super::{Graph, Tensor, TensorError, Var};

/// Anything that exposes a stable, named list of trainable tensors.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Gradients below this magnitude are compared on an absolute scale. Central
/// differences at ε = 1e-5 on an O(1–10) loss carry about 1e-10 of rounding
/// error, so smaller entries cannot be resolved to 1e-4 relative accuracy.
pub const REL_FLOOR: f64 = 1e-5;

/// Relative error between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel < tolerance)
    }

    /// Folds another report in, keeping the worst error per group name.
    pub fn merge(&mut self, other: GradCheckReport) {
        for g in other.groups {
            match self.groups.iter_mut().find(|x| x.name == g.name) {
                Some(x) => {
                    let n = (x.count + g.count) as f64;
                    x.mean_rel = if n > 0.0 {
                        (x.mean_rel * x.count as f64 + g.mean_rel * g.count as f64) / n
                    } else {
                        0.0
                    };
                    x.max_rel = x.max_rel.max(g.max_rel);
                    x.max_abs = x.max_abs.max(g.max_abs);
                    x.count += g.count;
                }
                None => self.groups.push(g),
            }
        }
    }
}

fn evaluate<M, F>(model: &M, f: &F) -> Result<f64, TensorError>
where
    M: Parameters,
    F: for<'a> Fn(&'a M, &mut Graph<'a>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let loss = f(model, &mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(TensorError::Usage("gradient check needs a scalar function".into()));
    }
    Ok(v[0])
}

/// Compares `backward` gradients of the scalar built by `f` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, one coordinate at a time.
///
/// `f` must be deterministic; two evaluations at the same point that differ
/// in any bit are reported as a usage error. Gradients already held by the
/// parameters are cleared.
pub fn finite_diff_check<M, F>(model: &mut M, f: F, eps: f64) -> Result<GradCheckReport, TensorError>
where
    M: Parameters,
    F: for<'a> Fn(&'a M, &mut Graph<'a>) -> Result<Var, TensorError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::Usage(format!("epsilon must be positive, got {eps}")));
    }
    if evaluate(model, &f)?.to_bits() != evaluate(model, &f)?.to_bits() {
        return Err(TensorError::Usage(
            "function is not deterministic (is dropout enabled?)".into(),
        ));
    }

    model.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(model, &mut g)?;
        g.backward(loss)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = model
        .named_params()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, t)| (n, t.grad_or_zeros()))
        .collect();
    model.zero_grads();

    let mut report = GradCheckReport::default();
    for (name, grads) in analytic {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut sum_rel = 0.0;
        for (j, &a) in grads.iter().enumerate() {
            let original = param_mut(model, &name)?.data()[j];
            param_mut(model, &name)?.data_mut()[j] = original + eps;
            let plus = evaluate(model, &f);
            param_mut(model, &name)?.data_mut()[j] = original - eps;
            let minus = evaluate(model, &f);
            param_mut(model, &name)?.data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max((a - numeric).abs());
            sum_rel += rel;
        }
        report.groups.push(GroupError {
            name,
            max_rel,
            mean_rel: if grads.is_empty() {
                0.0
            } else {
                sum_rel / grads.len() as f64
            },
            max_abs,
            count: grads.len(),
        });
    }
    Ok(report)
}

fn param_mut<'m, M: Parameters>(model: &'m mut M, name: &str) -> Result<&'m mut Tensor, TensorError> {
    model
        .named_params_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| TensorError::Usage(format!("parameter {name} disappeared")))
}
