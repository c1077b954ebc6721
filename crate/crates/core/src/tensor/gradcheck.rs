//! Central finite-difference gradient verification.

use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome for one checked parameter.
#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub index: usize,
    pub max_rel_err: f64,
    /// Flat element index where the maximum occurred.
    pub argmax: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamGradReport>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn eval_loss<E, F>(build: &F, params: &[Tensor<E>]) -> Result<E>
where
    E: Element,
    F: Fn(&mut Graph<E>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let loss = build(&mut g, &vars)?;
    if g.numel(loss) != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check: loss must be scalar, got {:?}",
            g.shape(loss)
        )));
    }
    Ok(g.value(loss)[0])
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the loss from the given leaf vars and be
/// deterministic: it is evaluated twice up front and any bitwise difference
/// is a hard error. Relative error uses `|a - n| / max(|a|, |n|, 1)`, so
/// near-zero gradients are compared absolutely.
pub fn grad_check<E, F>(build: F, params: &[Tensor<E>], tol: f64, h: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Graph<E>, &[Var]) -> Result<Var>,
{
    let l1 = eval_loss(&build, params)?.to_f64();
    let l2 = eval_loss(&build, params)?.to_f64();
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministic("grad_check loss evaluation"));
    }

    // analytic pass
    let mut g = Graph::new();
    let marked: Vec<Tensor<E>> = params
        .iter()
        .map(|p| p.clone().with_requires_grad())
        .collect();
    let vars: Vec<Var> = marked.iter().map(|p| g.leaf(p)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            g.grad(v)
                .map(|gr| gr.iter().map(|x| x.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; params[i].numel()])
        })
        .collect();

    // numeric pass
    let mut per_param = Vec::with_capacity(params.len());
    let mut passed = true;
    let mut work: Vec<Tensor<E>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut argmax = 0usize;
        for ei in 0..param.numel() {
            let orig = param.data()[ei].to_f64();
            work[pi].data_mut()[ei] = E::from_f64(orig + h);
            let plus = eval_loss(&build, &work)?.to_f64();
            work[pi].data_mut()[ei] = E::from_f64(orig - h);
            let minus = eval_loss(&build, &work)?.to_f64();
            work[pi].data_mut()[ei] = E::from_f64(orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                argmax = ei;
            }
        }
        if max_rel >= tol {
            passed = false;
        }
        per_param.push(ParamGradReport {
            index: pi,
            max_rel_err: max_rel,
            argmax,
        });
    }
    Ok(GradCheckReport {
        per_param,
        tol,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_passes() {
        let x = Tensor::<f64>::from_f64s(vec![2, 3], &[0.3, -0.7, 1.2, 0.5, 0.1, -0.4]).unwrap();
        let w = Tensor::<f64>::from_f64s(vec![3, 2], &[0.2, -0.1, 0.4, 0.9, -0.3, 0.6]).unwrap();
        let b = Tensor::<f64>::from_f64s(vec![2], &[0.05, -0.2]).unwrap();
        let report = grad_check(
            |g, vars| {
                let y = g.linear(vars[0], vars[1], Some(vars[2]))?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            },
            &[x, w, b],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "worst rel err {}", report.worst());
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        // Emulate a wrong backward rule: loss = sum(x * detach(x)). The
        // detached copy tracks the perturbed values during numeric passes
        // (true gradient 2x) but contributes nothing analytically
        // (analytic gradient x), exactly what a dropped term looks like.
        let x = Tensor::<f64>::from_f64s(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |g, vars| {
                let detached = g.constant(vec![3], g.value(vars[0]).to_vec())?;
                let y = g.mul(vars[0], detached)?;
                Ok(g.sum_all(y))
            },
            &[x],
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.worst() > 0.1);
    }

    #[test]
    fn non_determinism_is_a_hard_error() {
        let x = Tensor::<f64>::scalar(1.0);
        let counter = std::cell::Cell::new(0u64);
        let result = grad_check(
            |g, vars| {
                counter.set(counter.get() + 1);
                let jitter = g.scalar_const(counter.get() as f64);
                let y = g.mul(vars[0], jitter)?;
                Ok(g.sum_all(y))
            },
            &[x],
            1e-4,
            1e-5,
        );
        assert!(matches!(result, Err(Error::NonDeterministic(_))));
    }
}
