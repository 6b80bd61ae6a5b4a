use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{DiffError, KernelCheck, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Upper bound on probed coordinates per parameter tensor; half are the
    /// largest analytic entries, half uniformly random.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-5,
            max_coords: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    /// Largest `|analytic - numeric|` over probed coordinates, divided by
    /// the largest gradient magnitude of the tensor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    /// Kernels whose own backward rule disagrees with finite differences;
    /// only populated when some parameter fails.
    pub failing_ops: Vec<String>,
    pub passed: bool,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<(Tape<f64>, Var), DiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(params, i)).collect();
    let loss = f(&mut tape, &vars)?;
    let shape = tape.value(loss).shape().to_vec();
    if tape.value(loss).len() != 1 {
        return Err(DiffError::NotScalar(shape));
    }
    Ok((tape, loss))
}

/// Compares analytic gradients of the scalar program `f` against central
/// finite differences, in 64-bit arithmetic.
///
/// `f` receives the tape and one bound variable per parameter of `params`.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, cfg: &GradCheckConfig) -> Result<CheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>,
{
    let (mut tape, loss) = evaluate(&f, params)?;
    let base = tape.value(loss).data()[0];
    let (tape2, loss2) = evaluate(&f, params)?;
    let again = tape2.value(loss2).data()[0];
    if base.to_bits() != again.to_bits() {
        return Err(DiffError::NonDeterministic(base, again));
    }
    drop(tape2);
    let vars: Vec<Var> = (0..params.len()).map(Var).collect();
    if tape.requires_grad(loss) {
        tape.backward(loss)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut work = params.clone();
    for (i, var) in vars.iter().enumerate() {
        if !params.tensor(i).requires_grad() {
            continue;
        }
        let len = params.tensor(i).len();
        let analytic: Vec<f64> = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let coords: Vec<usize> = if len <= cfg.max_coords {
            (0..len).collect()
        } else {
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
            let top = cfg.max_coords / 2;
            let mut chosen: Vec<usize> = order[..top].to_vec();
            let mut rest = order[top..].to_vec();
            rest.shuffle(&mut rng);
            chosen.extend(rest.into_iter().take(cfg.max_coords - top));
            chosen
        };
        let mut max_abs = 0.0f64;
        let mut scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for &j in &coords {
            let orig = work.tensor(i).data()[j];
            work.tensor_mut(i).data_mut()[j] = orig + cfg.h;
            let (tp, lp) = evaluate(&f, &work)?;
            let plus = tp.value(lp).data()[0];
            work.tensor_mut(i).data_mut()[j] = orig - cfg.h;
            let (tm, lm) = evaluate(&f, &work)?;
            let minus = tm.value(lm).data()[0];
            work.tensor_mut(i).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            scale = scale.max(numeric.abs());
            max_abs = max_abs.max((numeric - analytic[j]).abs());
        }
        let rel = if max_abs == 0.0 { 0.0 } else { max_abs / scale.max(1e-300) };
        reports.push(ParamCheck {
            name: params.name(i).to_string(),
            max_rel_err: rel,
            max_abs_err: max_abs,
            coords_checked: coords.len(),
            passed: rel <= cfg.tol,
        });
    }
    let passed = reports.iter().all(|r| r.passed);
    let failing_ops = if passed {
        Vec::new()
    } else {
        let mut names: Vec<String> = tape
            .check_kernels(cfg.h, cfg.tol.max(1e-4), cfg.max_coords, cfg.seed)
            .into_iter()
            .filter(|k: &KernelCheck| !k.passed)
            .map(|k| k.op)
            .collect();
        names.dedup();
        names
    };
    Ok(CheckReport {
        tol: cfg.tol,
        params: reports,
        failing_ops,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::diff::{Kernel, Tensor};

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_f64([vals.len()], vals).unwrap().with_grad());
        p
    }

    #[test]
    fn constant_program_passes_with_zero_gradients() {
        let p = store(&[1.0, 2.0]);
        let report = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.params[0].max_abs_err, 0.0);
    }

    #[test]
    fn non_deterministic_program_is_detected() {
        let p = store(&[1.0]);
        let counter = std::sync::atomic::AtomicU64::new(0);
        let err = grad_check(
            |tape, _| {
                let n = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(tape.constant(Tensor::scalar(n as f64)))
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonDeterministic(..)));
    }

    /// `x^2` whose backward rule forgets the factor 2.
    struct BrokenSquare;

    impl Kernel<f64> for BrokenSquare {
        fn name(&self) -> &str {
            "broken_square"
        }
        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>, DiffError> {
            let x = inputs[0];
            Tensor::new(x.shape(), x.data().iter().map(|v| v * v).collect())
        }
        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            g: &[f64],
            _needs: &[bool],
        ) -> Vec<Option<Vec<f64>>> {
            vec![Some(inputs[0].data().iter().zip(g).map(|(x, g)| x * g).collect())]
        }
    }

    #[test]
    fn broken_backward_rule_is_reported_by_name() {
        let p = store(&[0.7, -1.3]);
        let report = grad_check(
            |tape, v| {
                let e = tape.exp(v[0])?;
                let sq = tape.apply(Arc::new(BrokenSquare), &[e])?;
                tape.sum(sq)
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing_ops, vec!["broken_square".to_string()]);
    }
}
