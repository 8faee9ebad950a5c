//! Loss combinators: fixed weights, homoscedastic uncertainty, and MGDA.

use candle_core::{Tensor, Var};

use crate::balancing::min_norm::{min_norm_point, MinNormSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::tasks::{PerTask, TaskKind, TaskSet};

/// Default fixed weights for det, sem, driv, lane.
pub const DEFAULT_LAMBDA: [f64; 4] = [1.0, 2.0, 2.0, 2.0];

/// Per-task scalar losses for one step. `None` marks a task with no labeled
/// samples in the batch.
#[derive(Debug, Clone, Default)]
pub struct TaskLosses {
    pub losses: [Option<Tensor>; 4],
}

impl TaskLosses {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, t: TaskKind, loss: Tensor) {
        self.losses[t.index()] = Some(loss);
    }

    pub fn get(&self, t: TaskKind) -> Option<&Tensor> {
        self.losses[t.index()].as_ref()
    }

    pub fn mask(&self) -> TaskSet {
        TaskKind::ALL
            .into_iter()
            .filter(|t| self.get(*t).is_some())
            .collect()
    }

    pub fn active(&self) -> impl Iterator<Item = (TaskKind, &Tensor)> {
        TaskKind::ALL
            .into_iter()
            .filter_map(|t| self.get(t).map(|l| (t, l)))
    }

    /// Scalar values; errors on a non-finite or negative loss.
    pub fn values(&self) -> Result<PerTask<Option<f64>>> {
        let mut out = PerTask([None; 4]);
        for (t, l) in self.active() {
            let v = l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("loss for {t} is {v}")));
            }
            out[t] = Some(v);
        }
        Ok(out)
    }
}

pub fn validate_lambda(lambda: &[f64; 4]) -> Result<()> {
    if let Some(i) = lambda.iter().position(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Config(format!(
            "loss weight for {} must be positive, got {}",
            TaskKind::ALL[i],
            lambda[i]
        )));
    }
    Ok(())
}

fn zero_like(losses: &TaskLosses) -> Result<Tensor> {
    let first = losses
        .active()
        .next()
        .ok_or_else(|| Error::Invalid("no active task losses to combine".into()))?
        .1;
    Ok(first.zeros_like()?)
}

/// `Σ λ_i L_i` over active tasks.
pub fn fixed_combine(losses: &TaskLosses, lambda: &[f64; 4]) -> Result<Tensor> {
    validate_lambda(lambda)?;
    let mut total = zero_like(losses)?;
    for (t, l) in losses.active() {
        total = (total + (l * lambda[t.index()])?)?;
    }
    Ok(total)
}

/// `Σ 0.5·exp(−s_i)·L_i + 0.5·s_i` over active tasks; `s` has shape `[4]`.
pub fn uncertainty_combine(losses: &TaskLosses, s: &Tensor) -> Result<Tensor> {
    if s.dims() != [4] {
        return Err(Error::Shape(format!(
            "log-variance vector has shape {:?}",
            s.dims()
        )));
    }
    let mut total = zero_like(losses)?;
    for (t, l) in losses.active() {
        let si = s.get(t.index())?.to_dtype(l.dtype())?;
        let term = ((si.neg()?.exp()? * l)? * 0.5)?;
        total = ((total + term)? + (si * 0.5)?)?;
    }
    Ok(total)
}

/// MGDA weights for the active tasks from their flattened gradients.
pub fn mgda_weights(
    active: TaskSet,
    grads: &PerTask<Option<Vec<f64>>>,
    tol: f64,
    max_iter: usize,
) -> Result<(PerTask<f64>, MinNormSolution)> {
    let mut rows = Vec::new();
    for t in active.iter() {
        rows.push(grads[t].clone().ok_or(Error::MissingGradient(t))?);
    }
    let sol = min_norm_point(&rows, tol, max_iter)?;
    let mut w = PerTask([0.0; 4]);
    for (t, wi) in active.iter().zip(&sol.weights) {
        w[t] = *wi;
    }
    Ok((w, sol))
}

/// `Σ w_i L_i` with `w` from the min-norm point of the task gradients. The
/// weights are plain numbers, so backprop treats them as constants.
pub fn mgda_combine(
    losses: &TaskLosses,
    grads: &PerTask<Option<Vec<f64>>>,
) -> Result<(Tensor, PerTask<f64>, MinNormSolution)> {
    let (w, sol) = mgda_weights(losses.mask(), grads, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mut total = zero_like(losses)?;
    for (t, l) in losses.active() {
        total = (total + (l * w[t])?)?;
    }
    Ok((total, w, sol))
}

/// Gradient of `loss` w.r.t. `vars`, flattened to f64. Variables outside the
/// loss graph contribute zeros.
pub fn flat_grad(loss: &Tensor, vars: &[Var]) -> Result<Vec<f64>> {
    let grads = loss.backward()?;
    let mut out = Vec::new();
    for v in vars {
        match grads.get(v.as_tensor()) {
            Some(g) => out.extend(
                g.flatten_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_vec1::<f64>()?,
            ),
            None => out.extend(std::iter::repeat_n(0.0, v.elem_count())),
        }
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn scalar(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn losses(vals: [Option<f64>; 4]) -> TaskLosses {
        let mut l = TaskLosses::new();
        for t in TaskKind::ALL {
            if let Some(v) = vals[t.index()] {
                l.set(t, scalar(v));
            }
        }
        l
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn fixed_default_weights() {
        let l = losses([Some(1.0); 4]);
        assert_eq!(value(&fixed_combine(&l, &DEFAULT_LAMBDA).unwrap()), 7.0);
        let l = losses([Some(3.5), Some(0.0), Some(0.0), Some(0.0)]);
        assert_eq!(value(&fixed_combine(&l, &[1.0; 4]).unwrap()), 3.5);
    }

    #[test]
    fn fixed_rejects_nonpositive() {
        let l = losses([Some(1.0); 4]);
        assert!(matches!(
            fixed_combine(&l, &[1.0, -2.0, 2.0, 2.0]),
            Err(Error::Config(_))
        ));
        assert!(fixed_combine(&l, &[1.0, 0.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn masked_task_gets_zero_gradient() {
        let dev = Device::Cpu;
        let w_det = Var::new(&[1.5f64], &dev).unwrap();
        let w_sem = Var::new(&[0.7f64], &dev).unwrap();
        let mut l = TaskLosses::new();
        l.set(
            TaskKind::Det,
            w_det.as_tensor().sqr().unwrap().sum_all().unwrap(),
        );
        // sem is masked: its loss is never added
        let total = fixed_combine(&l, &DEFAULT_LAMBDA).unwrap();
        let g = flat_grad(&total, &[w_det.clone(), w_sem.clone()]).unwrap();
        assert_eq!(g[0], 3.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(l.mask(), TaskSet::single(TaskKind::Det));
    }

    #[test]
    fn uncertainty_values() {
        let l = losses([Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
        let s = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(value(&uncertainty_combine(&l, &s).unwrap()), 5.0);

        let l = losses([Some(2.0), None, None, None]);
        let s = Tensor::new(&[2f64.ln(), 0.0, 0.0, 0.0], &Device::Cpu).unwrap();
        let v = value(&uncertainty_combine(&l, &s).unwrap());
        assert!((v - (0.5 + 0.5 * 2f64.ln())).abs() < 1e-12);
        assert!((v - 0.8466).abs() < 1e-4);
    }

    #[test]
    fn uncertainty_s_gradient_closed_form() {
        let dev = Device::Cpu;
        let s = Var::new(&[0.3f64, -0.2, 1.1, 0.0], &dev).unwrap();
        let vals = [1.7, 0.4, 2.2, 1.0];
        let l = losses(vals.map(Some));
        let total = uncertainty_combine(&l, s.as_tensor()).unwrap();
        let g = flat_grad(&total, &[s.clone()]).unwrap();
        let sv = s.as_tensor().to_vec1::<f64>().unwrap();
        for i in 0..4 {
            let expect = 0.5 * (1.0 - (-sv[i]).exp() * vals[i]);
            assert!((g[i] - expect).abs() < 1e-12);
        }
        // s_3 = 0 and L_3 = 1 = exp(0): stationary
        assert!(g[3].abs() < 1e-15);
    }

    #[test]
    fn mgda_single_and_identical() {
        let l = losses([Some(2.5), None, None, None]);
        let grads = PerTask([Some(vec![1.0, 2.0]), None, None, None]);
        let (total, w, _) = mgda_combine(&l, &grads).unwrap();
        assert_eq!(w.0, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(value(&total), 2.5);

        let l = losses([Some(1.0), Some(3.0), None, None]);
        let grads = PerTask([Some(vec![1.0, 1.0]), Some(vec![1.0, 1.0]), None, None]);
        let (total, w, _) = mgda_combine(&l, &grads).unwrap();
        assert_eq!(w.0[..2], [0.5, 0.5]);
        assert_eq!(value(&total), 2.0);
    }

    #[test]
    fn mgda_missing_gradient() {
        let l = losses([Some(1.0), Some(1.0), None, None]);
        let grads = PerTask([Some(vec![1.0]), None, None, None]);
        assert!(matches!(
            mgda_combine(&l, &grads),
            Err(Error::MissingGradient(TaskKind::Sem))
        ));
    }
}
