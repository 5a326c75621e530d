use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |t: &&Tensor| Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).unwrap();
        AdamState {
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update. A `None` gradient leaves that parameter
/// and its moments untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let shapes_ok = state.first[i].shape() == p.shape()
            && g.as_ref().is_none_or(|g| g.shape() == p.shape());
        if !shapes_ok {
            return Err(Error::contract(format!("adam: shape mismatch for parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.scale_in_place(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::row_vector(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&[&p]);
        let g = vec![Some(Tensor::row_vector(vec![0.0, 0.0]))];
        for _ in 0..10 {
            adam_step(&mut [&mut p], &g, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert!(st.first[0].data().iter().all(|&x| x == 0.0));
        assert!(st.second[0].data().iter().all(|&x| x == 0.0));
        assert_eq!(st.step, 10);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = Tensor::row_vector(vec![0.0, 0.0]);
        let mut st = AdamState::new(&[&p]);
        let g = vec![Some(Tensor::row_vector(vec![0.7, -3.0]))];
        let mut prev = p.clone();
        for _ in 0..50 {
            adam_step(&mut [&mut p], &g, &mut st, &AdamConfig::default()).unwrap();
            assert!(p.data()[0] < prev.data()[0]);
            assert!(p.data()[1] > prev.data()[1]);
            prev = p.clone();
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // loss (x - 3)^2; the reference recurrence lands within 1e-2 of 3.
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let g = vec![Some(Tensor::scalar(2.0 * (p.item() - 3.0)))];
            adam_step(&mut [&mut p], &g, &mut st, &cfg).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "x = {}", p.item());
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = Tensor::row_vector(vec![0.0, 0.0]);
        let mut st = AdamState::new(&[&p]);
        let g = vec![Some(Tensor::row_vector(vec![1.0, 2.0, 3.0]))];
        assert!(matches!(
            adam_step(&mut [&mut p], &g, &mut st, &AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::row_vector(vec![3.0, 4.0])), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
