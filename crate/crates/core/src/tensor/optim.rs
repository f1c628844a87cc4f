use crate::error::{Error, Result};

/// Adam moment buffers for an ordered list of parameter buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn check_pairs(op: &'static str, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(op, format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(op, format!("buffer {i}: param {} vs grad {}", p.len(), g.len())));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update over every buffer. The first call sizes
/// the moment buffers; later calls must pass the same layout.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    check_pairs("adam_step", params, grads)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    let layout_ok = state.m.len() == params.len() && state.m.iter().zip(params.iter()).all(|(m, p)| m.len() == p.len());
    if !layout_ok {
        return Err(Error::shape("adam_step", "parameter layout changed between steps"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * g`.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    check_pairs("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.iter_mut().zip(g.iter()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}
