use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bcast, Graph, Tensor, Var};

pub const DEFAULT_RETENTION: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How a BN layer normalizes and whether it writes its running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; affine parameters stay learnable.
    Frozen,
    /// Running statistics; nothing learnable.
    Eval,
}

impl BnMode {
    pub fn code(self) -> u8 {
        match self {
            BnMode::Train => 0,
            BnMode::Frozen => 1,
            BnMode::Eval => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BnMode::Train),
            1 => Some(BnMode::Frozen),
            2 => Some(BnMode::Eval),
            _ => None,
        }
    }
}

impl std::fmt::Display for BnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BnMode::Train => "train",
            BnMode::Frozen => "frozen",
            BnMode::Eval => "eval",
        };
        f.write_str(s)
    }
}

/// Which part of the network a BN layer belongs to: the shared backbone or
/// the auxiliary self-supervised head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Backbone,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Fraction of the old running statistic kept on each update (`m`).
    pub retention: f64,
    pub eps: f64,
    pub branch: Branch,
    mode: BnMode,
}

/// Graph handles for one layer's scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Per-channel statistics of the batch a Train-mode forward saw.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct BnOutput {
    pub out: Var,
    pub batch_stats: Option<BatchStats>,
}

impl BnState {
    pub fn new(channels: usize, retention: f64, eps: f64, branch: Branch) -> Self {
        assert!((0.0..=1.0).contains(&retention), "retention must lie in [0, 1]");
        assert!(eps > 0.0, "eps must be positive");
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            retention,
            eps,
            branch,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    /// Registers gamma and beta on `g`. They require grad only when asked to
    /// and the layer is not in Eval mode.
    pub fn bind_affine(&self, g: &mut Graph, learnable: bool) -> AffineVars {
        let rg = learnable && self.mode != BnMode::Eval;
        let c = self.channels();
        AffineVars {
            gamma: g.leaf(Tensor::from_parts(vec![c], self.gamma.clone()), rg),
            beta: g.leaf(Tensor::from_parts(vec![c], self.beta.clone()), rg),
        }
    }

    /// Normalizes `x` (`[batch, channels, ...]`) and applies `gamma * x_hat + beta`.
    ///
    /// In Train mode the batch statistics are returned so the caller can
    /// fold them into the running statistics; this function never mutates
    /// the layer.
    pub fn forward(&self, g: &mut Graph, x: Var, affine: AffineVars, mode: BnMode) -> Result<BnOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::ChannelMismatch { expected: self.channels(), got: shape.get(1).copied().unwrap_or(0) });
        }
        if shape[0] == 0 {
            return Err(Error::EmptyBatch);
        }
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if shape[0] < 2 {
                    return Err(Error::BatchTooSmall { got: shape[0] });
                }
                let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
                let mean = g.mean_axis(x, &axes)?;
                let var = g.var_axis(x, &axes)?;
                let stats = BatchStats { mean: g.value(mean).data().to_vec(), var: g.value(var).data().to_vec() };
                (mean, var, Some(stats))
            }
            BnMode::Frozen | BnMode::Eval => {
                let c = self.channels();
                let mean = g.constant(Tensor::from_parts(vec![c], self.running_mean.clone()));
                let var = g.constant(Tensor::from_parts(vec![c], self.running_var.clone()));
                (mean, var, None)
            }
        };
        let xhat = g.channel_normalize(x, mean, var, self.eps)?;
        let scaled = g.mul_b(xhat, affine.gamma, Bcast::Channel)?;
        let out = g.add_b(scaled, affine.beta, Bcast::Channel)?;
        Ok(BnOutput { out, batch_stats })
    }

    /// `mu' <- m mu' + (1 - m) mu_batch`, likewise for the variance.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        if self.mode != BnMode::Train {
            return Err(Error::ModeViolation { op: "bn_update_running", mode: self.mode.to_string() });
        }
        if batch_mean.len() != self.channels() || batch_var.len() != self.channels() {
            return Err(Error::ChannelMismatch { expected: self.channels(), got: batch_mean.len() });
        }
        let m = self.retention;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * batch_mean[c];
            self.running_var[c] = (m * self.running_var[c] + (1.0 - m) * batch_var[c]).max(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(state: &BnState, x: Tensor, mode: BnMode) -> (Vec<f64>, Option<BatchStats>) {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let aff = state.bind_affine(&mut g, true);
        let out = state.forward(&mut g, xv, aff, mode).unwrap();
        (g.value(out.out).data().to_vec(), out.batch_stats)
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut s = BnState::new(1, 0.9, 1e-5, Branch::Backbone);
        s.gamma = vec![2.0];
        s.beta = vec![3.0];
        let (out, _) = run(&s, Tensor::full(&[4, 1], 1.0), BnMode::Train);
        assert!(out.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn two_value_channel_hand_computed() {
        // x = [0, 2]: mu = 1, var = 1, x_hat = [-1, 1]; 1.5 * x_hat + 0.5 = [-1, 2]
        let mut s = BnState::new(1, 0.9, 1e-300, Branch::Backbone);
        s.gamma = vec![1.5];
        s.beta = vec![0.5];
        let (out, stats) = run(&s, Tensor::new(&[2, 1], vec![0.0, 2.0], false).unwrap(), BnMode::Train);
        assert_eq!(out, vec![-1.0, 2.0]);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn frozen_standard_stats_is_identity() {
        let s = BnState::new(2, 0.9, 1e-300, Branch::Backbone);
        let x = Tensor::new(&[1, 2, 2, 1], vec![0.3, -1.2, 4.0, 0.0], false).unwrap();
        let (out, stats) = run(&s, x.clone(), BnMode::Frozen);
        assert_eq!(out, x.data());
        assert!(stats.is_none());
    }

    #[test]
    fn running_update_arithmetic() {
        let mut s = BnState::new(1, 0.9, 1e-5, Branch::Backbone);
        s.update_running(&[1.0], &[1.0]).unwrap();
        assert!((s.running_mean[0] - 0.1).abs() < 1e-15);
        let mut full = BnState::new(1, 1.0, 1e-5, Branch::Backbone);
        full.update_running(&[5.0], &[9.0]).unwrap();
        assert_eq!(full.running_mean, vec![0.0]);
        assert_eq!(full.running_var, vec![1.0]);
    }

    #[test]
    fn running_mean_converges_geometrically() {
        let mut s = BnState::new(1, 0.9, 1e-5, Branch::Backbone);
        let mut gap = (s.running_mean[0] - 2.0f64).abs();
        for _ in 0..50 {
            s.update_running(&[2.0], &[1.0]).unwrap();
            let next = (s.running_mean[0] - 2.0f64).abs();
            assert!((next - 0.9 * gap).abs() < 1e-12);
            gap = next;
        }
    }

    #[test]
    fn update_outside_train_is_rejected() {
        let mut s = BnState::new(1, 0.9, 1e-5, Branch::Backbone);
        s.set_mode(BnMode::Frozen);
        assert!(matches!(s.update_running(&[0.0], &[1.0]), Err(Error::ModeViolation { .. })));
    }

    #[test]
    fn train_needs_two_samples_and_matching_channels() {
        let s = BnState::new(3, 0.9, 1e-5, Branch::Backbone);
        let mut g = Graph::new();
        let aff = s.bind_affine(&mut g, false);
        let one = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(s.forward(&mut g, one, aff, BnMode::Train), Err(Error::BatchTooSmall { got: 1 })));
        let wrong = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(s.forward(&mut g, wrong, aff, BnMode::Frozen), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn eval_binding_is_not_learnable() {
        let mut s = BnState::new(2, 0.9, 1e-5, Branch::Backbone);
        let mut g = Graph::new();
        s.set_mode(BnMode::Frozen);
        let a = s.bind_affine(&mut g, true);
        assert!(g.requires_grad(a.gamma));
        s.set_mode(BnMode::Eval);
        let b = s.bind_affine(&mut g, true);
        assert!(!g.requires_grad(b.gamma) && !g.requires_grad(b.beta));
    }
}
