//! Two-layer perceptron with batch normalization, hand-rolled in f64 with
//! analytic gradients. Training mode normalizes with batch statistics and the
//! backward pass differentiates through them; inference mode uses running
//! statistics, so outputs are batch-size independent.

#![allow(clippy::needless_range_loop)]

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::seeds;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// y = w2 . relu(BN(w1 x + b1)) + b2
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub run_mean: Vec<f64>,
    pub run_var: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub mode: BnMode,
}

impl MlpParams {
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> MlpParams {
        let mut rng = seeds::stream(seed, "mlp-init", 0);
        let scale = (1.0 / input_dim as f64).sqrt();
        let mut w1 = Mat::zeros(hidden, input_dim);
        for v in &mut w1.data {
            *v = rng.random_range(-scale..scale);
        }
        let w2 = (0..hidden)
            .map(|_| rng.random_range(-0.01..0.01))
            .collect();
        MlpParams {
            w1,
            b1: vec![0.0; hidden],
            gamma: vec![1.0; hidden],
            beta: vec![0.0; hidden],
            run_mean: vec![0.0; hidden],
            run_var: vec![1.0; hidden],
            w2,
            b2: 0.0,
            mode: BnMode::Train,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }
}

/// Batch statistics produced by a training-mode forward pass; the train loop
/// folds them into the running statistics with momentum [`BN_MOMENTUM`].
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn update_running_stats(p: &mut MlpParams, stats: &BnBatchStats) {
    for j in 0..p.hidden() {
        p.run_mean[j] = (1.0 - BN_MOMENTUM) * p.run_mean[j] + BN_MOMENTUM * stats.mean[j];
        p.run_var[j] = (1.0 - BN_MOMENTUM) * p.run_var[j] + BN_MOMENTUM * stats.var[j];
    }
}

/// Cache of a training-mode batch forward, everything backward needs.
pub struct TrainForward {
    pub outputs: Vec<f64>,
    pub stats: BnBatchStats,
    xhat: Mat,
    active: Vec<bool>,
    act: Mat,
}

/// Training-mode batch forward. Requires >= 2 rows (batch variance).
pub fn forward_train_batch(p: &MlpParams, xs: &[Vec<f64>]) -> Result<TrainForward> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "batch normalization in training mode needs a batch of >= 2".into(),
        ));
    }
    let h = p.hidden();
    let mut z = Mat::zeros(n, h);
    for (i, x) in xs.iter().enumerate() {
        if x.len() != p.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input dim {} != {}",
                x.len(),
                p.input_dim()
            )));
        }
        let zi = p.w1.matvec(x);
        for j in 0..h {
            z.set(i, j, zi[j] + p.b1[j]);
        }
    }
    let mut mean = vec![0.0; h];
    let mut var = vec![0.0; h];
    for j in 0..h {
        let mut m = 0.0;
        for i in 0..n {
            m += z.get(i, j);
        }
        m /= n as f64;
        let mut v = 0.0;
        for i in 0..n {
            let d = z.get(i, j) - m;
            v += d * d;
        }
        mean[j] = m;
        var[j] = v / n as f64;
    }
    let mut xhat = Mat::zeros(n, h);
    let mut act = Mat::zeros(n, h);
    let mut active = vec![false; n * h];
    let mut outputs = vec![0.0; n];
    for i in 0..n {
        let mut y = p.b2;
        for j in 0..h {
            let xh = (z.get(i, j) - mean[j]) / (var[j] + BN_EPS).sqrt();
            xhat.set(i, j, xh);
            let bn = p.gamma[j] * xh + p.beta[j];
            let a = if bn > 0.0 { bn } else { 0.0 };
            active[i * h + j] = bn > 0.0;
            act.set(i, j, a);
            y += p.w2[j] * a;
        }
        outputs[i] = y;
    }
    Ok(TrainForward {
        outputs,
        stats: BnBatchStats { mean, var },
        xhat,
        active,
        act,
    })
}

/// Inference-mode forward with running statistics; batch-size independent.
pub fn forward_eval(p: &MlpParams, x: &[f64]) -> Result<f64> {
    if x.len() != p.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "input dim {} != {}",
            x.len(),
            p.input_dim()
        )));
    }
    let z = p.w1.matvec(x);
    let mut y = p.b2;
    for j in 0..p.hidden() {
        let xh = (z[j] + p.b1[j] - p.run_mean[j]) / (p.run_var[j] + BN_EPS).sqrt();
        let bn = p.gamma[j] * xh + p.beta[j];
        y += p.w2[j] * bn.max(0.0);
    }
    Ok(y)
}

/// Single-input forward matching the operation contract: training mode takes
/// the batch providing the normalization statistics, inference mode ignores
/// it and uses the running statistics.
pub fn mlp_forward(x: &[f64], p: &MlpParams, batch_context: Option<&[Vec<f64>]>) -> Result<f64> {
    match p.mode {
        BnMode::Eval => forward_eval(p, x),
        BnMode::Train => {
            let batch = batch_context.ok_or_else(|| {
                Error::InvalidArgument("training mode requires a batch_context".into())
            })?;
            let fw = forward_train_batch(p, batch)?;
            // Normalize x with the context's statistics.
            let z = p.w1.matvec(x);
            let mut y = p.b2;
            for j in 0..p.hidden() {
                let xh = (z[j] + p.b1[j] - fw.stats.mean[j]) / (fw.stats.var[j] + BN_EPS).sqrt();
                let bn = p.gamma[j] * xh + p.beta[j];
                y += p.w2[j] * bn.max(0.0);
            }
            Ok(y)
        }
    }
}

/// Parameter gradients of a training-mode batch.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpGrads {
    pub fn zeros(p: &MlpParams) -> MlpGrads {
        MlpGrads {
            w1: Mat::zeros(p.w1.rows, p.w1.cols),
            b1: vec![0.0; p.hidden()],
            gamma: vec![0.0; p.hidden()],
            beta: vec![0.0; p.hidden()],
            w2: vec![0.0; p.hidden()],
            b2: 0.0,
        }
    }
}

/// Backward through the training-mode forward. `d_out[i]` is dL/dy_i; returns
/// parameter gradients and dL/dx per input row. Differentiates through the
/// batch mean and variance.
pub fn backward_train_batch(
    p: &MlpParams,
    xs: &[Vec<f64>],
    fw: &TrainForward,
    d_out: &[f64],
) -> (MlpGrads, Vec<Vec<f64>>) {
    let n = xs.len();
    let h = p.hidden();
    let mut g = MlpGrads::zeros(p);
    let mut d_xhat = Mat::zeros(n, h);

    for i in 0..n {
        g.b2 += d_out[i];
        for j in 0..h {
            g.w2[j] += d_out[i] * fw.act.get(i, j);
            let d_act = d_out[i] * p.w2[j];
            let d_bn = if fw.active[i * h + j] { d_act } else { 0.0 };
            g.gamma[j] += d_bn * fw.xhat.get(i, j);
            g.beta[j] += d_bn;
            d_xhat.set(i, j, d_bn * p.gamma[j]);
        }
    }

    // dz through the batch statistics:
    // dz_ij = (gamma-free) 1/(N*sqrt(v+eps)) * (N*dxhat_ij - sum_k dxhat_kj
    //         - xhat_ij * sum_k dxhat_kj*xhat_kj)
    let mut d_z = Mat::zeros(n, h);
    for j in 0..h {
        let inv_std = 1.0 / (fw.stats.var[j] + BN_EPS).sqrt();
        let mut sum_dx = 0.0;
        let mut sum_dx_xhat = 0.0;
        for i in 0..n {
            sum_dx += d_xhat.get(i, j);
            sum_dx_xhat += d_xhat.get(i, j) * fw.xhat.get(i, j);
        }
        for i in 0..n {
            let v = (n as f64 * d_xhat.get(i, j) - sum_dx - fw.xhat.get(i, j) * sum_dx_xhat)
                * inv_std
                / n as f64;
            d_z.set(i, j, v);
        }
    }

    let mut d_inputs = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..h {
            let dz = d_z.get(i, j);
            g.b1[j] += dz;
            let row = g.w1.row_mut(j);
            for (w, xv) in row.iter_mut().zip(&xs[i]) {
                *w += dz * xv;
            }
        }
        d_inputs.push(p.w1.matvec_t(d_z.row(i)));
    }
    (g, d_inputs)
}

/// Mean-squared-error loss of a training batch and its gradients.
pub fn mse_train_batch(
    p: &MlpParams,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(f64, MlpGrads, Vec<Vec<f64>>, BnBatchStats)> {
    let fw = forward_train_batch(p, xs)?;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; xs.len()];
    for i in 0..xs.len() {
        let err = fw.outputs[i] - ys[i];
        loss += err * err / n;
        d_out[i] = 2.0 * err / n;
    }
    let (grads, d_inputs) = backward_train_batch(p, xs, &fw, &d_out);
    Ok((loss, grads, d_inputs, fw.stats))
}
