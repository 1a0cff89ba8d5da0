//! Closed-form DDPM mathematics: noise schedule tables, forward marginal,
//! Gaussian posterior, the per-step KL diagnostic and the noise-prediction
//! loss.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is defined as 1.

use ndarray::{Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VdtError};
use crate::LatentClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// The serialisable description of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(&ScheduleConfig {
        steps,
        beta_start,
        beta_end,
        kind,
    })
}

impl DiffusionSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind,
        } = *config;
        if steps == 0 {
            return Err(VdtError::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(VdtError::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_var = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(VdtError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_var
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }
}

pub(crate) fn check_same_shape(a: &LatentClip, b: &LatentClip) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VdtError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Closed-form forward marginal `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn add_noise(
    s: &DiffusionSchedule,
    x0: &LatentClip,
    eps: &LatentClip,
    t: usize,
) -> Result<LatentClip> {
    check_same_shape(x0, eps)?;
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_params(
    s: &DiffusionSchedule,
    x0: &LatentClip,
    xt: &LatentClip,
    t: usize,
) -> Result<(LatentClip, f64)> {
    check_same_shape(x0, xt)?;
    let (c0, ct) = s.posterior_coefficients(t)?;
    let mean = if t == 1 {
        // c0 == 1, ct == 0 analytically; avoid rounding in the degenerate step
        x0.clone()
    } else {
        Zip::from(x0).and(xt).map_collect(|&a, &b| c0 * a + ct * b)
    };
    Ok((mean, s.posterior_var(t)))
}

/// `KL(q(x_{t-1}|x_t,x_0) || N(model_mean, model_var I))`, summed over
/// elements. Infinite at `t == 1`, where the posterior is a point mass.
pub fn vb_kl_term(
    s: &DiffusionSchedule,
    x0: &LatentClip,
    xt: &LatentClip,
    model_mean: &LatentClip,
    model_var: f64,
    t: usize,
) -> Result<f64> {
    if model_var.is_nan() || model_var <= 0.0 {
        return Err(VdtError::NonPositiveVariance(model_var));
    }
    check_same_shape(x0, model_mean)?;
    let (q_mean, q_var) = posterior_params(s, x0, xt, t)?;
    Ok(gaussian_kl_sum(&q_mean, q_var, model_mean, model_var))
}

/// Sum over elements of `KL(N(mq, vq) || N(mp, vp))`.
pub fn gaussian_kl_sum(mq: &LatentClip, vq: f64, mp: &LatentClip, vp: f64) -> f64 {
    if vq <= 0.0 {
        return f64::INFINITY;
    }
    if vq == vp {
        // exact zero for identical Gaussians
        return Zip::from(mq)
            .and(mp)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b) / (2.0 * vp));
    }
    let log_ratio = 0.5 * (vp / vq).ln();
    Zip::from(mq).and(mp).fold(0.0, |acc, &a, &b| {
        acc + log_ratio + (vq + (a - b) * (a - b)) / (2.0 * vp) - 0.5
    })
}

/// Mean squared noise-prediction error. `frame_mask` restricts the average
/// to frames whose entry is `true`.
pub fn simple_loss(
    eps_pred: &LatentClip,
    eps_true: &LatentClip,
    frame_mask: Option<&[bool]>,
) -> Result<f64> {
    check_same_shape(eps_pred, eps_true)?;
    let Some(mask) = frame_mask else {
        let n = eps_pred.len() as f64;
        return Ok(Zip::from(eps_pred)
            .and(eps_true)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b))
            / n);
    };
    if mask.len() != eps_pred.shape()[0] {
        return Err(VdtError::ShapeMismatch {
            expected: vec![eps_pred.shape()[0]],
            got: vec![mask.len()],
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, q), &keep) in eps_pred
        .axis_iter(Axis(0))
        .zip(eps_true.axis_iter(Axis(0)))
        .zip(mask)
    {
        if keep {
            sum += Zip::from(&p)
                .and(&q)
                .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
            count += p.len();
        }
    }
    if count == 0 {
        return Err(VdtError::EmptyMask);
    }
    Ok(sum / count as f64)
}
