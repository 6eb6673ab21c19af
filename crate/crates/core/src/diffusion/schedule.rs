use super::DiffusionError;

/// Linear variance schedule and its cumulative products. Timesteps are
/// 1-based in every function taking `t`; index `t - 1` into the arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `alpha_bar_t` with the convention `alpha_bar_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(100, 1e-4, 0.04).expect("default schedule is valid")
    }
}

pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need at least 2 steps, got {steps}"
        )));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_1 + i as f64 / (steps - 1) as f64 * (beta_t - beta_1))
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// `q_t = sqrt(abar_t) q0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(q0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Vec<f64> {
    let ab = s.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    q0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// Clean configuration implied by a noise prediction.
pub fn estimate_q0(q_t: &[f64], eps_hat: &[f64], t: usize, s: &NoiseSchedule) -> Vec<f64> {
    let ab = s.alpha_bar_at(t);
    let b = (1.0 - ab).sqrt();
    let a = ab.sqrt();
    q_t.iter().zip(eps_hat).map(|(&x, &e)| (x - b * e) / a).collect()
}

/// Mean and isotropic variance of `p(q_{t-1} | q_t)`.
pub fn posterior_mean_var(q_t: &[f64], eps_hat: &[f64], t: usize, s: &NoiseSchedule) -> (Vec<f64>, f64) {
    let alpha = s.alpha[t - 1];
    let ab = s.alpha_bar_at(t);
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mu = q_t.iter().zip(eps_hat).map(|(&x, &e)| inv * (x - coef * e)).collect();
    let var = (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - ab) * s.beta[t - 1];
    (mu, var)
}

/// Posterior transition from step `t` straight to an earlier step `to`.
///
/// Treats `t` and `to` as adjacent steps of a coarser chain whose one-step
/// retention is `abar_t / abar_to`; reduces to [`posterior_mean_var`] when
/// `to == t - 1`.
pub fn skip_posterior(q_t: &[f64], eps_hat: &[f64], t: usize, to: usize, s: &NoiseSchedule) -> (Vec<f64>, f64) {
    debug_assert!(to < t);
    if to + 1 == t {
        return posterior_mean_var(q_t, eps_hat, t, s);
    }
    let ab_t = s.alpha_bar_at(t);
    let ab_to = s.alpha_bar_at(to);
    let alpha = ab_t / ab_to;
    let coef = (1.0 - alpha) / (1.0 - ab_t).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mu = q_t.iter().zip(eps_hat).map(|(&x, &e)| inv * (x - coef * e)).collect();
    let var = (1.0 - ab_to) / (1.0 - ab_t) * (1.0 - alpha);
    (mu, var)
}

/// Evenly spaced descending timesteps, always starting at `T` and ending at 1.
pub fn timestep_plan(steps_total: usize, steps_used: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps_used == 0 || steps_used > steps_total {
        return Err(DiffusionError::InvalidSampleConfig(format!(
            "steps_used must be in 1..={steps_total}, got {steps_used}"
        )));
    }
    if steps_used == 1 {
        return Ok(vec![steps_total]);
    }
    let mut plan: Vec<usize> = (0..steps_used)
        .map(|i| {
            let frac = i as f64 / (steps_used - 1) as f64;
            (steps_total as f64 - frac * (steps_total - 1) as f64).round() as usize
        })
        .collect();
    plan.dedup();
    Ok(plan)
}
