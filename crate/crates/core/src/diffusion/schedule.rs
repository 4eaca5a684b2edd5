//! Noise schedule: β_t, α_t, ᾱ_t for t = 1..T, with the t = 0 convention
//! ᾱ_0 = 1 (clean data).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// Standard 1000-step linear schedule.
    pub fn reference() -> Self {
        ScheduleConfig {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// Short schedule for desk runs. β_end is raised so that ᾱ_T stays
    /// near zero despite the 5x shorter horizon; otherwise the terminal
    /// state is far from the N(0, I) prior and sampling is biased.
    pub fn desk() -> Self {
        ScheduleConfig {
            t_max: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    /// beta[t-1] is β_t for t in 1..=T.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    cfg: ScheduleConfig,
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn config(&self) -> ScheduleConfig {
        self.cfg
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "t={t} out of range");
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "t={t} out of range");
        self.alpha[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max(), "t={t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// log-SNR time λ_t = log(√ᾱ_t / √(1 − ᾱ_t)); +∞ at t = 0.
    pub fn lambda(&self, t: usize) -> f64 {
        if t == 0 {
            f64::INFINITY
        } else {
            let ab = self.alpha_bar(t);
            0.5 * (ab.ln() - (1.0 - ab).ln())
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::Data(format!(
                "timestep {t} out of range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// Linear β interpolation over t = 1..T; ᾱ by running product.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Data("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Data(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        cfg: ScheduleConfig {
            t_max,
            beta_start,
            beta_end,
        },
    })
}

/// √ᾱ_t · z₀ + √(1 − ᾱ_t) · ε. Accepts t = 0 (identity).
pub fn forward_noise(sched: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if t > sched.t_max() {
        return Err(Error::Data(format!(
            "timestep {t} out of range 0..={}",
            sched.t_max()
        )));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape(
            format!("{:?}", z0.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.scaled(sa);
    out.axpy(eps, sb);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn first_entry_is_one_minus_beta1() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    /// Extended-precision oracle: the running product recomputed with
    /// Kahan-style compensation in two pieces (log-domain).
    #[test]
    fn terminal_alpha_bar_matches_extended_precision_product() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut log_sum = 0.0_f64;
        let mut comp = 0.0_f64;
        for t in 1..=1000 {
            let term = (1.0 - s.beta(t)).ln();
            let y = term - comp;
            let sum = log_sum + y;
            comp = (sum - log_sum) - y;
            log_sum = sum;
        }
        let oracle = log_sum.exp();
        let rel = (s.alpha_bar(1000) - oracle).abs() / oracle;
        assert!(rel < 1e-7, "rel error {rel}");
        // the spec's reference value
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() / 4.04e-5 < 1e-2);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.01).unwrap();
        assert_eq!(s.t_max(), 1);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn recursion_exact() {
        let s = make_schedule(500, 1e-4, 0.05).unwrap();
        for t in 1..=500 {
            let lhs = s.alpha_bar(t);
            let rhs = s.alpha_bar(t - 1) * s.alpha(t);
            assert!((lhs - rhs).abs() <= 1e-12, "t={t}");
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
    }

    #[test]
    fn snr_strictly_decreasing() {
        let s = make_schedule(300, 1e-4, 0.04).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..=300 {
            let snr = s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            assert!(snr < prev, "t={t}");
            prev = snr;
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn forward_noise_identity_at_t0() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let mut rng = rng_from(1);
        let z = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let e = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let out = forward_noise(&s, &z, 0, &e).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn forward_noise_zero_signal() {
        let s = make_schedule(10, 1e-2, 0.2).unwrap();
        let mut rng = rng_from(2);
        let z = Tensor::zeros(&[3, 3]);
        let e = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let out = forward_noise(&s, &z, 5, &e).unwrap();
        let sb = (1.0 - s.alpha_bar(5)).sqrt();
        for (o, ev) in out.data().iter().zip(e.data()) {
            assert!((o - sb * ev).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_is_linear() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let mut rng = rng_from(3);
        let z1 = Tensor::randn(&[5], 1.0, &mut rng);
        let z2 = Tensor::randn(&[5], 1.0, &mut rng);
        let e = Tensor::randn(&[5], 1.0, &mut rng);
        let sum = forward_noise(&s, &z1.add(&z2), 7, &e).unwrap();
        let parts = forward_noise(&s, &z1, 7, &e)
            .unwrap()
            .add(&forward_noise(&s, &z2, 7, &Tensor::zeros(&[5])).unwrap());
        for (a, b) in sum.data().iter().zip(parts.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Monte Carlo oracle: Var[forward_noise] = 1 − ᾱ_t for fixed z₀.
    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = make_schedule(50, 1e-3, 0.08).unwrap();
        let mut rng = rng_from(4);
        let z = Tensor::filled(&[1], 0.7);
        let t = 30;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let e = Tensor::randn(&[1], 1.0, &mut rng);
            let v = forward_noise(&s, &z, t, &e).unwrap().data()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() / want < 0.02, "var {var} want {want}");
    }

    #[test]
    fn out_of_range_t_is_error() {
        let s = make_schedule(10, 1e-3, 0.02).unwrap();
        let z = Tensor::zeros(&[2]);
        assert!(forward_noise(&s, &z, 11, &z.clone()).is_err());
    }
}
