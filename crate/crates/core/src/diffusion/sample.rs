//! Samplers: stochastic ancestral reverse diffusion and a deterministic
//! second-order solver in log-SNR time.
//!
//! Both condition on clean text by holding the text branch at timestep 0;
//! `y0` is read-only throughout.

use rand_chacha::ChaCha8Rng;

use crate::backbone::model::JointNoisePredictor;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Anything that predicts the image-branch noise ε̂^x(x_t, y₀, t_x, t_y).
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &Tensor, y0: &Tensor, t_x: usize, t_y: usize) -> Result<Tensor>;
}

/// The trained joint model, conditioned by construction via t_y = 0.
pub struct ModelPredictor<'a> {
    pub model: &'a JointNoisePredictor,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&self, x_t: &Tensor, y0: &Tensor, t_x: usize, t_y: usize) -> Result<Tensor> {
        let (eps_x, _) = self.model.forward(x_t, y0, t_x, t_y)?;
        Ok(eps_x)
    }
}

/// Analytic ε-predictor for data x₀ ~ N(μ, σ²I):
/// ε̂*(x_t, t) = √(1−ᾱ_t)·(x_t − √ᾱ_t·μ) / (ᾱ_t·σ² + 1 − ᾱ_t).
pub struct GaussianOracle<'a> {
    pub sched: &'a NoiseSchedule,
    pub mu: Tensor,
    pub sigma2: f64,
}

impl NoisePredictor for GaussianOracle<'_> {
    fn predict(&self, x_t: &Tensor, _y0: &Tensor, t_x: usize, _t_y: usize) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(t_x);
        let denom = ab * self.sigma2 + 1.0 - ab;
        let scale = (1.0 - ab).sqrt() / denom;
        let mut out = x_t.clone();
        out.axpy(&self.mu, -ab.sqrt());
        out.scale(scale);
        Ok(out)
    }
}

/// Noise scale σ_t of the ancestral step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// σ_t = √β_t (posterior upper bound).
    SqrtBeta,
    /// σ_t = √(β_t(1−ᾱ_{t−1})/(1−ᾱ_t)) (true posterior).
    PosteriorTilde,
    /// Zero-noise limit of the ancestral family: the deterministic
    /// x̂₀-projection update (no σ_t z term).
    Deterministic,
}

fn check_state(x: &Tensor, t: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite sampler state at timestep {t}"
        )))
    }
}

/// Stochastic reverse diffusion from x_T ~ N(0, I) down to x₀:
/// x_{t−1} = (x_t − (β_t/√(1−ᾱ_t))·ε̂)/√α_t + σ_t·z, with z = 0 at t = 1.
pub fn sample_ancestral(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    y0: &Tensor,
    shape: &[usize],
    sigma_mode: SigmaMode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(shape.to_vec(), rng::normal_vec(rng, n));
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = predictor.predict(&x, y0, t, 0)?;
        if eps_hat.shape() != shape {
            return Err(Error::shape(
                format!("{shape:?}"),
                format!("{:?}", eps_hat.shape()),
            ));
        }
        let ab = sched.alpha_bar(t);
        match sigma_mode {
            SigmaMode::SqrtBeta | SigmaMode::PosteriorTilde => {
                let beta = sched.beta(t);
                let coef = beta / (1.0 - ab).sqrt();
                x.axpy(&eps_hat, -coef);
                x.scale(1.0 / sched.alpha(t).sqrt());
                if t > 1 {
                    let sigma = match sigma_mode {
                        SigmaMode::SqrtBeta => beta.sqrt(),
                        SigmaMode::PosteriorTilde => {
                            let ab_prev = sched.alpha_bar(t - 1);
                            (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
                        }
                        SigmaMode::Deterministic => unreachable!(),
                    };
                    let z = Tensor::new(shape.to_vec(), rng::normal_vec(rng, n));
                    x.axpy(&z, sigma);
                }
            }
            SigmaMode::Deterministic => {
                // x̂₀ projection, then re-noise deterministically to t−1
                let ab_prev = sched.alpha_bar(t - 1);
                let mut x0_hat = x.clone();
                x0_hat.axpy(&eps_hat, -(1.0 - ab).sqrt());
                x0_hat.scale(1.0 / ab.sqrt());
                x = x0_hat.scaled(ab_prev.sqrt());
                x.axpy(&eps_hat, (1.0 - ab_prev).sqrt());
            }
        }
        check_state(&x, t - 1)?;
    }
    Ok(x)
}

/// Solver order for `sample_dpm_solver`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpmOrder {
    One,
    Two,
}

/// Nearest discrete timestep to a target log-SNR value. λ is strictly
/// decreasing in t, so binary search then compare neighbors.
fn nearest_t(sched: &NoiseSchedule, lambda: f64) -> usize {
    let (mut lo, mut hi) = (1usize, sched.t_max());
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if sched.lambda(mid) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (sched.lambda(lo) - lambda).abs() <= (sched.lambda(hi) - lambda).abs() {
        lo
    } else {
        hi
    }
}

/// Descending timestep grid for the solver, ending at 0. Noisy nodes are
/// uniform in λ between λ(T) and λ(1), snapped to the discrete grid;
/// `steps >= T` selects every timestep.
fn solver_grid(sched: &NoiseSchedule, steps: usize) -> Vec<usize> {
    let t_max = sched.t_max();
    if steps >= t_max {
        return (0..=t_max).rev().collect();
    }
    if steps == 1 {
        return vec![t_max, 0];
    }
    let l_start = sched.lambda(t_max);
    let l_end = sched.lambda(1);
    let mut grid = vec![t_max];
    for k in 1..steps {
        let lam = l_start + (l_end - l_start) * k as f64 / (steps - 1) as f64;
        let t = nearest_t(sched, lam);
        if t < *grid.last().unwrap() {
            grid.push(t);
        }
    }
    if *grid.last().unwrap() != 1 {
        grid.push(1);
    }
    grid.push(0);
    grid
}

/// Deterministic fast sampling in log-SNR time. Second order uses one
/// midpoint model call per transition; the final transition to t = 0 is
/// the exact denoise x̂₀ = (x − √(1−ᾱ)·ε̂)/√ᾱ.
pub fn sample_dpm_solver(
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    y0: &Tensor,
    shape: &[usize],
    steps: usize,
    order: DpmOrder,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::Data("dpm solver needs steps >= 1".into()));
    }
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(shape.to_vec(), rng::normal_vec(rng, n));
    let grid = solver_grid(sched, steps);
    let alpha_of = |t: usize| sched.alpha_bar(t).sqrt();
    let sigma_of = |t: usize| (1.0 - sched.alpha_bar(t)).sqrt();

    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let eps_a = predictor.predict(&x, y0, a, 0)?;
        if b == 0 {
            let mut x0 = x.clone();
            x0.axpy(&eps_a, -sigma_of(a));
            x0.scale(1.0 / alpha_of(a));
            x = x0;
            check_state(&x, 0)?;
            break;
        }
        let (la, lb) = (sched.lambda(a), sched.lambda(b));
        let h = lb - la;
        let ratio = alpha_of(b) / alpha_of(a);
        let use_second = matches!(order, DpmOrder::Two);
        let mid = if use_second {
            let lm = la + 0.5 * h;
            let s = nearest_t(sched, lm);
            (s < a && s > b).then_some(s)
        } else {
            None
        };
        match mid {
            Some(s) => {
                let ls = sched.lambda(s);
                let r = (ls - la) / h;
                // midpoint state u at s
                let mut u = x.scaled(alpha_of(s) / alpha_of(a));
                u.axpy(&eps_a, -sigma_of(s) * ((r * h).exp() - 1.0));
                check_state(&u, s)?;
                let eps_s = predictor.predict(&u, y0, s, 0)?;
                // D = (1 − 1/2r)·ε̂_a + (1/2r)·ε̂_s
                let w_a = 1.0 - 1.0 / (2.0 * r);
                let w_s = 1.0 / (2.0 * r);
                let mut d = eps_a.scaled(w_a);
                d.axpy(&eps_s, w_s);
                x.scale(ratio);
                x.axpy(&d, -sigma_of(b) * (h.exp() - 1.0));
            }
            None => {
                x.scale(ratio);
                x.axpy(&eps_a, -sigma_of(b) * (h.exp() - 1.0));
            }
        }
        check_state(&x, b)?;
    }
    Ok(x)
}

/// Model evaluations a solver run will make (used to size eval budgets).
pub fn dpm_solver_calls(sched: &NoiseSchedule, steps: usize, order: DpmOrder) -> usize {
    let grid = solver_grid(sched, steps);
    let mut calls = 0;
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        calls += 1;
        if b != 0 && matches!(order, DpmOrder::Two) {
            let h = sched.lambda(b) - sched.lambda(a);
            let s = nearest_t(sched, sched.lambda(a) + 0.5 * h);
            if s < a && s > b {
                calls += 1;
            }
        }
    }
    calls
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::rng::rng_from;

    struct CountingOracle<'a> {
        inner: GaussianOracle<'a>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl NoisePredictor for CountingOracle<'_> {
        fn predict(&self, x: &Tensor, y: &Tensor, tx: usize, ty: usize) -> Result<Tensor> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            self.inner.predict(x, y, tx, ty)
        }
    }

    #[test]
    fn grid_full_when_steps_ge_t() {
        let sched = make_schedule(10, 1e-3, 0.1).unwrap();
        let grid = solver_grid(&sched, 10);
        assert_eq!(grid, vec![10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        let grid2 = solver_grid(&sched, 50);
        assert_eq!(grid, grid2);
    }

    #[test]
    fn grid_single_step() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        assert_eq!(solver_grid(&sched, 1), vec![100, 0]);
    }

    #[test]
    fn grid_descending_with_endpoints() {
        let sched = make_schedule(200, 5e-4, 0.1).unwrap();
        let grid = solver_grid(&sched, 50);
        assert_eq!(*grid.first().unwrap(), 200);
        assert_eq!(*grid.last().unwrap(), 0);
        assert_eq!(grid[grid.len() - 2], 1);
        for w in grid.windows(2) {
            assert!(w[0] > w[1], "grid not descending: {grid:?}");
        }
    }

    #[test]
    fn single_step_makes_one_model_call() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let oracle = CountingOracle {
            inner: GaussianOracle {
                sched: &sched,
                mu: Tensor::filled(&[4], 0.5),
                sigma2: 1.0,
            },
            calls: Default::default(),
        };
        let y0 = Tensor::zeros(&[1]);
        let mut rng = rng_from(5);
        sample_dpm_solver(&oracle, &sched, &y0, &[4], 1, DpmOrder::Two, &mut rng).unwrap();
        assert_eq!(oracle.calls.load(std::sync::atomic::Ordering::Relaxed), 1);
    }

    #[test]
    fn ancestral_t1_closed_form() {
        // T = 1: x₀ = (x₁ − (β₁/√(1−ᾱ₁))·ε̂)/√α₁ with z = 0.
        let sched = make_schedule(1, 0.04, 0.04).unwrap();
        struct Fixed(Tensor);
        impl NoisePredictor for Fixed {
            fn predict(&self, _: &Tensor, _: &Tensor, _: usize, _: usize) -> Result<Tensor> {
                Ok(self.0.clone())
            }
        }
        let eps_hat = Tensor::filled(&[3], 0.3);
        let pred = Fixed(eps_hat.clone());
        let y0 = Tensor::zeros(&[1]);
        let mut rng = rng_from(11);
        let x0 = sample_ancestral(
            &pred,
            &sched,
            &y0,
            &[3],
            SigmaMode::SqrtBeta,
            &mut rng,
        )
        .unwrap();
        // replay the x_T draw
        let mut rng2 = rng_from(11);
        let x1 = Tensor::new(vec![3], crate::rng::normal_vec(&mut rng2, 3));
        let ab = sched.alpha_bar(1);
        let mut want = x1.clone();
        want.axpy(&eps_hat, -sched.beta(1) / (1.0 - ab).sqrt());
        want.scale(1.0 / sched.alpha(1).sqrt());
        for (a, b) in x0.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fixed_seed_bit_identical() {
        let sched = make_schedule(40, 1e-3, 0.2).unwrap();
        let mu = Tensor::filled(&[6], 1.0);
        let oracle = GaussianOracle {
            sched: &sched,
            mu,
            sigma2: 0.5,
        };
        let y0 = Tensor::zeros(&[1]);
        let a = sample_ancestral(&oracle, &sched, &y0, &[6], SigmaMode::SqrtBeta, &mut rng_from(3))
            .unwrap();
        let b = sample_ancestral(&oracle, &sched, &y0, &[6], SigmaMode::SqrtBeta, &mut rng_from(3))
            .unwrap();
        assert_eq!(a, b);
        let c =
            sample_dpm_solver(&sched_oracle(&sched), &sched, &y0, &[6], 10, DpmOrder::Two, &mut rng_from(4))
                .unwrap();
        let d =
            sample_dpm_solver(&sched_oracle(&sched), &sched, &y0, &[6], 10, DpmOrder::Two, &mut rng_from(4))
                .unwrap();
        assert_eq!(c, d);
    }

    fn sched_oracle(sched: &NoiseSchedule) -> GaussianOracle<'_> {
        GaussianOracle {
            sched,
            mu: Tensor::filled(&[6], 1.0),
            sigma2: 0.5,
        }
    }

    /// First-order solver on the full grid reproduces the deterministic
    /// ancestral trajectory.
    #[test]
    fn dpm1_full_grid_matches_deterministic_ancestral() {
        let sched = make_schedule(200, 5e-4, 0.1).unwrap();
        let mu = Tensor::filled(&[5], 0.8);
        let oracle = GaussianOracle {
            sched: &sched,
            mu,
            sigma2: 0.36,
        };
        let y0 = Tensor::zeros(&[1]);
        let a = sample_ancestral(
            &oracle,
            &sched,
            &y0,
            &[5],
            SigmaMode::Deterministic,
            &mut rng_from(17),
        )
        .unwrap();
        let b = sample_dpm_solver(
            &oracle,
            &sched,
            &y0,
            &[5],
            200,
            DpmOrder::One,
            &mut rng_from(17),
        )
        .unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    /// Gaussian-oracle statistics for all samplers on a reduced chain count
    /// (the full 10^4-chain version runs in the acceptance suite).
    #[test]
    fn oracle_statistics_smoke() {
        let sched = make_schedule(300, 3e-4, 0.07).unwrap();
        let mu_val = 1.2;
        let sigma2 = 0.64;
        let mu = Tensor::filled(&[4], mu_val);
        let oracle = GaussianOracle {
            sched: &sched,
            mu,
            sigma2,
        };
        let y0 = Tensor::zeros(&[1]);
        let chains = 2000;
        for which in ["ancestral", "dpm"] {
            let mut sum = vec![0.0; 4];
            let mut sumsq = vec![0.0; 4];
            for c in 0..chains {
                let mut r = rng_from(1000 + c);
                let x = match which {
                    "ancestral" => sample_ancestral(
                        &oracle,
                        &sched,
                        &y0,
                        &[4],
                        SigmaMode::SqrtBeta,
                        &mut r,
                    )
                    .unwrap(),
                    _ => sample_dpm_solver(
                        &oracle,
                        &sched,
                        &y0,
                        &[4],
                        50,
                        DpmOrder::Two,
                        &mut r,
                    )
                    .unwrap(),
                };
                for i in 0..4 {
                    sum[i] += x.data()[i];
                    sumsq[i] += x.data()[i] * x.data()[i];
                }
            }
            for i in 0..4 {
                let mean = sum[i] / chains as f64;
                let var = sumsq[i] / chains as f64 - mean * mean;
                assert!(
                    (mean - mu_val).abs() < 6.0 * (sigma2.sqrt() / (chains as f64).sqrt()),
                    "{which} mean[{i}] = {mean}"
                );
                assert!(
                    (var - sigma2).abs() / sigma2 < 0.10,
                    "{which} var[{i}] = {var}"
                );
            }
        }
    }

    #[test]
    fn y0_never_perturbed() {
        let sched = make_schedule(30, 1e-3, 0.1).unwrap();
        let oracle = GaussianOracle {
            sched: &sched,
            mu: Tensor::filled(&[4], 0.0),
            sigma2: 1.0,
        };
        let y0 = Tensor::filled(&[7], 0.123);
        let before = y0.clone();
        let _ = sample_ancestral(&oracle, &sched, &y0, &[4], SigmaMode::SqrtBeta, &mut rng_from(2))
            .unwrap();
        let _ = sample_dpm_solver(&oracle, &sched, &y0, &[4], 5, DpmOrder::Two, &mut rng_from(2))
            .unwrap();
        assert_eq!(y0, before);
    }

    #[test]
    fn nonfinite_state_reports_step() {
        let sched = make_schedule(10, 1e-3, 0.1).unwrap();
        struct Bad;
        impl NoisePredictor for Bad {
            fn predict(&self, x: &Tensor, _: &Tensor, _: usize, _: usize) -> Result<Tensor> {
                Ok(Tensor::filled(x.shape(), f64::NAN))
            }
        }
        let y0 = Tensor::zeros(&[1]);
        let err = sample_ancestral(&Bad, &sched, &y0, &[2], SigmaMode::SqrtBeta, &mut rng_from(1))
            .unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("timestep"));
    }
}
