//! Fréchet distance between Gaussians fitted to feature sets:
//! ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2·(Σ₁Σ₂)^{1/2}), the matrix square root taken
//! through the symmetric form Σ₁^{1/2} Σ₂ Σ₁^{1/2}.

use crate::error::{Error, Result};
use crate::metrics::linalg::{sym_eig, sym_sqrt, symmetrize, trace};
use crate::tensor::{matmul, Tensor};

/// Rows of per-image features, N ≥ 2.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Tensor,
}

impl FeatureSet {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("(n, d)", format!("{:?}", features.shape())));
        }
        if features.shape()[0] < 2 {
            return Err(Error::Data(format!(
                "feature set needs at least 2 rows, got {}",
                features.shape()[0]
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numerical("non-finite features".into()));
        }
        Ok(FeatureSet { features })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn mean(&self) -> Vec<f64> {
        let (n, d) = (self.len(), self.dim());
        let mut mu = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mu.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= n as f64;
        }
        mu
    }

    /// Unbiased covariance (N−1 normalizer).
    pub fn covariance(&self) -> Tensor {
        let (n, d) = (self.len(), self.dim());
        let mu = self.mean();
        let mut cov = Tensor::zeros(&[d, d]);
        for i in 0..n {
            let row = self.features.row(i);
            for a in 0..d {
                let da = row[a] - mu[a];
                for b in a..d {
                    let v = cov.at2(a, b) + da * (row[b] - mu[b]);
                    cov.set2(a, b, v);
                }
            }
        }
        let norm = 1.0 / (n as f64 - 1.0);
        for a in 0..d {
            for b in a..d {
                let v = cov.at2(a, b) * norm;
                cov.set2(a, b, v);
                cov.set2(b, a, v);
            }
        }
        cov
    }
}

fn check_symmetric(m: &Tensor, what: &str) -> Result<()> {
    if !m.is_finite() {
        return Err(Error::Numerical(format!("non-finite entries in {what}")));
    }
    let d = m.shape()[0];
    if m.shape() != [d, d] {
        return Err(Error::shape("(d, d)", format!("{:?}", m.shape())));
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if (m.at2(i, j) - m.at2(j, i)).abs() > 1e-6 {
                return Err(Error::Numerical(format!(
                    "{what} not symmetric at ({i},{j}): {} vs {}",
                    m.at2(i, j),
                    m.at2(j, i)
                )));
            }
        }
    }
    Ok(())
}

/// Squared Fréchet distance between N(μ₁, Σ₁) and N(μ₂, Σ₂), clamped ≥ 0.
pub fn frechet_distance(
    mu1: &[f64],
    sigma1: &Tensor,
    mu2: &[f64],
    sigma2: &Tensor,
) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(Error::shape(
            format!("mean dim {}", mu1.len()),
            format!("{}", mu2.len()),
        ));
    }
    if mu1.iter().chain(mu2).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite mean".into()));
    }
    check_symmetric(sigma1, "sigma1")?;
    check_symmetric(sigma2, "sigma2")?;
    let s1 = symmetrize(sigma1);
    let s2 = symmetrize(sigma2);

    let mean_term: f64 = mu1
        .iter()
        .zip(mu2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let root1 = sym_sqrt(&s1);
    let inner = symmetrize(&matmul(&matmul(&root1, &s2), &root1));
    let (eigs, _) = sym_eig(&inner);
    let cross: f64 = eigs.iter().map(|l| l.max(0.0).sqrt()).sum();

    Ok((mean_term + trace(&s1) + trace(&s2) - 2.0 * cross).max(0.0))
}

/// Fit Gaussians to both feature sets and return their Fréchet distance.
pub fn fid(real: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    if real.dim() != generated.dim() {
        return Err(Error::shape(
            format!("feature dim {}", real.dim()),
            format!("{}", generated.dim()),
        ));
    }
    frechet_distance(
        &real.mean(),
        &real.covariance(),
        &generated.mean(),
        &generated.covariance(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn random_spd(d: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let g = Tensor::randn(&[d, d], 1.0, &mut rng);
        let mut a = crate::tensor::matmul_tn(&g, &g);
        for i in 0..d {
            let v = a.at2(i, i) + 0.05;
            a.set2(i, i, v);
        }
        a
    }

    fn eye(d: usize) -> Tensor {
        let mut m = Tensor::zeros(&[d, d]);
        for i in 0..d {
            m.set2(i, i, 1.0);
        }
        m
    }

    #[test]
    fn identical_inputs_give_zero() {
        let s = random_spd(8, 1);
        let mu = vec![0.3; 8];
        let d = frechet_distance(&mu, &s, &mu, &s).unwrap();
        assert!(d.abs() < 1e-8, "d = {d}");
    }

    #[test]
    fn identity_covariances_reduce_to_mean_norm() {
        let d = 6;
        let mu1 = vec![0.0; d];
        let mu2: Vec<f64> = (0..d).map(|i| 0.5 + i as f64 * 0.1).collect();
        let want: f64 = mu2.iter().map(|v| v * v).sum();
        let got = frechet_distance(&mu1, &eye(d), &mu2, &eye(d)).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    /// Oracle 1: diagonal covariances have the closed form
    /// Σ_i (√a_i − √b_i)² + ‖Δμ‖².
    #[test]
    fn diagonal_closed_form() {
        let d = 5;
        let a = [1.0, 2.0, 0.5, 3.0, 0.2];
        let b = [0.7, 1.1, 2.2, 0.4, 1.6];
        let mut sa = Tensor::zeros(&[d, d]);
        let mut sb = Tensor::zeros(&[d, d]);
        for i in 0..d {
            sa.set2(i, i, a[i]);
            sb.set2(i, i, b[i]);
        }
        let mu1 = vec![0.0; d];
        let mu2 = vec![1.0; d];
        let want: f64 = (0..d)
            .map(|i| (a[i].sqrt() - b[i].sqrt()).powi(2))
            .sum::<f64>()
            + d as f64;
        let got = frechet_distance(&mu1, &sa, &mu2, &sb).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    /// Oracle 2: the swapped symmetrization Σ₂^{1/2} Σ₁ Σ₂^{1/2} has the
    /// same spectrum, giving an independent route to the trace term.
    #[test]
    fn swapped_route_oracle_random_spd() {
        let s1 = random_spd(8, 11);
        let s2 = random_spd(8, 12);
        let mu = vec![0.0; 8];
        let got = frechet_distance(&mu, &s1, &mu, &s2).unwrap();

        let root2 = crate::metrics::linalg::sym_sqrt(&s2);
        let inner = symmetrize(&matmul(&matmul(&root2, &s1), &root2));
        let (eigs, _) = sym_eig(&inner);
        let cross: f64 = eigs.iter().map(|l| l.max(0.0).sqrt()).sum();
        let want = (trace(&s1) + trace(&s2) - 2.0 * cross).max(0.0);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-6, "{got} vs {want} (rel {rel})");
    }

    #[test]
    fn rejects_asymmetric_and_nan() {
        let mut bad = eye(3);
        bad.set2(0, 1, 0.5);
        let mu = vec![0.0; 3];
        assert!(frechet_distance(&mu, &bad, &mu, &eye(3)).is_err());
        let mut nan = eye(3);
        nan.set2(1, 1, f64::NAN);
        assert!(frechet_distance(&mu, &nan, &mu, &eye(3)).is_err());
    }

    #[test]
    fn fid_identical_sets_zero() {
        let mut rng = rng_from(5);
        let feats = Tensor::randn(&[40, 8], 1.0, &mut rng);
        let a = FeatureSet::new(feats.clone()).unwrap();
        let b = FeatureSet::new(feats).unwrap();
        assert!(fid(&a, &b).unwrap() < 1e-6);
    }

    #[test]
    fn fid_permutation_invariant() {
        let mut rng = rng_from(6);
        let feats = Tensor::randn(&[30, 5], 1.0, &mut rng);
        let a = FeatureSet::new(feats.clone()).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..30).map(|i| feats.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(3, 17);
        let shuffled = Tensor::new(
            vec![30, 5],
            rows.into_iter().flatten().collect(),
        );
        let b = FeatureSet::new(shuffled).unwrap();
        let other = FeatureSet::new(Tensor::randn(&[25, 5], 1.0, &mut rng)).unwrap();
        let fa = fid(&a, &other).unwrap();
        let fb = fid(&b, &other).unwrap();
        assert!((fa - fb).abs() < 1e-9);
    }

    /// Monte Carlo: N(0, I₈) vs N(μ, I₈) with ‖μ‖² = 4 has FID 4.
    #[test]
    fn fid_gaussian_monte_carlo() {
        let n = 10_000;
        let d = 8;
        let mut rng = rng_from(7);
        let shift = (4.0_f64 / d as f64).sqrt();
        let a = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut b = Tensor::randn(&[n, d], 1.0, &mut rng);
        for v in b.data_mut() {
            *v += shift;
        }
        let fa = FeatureSet::new(a).unwrap();
        let fb = FeatureSet::new(b).unwrap();
        let got = fid(&fa, &fb).unwrap();
        assert!((got - 4.0).abs() < 0.3, "fid = {got}");
    }

    #[test]
    fn fid_monotone_in_mean_shift() {
        let n = 400;
        let d = 4;
        let mut rng = rng_from(8);
        let base = Tensor::randn(&[n, d], 1.0, &mut rng);
        let real = FeatureSet::new(base.clone()).unwrap();
        let mut prev = -1.0;
        for shift in [0.5, 1.0, 2.0] {
            let mut moved = base.clone();
            for v in moved.data_mut() {
                *v += shift;
            }
            let gen = FeatureSet::new(moved).unwrap();
            let f = fid(&real, &gen).unwrap();
            assert!(f > prev);
            prev = f;
        }
    }

    #[test]
    fn tiny_sets_rejected() {
        let t = Tensor::zeros(&[1, 4]);
        assert!(FeatureSet::new(t).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn frechet_symmetry(seed1 in 0u64..500, seed2 in 500u64..1000) {
            let s1 = random_spd(5, seed1);
            let s2 = random_spd(5, seed2);
            let mu1 = vec![0.1; 5];
            let mu2 = vec![-0.4; 5];
            let ab = frechet_distance(&mu1, &s1, &mu2, &s2).unwrap();
            let ba = frechet_distance(&mu2, &s2, &mu1, &s1).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
            prop_assert!(ab >= 0.0);
        }
    }
}
