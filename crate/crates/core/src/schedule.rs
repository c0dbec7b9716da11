//! Discrete diffusion bookkeeping: the variance schedule, cumulative
//! products, single-step forward noising, and the continuous noise level
//! sigma(t) = sqrt((1 - alpha_bar) / alpha_bar) used by the ODE samplers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule, endpoints inclusive. Timesteps are 1-based:
    /// t in 1..=t_max.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Invalid { what: "schedule needs at least one step".into() });
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid {
                what: format!("beta range ({beta_start}, {beta_end}) outside 0 < start <= end < 1"),
            });
        }
        let mut beta = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            beta.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = alpha_bar.iter().map(|&ab| ((1.0 - ab) / ab).sqrt()).collect();
        for w in alpha_bar.windows(2) {
            debug_assert!(w[1] < w[0], "alpha_bar must be strictly decreasing");
        }
        Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar, sigma })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::Invalid { what: format!("timestep {t} outside 1..={}", self.t_max) });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Continuous noise level of step t. Strictly increasing in t.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Discrete step whose sigma is closest to the target; ties resolve to
    /// the smaller step.
    pub fn nearest_step_for_sigma(&self, target: f64) -> usize {
        let mut best = 1;
        let mut best_d = f64::INFINITY;
        for t in 1..=self.t_max {
            let d = (self.sigma(t) - target).abs();
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        best
    }

    /// Single-step forward noising: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
    pub fn forward_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape {
                op: "forward_noise",
                detail: format!("{:?} vs {:?}", x0.shape(), eps.shape()),
            });
        }
        let ab = self.alpha_bar(t);
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| ca * x + ce * e).collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Invert the single-step identity: eps = (x_t - sqrt(alpha_bar_t) x0) / sqrt(1 - alpha_bar_t).
    pub fn x0_to_eps(&self, x_t: &Tensor, x0_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if x_t.shape() != x0_hat.shape() {
            return Err(Error::Shape {
                op: "x0_to_eps",
                detail: format!("{:?} vs {:?}", x_t.shape(), x0_hat.shape()),
            });
        }
        let ab = self.alpha_bar(t);
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t.data().iter().zip(x0_hat.data()).map(|(xt, x0)| (xt - ca * x0) / ce).collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded, substream};

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta_start() {
        let s = default_schedule();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_sigma_increasing() {
        let s = default_schedule();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
    }

    #[test]
    fn alpha_bar_matches_independent_product_loop() {
        // brute-force product oracle, recomputed from scratch
        let s = default_schedule();
        let mut prod = 1.0;
        for t in 1..=100usize {
            let beta = 1e-4 + (0.02 - 1e-4) * ((t - 1) as f64 / 99.0);
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-12);
    }

    #[test]
    fn schedule_tables_are_reproducible_bit_exactly() {
        let a = default_schedule();
        let b = default_schedule();
        for t in 1..=100 {
            assert_eq!(a.alpha_bar(t).to_bits(), b.alpha_bar(t).to_bits());
            assert_eq!(a.sigma(t).to_bits(), b.sigma(t).to_bits());
        }
    }

    #[test]
    fn invalid_beta_range_is_rejected() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 0.05).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_noise_with_zero_eps_scales_by_sqrt_alpha_bar() {
        let s = default_schedule();
        let x0 = Tensor::randn(vec![4, 8], 1.0, &mut seeded(1));
        let eps = Tensor::zeros(vec![4, 8]);
        let t = 37;
        let y = s.forward_noise(&x0, t, &eps).unwrap();
        let c = s.alpha_bar(t).sqrt();
        for (yi, xi) in y.data().iter().zip(x0.data()) {
            assert!((yi - c * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_approaches_pure_noise_when_alpha_bar_vanishes() {
        // with T=1000 the terminal alpha_bar is ~4e-5, so x_t ~ eps
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        let x0 = Tensor::randn(vec![4, 8], 1.0, &mut seeded(2));
        let eps = Tensor::randn(vec![4, 8], 1.0, &mut seeded(3));
        let y = s.forward_noise(&x0, 1000, &eps).unwrap();
        for (yi, ei) in y.data().iter().zip(eps.data()) {
            assert!((yi - ei).abs() < 0.02, "{yi} vs {ei}");
        }
    }

    #[test]
    fn forward_noise_is_linear_in_both_arguments() {
        let s = default_schedule();
        let x = Tensor::randn(vec![3, 5], 1.0, &mut seeded(4));
        let e = Tensor::randn(vec![3, 5], 1.0, &mut seeded(5));
        let t = 60;
        let y1 = s.forward_noise(&x, t, &e).unwrap();
        let x2 = Tensor::new(vec![3, 5], x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let e2 = Tensor::new(vec![3, 5], e.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let y2 = s.forward_noise(&x2, t, &e2).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_noise_moments_match_over_many_draws() {
        // Monte Carlo moment oracle: mean -> sqrt(ab) x0, var -> 1 - ab,
        // both within 3 standard errors over 10^4 draws.
        let s = default_schedule();
        let x0 = Tensor::randn(vec![4, 16], 1.0, &mut seeded(6));
        let n_draws = 10_000usize;
        for &t in &[1usize, 50, 100] {
            let ab = s.alpha_bar(t);
            let dim = x0.numel();
            let mut sum = vec![0.0; dim];
            let mut sum_sq_dev = 0.0;
            for i in 0..n_draws {
                let eps =
                    Tensor::new(vec![4, 16], normal_vec(&mut substream(900 + t as u64, i as u64), dim, 1.0))
                        .unwrap();
                let y = s.forward_noise(&x0, t, &eps).unwrap();
                for (j, v) in y.data().iter().enumerate() {
                    sum[j] += v;
                    let mu = ab.sqrt() * x0.data()[j];
                    sum_sq_dev += (v - mu) * (v - mu);
                }
            }
            // aggregate mean deviation across all entries
            let total: f64 = sum
                .iter()
                .enumerate()
                .map(|(j, sj)| sj / n_draws as f64 - ab.sqrt() * x0.data()[j])
                .sum::<f64>()
                / dim as f64;
            let se_mean = ((1.0 - ab) / (n_draws * dim) as f64).sqrt();
            assert!(
                total.abs() <= 3.0 * se_mean,
                "t={t}: mean dev {total:.3e} > 3se {:.3e}",
                3.0 * se_mean
            );

            let var = sum_sq_dev / (n_draws * dim) as f64;
            let se_var = (1.0 - ab) * (2.0 / ((n_draws * dim) as f64 - 1.0)).sqrt();
            assert!(
                (var - (1.0 - ab)).abs() <= 3.0 * se_var,
                "t={t}: var {var:.6} vs {:.6} (3se {:.3e})",
                1.0 - ab,
                3.0 * se_var
            );
        }
    }

    #[test]
    fn x0_to_eps_recovers_the_exact_noise() {
        let s = default_schedule();
        let x0 = Tensor::randn(vec![4, 8], 1.0, &mut seeded(7));
        let eps = Tensor::randn(vec![4, 8], 1.0, &mut seeded(8));
        for t in [1usize, 13, 50, 99, 100] {
            let xt = s.forward_noise(&x0, t, &eps).unwrap();
            let got = s.x0_to_eps(&xt, &x0, t).unwrap();
            for (g, e) in got.data().iter().zip(eps.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noising_round_trips_for_random_tensors() {
        for i in 0..50u64 {
            let s = default_schedule();
            let x0 = Tensor::randn(vec![2, 6], 1.5, &mut substream(10, i));
            let eps = Tensor::randn(vec![2, 6], 1.0, &mut substream(11, i));
            let t = 1 + (i as usize * 7) % 100;
            let xt = s.forward_noise(&x0, t, &eps).unwrap();
            let back = s.x0_to_eps(&xt, &x0, t).unwrap();
            for (g, e) in back.data().iter().zip(eps.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_timesteps_are_rejected() {
        let s = default_schedule();
        let x = Tensor::zeros(vec![2, 2]);
        assert!(s.forward_noise(&x, 0, &x).is_err());
        assert!(s.forward_noise(&x, 101, &x).is_err());
        assert!(s.x0_to_eps(&x, &x, 0).is_err());
        assert!(s.x0_to_eps(&x, &x, 101).is_err());
    }
}
