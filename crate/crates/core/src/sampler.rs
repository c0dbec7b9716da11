//! Test-time generation of diffused prompts from pure noise: ancestral
//! steps, deterministic DDIM, the DPM-Solver-2 midpoint scheme, and an
//! AMED-style distilled variant with learned per-step scalars. All samplers
//! consume x0 predictions and convert through the noising identity, so the
//! model parameterization never leaks into the stepping rules.
//!
//! NFE accounting: one unit per denoiser call. Ancestral and DDIM runs with
//! budget B evaluate at B grid points (the last one at t=1, which is the
//! final clean prediction). DPM-Solver-2 spends 2 per step; odd budgets end
//! with a single-eval clean prediction at t=1.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;
use std::time::Instant;

/// x0-prediction denoiser interface shared by the trained transformer and
/// the analytic oracles used in tests.
pub trait DenoiseModel {
    fn predict_x0(&self, noisy: &Tensor, pi: &Tensor, t: usize) -> Result<Tensor>;
}

/// Instrumented wrapper: counts actual denoiser calls.
pub struct CountingModel<'a> {
    inner: &'a dyn DenoiseModel,
    calls: Cell<usize>,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn DenoiseModel) -> Self {
        CountingModel { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl DenoiseModel for CountingModel<'_> {
    fn predict_x0(&self, noisy: &Tensor, pi: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_x0(noisy, pi, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ancestral,
    Ddim,
    Dpm2,
    Amed,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Ddim => "ddim",
            SamplerKind::Dpm2 => "dpm2",
            SamplerKind::Amed => "amed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "ddim" => Ok(SamplerKind::Ddim),
            "dpm2" => Ok(SamplerKind::Dpm2),
            "amed" => Ok(SamplerKind::Amed),
            other => Err(Error::Invalid { what: format!("unknown sampler kind {other:?}") }),
        }
    }
}

/// Learned per-step scalars of the distilled sampler: a direction scale c_n
/// and a midpoint fraction on the log-sigma scale. (1.0, 0.5) everywhere
/// reproduces DPM-Solver-2 exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AmedStepParams {
    pub c: Vec<f64>,
    pub midpoint_frac: Vec<f64>,
    pub teacher_nfe: usize,
}

impl AmedStepParams {
    pub fn dpm2_defaults(steps: usize, teacher_nfe: usize) -> Self {
        AmedStepParams { c: vec![1.0; steps], midpoint_frac: vec![0.5; steps], teacher_nfe }
    }

    pub fn steps(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.len() != self.midpoint_frac.len() {
            return Err(Error::Invalid { what: "mismatched AMED parameter lengths".into() });
        }
        for (&c, &f) in self.c.iter().zip(&self.midpoint_frac) {
            if !c.is_finite() || !(0.0 < f && f < 1.0) {
                return Err(Error::Invalid { what: format!("AMED step params c={c}, frac={f}") });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Denoise-call budget.
    pub nfe: usize,
    pub amed: Option<AmedStepParams>,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, nfe: usize) -> Self {
        SamplerConfig { kind, nfe, amed: None }
    }
}

/// Descending timestep grid from T to 1 inclusive, `points` entries,
/// approximately uniform stride.
pub fn timestep_grid(t_max: usize, points: usize) -> Result<Vec<usize>> {
    if points == 0 {
        return Err(Error::Invalid { what: "empty timestep grid".into() });
    }
    if points > t_max {
        return Err(Error::Invalid { what: format!("{points} grid points exceed T={t_max}") });
    }
    if points == 1 {
        return Ok(vec![t_max]);
    }
    let mut grid = Vec::with_capacity(points);
    for i in 0..points {
        let f = i as f64 / (points - 1) as f64;
        let t = (t_max as f64 - f * (t_max - 1) as f64).round() as usize;
        grid.push(t.clamp(1, t_max));
    }
    // enforce strict decrease after rounding
    for i in 1..points {
        if grid[i] >= grid[i - 1] {
            grid[i] = grid[i - 1] - 1;
        }
        if grid[i] == 0 {
            return Err(Error::Invalid { what: format!("grid of {points} points collapsed") });
        }
    }
    *grid.last_mut().unwrap() = 1;
    for w in grid.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Invalid { what: "grid not strictly decreasing".into() });
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Steps

/// One ancestral (stochastic) step from t toward t_next (0 means clean).
/// For the consecutive case t_next = t-1 this is the textbook rule
/// x_{t-1} = (x_t - (1-a_t)/sqrt(1-abar_t) eps) / sqrt(a_t) + sqrt(b_t) z;
/// strided targets use the effective alpha abar_t / abar_next. At the clean
/// boundary no noise is injected.
pub fn ancestral_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_step(t, t_next, schedule)?;
    let ab_t = schedule.alpha_bar(t);
    if t_next == 0 {
        // final step: exact x0 form, noiseless
        let data = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(x, e)| (x - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt())
            .collect();
        return Tensor::new(x_t.shape().to_vec(), data);
    }
    let a_eff = ab_t / schedule.alpha_bar(t_next);
    let coef = (1.0 - a_eff) / (1.0 - ab_t).sqrt();
    let sigma = (1.0 - a_eff).sqrt();
    let mut data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| (x - coef * e) / a_eff.sqrt())
        .collect();
    if let Some(z) = noise {
        if z.shape() != x_t.shape() {
            return Err(Error::Shape { op: "ancestral_step", detail: "noise shape".into() });
        }
        for (d, n) in data.iter_mut().zip(z.data()) {
            *d += sigma * n;
        }
    }
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Deterministic DDIM step to t_next (0 means alpha_bar = 1, i.e. return the
/// clean prediction): x' = sqrt(abar') x0_hat + sqrt(1 - abar') eps_hat.
pub fn ddim_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_step(t, t_next, schedule)?;
    if t_next == 0 {
        return Ok(x0_hat.detached());
    }
    let eps_hat = schedule.x0_to_eps(x_t, x0_hat, t)?;
    let ab = schedule.alpha_bar(t_next);
    let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data =
        x0_hat.data().iter().zip(eps_hat.data()).map(|(x0, e)| ca * x0 + ce * e).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

fn check_step(t: usize, t_next: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::Invalid { what: format!("step from t={t} outside 1..={}", schedule.t_max()) });
    }
    if t_next >= t {
        return Err(Error::Invalid { what: format!("step target {t_next} not below {t}") });
    }
    Ok(())
}

/// Midpoint noise level between two sigmas on the log scale; frac = 0.5 is
/// the geometric midpoint sqrt(sa * sb).
pub fn midpoint_sigma(sigma_hi: f64, sigma_lo: f64, frac: f64) -> f64 {
    sigma_hi.powf(1.0 - frac) * sigma_lo.powf(frac)
}

pub struct Dpm2Outcome {
    pub x: Tensor,
    /// Midpoint snapped onto t or t_next; the step degraded to DDIM.
    pub fell_back: bool,
}

/// One midpoint step from t to t_next (both >= 1) with direction scale `c`
/// and midpoint fraction `frac`. Costs 2 denoise calls, or 1 on fallback.
#[allow(clippy::too_many_arguments)]
pub fn dpm2_step(
    x_t: &Tensor,
    model: &dyn DenoiseModel,
    pi: &Tensor,
    t: usize,
    t_next: usize,
    c: f64,
    frac: f64,
    schedule: &NoiseSchedule,
) -> Result<Dpm2Outcome> {
    check_step(t, t_next, schedule)?;
    if t_next == 0 {
        return Err(Error::Invalid { what: "midpoint step cannot target the clean state".into() });
    }
    let x0_a = model.predict_x0(x_t, pi, t)?;

    let target = midpoint_sigma(schedule.sigma(t), schedule.sigma(t_next), frac);
    let s = schedule.nearest_step_for_sigma(target);
    if s == t || s == t_next {
        eprintln!("warning: dpm2 midpoint collided with grid (t={t}, t_next={t_next}); using ddim step");
        let x = ddim_step(x_t, &x0_a, t, t_next, schedule)?;
        return Ok(Dpm2Outcome { x, fell_back: true });
    }

    // half step to the snapped midpoint, re-evaluate there
    let x_s = ddim_step(x_t, &x0_a, t, s, schedule)?;
    let x0_b = model.predict_x0(&x_s, pi, s)?;
    let eps_b = schedule.x0_to_eps(&x_s, &x0_b, s)?;

    // full step in scaled coordinates: xbar' = xbar + c (sigma' - sigma) eps_mid
    let ab_t = schedule.alpha_bar(t);
    let ab_n = schedule.alpha_bar(t_next);
    let dsigma = schedule.sigma(t_next) - schedule.sigma(t);
    let data = x_t
        .data()
        .iter()
        .zip(eps_b.data())
        .map(|(x, e)| ab_n.sqrt() * (x / ab_t.sqrt() + c * dsigma * e))
        .collect();
    Ok(Dpm2Outcome { x: Tensor::new(x_t.shape().to_vec(), data)?, fell_back: false })
}

// ---------------------------------------------------------------------------
// Whole-trajectory sampling

pub struct SampleResult {
    pub v0: Tensor,
    /// Actual denoise-call count (the instrumented counter's value).
    pub nfe: usize,
    pub wall_secs: f64,
    pub fallbacks: usize,
}

/// Generate one diffused prompt matrix from pure noise.
pub fn sample_prompts(
    model: &dyn DenoiseModel,
    pi: &Tensor,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    if cfg.nfe == 0 {
        return Err(Error::Invalid { what: "NFE budget zero".into() });
    }
    let start = Instant::now();
    let counting = CountingModel::new(model);
    let (m, d) = shape;
    let mut x = Tensor::randn(vec![m, d], 1.0, rng);
    let mut fallbacks = 0usize;

    match cfg.kind {
        SamplerKind::Ancestral => {
            let grid = timestep_grid(schedule.t_max(), cfg.nfe)?;
            for j in 0..grid.len() {
                let t = grid[j];
                let t_next = if j + 1 < grid.len() { grid[j + 1] } else { 0 };
                let x0 = counting.predict_x0(&x, pi, t)?;
                let eps = schedule.x0_to_eps(&x, &x0, t)?;
                let noise = if t_next == 0 { None } else { Some(Tensor::randn(vec![m, d], 1.0, rng)) };
                x = ancestral_step(&x, &eps, t, t_next, schedule, noise.as_ref())?;
            }
        }
        SamplerKind::Ddim => {
            let grid = timestep_grid(schedule.t_max(), cfg.nfe)?;
            for j in 0..grid.len() {
                let t = grid[j];
                let t_next = if j + 1 < grid.len() { grid[j + 1] } else { 0 };
                let x0 = counting.predict_x0(&x, pi, t)?;
                x = ddim_step(&x, &x0, t, t_next, schedule)?;
            }
        }
        SamplerKind::Dpm2 | SamplerKind::Amed => {
            let steps = cfg.nfe / 2;
            let trailing_predict = cfg.nfe % 2 == 1;
            if steps == 0 {
                return Err(Error::Invalid { what: format!("NFE {} too small for midpoint steps", cfg.nfe) });
            }
            let params = match cfg.kind {
                SamplerKind::Amed => {
                    let p = cfg
                        .amed
                        .clone()
                        .ok_or(Error::Invalid { what: "amed sampler without step params".into() })?;
                    p.validate()?;
                    if p.steps() != steps {
                        return Err(Error::Invalid {
                            what: format!("amed has {} step params, grid needs {steps}", p.steps()),
                        });
                    }
                    p
                }
                _ => AmedStepParams::dpm2_defaults(steps, 0),
            };
            let grid = timestep_grid(schedule.t_max(), steps + 1)?;
            for j in 0..steps {
                let out = dpm2_step(
                    &x,
                    &counting,
                    pi,
                    grid[j],
                    grid[j + 1],
                    params.c[j],
                    params.midpoint_frac[j],
                    schedule,
                )?;
                x = out.x;
                fallbacks += usize::from(out.fell_back);
            }
            if trailing_predict {
                let x0 = counting.predict_x0(&x, pi, 1)?;
                x = x0;
            }
        }
    }

    Ok(SampleResult { v0: x, nfe: counting.calls(), wall_secs: start.elapsed().as_secs_f64(), fallbacks })
}

// ---------------------------------------------------------------------------
// AMED distillation

pub struct DistillOutcome {
    pub params: AmedStepParams,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Loss not halved within budget; DPM-Solver-2 defaults were kept.
    pub kept_defaults: bool,
}

/// Distill per-step (c, midpoint fraction) scalars against a DDIM teacher by
/// greedy pattern search on the terminal MSE. Deterministic given the seed;
/// the accepted iterate never regresses below the initialization.
#[allow(clippy::too_many_arguments)]
pub fn distill_amed(
    model: &dyn DenoiseModel,
    contexts: &[Tensor],
    shape: (usize, usize),
    schedule: &NoiseSchedule,
    teacher_nfe: usize,
    student_steps: usize,
    seed: u64,
    max_evals: usize,
) -> Result<DistillOutcome> {
    if contexts.is_empty() {
        return Err(Error::Invalid { what: "distillation needs at least one context".into() });
    }
    let (m, d) = shape;
    let starts: Vec<Tensor> = (0..contexts.len())
        .map(|i| Tensor::randn(vec![m, d], 1.0, &mut crate::rng::substream(seed, 0xa3d0 + i as u64)))
        .collect();

    // teacher terminals
    let mut teacher = Vec::with_capacity(contexts.len());
    let grid = timestep_grid(schedule.t_max(), teacher_nfe)?;
    for (pi, x0_start) in contexts.iter().zip(&starts) {
        let mut x = x0_start.detached();
        for j in 0..grid.len() {
            let t = grid[j];
            let t_next = if j + 1 < grid.len() { grid[j + 1] } else { 0 };
            let x0 = model.predict_x0(&x, pi, t)?;
            x = ddim_step(&x, &x0, t, t_next, schedule)?;
        }
        teacher.push(x);
    }

    let student_grid = timestep_grid(schedule.t_max(), student_steps + 1)?;
    let rollout = |params: &AmedStepParams| -> Result<f64> {
        let mut total = 0.0;
        for ((pi, x0_start), target) in contexts.iter().zip(&starts).zip(&teacher) {
            let mut x = x0_start.detached();
            for j in 0..student_steps {
                let out = dpm2_step(
                    &x,
                    model,
                    pi,
                    student_grid[j],
                    student_grid[j + 1],
                    params.c[j],
                    params.midpoint_frac[j],
                    schedule,
                )?;
                x = out.x;
            }
            total += x
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total / contexts.len() as f64)
    };

    let mut params = AmedStepParams::dpm2_defaults(student_steps, teacher_nfe);
    let initial_mse = rollout(&params)?;
    let mut best = initial_mse;
    let mut evals = 1usize;
    let mut step_c = 0.2;
    let mut step_f = 0.15;

    'outer: while evals < max_evals && step_c > 1e-3 {
        let mut improved = false;
        for i in 0..student_steps {
            for &(dc, df) in
                &[(step_c, 0.0), (-step_c, 0.0), (0.0, step_f), (0.0, -step_f)]
            {
                if evals >= max_evals {
                    break 'outer;
                }
                let mut cand = params.clone();
                cand.c[i] = (cand.c[i] + dc).clamp(0.2, 3.0);
                cand.midpoint_frac[i] = (cand.midpoint_frac[i] + df).clamp(0.05, 0.95);
                if cand == params {
                    continue;
                }
                let loss = rollout(&cand)?;
                evals += 1;
                if loss < best {
                    best = loss;
                    params = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step_c *= 0.5;
            step_f *= 0.5;
        }
    }

    // reduction target: halve the gap; otherwise keep the defaults
    let kept_defaults = best > initial_mse / 2.0 && {
        eprintln!(
            "warning: amed distillation reduced terminal MSE {initial_mse:.3e} -> {best:.3e} (< 2x); keeping dpm2 defaults"
        );
        true
    };
    if kept_defaults {
        params = AmedStepParams::dpm2_defaults(student_steps, teacher_nfe);
        best = initial_mse;
    }
    Ok(DistillOutcome { params, initial_mse, final_mse: best, kept_defaults })
}

#[cfg(test)]
pub mod oracle {
    //! Closed-form Gaussian diffusion problem: when x0 ~ N(mu, s^2 I), the
    //! posterior mean E[x0|x_t] and the probability-flow solution are exact,
    //! so every sampler's terminal error is computable without a model.

    use super::*;

    pub struct GaussianOracle<'s> {
        pub mu: Tensor,
        pub s2: f64,
        pub schedule: &'s NoiseSchedule,
    }

    impl DenoiseModel for GaussianOracle<'_> {
        fn predict_x0(&self, noisy: &Tensor, _pi: &Tensor, t: usize) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(t);
            let coef = ab.sqrt() * self.s2 / (ab * self.s2 + (1.0 - ab));
            let data = noisy
                .data()
                .iter()
                .zip(self.mu.data())
                .map(|(x, m)| m + coef * (x - ab.sqrt() * m))
                .collect();
            Tensor::new(noisy.shape().to_vec(), data)
        }
    }

    impl GaussianOracle<'_> {
        /// Exact probability-flow solution in scaled coordinates from
        /// sigma_from down to sigma_to:
        /// xbar' - mu = (xbar - mu) sqrt((s^2 + sigma_to^2)/(s^2 + sigma_from^2)).
        pub fn exact_xbar(&self, xbar: &Tensor, sigma_from: f64, sigma_to: f64) -> Tensor {
            let k = ((self.s2 + sigma_to * sigma_to) / (self.s2 + sigma_from * sigma_from)).sqrt();
            let data = xbar.data().iter().zip(self.mu.data()).map(|(x, m)| m + k * (x - m)).collect();
            Tensor::new(xbar.shape().to_vec(), data).unwrap()
        }

        /// Reference terminal output for a sampler that integrates to t=1 and
        /// then emits the clean prediction there.
        pub fn exact_terminal_with_predict(&self, x_start: &Tensor) -> Tensor {
            let s = self.schedule;
            let xbar0 = scale(x_start, 1.0 / s.alpha_bar(s.t_max()).sqrt());
            let xbar1 = self.exact_xbar(&xbar0, s.sigma(s.t_max()), s.sigma(1));
            let x1 = scale(&xbar1, s.alpha_bar(1).sqrt());
            self.predict_x0(&x1, &Tensor::zeros(vec![1]), 1).unwrap()
        }

        /// Reference terminal for a sampler whose last state is x at t=1.
        pub fn exact_terminal_state(&self, x_start: &Tensor) -> Tensor {
            let s = self.schedule;
            let xbar0 = scale(x_start, 1.0 / s.alpha_bar(s.t_max()).sqrt());
            let xbar1 = self.exact_xbar(&xbar0, s.sigma(s.t_max()), s.sigma(1));
            scale(&xbar1, s.alpha_bar(1).sqrt())
        }
    }

    pub fn scale(x: &Tensor, k: f64) -> Tensor {
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| k * v).collect()).unwrap()
    }

    pub fn l2_dist(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}
