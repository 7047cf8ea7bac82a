//! Latent-space denoising diffusion: noise schedule, closed-form forward
//! corruption, a small noise-prediction network, the reweighted sample
//! loss, and the ancestral reverse chain.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamSet, Tape, TapeError, Var};
use crate::matrix::Matrix;
use crate::vgae::sample_noise;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: need 0 < beta_start <= beta_end < 1 and T >= 1, got T={t}, start={start}, end={end}")]
    BadSchedule { t: usize, start: f64, end: f64 },
    #[error("diffusion step {t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// The beta_t noise levels with alpha_t = 1 - beta_t and their running
/// product alpha_bar_t. Steps are 1-based.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear interpolation of beta from `beta_start` to `beta_end` over
    /// `t_steps` steps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_steps < 1 || beta_start <= 0.0 || beta_end < beta_start || beta_end >= 1.0 {
            return Err(DiffusionError::BadSchedule {
                t: t_steps,
                start: beta_start,
                end: beta_end,
            });
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut running = 1.0;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// alpha_bar at t-1, defined as 1 for t = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }
}

/// Closed-form forward corruption to step `t`:
/// `sqrt(alpha_bar_t) e0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(
    e0: &Matrix,
    t: usize,
    eps: &Matrix,
    schedule: &DiffusionSchedule,
) -> Result<Matrix, DiffusionError> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(e0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt())))
}

/// Tape version of [`q_sample`]; gradient flows into `e0` only.
pub fn q_sample_tape(
    tape: &Tape,
    e0: Var,
    t: usize,
    eps: &Matrix,
    schedule: &DiffusionSchedule,
) -> Result<Var, DiffusionError> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let noised = tape.input(eps.scale((1.0 - ab).sqrt()));
    Ok(tape.add(tape.scale(e0, ab.sqrt()), noised)?)
}

/// Two-layer noise-prediction perceptron with a sinusoidal time embedding
/// added to the hidden pre-activation; hidden width is twice the latent
/// width and the nonlinearity is x * sigmoid(x).
pub struct Denoiser {
    pub w_in: ParamId,
    pub w_time: ParamId,
    pub w_out: ParamId,
    dim: usize,
    hidden: usize,
    t_max: usize,
}

impl Denoiser {
    pub fn init(
        params: &mut ParamSet,
        dim: usize,
        t_max: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = 2 * dim;
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w_in = params.add("denoiser.w_in", draw(dim, hidden));
        let w_time = params.add("denoiser.w_time", draw(dim, hidden));
        let w_out = params.add("denoiser.w_out", draw(hidden, dim));
        Self {
            w_in,
            w_time,
            w_out,
            dim,
            hidden,
            t_max,
        }
    }

    /// Sinusoidal embedding of a timestep, one row of width `dim`.
    fn time_embedding(&self, t: usize) -> Matrix {
        let mut row = vec![0.0; self.dim];
        let half = (self.dim / 2).max(1);
        for k in 0..half {
            let freq = (t as f64) * (10_000f64).powf(-(k as f64) / half as f64);
            row[2 * k] = freq.sin();
            if 2 * k + 1 < self.dim {
                row[2 * k + 1] = freq.cos();
            }
        }
        Matrix::from_vec(1, self.dim, row)
    }

    /// Differentiable forward pass predicting the injected noise.
    pub fn predict_tape(
        &self,
        tape: &Tape,
        bound: &[Var],
        e_t: Var,
        t: usize,
    ) -> Result<Var, TapeError> {
        let rows = tape.value(e_t).rows();
        let temb = Matrix::filled(rows, 1, 1.0).matmul(&self.time_embedding(t));
        let h_in = tape.matmul(e_t, bound[self.w_in.index()])?;
        let h_time = tape.matmul(tape.input(temb), bound[self.w_time.index()])?;
        let pre = tape.add(h_in, h_time)?;
        let h = tape.hadamard(pre, tape.sigmoid(pre))?;
        tape.matmul(h, bound[self.w_out.index()])
    }

    /// Forward pass on plain matrices, for the reverse chain.
    pub fn predict(&self, params: &ParamSet, e_t: &Matrix, t: usize) -> Matrix {
        let temb = Matrix::filled(e_t.rows(), 1, 1.0).matmul(&self.time_embedding(t));
        let pre = e_t
            .matmul(params.value(self.w_in))
            .add(&temb.matmul(params.value(self.w_time)));
        let h = pre.hadamard(&pre.map(crate::autodiff::stable_sigmoid));
        h.matmul(params.value(self.w_out))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }
}

/// A frozen draw for one sample-loss evaluation: the uniformly chosen step
/// and the Gaussian corruption noise. Freezing the draw keeps the loss a
/// deterministic function of the parameters, which the gradient checks
/// need.
#[derive(Debug, Clone)]
pub struct DiffusionDraw {
    pub t: usize,
    pub eps: Matrix,
}

impl DiffusionDraw {
    pub fn sample(
        rows: usize,
        cols: usize,
        schedule: &DiffusionSchedule,
        rng: &mut impl Rng,
    ) -> Self {
        let t = rng.random_range(1..=schedule.t_max());
        let eps = sample_noise(rows, cols, rng);
        Self { t, eps }
    }
}

/// Noise-prediction objective for one frozen draw:
/// `|| eps - predict(q_sample(e0, t, eps), t) ||^2` summed over entries.
/// Differentiable w.r.t. the network parameters, and w.r.t. `e0` when it
/// carries encoder gradients.
pub fn sample_loss_tape(
    tape: &Tape,
    e0: Var,
    draw: &DiffusionDraw,
    schedule: &DiffusionSchedule,
    predict: impl Fn(&Tape, Var, usize) -> Result<Var, TapeError>,
) -> Result<Var, DiffusionError> {
    let e_t = q_sample_tape(tape, e0, draw.t, &draw.eps, schedule)?;
    let eps_hat = predict(tape, e_t, draw.t)?;
    let diff = tape.sub(tape.input(draw.eps.clone()), eps_hat)?;
    Ok(tape.sum(tape.square(diff)))
}

/// Ancestral reverse chain from `e_t` at step `t_start` down to a denoised
/// latent. Each step removes the predicted noise and, except at the final
/// step, re-injects scaled Gaussian noise with the posterior variance
/// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
pub fn reverse_denoise(
    e_t: &Matrix,
    t_start: usize,
    schedule: &DiffusionSchedule,
    predict: impl Fn(&Matrix, usize) -> Matrix,
    rng: &mut impl Rng,
) -> Result<Matrix, DiffusionError> {
    schedule.check(t_start)?;
    let mut x = e_t.clone();
    for t in (1..=t_start).rev() {
        let beta = schedule.beta(t);
        let alpha = schedule.alpha(t);
        let ab = schedule.alpha_bar(t);
        let eps_hat = predict(&x, t);
        let mean = x
            .sub(&eps_hat.scale(beta / (1.0 - ab).sqrt()))
            .scale(1.0 / alpha.sqrt());
        x = if t > 1 {
            let var = beta * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab);
            let z = sample_noise(x.rows(), x.cols(), rng);
            mean.add(&z.scale(var.sqrt()))
        } else {
            mean
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_beta_products() {
        let s = DiffusionSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_identities_hold() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            let product = s.alpha_bar_prev(t) * s.alpha(t);
            assert!((s.alpha_bar(t) - product).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn beta_floor_means_no_noise() {
        let s = DiffusionSchedule::linear(50, 1e-6, 1e-6).unwrap();
        assert!(s.alpha_bar(50) > 0.9999);
        let e0 = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let eps = sample_noise(2, 2, &mut substream(0, Stream::Diffusion, 0));
        let e_t = q_sample(&e0, 50, &eps, &s).unwrap();
        assert!(e_t.max_abs_diff(&e0) < 0.02);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02).unwrap();
        let e0 = Matrix::filled(3, 2, 2.0);
        let eps = Matrix::filled(3, 2, -1.0);
        let out = q_sample(&e0, 5, &eps, &s).unwrap();
        let ab = s.alpha_bar(5);
        let expected = 2.0 * ab.sqrt() - (1.0 - ab).sqrt();
        assert!(out.as_slice().iter().all(|&x| (x - expected).abs() < 1e-15));
        assert!(q_sample(&e0, 0, &eps, &s).is_err());
        assert!(q_sample(&e0, 11, &eps, &s).is_err());
    }

    #[test]
    fn zero_weight_denoiser_predicts_zero() {
        let mut params = ParamSet::new();
        let mut rng = substream(1, Stream::Init, 0);
        let den = Denoiser::init(&mut params, 4, 20, &mut rng);
        params.set_value(den.w_out, Matrix::zeros(8, 4));
        let out = den.predict(&params, &Matrix::filled(3, 4, 1.0), 7);
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn denoiser_is_deterministic_and_finite() {
        let mut params = ParamSet::new();
        let mut rng = substream(2, Stream::Init, 0);
        let den = Denoiser::init(&mut params, 6, 50, &mut rng);
        let mut noise_rng = substream(3, Stream::Diffusion, 0);
        for k in 0..100 {
            let e_t = sample_noise(4, 6, &mut noise_rng);
            let t = 1 + k % 50;
            let a = den.predict(&params, &e_t, t);
            let b = den.predict(&params, &e_t, t);
            assert_eq!(a, b);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn tape_and_plain_denoiser_agree() {
        let mut params = ParamSet::new();
        let mut rng = substream(4, Stream::Init, 0);
        let den = Denoiser::init(&mut params, 4, 20, &mut rng);
        let e_t = sample_noise(5, 4, &mut substream(5, Stream::Diffusion, 0));
        let plain = den.predict(&params, &e_t, 9);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let var = den
            .predict_tape(&tape, &bound, tape.input(e_t), 9)
            .unwrap();
        assert!(tape.value(var).max_abs_diff(&plain) < 1e-14);
    }

    #[test]
    fn oracle_denoiser_gives_zero_loss() {
        let s = DiffusionSchedule::linear(20, 1e-4, 0.02).unwrap();
        let e0 = sample_noise(6, 3, &mut substream(6, Stream::Diffusion, 0));
        let draw = DiffusionDraw::sample(6, 3, &s, &mut substream(7, Stream::Diffusion, 1));
        let tape = Tape::new();
        let e0_var = tape.input(e0);
        let eps = draw.eps.clone();
        let loss = sample_loss_tape(&tape, e0_var, &draw, &s, |t, _, _| {
            Ok(t.input(eps.clone()))
        })
        .unwrap();
        assert_eq!(tape.value_scalar(loss), 0.0);
    }

    #[test]
    fn zero_denoiser_loss_concentrates_at_dimension() {
        // with eps_hat = 0, each evaluation returns ||eps||^2 whose
        // expectation is one per coordinate
        let s = DiffusionSchedule::linear(10, 1e-3, 0.02).unwrap();
        let rows = 40;
        let cols = 5;
        let mut rng = substream(8, Stream::Diffusion, 0);
        let mut total = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let draw = DiffusionDraw::sample(rows, cols, &s, &mut rng);
            let tape = Tape::new();
            let e0 = tape.input(Matrix::zeros(rows, cols));
            let loss = sample_loss_tape(&tape, e0, &draw, &s, |t, _, _| {
                Ok(t.input(Matrix::zeros(rows, cols)))
            })
            .unwrap();
            total += tape.value_scalar(loss);
        }
        let mean = total / reps as f64;
        let dim = (rows * cols) as f64;
        // chi-square mean is dim, sd sqrt(2 dim); 3 sigma over reps draws
        let se = (2.0 * dim / reps as f64).sqrt();
        assert!((mean - dim).abs() < 3.0 * se, "mean {mean} vs {dim}");
    }

    #[test]
    fn sample_loss_gradient_matches_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = substream(9, Stream::Init, 0);
        let den = Denoiser::init(&mut params, 3, 10, &mut rng);
        let s = DiffusionSchedule::linear(10, 1e-3, 0.05).unwrap();
        let e0 = sample_noise(4, 3, &mut substream(10, Stream::Diffusion, 0));
        let draw = DiffusionDraw::sample(4, 3, &s, &mut substream(11, Stream::Diffusion, 1));
        let point: Vec<Matrix> = params.snapshot().into_iter().map(|(_, m)| m).collect();
        let err = crate::autodiff::grad_check(
            |tape, vars| {
                let e0_var = tape.input(e0.clone());
                sample_loss_tape(tape, e0_var, &draw, &s, |t, e_t, step| {
                    den.predict_tape(t, vars, e_t, step)
                })
                .map_err(|e| match e {
                    DiffusionError::Tape(t) => t,
                    other => panic!("unexpected {other}"),
                })
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "sample loss grad error {err}");
    }

    #[test]
    fn one_step_oracle_inversion_is_exact() {
        let s = DiffusionSchedule::linear(10, 0.05, 0.2).unwrap();
        let e0 = sample_noise(5, 4, &mut substream(12, Stream::Diffusion, 0));
        let eps = sample_noise(5, 4, &mut substream(13, Stream::Diffusion, 1));
        let e1 = q_sample(&e0, 1, &eps, &s).unwrap();
        let rec = reverse_denoise(
            &e1,
            1,
            &s,
            |_, _| eps.clone(),
            &mut substream(14, Stream::Diffusion, 2),
        )
        .unwrap();
        assert!(rec.max_abs_diff(&e0) < 1e-10);
    }

    #[test]
    fn beta_floor_reverse_is_near_identity() {
        let s = DiffusionSchedule::linear(20, 1e-6, 1e-6).unwrap();
        let e_t = sample_noise(4, 3, &mut substream(15, Stream::Diffusion, 0));
        let rec = reverse_denoise(
            &e_t,
            20,
            &s,
            |_, _| Matrix::zeros(4, 3),
            &mut substream(16, Stream::Diffusion, 1),
        )
        .unwrap();
        assert!(rec.max_abs_diff(&e_t) < 0.05);
    }

    #[test]
    fn reverse_depth_out_of_range() {
        let s = DiffusionSchedule::linear(5, 0.01, 0.1).unwrap();
        let x = Matrix::zeros(2, 2);
        let r = reverse_denoise(&x, 6, &s, |_, _| Matrix::zeros(2, 2), &mut substream(0, Stream::Diffusion, 0));
        assert!(matches!(r, Err(DiffusionError::StepOutOfRange { .. })));
    }
}
