//! Gradient engine and Adam-based minibatch reconstruction driver.
//!
//! The object is parametrized as nonnegative magnitude plus phase, the probe
//! as real and imaginary parts. Gradients of the data term are hand-derived
//! through the unitary DFT and the stabilized magnitude; prior gradients come
//! from [`crate::priors`]. Everything is validated against central finite
//! differences in the integration tests.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::field::{
    fft2, fftshift, fresnel_propagate, ifft2, join, ComplexField2D, FieldError, RealField2D,
};
use crate::forward::{data_fidelity, DiffractionSet, ForwardError, EPS_MAG};
use crate::priors::{
    cc_grad, probe_smoothness_grad, stp_grad, total_objective_parts, tv_grad, PriorKind,
    PriorWeights, PriorError,
};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Settings of a reconstruction run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub weights: PriorWeights,
    pub lr_object: f64,
    pub lr_probe: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Keep the probe fixed at its initialization.
    pub fix_probe: bool,
    /// Optics used by the probe initializer.
    pub wavelength: f64,
    pub pixel_pitch: f64,
    pub init_defocus: f64,
    /// Worker threads for per-batch gradient evaluation. 1 gives bitwise
    /// reproducible runs; more threads change only the reduction grouping
    /// (relative drift <= ~1e-12).
    pub threads: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            weights: PriorWeights::none(),
            lr_object: 0.1,
            lr_probe: 0.01,
            batch_size: 16,
            epochs: 500,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            fix_probe: false,
            wavelength: 1.24e-10,
            pixel_pitch: 1e-8,
            init_defocus: 2e-3,
            threads: 1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        self.weights.validate()?;
        let positive = [
            ("lr_object", self.lr_object),
            ("lr_probe", self.lr_probe),
            ("eps_adam", self.eps_adam),
            ("wavelength", self.wavelength),
            ("pixel_pitch", self.pixel_pitch),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ReconError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(ReconError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {value}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(ReconError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(ReconError::InvalidConfig("threads must be at least 1".into()));
        }
        if !self.init_defocus.is_finite() {
            return Err(ReconError::InvalidConfig(format!(
                "init_defocus must be finite, got {}",
                self.init_defocus
            )));
        }
        Ok(())
    }
}

/// One real field per optimized parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub obj_magnitude: RealField2D,
    pub obj_phase: RealField2D,
    pub probe_re: RealField2D,
    pub probe_im: RealField2D,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            obj_magnitude: RealField2D::zeros(other.obj_magnitude.rows(), other.obj_magnitude.cols()),
            obj_phase: RealField2D::zeros(other.obj_phase.rows(), other.obj_phase.cols()),
            probe_re: RealField2D::zeros(other.probe_re.rows(), other.probe_re.cols()),
            probe_im: RealField2D::zeros(other.probe_im.rows(), other.probe_im.cols()),
        }
    }

    pub fn object(&self) -> ComplexField2D {
        join(&self.obj_magnitude, &self.obj_phase)
    }

    pub fn probe(&self) -> ComplexField2D {
        ComplexField2D::from_fn(self.probe_re.rows(), self.probe_re.cols(), |r, c| {
            Complex64::new(self.probe_re.get(r, c), self.probe_im.get(r, c))
        })
    }

    fn fields(&self) -> [&RealField2D; 4] {
        [&self.obj_magnitude, &self.obj_phase, &self.probe_re, &self.probe_im]
    }

    fn fields_mut(&mut self) -> [&mut RealField2D; 4] {
        [
            &mut self.obj_magnitude,
            &mut self.obj_phase,
            &mut self.probe_re,
            &mut self.probe_im,
        ]
    }
}

/// Optimizer state: parameters, Adam moments, step counter, shuffle RNG.
#[derive(Debug, Clone)]
pub struct ReconState {
    pub params: ParamSet,
    first_moment: ParamSet,
    second_moment: ParamSet,
    pub step_count: u64,
    rng: ChaCha8Rng,
}

impl ReconState {
    pub fn new(params: ParamSet, seed: u64) -> Self {
        let first_moment = ParamSet::zeros_like(&params);
        let second_moment = ParamSet::zeros_like(&params);
        Self {
            params,
            first_moment,
            second_moment,
            step_count: 0,
            // distinct stream from the initializers
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }
}

/// Seeded per-pixel initialization: magnitude uniform in [0.9, 1.0], phase
/// uniform in [-0.1, 0.1].
pub fn init_object(rows: usize, cols: usize, seed: u64) -> (RealField2D, RealField2D) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let magnitude = RealField2D::from_fn(rows, cols, |_, _| 0.9 + 0.1 * rng.random::<f64>());
    let phase = RealField2D::from_fn(rows, cols, |_, _| -0.1 + 0.2 * rng.random::<f64>());
    (magnitude, phase)
}

/// Probe initialization: inverse transform of the mean measured amplitude,
/// then defocused by `defocus` via Fresnel propagation.
///
/// Patterns are stored in unshifted FFT layout (zero frequency at bin 0), so
/// the inverse transform of the nonnegative mean amplitude peaks at the
/// window origin; the result is recentered with [`fftshift`] to put the blob
/// where a beam centered on the window sits.
pub fn init_probe(
    dataset: &DiffractionSet,
    defocus: f64,
    wavelength: f64,
    pixel_pitch: f64,
) -> Result<ComplexField2D, ReconError> {
    if dataset.is_empty() {
        return Err(ReconError::EmptyDataset);
    }
    let (rows, cols) = dataset.plan().probe_shape();
    let mut mean_amplitude = vec![0.0; rows * cols];
    for pattern in dataset.patterns() {
        for (acc, &v) in mean_amplitude.iter_mut().zip(pattern.values()) {
            *acc += v.sqrt();
        }
    }
    let m = dataset.len() as f64;
    let spectrum = ComplexField2D::new(
        rows,
        cols,
        mean_amplitude
            .into_iter()
            .map(|v| Complex64::new(v / m, 0.0))
            .collect(),
    )?;
    let probe = fftshift(&ifft2(&spectrum));
    Ok(fresnel_propagate(&probe, defocus, wavelength, pixel_pitch)?)
}

/// Gradient of the batch data-fidelity term with respect to all four
/// parameter fields. Probe gradients are left at zero when `fix_probe`.
pub fn grad_data_fidelity(
    params: &ParamSet,
    dataset: &DiffractionSet,
    batch: &[usize],
    fix_probe: bool,
    threads: usize,
) -> Result<ParamSet, ReconError> {
    if batch.is_empty() {
        return Err(ReconError::Forward(ForwardError::EmptyBatch));
    }
    for &i in batch {
        if i >= dataset.len() {
            return Err(ReconError::Forward(ForwardError::BadBatchIndex {
                index: i,
                len: dataset.len(),
            }));
        }
    }
    let plan = dataset.plan();
    let (obj_rows, obj_cols) = plan.object_shape();
    if params.obj_magnitude.shape() != (obj_rows, obj_cols) {
        return Err(ReconError::Forward(ForwardError::ShapeMismatch {
            name: "object",
            rows: obj_rows,
            cols: obj_cols,
            actual_rows: params.obj_magnitude.rows(),
            actual_cols: params.obj_magnitude.cols(),
        }));
    }
    if params.probe_re.shape() != plan.probe_shape() {
        let (rows, cols) = plan.probe_shape();
        return Err(ReconError::Forward(ForwardError::ShapeMismatch {
            name: "probe",
            rows,
            cols,
            actual_rows: params.probe_re.rows(),
            actual_cols: params.probe_re.cols(),
        }));
    }

    // Phase factors exp(i*phase) once per call; window crops reuse them.
    let unit = ComplexField2D::from_fn(obj_rows, obj_cols, |r, c| {
        Complex64::from_polar(1.0, params.obj_phase.get(r, c))
    });
    let probe = params.probe();

    let n_workers = threads.max(1).min(batch.len());
    let partials: Vec<BatchPartial> = if n_workers == 1 {
        vec![accumulate_positions(params, &unit, &probe, dataset, batch, fix_probe)]
    } else {
        let chunk = batch.len().div_ceil(n_workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|piece| {
                    scope.spawn(|| {
                        accumulate_positions(params, &unit, &probe, dataset, piece, fix_probe)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    };

    let mut grads = ParamSet::zeros_like(params);
    let scale = 1.0 / batch.len() as f64;
    for partial in partials {
        for (acc, add) in grads
            .obj_magnitude
            .values_mut()
            .iter_mut()
            .zip(&partial.d_mag)
        {
            *acc += scale * add;
        }
        for (acc, add) in grads.obj_phase.values_mut().iter_mut().zip(&partial.d_phase) {
            *acc += scale * add;
        }
        if !fix_probe {
            for (acc, add) in grads.probe_re.values_mut().iter_mut().zip(&partial.d_probe) {
                *acc += scale * add.re;
            }
            for (acc, add) in grads.probe_im.values_mut().iter_mut().zip(&partial.d_probe) {
                *acc += scale * add.im;
            }
        }
    }
    Ok(grads)
}

struct BatchPartial {
    d_mag: Vec<f64>,
    d_phase: Vec<f64>,
    d_probe: Vec<Complex64>,
}

fn accumulate_positions(
    params: &ParamSet,
    unit: &ComplexField2D,
    probe: &ComplexField2D,
    dataset: &DiffractionSet,
    batch: &[usize],
    fix_probe: bool,
) -> BatchPartial {
    let plan = dataset.plan();
    let (p_rows, p_cols) = plan.probe_shape();
    let obj_cols = plan.object_shape().1;
    let mut d_mag = vec![0.0; params.obj_magnitude.len()];
    let mut d_phase = vec![0.0; params.obj_phase.len()];
    let mut d_probe = vec![Complex64::default(); probe.len()];

    for &i in batch {
        let (top, left) = plan.positions()[i];
        let pattern = &dataset.patterns()[i];

        // forward: psi = P . O_window, Psi = F psi
        let unit_win = unit.window(top, left, p_rows, p_cols);
        let mag_win = params.obj_magnitude.window(top, left, p_rows, p_cols);
        let mut psi = ComplexField2D::zeros(p_rows, p_cols);
        for j in 0..psi.len() {
            psi.values_mut()[j] = probe.values()[j] * mag_win.values()[j] * unit_win.values()[j];
        }
        let spectrum = fft2(&psi);

        // residual weighting in the Fourier domain:
        // d/dPsi of sum (sqrt(|Psi|^2+eps^2) - sqrt(I))^2 packed as a complex
        // field, then pulled back by the inverse transform.
        let mut g_spec = ComplexField2D::zeros(p_rows, p_cols);
        for k in 0..g_spec.len() {
            let z = spectrum.values()[k];
            let a = (z.norm_sqr() + EPS_MAG * EPS_MAG).sqrt();
            let rho = a - pattern.values()[k].sqrt();
            g_spec.values_mut()[k] = z * (2.0 * rho / a);
        }
        let g_psi = ifft2(&g_spec);

        for wr in 0..p_rows {
            for wc in 0..p_cols {
                let j = wr * p_cols + wc;
                let g = g_psi.values()[j];
                let o_win = mag_win.values()[j] * unit_win.values()[j];
                // object gradient through O = m exp(i phi)
                let g_obj = probe.values()[j].conj() * g;
                let t = g_obj.conj() * unit_win.values()[j];
                let flat = (top + wr) * obj_cols + (left + wc);
                d_mag[flat] += t.re;
                d_phase[flat] += -mag_win.values()[j] * t.im;
                if !fix_probe {
                    d_probe[j] += o_win.conj() * g;
                }
            }
        }
    }
    BatchPartial {
        d_mag,
        d_phase,
        d_probe,
    }
}

/// Gradient of the full objective (data term plus weighted priors).
pub fn gradients(
    params: &ParamSet,
    dataset: &DiffractionSet,
    batch: &[usize],
    weights: &PriorWeights,
    fix_probe: bool,
    threads: usize,
) -> Result<ParamSet, ReconError> {
    let mut grads = grad_data_fidelity(params, dataset, batch, fix_probe, threads)?;
    if weights.lambda_pr != 0.0 && !fix_probe {
        let (d_re, d_im) = probe_smoothness_grad(&params.probe_re, &params.probe_im);
        axpy(&mut grads.probe_re, weights.lambda_pr, &d_re);
        axpy(&mut grads.probe_im, weights.lambda_pr, &d_im);
    }
    if weights.lambda_cc != 0.0 {
        let (d_mag, d_phase) = cc_grad(&params.obj_magnitude, &params.obj_phase);
        axpy(&mut grads.obj_magnitude, weights.lambda_cc, &d_mag);
        axpy(&mut grads.obj_phase, weights.lambda_cc, &d_phase);
    }
    if weights.lambda_x != 0.0 {
        let image_grad = match weights.prior_kind {
            PriorKind::None => None,
            PriorKind::Tv => Some(tv_grad(&params.obj_magnitude, &params.obj_phase)),
            PriorKind::Stp => Some(stp_grad(
                &params.obj_magnitude,
                &params.obj_phase,
                weights.stp_sigma,
            )),
        };
        if let Some((d_mag, d_phase)) = image_grad {
            axpy(&mut grads.obj_magnitude, weights.lambda_x, &d_mag);
            axpy(&mut grads.obj_phase, weights.lambda_x, &d_phase);
        }
    }
    Ok(grads)
}

fn axpy(acc: &mut RealField2D, alpha: f64, x: &RealField2D) {
    for (a, &v) in acc.values_mut().iter_mut().zip(x.values()) {
        *a += alpha * v;
    }
}

/// One Adam update with bias correction. Object fields use `lr_object`,
/// probe fields `lr_probe`; the magnitude is clamped at zero afterwards.
pub fn adam_step(state: &mut ReconState, grads: &ParamSet, config: &ReconConfig) {
    let t = state.step_count + 1;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let lrs = [config.lr_object, config.lr_object, config.lr_probe, config.lr_probe];

    let grad_fields = grads.fields();
    let param_fields = state.params.fields_mut();
    let m_fields = state.first_moment.fields_mut();
    let v_fields = state.second_moment.fields_mut();
    for (((param, grad), m), (v, lr)) in param_fields
        .into_iter()
        .zip(grad_fields)
        .zip(m_fields)
        .zip(v_fields.into_iter().zip(lrs))
    {
        assert_eq!(param.shape(), grad.shape());
        for i in 0..param.len() {
            let g = grad.values()[i];
            let m_new = config.beta1 * m.values()[i] + (1.0 - config.beta1) * g;
            let v_new = config.beta2 * v.values()[i] + (1.0 - config.beta2) * g * g;
            m.values_mut()[i] = m_new;
            v.values_mut()[i] = v_new;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            param.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + config.eps_adam);
        }
    }
    for v in state.params.obj_magnitude.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    state.step_count = t;
}

/// Per-epoch energies of a reconstruction run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean data fidelity over the full dataset.
    pub e_data: f64,
    /// Data fidelity plus weighted priors.
    pub e_total: f64,
}

/// Result of [`reconstruct`].
#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub object: ComplexField2D,
    pub probe: ComplexField2D,
    pub history: Vec<EpochStats>,
}

/// Full reconstruction driver: seeded initialization, per-epoch shuffled
/// minibatches (final partial batch kept), Adam updates, per-epoch energy
/// history. Identical (dataset, config, probe) inputs give bitwise identical
/// results at `threads == 1`.
///
/// `initial_probe` overrides the default initializer; combined with
/// `fix_probe` it pins the probe for the whole run.
pub fn reconstruct(
    dataset: &DiffractionSet,
    config: &ReconConfig,
    initial_probe: Option<&ComplexField2D>,
) -> Result<ReconOutput, ReconError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ReconError::EmptyDataset);
    }
    let (obj_rows, obj_cols) = dataset.plan().object_shape();
    let (obj_magnitude, obj_phase) = init_object(obj_rows, obj_cols, config.seed);
    let probe = match initial_probe {
        Some(p) => {
            let (rows, cols) = dataset.plan().probe_shape();
            if p.shape() != (rows, cols) {
                return Err(ReconError::Forward(ForwardError::ShapeMismatch {
                    name: "probe",
                    rows,
                    cols,
                    actual_rows: p.rows(),
                    actual_cols: p.cols(),
                }));
            }
            p.clone()
        }
        None => init_probe(
            dataset,
            config.init_defocus,
            config.wavelength,
            config.pixel_pitch,
        )?,
    };
    let probe_re = RealField2D::from_fn(probe.rows(), probe.cols(), |r, c| probe.get(r, c).re);
    let probe_im = RealField2D::from_fn(probe.rows(), probe.cols(), |r, c| probe.get(r, c).im);
    let params = ParamSet {
        obj_magnitude,
        obj_phase,
        probe_re,
        probe_im,
    };
    let mut state = ReconState::new(params, config.seed);

    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut order = all.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut state.rng);
        for batch in order.chunks(config.batch_size) {
            let grads = gradients(
                &state.params,
                dataset,
                batch,
                &config.weights,
                config.fix_probe,
                config.threads,
            )?;
            adam_step(&mut state, &grads, config);
        }
        let e_data = data_fidelity(&state.params.object(), &state.params.probe(), dataset, &all)?;
        let e_total = total_objective_parts(
            &state.params.obj_magnitude,
            &state.params.obj_phase,
            &state.params.probe_re,
            &state.params.probe_im,
            dataset,
            &all,
            &config.weights,
        )?;
        history.push(EpochStats {
            epoch,
            e_data,
            e_total,
        });
    }

    Ok(ReconOutput {
        object: state.params.object(),
        probe: state.params.probe(),
        history,
    })
}
