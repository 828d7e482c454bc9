//! Regularization energies over the object's magnitude/phase channels and
//! the probe magnitude, their analytic gradients, and total-objective
//! assembly.
//!
//! Each energy carries a small epsilon so it stays differentiable on its
//! null set; the matching `*_grad` functions are exact gradients of the
//! epsilon-smoothed energies (finite differences agree to ~1e-5 relative,
//! see the gradient integration tests).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{grad2, grad2_adjoint, split, ComplexField2D, RealField2D};
use crate::forward::{data_fidelity, DiffractionSet, ForwardError, EPS_MAG};

/// Per-pixel smoothing of the TV gradient magnitude.
pub const EPS_TV: f64 = 1e-8;
/// Smoothing of the cross-channel absolute value.
pub const EPS_CC: f64 = 1e-8;
/// Stabilizer under the probe-smoothness square root.
pub const EPS_PR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("{name} must be nonnegative and finite, got {value}")]
    BadWeight { name: &'static str, value: f64 },
    #[error("stp_sigma must be positive and finite, got {0}")]
    BadSigma(f64),
}

/// Which image prior the `lambda_x` weight applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    None,
    Tv,
    Stp,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriorKind::None => write!(f, "none"),
            PriorKind::Tv => write!(f, "tv"),
            PriorKind::Stp => write!(f, "stp"),
        }
    }
}

/// Weights of the regularization terms in the total objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    /// Probe-smoothness weight.
    pub lambda_pr: f64,
    /// Cross-channel weight.
    pub lambda_cc: f64,
    /// Image-prior (TV or STP) weight.
    pub lambda_x: f64,
    pub prior_kind: PriorKind,
    /// Gaussian smoothing sigma of the structure tensor, pixels.
    pub stp_sigma: f64,
}

impl Default for PriorWeights {
    fn default() -> Self {
        Self {
            lambda_pr: 0.01,
            lambda_cc: 0.01,
            lambda_x: 0.005,
            prior_kind: PriorKind::None,
            stp_sigma: 1.5,
        }
    }
}

impl PriorWeights {
    /// All regularization switched off.
    pub fn none() -> Self {
        Self {
            lambda_pr: 0.0,
            lambda_cc: 0.0,
            lambda_x: 0.0,
            prior_kind: PriorKind::None,
            stp_sigma: 1.5,
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        for (name, value) in [
            ("lambda_pr", self.lambda_pr),
            ("lambda_cc", self.lambda_cc),
            ("lambda_x", self.lambda_x),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(PriorError::BadWeight { name, value });
            }
        }
        if !(self.stp_sigma > 0.0) || !self.stp_sigma.is_finite() {
            return Err(PriorError::BadSigma(self.stp_sigma));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gaussian smoothing with replicate boundary (structure tensor machinery)
// ---------------------------------------------------------------------------

/// Unit-sum 1-D Gaussian kernel truncated at 3 sigma.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t as f64 * t as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn smooth_axis(values: &[f64], n_lines: usize, line_len: usize, stride: usize, line_stride: usize, kernel: &[f64], out: &mut [f64]) {
    let radius = (kernel.len() / 2) as i64;
    for line in 0..n_lines {
        let base = line * line_stride;
        for i in 0..line_len {
            let mut acc = 0.0;
            for (ti, &kt) in kernel.iter().enumerate() {
                let t = ti as i64 - radius;
                let j = (i as i64 + t).clamp(0, line_len as i64 - 1) as usize;
                acc += kt * values[base + j * stride];
            }
            out[base + i * stride] = acc;
        }
    }
}

/// Separable Gaussian convolution with replicate (clamp) boundary.
pub(crate) fn gaussian_smooth(f: &RealField2D, sigma: f64) -> RealField2D {
    let kernel = gaussian_kernel(sigma);
    let (rows, cols) = f.shape();
    let mut tmp = vec![0.0; rows * cols];
    // along columns within each row
    smooth_axis(f.values(), rows, cols, 1, cols, &kernel, &mut tmp);
    let mut out = vec![0.0; rows * cols];
    // along rows within each column
    let tmp_clone = tmp.clone();
    for c in 0..cols {
        let radius = (kernel.len() / 2) as i64;
        for r in 0..rows {
            let mut acc = 0.0;
            for (ti, &kt) in kernel.iter().enumerate() {
                let t = ti as i64 - radius;
                let rr = (r as i64 + t).clamp(0, rows as i64 - 1) as usize;
                acc += kt * tmp_clone[rr * cols + c];
            }
            out[r * cols + c] = acc;
        }
    }
    let _ = tmp;
    RealField2D::new(rows, cols, out).expect("smoothing preserves finiteness")
}

/// 1-D adjoint of the clamped smoothing applied to the all-ones vector.
fn adjoint_ones_1d(n: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut w = vec![0.0; n];
    for i in 0..n as i64 {
        for (ti, &kt) in kernel.iter().enumerate() {
            let t = ti as i64 - radius;
            let j = (i + t).clamp(0, n as i64 - 1) as usize;
            w[j] += kt;
        }
    }
    w
}

/// `S^T * 1` for the separable clamped Gaussian smoothing `S`: the per-pixel
/// total weight each input pixel contributes across the image. Interior
/// pixels get exactly 1; clamped boundary pixels accumulate more.
pub(crate) fn smooth_adjoint_ones(rows: usize, cols: usize, sigma: f64) -> RealField2D {
    let kernel = gaussian_kernel(sigma);
    let wr = adjoint_ones_1d(rows, &kernel);
    let wc = adjoint_ones_1d(cols, &kernel);
    RealField2D::from_fn(rows, cols, |r, c| wr[r] * wc[c])
}

// ---------------------------------------------------------------------------
// Energies
// ---------------------------------------------------------------------------

/// Isotropic total variation over both object channels:
/// `sum_i sqrt(gx^2 + gy^2 + EPS_TV^2)` for the magnitude plus the same for
/// the phase. The epsilon keeps it differentiable on flat regions, at the
/// price of a floor of `EPS_TV` per pixel per channel.
pub fn tv_energy(magnitude: &RealField2D, phase: &RealField2D) -> f64 {
    assert_eq!(magnitude.shape(), phase.shape());
    let mut total = 0.0;
    for channel in [magnitude, phase] {
        let (gx, gy) = grad2(channel);
        total += gx
            .values()
            .iter()
            .zip(gy.values())
            .map(|(&x, &y)| (x * x + y * y + EPS_TV * EPS_TV).sqrt())
            .sum::<f64>();
    }
    total
}

/// Exact gradient of [`tv_energy`] with respect to (magnitude, phase).
pub fn tv_grad(magnitude: &RealField2D, phase: &RealField2D) -> (RealField2D, RealField2D) {
    assert_eq!(magnitude.shape(), phase.shape());
    let mut out = Vec::with_capacity(2);
    for channel in [magnitude, phase] {
        let (gx, gy) = grad2(channel);
        let (rows, cols) = channel.shape();
        let mut wx = RealField2D::zeros(rows, cols);
        let mut wy = RealField2D::zeros(rows, cols);
        for i in 0..gx.len() {
            let s = (gx.values()[i] * gx.values()[i]
                + gy.values()[i] * gy.values()[i]
                + EPS_TV * EPS_TV)
                .sqrt();
            wx.values_mut()[i] = gx.values()[i] / s;
            wy.values_mut()[i] = gy.values()[i] / s;
        }
        out.push(grad2_adjoint(&wx, &wy));
    }
    let d_phase = out.pop().unwrap();
    let d_mag = out.pop().unwrap();
    (d_mag, d_phase)
}

/// Per-pixel trace of the Gaussian-smoothed structure tensor
/// `J = K_sigma * (grad I grad I^T)`, i.e. `K*(Ix^2) + K*(Iy^2)`.
pub fn structure_tensor_trace(channel: &RealField2D, sigma: f64) -> RealField2D {
    let (gx, gy) = grad2(channel);
    let gx2 = gx.map(|v| v * v);
    let gy2 = gy.map(|v| v * v);
    let sx = gaussian_smooth(&gx2, sigma);
    let sy = gaussian_smooth(&gy2, sigma);
    RealField2D::from_fn(channel.rows(), channel.cols(), |r, c| {
        sx.get(r, c) + sy.get(r, c)
    })
}

/// Structure-tensor prior: per channel, the mean over pixels of
/// `|lambda_plus| + |lambda_minus|` of the smoothed gradient outer-product
/// tensor, summed over the two channels. Eigenvalues come from the closed
/// form `(tr +- sqrt(tr^2 - 4 det)) / 2` with the discriminant floored at 0.
pub fn stp_energy(magnitude: &RealField2D, phase: &RealField2D, sigma: f64) -> f64 {
    assert_eq!(magnitude.shape(), phase.shape());
    let n = magnitude.len() as f64;
    let mut total = 0.0;
    for channel in [magnitude, phase] {
        let (gx, gy) = grad2(channel);
        let gx2 = gx.map(|v| v * v);
        let gy2 = gy.map(|v| v * v);
        let gxy = RealField2D::from_fn(channel.rows(), channel.cols(), |r, c| {
            gx.get(r, c) * gy.get(r, c)
        });
        let j11 = gaussian_smooth(&gx2, sigma);
        let j22 = gaussian_smooth(&gy2, sigma);
        let j12 = gaussian_smooth(&gxy, sigma);
        let mut channel_sum = 0.0;
        for i in 0..j11.len() {
            let a = j11.values()[i];
            let b = j12.values()[i];
            let d = j22.values()[i];
            let tr = a + d;
            let det = a * d - b * b;
            let disc = (tr * tr - 4.0 * det).max(0.0);
            let s = disc.sqrt();
            let lam_plus = 0.5 * (tr + s);
            let lam_minus = 0.5 * (tr - s);
            channel_sum += lam_plus.abs() + lam_minus.abs();
        }
        total += channel_sum / n;
    }
    total
}

/// Exact gradient of [`stp_energy`]. Uses the eigenvalue-sum/trace identity:
/// the energy equals `(1/N) <S^T 1, Ix^2 + Iy^2>` per channel, so the
/// gradient flows through the smoothing adjoint applied to ones.
pub fn stp_grad(
    magnitude: &RealField2D,
    phase: &RealField2D,
    sigma: f64,
) -> (RealField2D, RealField2D) {
    assert_eq!(magnitude.shape(), phase.shape());
    let (rows, cols) = magnitude.shape();
    let n = magnitude.len() as f64;
    let weight = smooth_adjoint_ones(rows, cols, sigma);
    let mut out = Vec::with_capacity(2);
    for channel in [magnitude, phase] {
        let (gx, gy) = grad2(channel);
        let wx = RealField2D::from_fn(rows, cols, |r, c| {
            2.0 / n * weight.get(r, c) * gx.get(r, c)
        });
        let wy = RealField2D::from_fn(rows, cols, |r, c| {
            2.0 / n * weight.get(r, c) * gy.get(r, c)
        });
        out.push(grad2_adjoint(&wx, &wy));
    }
    let d_phase = out.pop().unwrap();
    let d_mag = out.pop().unwrap();
    (d_mag, d_phase)
}

/// Cross-channel prior coupling the two object channels:
/// `sum over directions and pixels of |g(phase) * mag - g(mag) * phase|`,
/// with `|x|` smoothed as `sqrt(x^2 + EPS_CC^2)`. Vanishes (to the epsilon
/// floor) when the channels are proportional.
pub fn cc_energy(magnitude: &RealField2D, phase: &RealField2D) -> f64 {
    assert_eq!(magnitude.shape(), phase.shape());
    let (gmx, gmy) = grad2(magnitude);
    let (gpx, gpy) = grad2(phase);
    let mut total = 0.0;
    for (gp, gm) in [(&gpx, &gmx), (&gpy, &gmy)] {
        for i in 0..magnitude.len() {
            let v = gp.values()[i] * magnitude.values()[i] - gm.values()[i] * phase.values()[i];
            total += (v * v + EPS_CC * EPS_CC).sqrt();
        }
    }
    total
}

/// Exact gradient of [`cc_energy`] with respect to (magnitude, phase).
pub fn cc_grad(magnitude: &RealField2D, phase: &RealField2D) -> (RealField2D, RealField2D) {
    assert_eq!(magnitude.shape(), phase.shape());
    let (rows, cols) = magnitude.shape();
    let (gmx, gmy) = grad2(magnitude);
    let (gpx, gpy) = grad2(phase);
    let zeros = RealField2D::zeros(rows, cols);
    let mut d_mag = RealField2D::zeros(rows, cols);
    let mut d_phase = RealField2D::zeros(rows, cols);
    for (axis, (gp, gm)) in [(&gpx, &gmx), (&gpy, &gmy)].into_iter().enumerate() {
        let mut w = RealField2D::zeros(rows, cols);
        for i in 0..w.len() {
            let v = gp.values()[i] * magnitude.values()[i] - gm.values()[i] * phase.values()[i];
            w.values_mut()[i] = v / (v * v + EPS_CC * EPS_CC).sqrt();
        }
        // d/d mag: w * g(phase) appears directly; -phase * w flows back
        // through this direction's difference operator.
        let phase_w = RealField2D::from_fn(rows, cols, |r, c| phase.get(r, c) * w.get(r, c));
        let mag_w = RealField2D::from_fn(rows, cols, |r, c| magnitude.get(r, c) * w.get(r, c));
        let (adj_phase_w, adj_mag_w) = if axis == 0 {
            (grad2_adjoint(&phase_w, &zeros), grad2_adjoint(&mag_w, &zeros))
        } else {
            (grad2_adjoint(&zeros, &phase_w), grad2_adjoint(&zeros, &mag_w))
        };
        for i in 0..d_mag.len() {
            d_mag.values_mut()[i] += w.values()[i] * gp.values()[i] - adj_phase_w.values()[i];
            d_phase.values_mut()[i] += adj_mag_w.values()[i] - w.values()[i] * gm.values()[i];
        }
    }
    (d_mag, d_phase)
}

/// Stabilized probe magnitude `sqrt(re^2 + im^2 + EPS_MAG^2)`.
fn stabilized_magnitude(re: &RealField2D, im: &RealField2D) -> RealField2D {
    RealField2D::from_fn(re.rows(), re.cols(), |r, c| {
        let a = re.get(r, c);
        let b = im.get(r, c);
        (a * a + b * b + EPS_MAG * EPS_MAG).sqrt()
    })
}

/// Global smoothness of the probe magnitude: `|| grad |P| ||_2`, a single
/// square root over the summed squared finite differences.
pub fn probe_smoothness(probe: &ComplexField2D) -> f64 {
    let re = RealField2D::from_fn(probe.rows(), probe.cols(), |r, c| probe.get(r, c).re);
    let im = RealField2D::from_fn(probe.rows(), probe.cols(), |r, c| probe.get(r, c).im);
    probe_smoothness_parts(&re, &im)
}

/// [`probe_smoothness`] on the split real/imaginary parametrization.
pub fn probe_smoothness_parts(re: &RealField2D, im: &RealField2D) -> f64 {
    assert_eq!(re.shape(), im.shape());
    let mag = stabilized_magnitude(re, im);
    let (gx, gy) = grad2(&mag);
    let ssum: f64 = gx
        .values()
        .iter()
        .zip(gy.values())
        .map(|(&x, &y)| x * x + y * y)
        .sum();
    (ssum + EPS_PR * EPS_PR).sqrt()
}

/// Exact gradient of [`probe_smoothness_parts`] with respect to (re, im).
pub fn probe_smoothness_grad(re: &RealField2D, im: &RealField2D) -> (RealField2D, RealField2D) {
    assert_eq!(re.shape(), im.shape());
    let mag = stabilized_magnitude(re, im);
    let (gx, gy) = grad2(&mag);
    let ssum: f64 = gx
        .values()
        .iter()
        .zip(gy.values())
        .map(|(&x, &y)| x * x + y * y)
        .sum();
    let energy = (ssum + EPS_PR * EPS_PR).sqrt();
    let g_mag = grad2_adjoint(&gx, &gy);
    let mut d_re = RealField2D::zeros(re.rows(), re.cols());
    let mut d_im = RealField2D::zeros(re.rows(), re.cols());
    for i in 0..re.len() {
        let scale = g_mag.values()[i] / (energy * mag.values()[i]);
        d_re.values_mut()[i] = scale * re.values()[i];
        d_im.values_mut()[i] = scale * im.values()[i];
    }
    (d_re, d_im)
}

/// Image-prior term selected by `prior_kind` (`None` contributes 0).
pub fn image_prior_energy(
    magnitude: &RealField2D,
    phase: &RealField2D,
    weights: &PriorWeights,
) -> f64 {
    match weights.prior_kind {
        PriorKind::None => 0.0,
        PriorKind::Tv => tv_energy(magnitude, phase),
        PriorKind::Stp => stp_energy(magnitude, phase, weights.stp_sigma),
    }
}

/// Total objective on the split parametrization:
/// `E_o + lambda_pr E_pr + lambda_cc E_cc + lambda_x E_x`.
pub fn total_objective_parts(
    obj_magnitude: &RealField2D,
    obj_phase: &RealField2D,
    probe_re: &RealField2D,
    probe_im: &RealField2D,
    dataset: &DiffractionSet,
    batch: &[usize],
    weights: &PriorWeights,
) -> Result<f64, ForwardError> {
    let object = crate::field::join(obj_magnitude, obj_phase);
    let probe = ComplexField2D::from_fn(probe_re.rows(), probe_re.cols(), |r, c| {
        num_complex::Complex64::new(probe_re.get(r, c), probe_im.get(r, c))
    });
    let mut total = data_fidelity(&object, &probe, dataset, batch)?;
    if weights.lambda_pr != 0.0 {
        total += weights.lambda_pr * probe_smoothness_parts(probe_re, probe_im);
    }
    if weights.lambda_cc != 0.0 {
        total += weights.lambda_cc * cc_energy(obj_magnitude, obj_phase);
    }
    if weights.lambda_x != 0.0 {
        total += weights.lambda_x * image_prior_energy(obj_magnitude, obj_phase, weights);
    }
    Ok(total)
}

/// Total objective on complex estimates: splits the object into channels and
/// delegates to [`total_objective_parts`].
pub fn total_objective(
    object: &ComplexField2D,
    probe: &ComplexField2D,
    dataset: &DiffractionSet,
    batch: &[usize],
    weights: &PriorWeights,
) -> Result<f64, ForwardError> {
    let (mag, phase) = split(object);
    let re = RealField2D::from_fn(probe.rows(), probe.cols(), |r, c| probe.get(r, c).re);
    let im = RealField2D::from_fn(probe.rows(), probe.cols(), |r, c| probe.get(r, c).im);
    total_objective_parts(&mag, &phase, &re, &im, dataset, batch, weights)
}
