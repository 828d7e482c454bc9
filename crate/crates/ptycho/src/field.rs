//! Dense 2-D complex and real fields plus the numeric kernels built on them:
//! unitary FFTs, paraxial Fresnel propagation, forward-difference gradients,
//! and magnitude/phase conversion.
//!
//! FFTs are normalized by `1/sqrt(rows*cols)` in both directions so that
//! Parseval's identity holds exactly: `sum |x|^2 == sum |fft2(x)|^2`.
//!
//! Every operation here is a pure function over immutable inputs; fields are
//! plain owned buffers and can be sent freely between threads.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field dimensions must be positive, got {rows}x{cols}")]
    EmptyDims { rows: usize, cols: usize },
    #[error("value count {actual} does not match {rows}x{cols} = {expected}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite sample at flat index {index}")]
    NonFinite { index: usize },
    #[error("{name} must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// Dense row-major 2-D complex field (object, probe, exit wave).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField2D {
    rows: usize,
    cols: usize,
    values: Vec<Complex64>,
}

/// Dense row-major 2-D real field (magnitudes, phases, intensities).
#[derive(Debug, Clone, PartialEq)]
pub struct RealField2D {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn check_dims(rows: usize, cols: usize) -> Result<(), FieldError> {
    if rows == 0 || cols == 0 {
        return Err(FieldError::EmptyDims { rows, cols });
    }
    Ok(())
}

impl ComplexField2D {
    /// Validating constructor: positive dims, matching length, finite samples.
    pub fn new(rows: usize, cols: usize, values: Vec<Complex64>) -> Result<Self, FieldError> {
        check_dims(rows, cols)?;
        let expected = rows * cols;
        if values.len() != expected {
            return Err(FieldError::LengthMismatch {
                rows,
                cols,
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(FieldError::NonFinite { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, Complex64::new(0.0, 0.0))
    }

    pub fn filled(rows: usize, cols: usize, value: Complex64) -> Self {
        assert!(rows > 0 && cols > 0, "field dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        assert!(rows > 0 && cols > 0, "field dimensions must be positive");
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `win_rows` x `win_cols` sub-block whose top-left corner is
    /// `(top, left)`. Panics if the window leaves the field.
    pub fn window(&self, top: usize, left: usize, win_rows: usize, win_cols: usize) -> Self {
        assert!(top + win_rows <= self.rows && left + win_cols <= self.cols);
        let mut values = Vec::with_capacity(win_rows * win_cols);
        for r in 0..win_rows {
            let start = (top + r) * self.cols + left;
            values.extend_from_slice(&self.values[start..start + win_cols]);
        }
        Self {
            rows: win_rows,
            cols: win_cols,
            values,
        }
    }
}

impl RealField2D {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, FieldError> {
        check_dims(rows, cols)?;
        let expected = rows * cols;
        if values.len() != expected {
            return Err(FieldError::LengthMismatch {
                rows,
                cols,
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "field dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "field dimensions must be positive");
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn window(&self, top: usize, left: usize, win_rows: usize, win_cols: usize) -> Self {
        assert!(top + win_rows <= self.rows && left + win_cols <= self.cols);
        let mut values = Vec::with_capacity(win_rows * win_cols);
        for r in 0..win_rows {
            let start = (top + r) * self.cols + left;
            values.extend_from_slice(&self.values[start..start + win_cols]);
        }
        Self {
            rows: win_rows,
            cols: win_cols,
            values,
        }
    }
}

impl std::ops::Index<(usize, usize)> for ComplexField2D {
    type Output = Complex64;
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.values[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexField2D {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.values[r * self.cols + c]
    }
}

impl std::ops::Index<(usize, usize)> for RealField2D {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.values[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for RealField2D {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.values[r * self.cols + c]
    }
}

thread_local! {
    // One planner per thread; rustfft caches plans per size inside it.
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

fn transpose(rows: usize, cols: usize, data: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn fft2_with_direction(f: &ComplexField2D, direction: FftDirection) -> ComplexField2D {
    let (rows, cols) = f.shape();
    let mut buf = f.values().to_vec();

    let row_fft = plan(cols, direction);
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(cols) {
        row_fft.process_with_scratch(row, &mut scratch);
    }

    let mut t = transpose(rows, cols, &buf);
    let col_fft = plan(rows, direction);
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex64::default());
    for col in t.chunks_exact_mut(rows) {
        col_fft.process_with_scratch(col, &mut scratch);
    }

    let mut out = transpose(cols, rows, &t);
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    for v in &mut out {
        *v *= scale;
    }
    ComplexField2D {
        rows,
        cols,
        values: out,
    }
}

/// Unitary 2-D DFT. `norm(fft2(x)) == norm(x)` to machine precision.
pub fn fft2(f: &ComplexField2D) -> ComplexField2D {
    fft2_with_direction(f, FftDirection::Forward)
}

/// Exact inverse of [`fft2`] under the same `1/sqrt(N)` normalization.
pub fn ifft2(f: &ComplexField2D) -> ComplexField2D {
    fft2_with_direction(f, FftDirection::Inverse)
}

/// Circular shift moving the zero-frequency bin to the array center
/// (`out[(i + rows/2) % rows, (j + cols/2) % cols] = in[i, j]`).
pub fn fftshift(f: &ComplexField2D) -> ComplexField2D {
    let (rows, cols) = f.shape();
    let mut out = ComplexField2D::zeros(rows, cols);
    for r in 0..rows {
        let rr = (r + rows / 2) % rows;
        for c in 0..cols {
            let cc = (c + cols / 2) % cols;
            out[(rr, cc)] = f.get(r, c);
        }
    }
    out
}

/// FFT sample frequency for bin `k` of an `n`-point axis with sample spacing
/// `pitch`, in cycles per unit length.
fn fft_freq(k: usize, n: usize, pitch: f64) -> f64 {
    let k = if k <= (n - 1) / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    k / (n as f64 * pitch)
}

/// Paraxial (transfer-function) free-space propagation over `distance`.
///
/// The spectrum is multiplied by `exp(-i pi lambda z (u^2 + v^2))`, a pure
/// phase, so the field energy is conserved and propagation composes
/// additively in distance. `distance` may be negative (back-propagation).
pub fn fresnel_propagate(
    f: &ComplexField2D,
    distance: f64,
    wavelength: f64,
    pixel_pitch: f64,
) -> Result<ComplexField2D, FieldError> {
    if !(wavelength > 0.0) || !wavelength.is_finite() {
        return Err(FieldError::InvalidParameter {
            name: "wavelength",
            value: wavelength,
        });
    }
    if !(pixel_pitch > 0.0) || !pixel_pitch.is_finite() {
        return Err(FieldError::InvalidParameter {
            name: "pixel_pitch",
            value: pixel_pitch,
        });
    }
    if !distance.is_finite() {
        return Err(FieldError::InvalidParameter {
            name: "distance",
            value: distance,
        });
    }

    let (rows, cols) = f.shape();
    let mut spectrum = fft2(f);
    for kr in 0..rows {
        let v = fft_freq(kr, rows, pixel_pitch);
        for kc in 0..cols {
            let u = fft_freq(kc, cols, pixel_pitch);
            let phase = -PI * wavelength * distance * (u * u + v * v);
            spectrum[(kr, kc)] *= Complex64::from_polar(1.0, phase);
        }
    }
    Ok(ifft2(&spectrum))
}

/// Forward differences with replicate (clamp) boundary.
///
/// Returns `(gx, gy)`:
/// * `gx[r, c] = f[r, c+1] - f[r, c]`, zero in the last column;
/// * `gy[r, c] = f[r+1, c] - f[r, c]`, zero in the last row.
pub fn grad2(f: &RealField2D) -> (RealField2D, RealField2D) {
    let (rows, cols) = f.shape();
    let mut gx = RealField2D::zeros(rows, cols);
    let mut gy = RealField2D::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                gx[(r, c)] = f.get(r, c + 1) - f.get(r, c);
            }
            if r + 1 < rows {
                gy[(r, c)] = f.get(r + 1, c) - f.get(r, c);
            }
        }
    }
    (gx, gy)
}

/// Adjoint of [`grad2`]: `<grad2(f), (wx, wy)> == <f, grad2_adjoint(wx, wy)>`
/// for every `f`. This is the negative divergence matching the replicate
/// boundary rule above.
pub fn grad2_adjoint(wx: &RealField2D, wy: &RealField2D) -> RealField2D {
    assert_eq!(wx.shape(), wy.shape());
    let (rows, cols) = wx.shape();
    let mut out = RealField2D::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            if c > 0 {
                acc += wx.get(r, c - 1);
            }
            if c + 1 < cols {
                acc -= wx.get(r, c);
            }
            if r > 0 {
                acc += wy.get(r - 1, c);
            }
            if r + 1 < rows {
                acc -= wy.get(r, c);
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Magnitude and phase channels of a complex field. The phase of a zero
/// sample is reported as 0; otherwise phase lies in `(-pi, pi]`.
pub fn split(f: &ComplexField2D) -> (RealField2D, RealField2D) {
    let (rows, cols) = f.shape();
    let mut mag = Vec::with_capacity(f.len());
    let mut phase = Vec::with_capacity(f.len());
    for v in f.values() {
        let m = v.norm();
        mag.push(m);
        if m == 0.0 {
            phase.push(0.0);
        } else {
            let mut p = v.im.atan2(v.re);
            if p == -PI {
                p = PI;
            }
            phase.push(p);
        }
    }
    (
        RealField2D { rows, cols, values: mag },
        RealField2D { rows, cols, values: phase },
    )
}

/// Inverse of [`split`]: `magnitude * exp(i * phase)` pointwise.
/// Magnitudes are expected to be nonnegative.
pub fn join(magnitude: &RealField2D, phase: &RealField2D) -> ComplexField2D {
    assert_eq!(magnitude.shape(), phase.shape());
    debug_assert!(magnitude.values().iter().all(|&m| m >= 0.0));
    let (rows, cols) = magnitude.shape();
    let values = magnitude
        .values()
        .iter()
        .zip(phase.values())
        .map(|(&m, &p)| Complex64::from_polar(m, p))
        .collect();
    ComplexField2D { rows, cols, values }
}
