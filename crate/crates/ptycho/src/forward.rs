//! Ptychographic forward model: exit waves, far-field intensities, dataset
//! simulation, and the amplitude-based data-fidelity energy.

use thiserror::Error;

use crate::field::{fft2, ComplexField2D, RealField2D};
use crate::scan::ScanPlan;

/// Stabilizer for magnitudes: `|z|` is computed as `sqrt(|z|^2 + EPS_MAG^2)`
/// inside the data term so its gradient is defined at zero.
pub const EPS_MAG: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("position ({row}, {col}) places the probe window outside the object")]
    OutOfBounds { row: usize, col: usize },
    #[error("{name} has shape {actual_rows}x{actual_cols}, expected {rows}x{cols}")]
    ShapeMismatch {
        name: &'static str,
        rows: usize,
        cols: usize,
        actual_rows: usize,
        actual_cols: usize,
    },
    #[error("pattern count {actual} does not match plan length {expected}")]
    PatternCount { expected: usize, actual: usize },
    #[error("pattern {pattern} has a negative intensity at flat index {index}")]
    NegativeIntensity { pattern: usize, index: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch index {index} out of range for {len} patterns")]
    BadBatchIndex { index: usize, len: usize },
}

/// Stack of nonnegative intensity patterns aligned to a scan plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionSet {
    plan: ScanPlan,
    patterns: Vec<RealField2D>,
}

impl DiffractionSet {
    pub fn new(plan: ScanPlan, patterns: Vec<RealField2D>) -> Result<Self, ForwardError> {
        if patterns.len() != plan.len() {
            return Err(ForwardError::PatternCount {
                expected: plan.len(),
                actual: patterns.len(),
            });
        }
        let (probe_rows, probe_cols) = plan.probe_shape();
        for (i, p) in patterns.iter().enumerate() {
            if p.shape() != (probe_rows, probe_cols) {
                return Err(ForwardError::ShapeMismatch {
                    name: "pattern",
                    rows: probe_rows,
                    cols: probe_cols,
                    actual_rows: p.rows(),
                    actual_cols: p.cols(),
                });
            }
            if let Some(index) = p.values().iter().position(|&v| v < 0.0) {
                return Err(ForwardError::NegativeIntensity { pattern: i, index });
            }
        }
        Ok(Self { plan, patterns })
    }

    pub fn plan(&self) -> &ScanPlan {
        &self.plan
    }

    pub fn patterns(&self) -> &[RealField2D] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

fn check_pos(
    object: &ComplexField2D,
    probe: &ComplexField2D,
    pos: (usize, usize),
) -> Result<(), ForwardError> {
    if pos.0 + probe.rows() > object.rows() || pos.1 + probe.cols() > object.cols() {
        return Err(ForwardError::OutOfBounds {
            row: pos.0,
            col: pos.1,
        });
    }
    Ok(())
}

/// Exit wave at `pos`: probe times the object window under it.
pub fn exit_wave(
    object: &ComplexField2D,
    probe: &ComplexField2D,
    pos: (usize, usize),
) -> Result<ComplexField2D, ForwardError> {
    check_pos(object, probe, pos)?;
    let mut win = object.window(pos.0, pos.1, probe.rows(), probe.cols());
    for (w, p) in win.values_mut().iter_mut().zip(probe.values()) {
        *w *= p;
    }
    Ok(win)
}

/// Far-field intensity: elementwise squared magnitude of the exit wave's
/// unitary Fourier transform. Total intensity equals the exit-wave power.
pub fn diffract(psi: &ComplexField2D) -> RealField2D {
    let spectrum = fft2(psi);
    let (rows, cols) = spectrum.shape();
    RealField2D::new(
        rows,
        cols,
        spectrum.values().iter().map(|v| v.norm_sqr()).collect(),
    )
    .expect("squared magnitudes of a finite field are finite")
}

/// Noiseless dataset: one diffraction pattern per plan position.
pub fn simulate(
    object: &ComplexField2D,
    probe: &ComplexField2D,
    plan: &ScanPlan,
) -> Result<DiffractionSet, ForwardError> {
    check_geometry(object, probe, plan)?;
    let patterns = plan
        .positions()
        .iter()
        .map(|&pos| Ok(diffract(&exit_wave(object, probe, pos)?)))
        .collect::<Result<Vec<_>, ForwardError>>()?;
    DiffractionSet::new(plan.clone(), patterns)
}

fn check_geometry(
    object: &ComplexField2D,
    probe: &ComplexField2D,
    plan: &ScanPlan,
) -> Result<(), ForwardError> {
    if object.shape() != plan.object_shape() {
        let (rows, cols) = plan.object_shape();
        return Err(ForwardError::ShapeMismatch {
            name: "object",
            rows,
            cols,
            actual_rows: object.rows(),
            actual_cols: object.cols(),
        });
    }
    if probe.shape() != plan.probe_shape() {
        let (rows, cols) = plan.probe_shape();
        return Err(ForwardError::ShapeMismatch {
            name: "probe",
            rows,
            cols,
            actual_rows: probe.rows(),
            actual_cols: probe.cols(),
        });
    }
    Ok(())
}

/// Amplitude residual energy over a batch of positions:
/// mean over the batch of `sum_k (|F[psi_i]|_k - sqrt(I_i_k))^2`, with the
/// estimated magnitude stabilized by [`EPS_MAG`].
pub fn data_fidelity(
    object: &ComplexField2D,
    probe: &ComplexField2D,
    dataset: &DiffractionSet,
    batch: &[usize],
) -> Result<f64, ForwardError> {
    check_geometry(object, probe, dataset.plan())?;
    if batch.is_empty() {
        return Err(ForwardError::EmptyBatch);
    }
    let mut total = 0.0;
    for &i in batch {
        if i >= dataset.len() {
            return Err(ForwardError::BadBatchIndex {
                index: i,
                len: dataset.len(),
            });
        }
        let pos = dataset.plan().positions()[i];
        let psi = exit_wave(object, probe, pos)?;
        let spectrum = fft2(&psi);
        let pattern = &dataset.patterns()[i];
        total += spectrum
            .values()
            .iter()
            .zip(pattern.values())
            .map(|(z, &intensity)| {
                let a = (z.norm_sqr() + EPS_MAG * EPS_MAG).sqrt();
                let d = a - intensity.sqrt();
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::raster_plan;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ComplexField2D {
        ComplexField2D::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.random::<f64>() + 0.2, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn exit_wave_identity_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let object = ComplexField2D::filled(8, 8, Complex64::new(1.0, 0.0));
        let probe = random_complex(4, 4, &mut rng);
        for pos in [(0, 0), (2, 3), (4, 4)] {
            let psi = exit_wave(&object, &probe, pos).unwrap();
            assert_eq!(psi, probe);
        }
    }

    #[test]
    fn exit_wave_identity_probe_crops_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let object = random_complex(8, 8, &mut rng);
        let probe = ComplexField2D::filled(3, 3, Complex64::new(1.0, 0.0));
        let psi = exit_wave(&object, &probe, (2, 4)).unwrap();
        assert_eq!(psi, object.window(2, 4, 3, 3));
    }

    #[test]
    fn exit_wave_pointwise_product() {
        let object = ComplexField2D::filled(1, 1, Complex64::from_polar(2.0, std::f64::consts::FRAC_PI_2));
        let probe = ComplexField2D::filled(1, 1, Complex64::new(3.0, 0.0));
        let psi = exit_wave(&object, &probe, (0, 0)).unwrap();
        let expected = Complex64::from_polar(6.0, std::f64::consts::FRAC_PI_2);
        assert!((psi.get(0, 0) - expected).norm() < 1e-15);
    }

    #[test]
    fn exit_wave_rejects_out_of_bounds() {
        let object = ComplexField2D::zeros(8, 8);
        let probe = ComplexField2D::zeros(4, 4);
        assert!(matches!(
            exit_wave(&object, &probe, (5, 0)),
            Err(ForwardError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn diffract_impulse_and_constant() {
        let mut psi = ComplexField2D::zeros(4, 4);
        psi[(1, 2)] = Complex64::new(3.0, 0.0);
        let i = diffract(&psi);
        for &v in i.values() {
            assert!((v - 9.0 / 16.0).abs() < 1e-13); // a^2 / N
        }

        let psi = ComplexField2D::filled(4, 4, Complex64::new(0.5, 0.0));
        let i = diffract(&psi);
        assert!((i.get(0, 0) - 16.0 * 0.25).abs() < 1e-13); // N a^2
        assert!(i.values()[1..].iter().all(|&v| v < 1e-13));
    }

    #[test]
    fn diffract_ignores_global_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = random_complex(8, 8, &mut rng);
        let rotated = psi.map(|v| v * Complex64::from_polar(1.0, 1.234));
        let a = diffract(&psi);
        let b = diffract(&rotated);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn simulate_energy_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let object = random_complex(16, 16, &mut rng);
        let probe = random_complex(8, 8, &mut rng);
        let plan = raster_plan((16, 16), (8, 8), 4).unwrap();
        let ds = simulate(&object, &probe, &plan).unwrap();
        assert_eq!(ds.len(), plan.len());
        for (i, &pos) in plan.positions().iter().enumerate() {
            let psi = exit_wave(&object, &probe, pos).unwrap();
            let power = psi.l2_norm().powi(2);
            let total: f64 = ds.patterns()[i].sum();
            assert!((power - total).abs() <= 1e-12 * power.max(1.0));
        }
    }

    #[test]
    fn simulate_constant_object_repeats_probe_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let object = ComplexField2D::filled(16, 16, Complex64::new(1.0, 0.0));
        let probe = random_complex(8, 8, &mut rng);
        let plan = raster_plan((16, 16), (8, 8), 4).unwrap();
        let ds = simulate(&object, &probe, &plan).unwrap();
        let reference = diffract(&probe);
        for p in ds.patterns() {
            for (a, b) in p.values().iter().zip(reference.values()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn data_fidelity_zero_at_truth_and_rejects_bad_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let object = random_complex(16, 16, &mut rng);
        let probe = random_complex(8, 8, &mut rng);
        let plan = raster_plan((16, 16), (8, 8), 4).unwrap();
        let ds = simulate(&object, &probe, &plan).unwrap();
        let batch: Vec<usize> = (0..ds.len()).collect();
        let e = data_fidelity(&object, &probe, &ds, &batch).unwrap();
        assert!(e <= 1e-20, "energy at the generating pair was {e}");

        assert!(matches!(
            data_fidelity(&object, &probe, &ds, &[]),
            Err(ForwardError::EmptyBatch)
        ));
        assert!(matches!(
            data_fidelity(&object, &probe, &ds, &[999]),
            Err(ForwardError::BadBatchIndex { .. })
        ));
    }

    #[test]
    fn data_fidelity_global_phase_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let object = random_complex(16, 16, &mut rng);
        let probe = random_complex(8, 8, &mut rng);
        let plan = raster_plan((16, 16), (8, 8), 8).unwrap();
        let truth_obj = random_complex(16, 16, &mut rng);
        let ds = simulate(&truth_obj, &probe, &plan).unwrap();
        let batch: Vec<usize> = (0..ds.len()).collect();

        let e0 = data_fidelity(&object, &probe, &ds, &batch).unwrap();
        for k in 0..5 {
            let theta = 0.7 * (k as f64 + 1.0);
            let obj_rot = object.map(|v| v * Complex64::from_polar(1.0, theta));
            let probe_rot = probe.map(|v| v * Complex64::from_polar(1.0, -theta));
            let e1 = data_fidelity(&obj_rot, &probe_rot, &ds, &batch).unwrap();
            assert!((e0 - e1).abs() <= 1e-10 * e0.max(1.0));
        }
    }

    #[test]
    fn data_fidelity_scale_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let object = random_complex(16, 16, &mut rng);
        let probe = random_complex(8, 8, &mut rng);
        let plan = raster_plan((16, 16), (8, 8), 8).unwrap();
        let truth_obj = random_complex(16, 16, &mut rng);
        let ds = simulate(&truth_obj, &probe, &plan).unwrap();
        let batch: Vec<usize> = (0..ds.len()).collect();

        let e0 = data_fidelity(&object, &probe, &ds, &batch).unwrap();
        let c = 2.5;
        let obj_scaled = object.map(|v| v * c);
        let probe_scaled = probe.map(|v| v / c);
        let e1 = data_fidelity(&obj_scaled, &probe_scaled, &ds, &batch).unwrap();
        assert!((e0 - e1).abs() <= 1e-10 * e0.max(1.0));
    }

    #[test]
    fn data_fidelity_batch_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let object = random_complex(16, 16, &mut rng);
        let probe = random_complex(8, 8, &mut rng);
        let plan = raster_plan((16, 16), (8, 8), 4).unwrap();
        let truth_obj = random_complex(16, 16, &mut rng);
        let ds = simulate(&truth_obj, &probe, &plan).unwrap();

        let batch: Vec<usize> = (0..ds.len()).collect();
        let mean = data_fidelity(&object, &probe, &ds, &batch).unwrap();
        let sum: f64 = batch
            .iter()
            .map(|&i| data_fidelity(&object, &probe, &ds, &[i]).unwrap())
            .sum();
        assert!((mean - sum / batch.len() as f64).abs() < 1e-12 * mean.max(1.0));
    }

    #[test]
    fn dataset_constructor_validates() {
        let plan = raster_plan((8, 8), (4, 4), 4).unwrap();
        assert!(matches!(
            DiffractionSet::new(plan.clone(), vec![]),
            Err(ForwardError::PatternCount { .. })
        ));
        let mut patterns = vec![RealField2D::zeros(4, 4); plan.len()];
        patterns[1].set(0, 0, -1.0);
        assert!(matches!(
            DiffractionSet::new(plan, patterns),
            Err(ForwardError::NegativeIntensity { pattern: 1, index: 0 })
        ));
    }
}
