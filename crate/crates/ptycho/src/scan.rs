//! Probe-position plans: raster grids, Fermat spirals, uniform thinning, and
//! the step-size/overlap-ratio conversion.
//!
//! Positions are (row, col) pixel offsets of the probe window's top-left
//! corner; every plan guarantees the full window stays inside the object.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Full width at half maximum of a Gaussian with unit standard deviation.
pub const GAUSSIAN_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3; // 2 sqrt(2 ln 2)

/// Golden angle, degrees.
const GOLDEN_ANGLE_DEG: f64 = 137.508;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("probe {probe_rows}x{probe_cols} does not fit inside object {object_rows}x{object_cols}")]
    ProbeLargerThanObject {
        probe_rows: usize,
        probe_cols: usize,
        object_rows: usize,
        object_cols: usize,
    },
    #[error("position ({row}, {col}) places the probe window out of bounds")]
    PositionOutOfBounds { row: usize, col: usize },
    #[error("duplicate position ({row}, {col})")]
    DuplicatePosition { row: usize, col: usize },
    #[error("step must be at least 1")]
    InvalidStep,
    #[error("spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("n_points must be at least 1")]
    EmptySpiral,
    #[error("only {in_bounds} of {requested} spiral points are in bounds (need at least half)")]
    TooFewInBounds { in_bounds: usize, requested: usize },
    #[error("keep count {keep} out of range 1..={len}")]
    InvalidKeep { keep: usize, len: usize },
}

/// Ordered probe positions plus the geometry they were planned against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanPlan {
    positions: Vec<(usize, usize)>,
    probe_rows: usize,
    probe_cols: usize,
    object_rows: usize,
    object_cols: usize,
}

impl ScanPlan {
    /// Validating constructor: probe fits the object, every window is in
    /// bounds, and positions are unique.
    pub fn new(
        positions: Vec<(usize, usize)>,
        probe_size: (usize, usize),
        object_size: (usize, usize),
    ) -> Result<Self, ScanError> {
        let (probe_rows, probe_cols) = probe_size;
        let (object_rows, object_cols) = object_size;
        if probe_rows > object_rows || probe_cols > object_cols {
            return Err(ScanError::ProbeLargerThanObject {
                probe_rows,
                probe_cols,
                object_rows,
                object_cols,
            });
        }
        let max_row = object_rows - probe_rows;
        let max_col = object_cols - probe_cols;
        let mut seen = HashSet::with_capacity(positions.len());
        for &(row, col) in &positions {
            if row > max_row || col > max_col {
                return Err(ScanError::PositionOutOfBounds { row, col });
            }
            if !seen.insert((row, col)) {
                return Err(ScanError::DuplicatePosition { row, col });
            }
        }
        Ok(Self {
            positions,
            probe_rows,
            probe_cols,
            object_rows,
            object_cols,
        })
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn probe_shape(&self) -> (usize, usize) {
        (self.probe_rows, self.probe_cols)
    }

    pub fn object_shape(&self) -> (usize, usize) {
        (self.object_rows, self.object_cols)
    }

    /// Row-major boolean mask over the object marking pixels covered by at
    /// least one probe window.
    pub fn coverage_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.object_rows * self.object_cols];
        for &(top, left) in &self.positions {
            for r in top..top + self.probe_rows {
                let base = r * self.object_cols;
                for c in left..left + self.probe_cols {
                    mask[base + c] = true;
                }
            }
        }
        mask
    }

    /// Mean distance from each position to its nearest neighbor. `None` for
    /// plans with fewer than two positions.
    pub fn mean_nearest_neighbor_spacing(&self) -> Option<f64> {
        if self.positions.len() < 2 {
            return None;
        }
        let mut total = 0.0;
        for (i, &(r1, c1)) in self.positions.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, &(r2, c2)) in self.positions.iter().enumerate() {
                if i == j {
                    continue;
                }
                let dr = r1 as f64 - r2 as f64;
                let dc = c1 as f64 - c2 as f64;
                best = best.min((dr * dr + dc * dc).sqrt());
            }
            total += best;
        }
        Some(total / self.positions.len() as f64)
    }
}

/// Row-major grid of positions spaced `step` pixels apart, covering the
/// maximal in-bounds region starting at (0, 0).
pub fn raster_plan(
    object_size: (usize, usize),
    probe_size: (usize, usize),
    step: usize,
) -> Result<ScanPlan, ScanError> {
    if step == 0 {
        return Err(ScanError::InvalidStep);
    }
    let (object_rows, object_cols) = object_size;
    let (probe_rows, probe_cols) = probe_size;
    if probe_rows > object_rows || probe_cols > object_cols {
        return Err(ScanError::ProbeLargerThanObject {
            probe_rows,
            probe_cols,
            object_rows,
            object_cols,
        });
    }
    let mut positions = Vec::new();
    let mut row = 0;
    loop {
        let mut col = 0;
        loop {
            positions.push((row, col));
            if col + step > object_cols - probe_cols {
                break;
            }
            col += step;
        }
        if row + step > object_rows - probe_rows {
            break;
        }
        row += step;
    }
    ScanPlan::new(positions, probe_size, object_size)
}

/// Overlap ratio between adjacent probe footprints: `1 - step / FWHM` of the
/// Gaussian probe magnitude, clamped at 0. `probe_sigma` is the Gaussian
/// standard deviation in pixels.
pub fn overlap_ratio(step: f64, probe_sigma: f64) -> f64 {
    debug_assert!(step >= 0.0 && probe_sigma > 0.0);
    let fwhm = GAUSSIAN_FWHM_PER_SIGMA * probe_sigma;
    (1.0 - step / fwhm).max(0.0)
}

/// Fermat-spiral plan: point `n` sits at radius `r_n ∝ sqrt(n)` and angle
/// `n * 137.508°` around `center`, with the radial constant scaled so the
/// mean nearest-neighbor spacing of the resulting points lands within 15% of
/// `spacing` pixels. Points are rounded to integer pixels, out-of-bounds
/// points are dropped, and duplicates (after rounding) removed; it is an
/// error if fewer than half of the requested points survive.
pub fn fermat_plan(
    n_points: usize,
    spacing: f64,
    center: (f64, f64),
    object_size: (usize, usize),
    probe_size: (usize, usize),
) -> Result<ScanPlan, ScanError> {
    if n_points == 0 {
        return Err(ScanError::EmptySpiral);
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(ScanError::InvalidSpacing(spacing));
    }
    let (object_rows, object_cols) = object_size;
    let (probe_rows, probe_cols) = probe_size;
    if probe_rows > object_rows || probe_cols > object_cols {
        return Err(ScanError::ProbeLargerThanObject {
            probe_rows,
            probe_cols,
            object_rows,
            object_cols,
        });
    }
    let max_row = (object_rows - probe_rows) as i64;
    let max_col = (object_cols - probe_cols) as i64;

    // One point per spacing^2 of area: the sqrt(n) spiral then delivers a
    // mean nearest-neighbor distance of ~0.95 * spacing.
    let radial = spacing / std::f64::consts::PI.sqrt();
    let golden = GOLDEN_ANGLE_DEG.to_radians();

    let mut seen = HashSet::new();
    let mut positions = Vec::new();
    for n in 0..n_points {
        let r = radial * (n as f64).sqrt();
        let theta = n as f64 * golden;
        let row = (center.0 + r * theta.sin()).round() as i64;
        let col = (center.1 + r * theta.cos()).round() as i64;
        if row < 0 || row > max_row || col < 0 || col > max_col {
            continue;
        }
        let pos = (row as usize, col as usize);
        if seen.insert(pos) {
            positions.push(pos);
        }
    }
    if positions.len() * 2 < n_points {
        return Err(ScanError::TooFewInBounds {
            in_bounds: positions.len(),
            requested: n_points,
        });
    }
    ScanPlan::new(positions, probe_size, object_size)
}

/// Deterministic index-uniform thinning: keeps positions at indices
/// `round(j * (len - 1) / (keep - 1))` for `j = 0..keep`, so the first and
/// last positions always survive. `keep == 1` keeps index 0.
pub fn thin_plan(plan: &ScanPlan, keep: usize) -> Result<ScanPlan, ScanError> {
    let len = plan.len();
    if keep == 0 || keep > len {
        return Err(ScanError::InvalidKeep { keep, len });
    }
    let positions = if keep == 1 {
        vec![plan.positions[0]]
    } else {
        (0..keep)
            .map(|j| {
                let idx = (j as f64 * (len - 1) as f64 / (keep - 1) as f64).round() as usize;
                plan.positions[idx]
            })
            .collect()
    };
    ScanPlan::new(positions, plan.probe_shape(), plan.object_shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_exact_tiling() {
        let plan = raster_plan((512, 512), (256, 256), 256).unwrap();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan.positions()[0], (0, 0));
        assert_eq!(plan.positions()[3], (256, 256));
    }

    #[test]
    fn raster_step_32_gives_81_positions() {
        // floor((512 - 256) / 32) + 1 = 9 positions per axis
        let plan = raster_plan((512, 512), (256, 256), 32).unwrap();
        assert_eq!(plan.len(), 81);
    }

    #[test]
    fn raster_oversized_step_single_position() {
        let plan = raster_plan((100, 100), (60, 60), 500).unwrap();
        assert_eq!(plan.positions(), &[(0, 0)]);
    }

    #[test]
    fn raster_rejects_probe_larger_than_object() {
        assert!(matches!(
            raster_plan((64, 64), (128, 128), 8),
            Err(ScanError::ProbeLargerThanObject { .. })
        ));
        assert!(matches!(raster_plan((64, 64), (32, 32), 0), Err(ScanError::InvalidStep)));
    }

    #[test]
    fn overlap_ratio_reproduces_reference_points() {
        // sigma = 64 px: the four step sizes map to 78%, 57%, 36%, 15%.
        assert!((overlap_ratio(32.0, 64.0) - 0.788).abs() < 5e-3);
        assert!((overlap_ratio(64.0, 64.0) - 0.575).abs() < 5e-3);
        assert!((overlap_ratio(96.0, 64.0) - 0.363).abs() < 5e-3);
        assert!((overlap_ratio(128.0, 64.0) - 0.151).abs() < 5e-3);
    }

    #[test]
    fn overlap_ratio_monotone_and_clamped() {
        let mut last = f64::INFINITY;
        for step in 0..2000 {
            let o = overlap_ratio(step as f64, 64.0);
            assert!(o <= last);
            assert!((0.0..=1.0).contains(&o));
            last = o;
        }
        assert_eq!(overlap_ratio(1e6, 64.0), 0.0);
    }

    #[test]
    fn fermat_single_point_at_center() {
        let plan = fermat_plan(1, 10.0, (32.0, 40.0), (128, 128), (16, 16)).unwrap();
        assert_eq!(plan.positions(), &[(32, 40)]);
    }

    #[test]
    fn fermat_175_points_spacing_and_bounds() {
        // Plenty of room: all 175 points survive, unique, near the requested
        // mean spacing.
        let plan = fermat_plan(175, 20.0, (384.0, 384.0), (1024, 1024), (256, 256)).unwrap();
        assert_eq!(plan.len(), 175);
        let mean = plan.mean_nearest_neighbor_spacing().unwrap();
        assert!(
            (mean - 20.0).abs() / 20.0 < 0.15,
            "mean nearest-neighbor spacing {mean} not within 15% of 20"
        );
    }

    #[test]
    fn fermat_rejects_mostly_out_of_bounds() {
        // A spiral far wider than the object loses more than half its points.
        assert!(matches!(
            fermat_plan(200, 100.0, (16.0, 16.0), (64, 64), (32, 32)),
            Err(ScanError::TooFewInBounds { .. })
        ));
    }

    #[test]
    fn thin_plan_keep_all_is_identity() {
        let plan = raster_plan((256, 256), (64, 64), 32).unwrap();
        let thinned = thin_plan(&plan, plan.len()).unwrap();
        assert_eq!(plan, thinned);
    }

    #[test]
    fn thin_plan_reference_counts() {
        let plan = fermat_plan(175, 12.0, (96.0, 96.0), (256, 256), (64, 64)).unwrap();
        assert_eq!(plan.len(), 175);
        assert_eq!(thin_plan(&plan, 99).unwrap().len(), 99);
        assert_eq!(thin_plan(&plan, 61).unwrap().len(), 61);
    }

    #[test]
    fn thin_plan_keeps_endpoints_and_subsequence() {
        let plan = raster_plan((512, 512), (64, 64), 32).unwrap();
        let thinned = thin_plan(&plan, 37).unwrap();
        assert_eq!(thinned.positions()[0], plan.positions()[0]);
        assert_eq!(
            *thinned.positions().last().unwrap(),
            *plan.positions().last().unwrap()
        );
        // subsequence check
        let mut it = plan.positions().iter();
        for p in thinned.positions() {
            assert!(it.any(|q| q == p), "{p:?} not in order in the parent plan");
        }
    }

    #[test]
    fn thin_plan_rejects_out_of_range() {
        let plan = raster_plan((128, 128), (64, 64), 32).unwrap();
        assert!(matches!(thin_plan(&plan, 0), Err(ScanError::InvalidKeep { .. })));
        assert!(matches!(
            thin_plan(&plan, plan.len() + 1),
            Err(ScanError::InvalidKeep { .. })
        ));
    }

    #[test]
    fn plan_constructor_validates() {
        assert!(matches!(
            ScanPlan::new(vec![(65, 0)], (64, 64), (128, 128)),
            Err(ScanError::PositionOutOfBounds { .. })
        ));
        assert!(matches!(
            ScanPlan::new(vec![(0, 0), (0, 0)], (64, 64), (128, 128)),
            Err(ScanError::DuplicatePosition { .. })
        ));
    }

    #[test]
    fn coverage_mask_marks_windows() {
        let plan = ScanPlan::new(vec![(0, 0)], (2, 2), (4, 4)).unwrap();
        let mask = plan.coverage_mask();
        let covered: usize = mask.iter().map(|&b| b as usize).sum();
        assert_eq!(covered, 4);
        assert!(mask[0] && mask[1] && mask[4] && mask[5]);
        assert!(!mask[15]);
    }
}
