//! Shared discretization of the time axis.
//!
//! All tables in the solver are indexed by whole numbers of grid cells.
//! Cell `c` covers the half-open interval `(c*step, (c+1)*step]`, so a
//! duration that falls exactly on a grid point belongs to the cell whose
//! upper edge it is.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("horizon {horizon} is not a whole multiple of step {step}")]
    NotAMultiple { step: f64, horizon: f64 },
}

/// Uniform grid over `[0, horizon]` with spacing `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    step: f64,
    horizon: f64,
    cells: usize,
}

impl TimeGrid {
    /// Creates a grid; `horizon` must be a whole multiple of `step`.
    pub fn new(step: f64, horizon: f64) -> Result<Self, GridError> {
        if !(step.is_finite() && step > 0.0) {
            return Err(GridError::InvalidStep(step));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::InvalidHorizon(horizon));
        }
        let ratio = horizon / step;
        let cells = ratio.round();
        if (ratio - cells).abs() > 1e-9 * ratio.max(1.0) {
            return Err(GridError::NotAMultiple { step, horizon });
        }
        Ok(Self {
            step,
            horizon,
            cells: cells as usize,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of cells covering `(0, horizon]`.
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Index of the cell containing duration `t`, i.e. the cell whose
    /// half-open interval `(c*step, (c+1)*step]` contains it. Durations
    /// within rounding slack of a grid point resolve to the cell below.
    pub fn cell_of(&self, t: f64) -> usize {
        let scaled = t / self.step;
        let snapped = scaled.round();
        let idx = if (scaled - snapped).abs() <= 1e-9 * snapped.abs().max(1.0) {
            snapped as isize - 1
        } else {
            scaled.ceil() as isize - 1
        };
        idx.clamp(0, self.cells as isize - 1) as usize
    }

    /// Midpoint of cell `c`.
    pub fn midpoint(&self, c: usize) -> f64 {
        (c as f64 + 0.5) * self.step
    }

    /// Upper edge of cell `c`; used as the representative realized
    /// duration when a sampled or integrated quantity must be mapped
    /// back onto the grid.
    pub fn upper_edge(&self, c: usize) -> f64 {
        (c as f64 + 1.0) * self.step
    }

    /// Largest table index whose grid time does not exceed `t`, so
    /// budget lookups round down to the guaranteed side. Clamped to the
    /// horizon.
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let scaled = t / self.step;
        let idx = (scaled + 1e-9 * scaled.max(1.0)).floor() as usize;
        idx.min(self.cells)
    }

    /// Table row for a realized upstream duration: durations are
    /// recorded at cell upper edges, so a positive `y` in cell `c` maps
    /// to row `c + 1` and zero maps to the unconditioned row 0.
    pub fn upper_index(&self, y: f64) -> usize {
        if y <= 0.0 {
            0
        } else {
            self.cell_of(y) + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_exact_multiples() {
        let g = TimeGrid::new(0.5, 80.0).unwrap();
        assert_eq!(g.cells(), 160);
        assert_eq!(g.step(), 0.5);
        assert_eq!(g.horizon(), 80.0);
    }

    #[test]
    fn rejects_non_multiples() {
        assert_eq!(
            TimeGrid::new(0.3, 80.0).unwrap_err(),
            GridError::NotAMultiple {
                step: 0.3,
                horizon: 80.0
            }
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            TimeGrid::new(0.0, 10.0),
            Err(GridError::InvalidStep(_))
        ));
        assert!(matches!(
            TimeGrid::new(-1.0, 10.0),
            Err(GridError::InvalidStep(_))
        ));
        assert!(matches!(
            TimeGrid::new(0.5, f64::NAN),
            Err(GridError::InvalidHorizon(_))
        ));
        assert!(matches!(
            TimeGrid::new(0.5, -3.0),
            Err(GridError::InvalidHorizon(_))
        ));
    }

    #[test]
    fn cell_lookup_uses_half_open_upper_intervals() {
        let g = TimeGrid::new(0.5, 10.0).unwrap();
        assert_eq!(g.cell_of(0.2), 0);
        assert_eq!(g.cell_of(0.5), 0);
        assert_eq!(g.cell_of(0.5000000001), 0);
        assert_eq!(g.cell_of(0.6), 1);
        assert_eq!(g.cell_of(1.0), 1);
        assert_eq!(g.cell_of(10.0), 19);
        assert_eq!(g.cell_of(12.0), 19);
        assert_eq!(g.cell_of(0.0), 0);
    }

    #[test]
    fn midpoints_and_edges() {
        let g = TimeGrid::new(0.25, 80.0).unwrap();
        assert!((g.midpoint(0) - 0.125).abs() < 1e-15);
        assert!((g.upper_edge(0) - 0.25).abs() < 1e-15);
        assert!((g.midpoint(319) - 79.875).abs() < 1e-12);
        assert!((g.upper_edge(319) - 80.0).abs() < 1e-12);
    }

    #[test]
    fn budget_index_rounds_down() {
        let g = TimeGrid::new(0.5, 80.0).unwrap();
        assert_eq!(g.floor_index(60.0), 120);
        assert_eq!(g.floor_index(60.3), 120);
        assert_eq!(g.floor_index(0.0), 0);
        assert_eq!(g.floor_index(0.49), 0);
        assert_eq!(g.floor_index(80.0), 160);
        assert_eq!(g.floor_index(95.0), 160);
        let tenth = TimeGrid::new(0.1, 80.0).unwrap();
        assert_eq!(tenth.floor_index(60.0), 600);
    }

    #[test]
    fn realized_durations_map_to_upper_edge_rows() {
        let g = TimeGrid::new(0.5, 80.0).unwrap();
        assert_eq!(g.upper_index(0.0), 0);
        assert_eq!(g.upper_index(9.0), 18);
        assert_eq!(g.upper_index(8.8), 18);
        assert_eq!(g.upper_index(0.2), 1);
        assert_eq!(g.upper_index(80.0), 160);
    }

    #[test]
    fn grid_survives_serialization() {
        let g = TimeGrid::new(0.5, 80.0).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: TimeGrid = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
    }
}
