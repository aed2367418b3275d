//! In-memory training data: per-sample `(K, u_h, A_h, F_h)` records.

use crate::error::{Error, Result};
use crate::fem::{FemSystem, FieldNodal, Grid2D};
use nalgebra::DVector;
use std::rc::Rc;

/// One sample: input field restricted to free nodes, reference solution, and
/// the (possibly data-linearized) fine-scale system.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// K at the free nodes, row-major over the interior lattice.
    pub k_free: Vec<f64>,
    /// Reference fine solution on free nodes.
    pub u: DVector<f64>,
    /// Fine system; `A u = F` holds to solver tolerance.
    pub sys: Rc<FemSystem>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: Grid2D,
    pub samples: Vec<TrainSample>,
}

impl Dataset {
    pub fn new(grid: Grid2D) -> Self {
        Dataset {
            grid,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, k: &FieldNodal, u: DVector<f64>, sys: FemSystem) {
        self.samples.push(TrainSample {
            k_free: k.restrict_to_free(&self.grid),
            u,
            sys: Rc::new(sys),
        });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Free-lattice extent `(height, width)` the networks consume.
    pub fn input_hw(&self) -> (usize, usize) {
        let (w, h) = self.grid.free_extent();
        (h, w)
    }

    /// Splits off the first `n_train` samples as training data.
    pub fn split(mut self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.samples.len() {
            return Err(Error::InvalidConfig(format!(
                "split needs 0 < n_train < {}, got {n_train}",
                self.samples.len()
            )));
        }
        let rest = self.samples.split_off(n_train);
        let test = Dataset {
            grid: self.grid.clone(),
            samples: rest,
        };
        Ok((self, test))
    }

    /// Verifies `‖A u − F‖/‖F‖ ≤ tol` for every sample.
    pub fn max_residual(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.sys.relative_residual(&s.u))
            .fold(0.0, f64::max)
    }
}
