//! Datasets for the experiment harness: train/validation splits plus the
//! normalization transform applied to externally loaded data.

use ndarray::{Array1, Array2};

/// Affine transform recorded when a dataset is normalized, so predictions can
/// be mapped back to the original scale.
#[derive(Debug, Clone)]
pub struct Normalization {
    pub x_center: Array1<f64>,
    /// Single scalar scale so that every centered input row has norm <= 1.
    pub x_scale: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Normalization {
    pub fn identity(input_dim: usize) -> Self {
        Normalization {
            x_center: Array1::zeros(input_dim),
            x_scale: 1.0,
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    pub fn denormalize_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

/// Regression dataset with a held-out validation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_x: Array2<f64>,
    pub train_y: Array1<f64>,
    pub val_x: Array2<f64>,
    pub val_y: Array1<f64>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn n_train(&self) -> usize {
        self.train_x.nrows()
    }

    pub fn n_val(&self) -> usize {
        self.val_x.nrows()
    }
}
