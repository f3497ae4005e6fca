//! Order-sensitive MLP adapter baseline.
//!
//! All window features are zero-padded to a fixed capacity, concatenated and
//! projected to one global feature, which is then fused back into every
//! window: `out_i = ratio * f_i + (1 - ratio) * fuse(f_i + global(concat F))`.
//! Swapping two windows changes the concatenation and therefore the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::transformer::{check_alpha, mix};
use crate::linalg::Matrix;
use crate::{Error, Result};

pub const DEFAULT_MAX_WINDOWS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpAdapter {
    pub max_windows: usize,
    pub ratio: f64,
    /// `(max_windows * D) -> D`
    pub global: Linear,
    /// `D -> D`
    pub fuse: Linear,
}

pub(crate) struct MlpCache {
    flat: Matrix,
    summed: Matrix,
}

impl MlpAdapter {
    /// Xavier-uniform projections with zero biases.
    pub fn new(dim: usize, max_windows: usize, ratio: f64, seed: u64) -> Result<Self> {
        check_alpha(ratio)?;
        if max_windows == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "MLP adapter needs dim >= 1 and capacity >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            max_windows,
            ratio,
            global: Linear::xavier(max_windows * dim, dim, &mut rng),
            fuse: Linear::xavier(dim, dim, &mut rng),
        })
    }

    /// All projections zero.
    pub fn zeros(dim: usize, max_windows: usize, ratio: f64) -> Self {
        Self {
            max_windows,
            ratio,
            global: Linear::zeros(max_windows * dim, dim),
            fuse: Linear::zeros(dim, dim),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.max_windows, self.ratio)
    }

    pub fn dim(&self) -> usize {
        self.fuse.inputs()
    }

    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(features)?.0)
    }

    pub(crate) fn forward_cached(&self, features: &Matrix) -> Result<(Matrix, MlpCache)> {
        let (m, d) = (features.rows(), features.cols());
        if d != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter expects {} dims, features have {d}",
                self.dim()
            )));
        }
        if m == 0 {
            return Err(Error::Empty("adapter input has no windows".into()));
        }
        if m > self.max_windows {
            return Err(Error::InvalidArgument(format!(
                "{m} windows exceed the MLP adapter's capacity of {}",
                self.max_windows
            )));
        }
        let mut flat = Matrix::zeros(1, self.max_windows * d);
        flat.as_mut_slice()[..m * d].copy_from_slice(features.as_slice());
        let g = self.global.forward(&flat);
        let mut summed = features.clone();
        summed.add_row_broadcast(g.row(0));
        let fused = self.fuse.forward(&summed);
        let out = mix(features, &fused, self.ratio);
        Ok((out, MlpCache { flat, summed }))
    }

    pub(crate) fn backward(&self, cache: &MlpCache, dout: &Matrix, grad: &mut MlpAdapter) -> Matrix {
        let (m, d) = (dout.rows(), dout.cols());
        let dfused = dout.map(|v| (1.0 - self.ratio) * v);
        let dsummed = self.fuse.backward(&cache.summed, &dfused, &mut grad.fuse);
        let mut dg = Matrix::zeros(1, d);
        dsummed.col_sums_into(dg.as_mut_slice());
        let dflat = self.global.backward(&cache.flat, &dg, &mut grad.global);
        let mut dfeat = dsummed;
        for (i, v) in dfeat.as_mut_slice().iter_mut().enumerate() {
            *v += self.ratio * dout.as_slice()[i] + dflat.as_slice()[i];
        }
        debug_assert_eq!(dfeat.rows(), m);
        dfeat
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.global.tensors().to_vec();
        v.extend(self.fuse.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.extend(self.global.tensors_mut());
        v.extend(self.fuse.tensors_mut());
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        ["global.weight", "global.bias", "fuse.weight", "fuse.bias"]
            .map(String::from)
            .to_vec()
    }
}
