//! Token-sequence view of an image feature grid.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `tokens x channels` tensor with the spatial arrangement of the tokens.
/// Tokens are stored row-major over the grid: token `y * grid_w + x` sits at
/// grid position `(y, x)`. Merged multi-style token sets use a degenerate
/// `n x 1` grid.
#[derive(Clone)]
pub struct FeatureMap {
    tensor: Tensor,
    grid_h: usize,
    grid_w: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, grid_h: usize, grid_w: usize) -> Result<FeatureMap> {
        let shape = tensor.shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "FeatureMap::new",
                "rank-2 tensor",
                format!("{shape:?}"),
            ));
        }
        if shape[0] != grid_h * grid_w {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("{} tokens for a {grid_h}x{grid_w} grid", grid_h * grid_w),
                format!("{}", shape[0]),
            ));
        }
        Ok(FeatureMap {
            tensor,
            grid_h,
            grid_w,
        })
    }

    /// Token set without meaningful 2-D structure (n x 1 grid).
    pub fn flat(tensor: Tensor) -> Result<FeatureMap> {
        let n = tensor.shape()[0];
        FeatureMap::new(tensor, n, 1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tokens(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Same grid, new token tensor (shape must match).
    pub fn with_tensor(&self, tensor: Tensor) -> Result<FeatureMap> {
        FeatureMap::new(tensor, self.grid_h, self.grid_w)
    }
}

/// Per-channel standardization over the tokens of one sample.
pub fn instance_norm(f: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    f.with_tensor(f.tensor().norm_cols(eps)?)
}

/// Channel-wise mean and population standard deviation over tokens,
/// each returned as a `1 x channels` tensor.
pub fn channel_stats(f: &FeatureMap) -> Result<(Tensor, Tensor)> {
    Ok((f.tensor().col_mean()?, f.tensor().col_std()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn token_count_must_match_grid() {
        let t = Tensor::zeros(&[6, 4]);
        assert!(FeatureMap::new(t.clone(), 2, 3).is_ok());
        assert!(FeatureMap::new(t, 2, 2).is_err());
    }

    #[test]
    fn stats_of_normalized_map_are_standard() {
        let mut rng = Rng::new(2);
        let f = FeatureMap::new(Tensor::uniform(&[36, 5], -10.0, 10.0, &mut rng), 6, 6).unwrap();
        let n = instance_norm(&f, 1e-5).unwrap();
        let (mean, std) = channel_stats(&n).unwrap();
        for v in mean.to_vec() {
            assert!(v.abs() < 1e-9);
        }
        for v in std.to_vec() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stats_hand_case() {
        // Single channel [0, 2]: mean 1, population std 1.
        let f = FeatureMap::flat(Tensor::from_vec(vec![0.0, 2.0], &[2, 1]).unwrap()).unwrap();
        let (mean, std) = channel_stats(&f).unwrap();
        assert_eq!(mean.to_vec(), vec![1.0]);
        assert_eq!(std.to_vec(), vec![1.0]);
    }
}
