//! Plain dense 3D volumes, the non-differentiable counterpart of [`crate::tensor::Tensor`].
//!
//! Axis convention matches activations: (depth, height, width), row-major with
//! width fastest.

use crate::error::{CunetError, Result};

/// A dense 3D grid of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Volume<T> {
    pub fn new(dims: [usize; 3], fill: T) -> Self {
        Volume {
            dims,
            data: vec![fill; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(CunetError::ShapeMismatch {
                op: "Volume::from_vec",
                detail: format!("dims {:?} expect {} voxels, got {}", dims, n, data.len()),
            });
        }
        Ok(Volume { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn flat(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> &T {
        &self.data[self.flat(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: T) {
        let i = self.flat(d, h, w);
        self.data[i] = v;
    }

    /// Inverse of [`flat`](Self::flat).
    #[inline]
    pub fn coords(&self, flat: usize) -> [usize; 3] {
        let w = flat % self.dims[2];
        let rest = flat / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], w]
    }
}

/// The admissible raw label values.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// Validate that every voxel of a raw label volume is in {0, 1, 2, 4}.
pub fn validate_labels(labels: &Volume<u8>) -> Result<()> {
    for (i, &v) in labels.data().iter().enumerate() {
        if !LABEL_VALUES.contains(&v) {
            return Err(CunetError::InvalidLabel { value: v, index: i });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_coords_roundtrip() {
        let v: Volume<u8> = Volume::new([3, 4, 5], 0);
        for d in 0..3 {
            for h in 0..4 {
                for w in 0..5 {
                    let f = v.flat(d, h, w);
                    assert_eq!(v.coords(f), [d, h, w]);
                }
            }
        }
    }

    #[test]
    fn label_validation_rejects_value_3() {
        let mut v: Volume<u8> = Volume::new([2, 2, 2], 0);
        v.set(1, 0, 1, 3);
        let err = validate_labels(&v).unwrap_err();
        assert!(matches!(
            err,
            CunetError::InvalidLabel { value: 3, index: 5 }
        ));
    }
}
