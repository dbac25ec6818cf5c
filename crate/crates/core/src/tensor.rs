//! Dense row-major n-d array with cheap clones (shared storage, copy on write).

use std::sync::Arc;

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    data: Arc<Vec<S>>,
    shape: Vec<usize>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![S::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        Arc::<Vec<S>>::make_mut(&mut self.data).as_mut_slice()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Relabel the shape without moving data.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        Tensor {
            data: self.data.clone(),
            shape: shape.to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.as_mut_slice();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn abs_max(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.abs().to_f64_())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.numel() == 0 {
            return 0.0;
        }
        self.data.iter().map(|x| x.to_f64_()).sum::<f64>() / self.numel() as f64
    }

    pub fn cast<S2: Scalar>(&self) -> Tensor<S2> {
        Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|x| S2::of_f64(x.to_f64_())).collect(),
        )
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.to_f32_()).collect()
    }

    pub fn from_f32_slice(shape: &[usize], data: &[f32]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&x| S::of_f32(x)).collect())
    }

    /// Move `axes[i]` of `self` to axis `i` of the output, materializing the copy.
    pub fn permuted(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.shape.len(), "permute rank mismatch");
        let rank = axes.len();
        let in_shape = &self.shape;
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides_for(in_shape);
        let out_strides = strides_for(&out_shape);
        let mut out = vec![S::zero(); self.numel()];
        let src = self.as_slice();
        // walk output linearly, gather from input
        let n = out.len();
        let mut idx = vec![0usize; rank];
        for (o, slot) in out.iter_mut().enumerate().take(n) {
            let mut rem = o;
            let mut src_off = 0usize;
            for d in 0..rank {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
                src_off += idx[d] * in_strides[axes[d]];
            }
            *slot = src[src_off];
        }
        Tensor::from_vec(&out_shape, out)
    }
}

pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let r = t.reshaped(&[3, 2]);
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.as_slice(), t.as_slice());
    }

    #[test]
    fn permute_2d_is_transpose() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let p = t.permuted(&[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.as_slice(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::<f32>::from_vec(&[2, 3, 4], (0..24).map(|x| x as f32).collect());
        let p = t.permuted(&[2, 0, 1]);
        // inverse of [2,0,1] is [1,2,0]
        let back = p.permuted(&[1, 2, 0]);
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.as_slice(), t.as_slice());
    }

    #[test]
    #[should_panic]
    fn bad_reshape_panics() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let _ = t.reshaped(&[4, 2]);
    }
}
