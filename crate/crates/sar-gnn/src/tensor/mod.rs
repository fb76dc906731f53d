//! Dense 64-bit float tensors with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: every forward pass records its operations on
//! a fresh [`Tape`], and [`Tape::backward`] replays the records in reverse to
//! accumulate gradients. Persistent values (model parameters) live outside
//! any tape as [`Param`] handles; leasing a parameter onto a tape copies its
//! data in, and `backward` routes the resulting gradient back into the
//! parameter's grad buffer.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_named, GradCheckReport};
pub use tape::{Tape, Val};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dim("rows have unequal lengths".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![n, d], data)
    }

    /// Glorot-uniform initialization: entries drawn from
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor { shape: vec![rows, cols], data, grad: None }
    }

    /// Glorot-style vector initialization, treating the vector as a map from
    /// a single input (fan_in = 1) to `len` outputs.
    pub fn glorot_vec(len: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (1 + len) as f64).sqrt();
        let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { shape: vec![len], data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// A shared, mutable handle to a trainable [`Tensor`].
///
/// Tapes are single-threaded; `Param` is deliberately not `Send`. Distinct
/// model instances (e.g. cross-validation folds) own distinct parameter sets
/// and may train concurrently.
#[derive(Clone, Debug)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(t: Tensor) -> Self {
        Param(Rc::new(RefCell::new(t)))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.borrow().numel()
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.borrow().data().to_vec()
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.borrow().grad().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        self.borrow_mut().zero_grad();
    }

    /// Pointer identity; used to recognize repeated leases of one parameter.
    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn glorot_entries_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(4, 4), (2, 7), (16, 3)] {
            let t = Tensor::glorot(r, c, &mut rng);
            let bound = (6.0 / (r + c) as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound));
        }
        let v = Tensor::glorot_vec(8, &mut rng);
        let bound = (6.0 / 9.0_f64).sqrt();
        assert!(v.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
