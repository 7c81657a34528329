use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    trainable: Cell<bool>,
    needs_grad: Cell<bool>,
    id: u64,
}

/// Dense f64 tensor participating in a reverse-mode tape.
///
/// Cloning is cheap (shared handle). A tensor and any tape that recorded it
/// belong to one logical thread; frozen weight *buffers* live outside the
/// graph (see the backbone) and can be shared freely.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Contract(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                trainable: Cell::new(false),
                needs_grad: Cell::new(false),
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("consistent by construction")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value]).expect("consistent by construction")
    }

    /// Seeded normal draw, the shared init convention for every learnable
    /// tensor and the frozen backbone (std 0.02 unless stated otherwise).
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor::from_vec(shape, data).expect("consistent by construction")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Rows of a matrix; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.inner.shape.len() {
            0 | 1 => 1,
            _ => self.inner.shape[0],
        }
    }

    /// Columns of a matrix; a 1-D tensor of length n has n columns.
    pub fn cols(&self) -> usize {
        match self.inner.shape.len() {
            0 => 1,
            1 => self.inner.shape[0],
            _ => self.inner.shape[1..].iter().product(),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn value(&self) -> f64 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "value() requires a single-element tensor");
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.trainable.set(trainable);
        if trainable {
            self.inner.needs_grad.set(true);
        } else {
            self.inner.needs_grad.set(false);
        }
    }

    /// Builder-style convenience used at parameter init sites.
    pub fn trainable(self) -> Tensor {
        self.set_trainable(true);
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad.get()
    }

    pub(crate) fn mark_needs_grad(&self) {
        self.inner.needs_grad.set(true);
    }

    pub(crate) fn seed_grad(&self, value: f64) {
        *self.inner.grad.borrow_mut() = Some(vec![value; self.numel()]);
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// In-place write used by the optimizer; never called by tape ops.
    pub(crate) fn overwrite_data(&self, new_data: &[f64]) {
        let mut data = self.inner.data.borrow_mut();
        debug_assert_eq!(new_data.len(), data.len());
        data.copy_from_slice(new_data);
    }

    /// In-place scalar mutation used by the finite-difference checker.
    pub(crate) fn nudge(&self, index: usize, delta: f64) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Detached copy: same shape and data, fresh identity, not trainable.
    pub fn detach_copy(&self) -> Tensor {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec())
            .expect("consistent by construction")
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("trainable", &self.inner.trainable.get())
            .finish()
    }
}
