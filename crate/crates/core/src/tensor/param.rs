use std::fmt;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use super::{Shape, Tensor};

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (batch-norm affine, path logits).
    NoDecay,
    /// Not trainable; carried in checkpoints (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamData {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub kind: ParamKind,
    /// Frozen parameters still receive gradients but are never updated.
    pub frozen: bool,
}

/// Shared, interior-mutable tensor storage.
///
/// Cloning a `Param` aliases the same storage; use [`Param::deep_clone`] for
/// an independent copy.
#[derive(Clone)]
pub struct Param(Arc<RwLock<ParamData>>);

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Self {
        Param(Arc::new(RwLock::new(ParamData {
            value,
            grad: None,
            kind,
            frozen: false,
        })))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ParamData> {
        self.0.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, ParamData> {
        self.0.write()
    }

    pub fn value(&self) -> Tensor {
        self.0.read().value.clone()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.read().grad.clone()
    }

    pub fn set_value(&self, value: Tensor) {
        let mut guard = self.0.write();
        assert_eq!(
            guard.value.shape(),
            value.shape(),
            "set_value changes shape"
        );
        guard.value = value;
    }

    pub fn shape(&self) -> Shape {
        self.0.read().value.shape()
    }

    pub fn numel(&self) -> usize {
        self.shape().numel()
    }

    pub fn kind(&self) -> ParamKind {
        self.0.read().kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind() != ParamKind::Buffer
    }

    pub fn is_frozen(&self) -> bool {
        self.0.read().frozen
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.0.write().frozen = frozen;
    }

    pub fn zero_grad(&self) {
        self.0.write().grad = None;
    }

    pub fn accumulate_grad(&self, g: &Tensor) {
        let mut guard = self.0.write();
        match guard.grad.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => guard.grad = Some(g.clone()),
        }
    }

    pub fn same_storage(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    pub fn deep_clone(&self) -> Param {
        let data = self.0.read().clone();
        Param(Arc::new(RwLock::new(data)))
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let guard = self.0.read();
        f.debug_struct("Param")
            .field("shape", &guard.value.shape())
            .field("kind", &guard.kind)
            .field("frozen", &guard.frozen)
            .finish()
    }
}
