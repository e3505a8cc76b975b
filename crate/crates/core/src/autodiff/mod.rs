//! Tape-based reverse-mode differentiation over n-dimensional arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Each node
//! stores its forward value together with a closure mapping the gradient of
//! its output to gradients of its parents. [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid topological order
//! because a node can only reference nodes created before it.
//!
//! Kernels are generic over [`Real`] so that the same code trains in `f32`
//! and verifies against finite differences in `f64`.

mod attention;
mod conv;
mod gradcheck;
mod loss;
mod ops;
mod optim;
mod params;
mod recurrent;

pub mod checkpoint;

pub use attention::AttentionOutput;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{LatentMode, BCE_EPS};
pub use optim::{AdamConfig, AdamState, CosineDecay, LrSchedule};
pub use params::{InitSpec, ParamId, ParamStore, Parameter};

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Element type tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating-point element type accepted by every kernel.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite value in {what} at input {input}, flat index {index}")]
    NonFinite {
        what: &'static str,
        input: usize,
        index: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Gradient of a node's output mapped to gradients of each parent. The
/// boolean slice says which parents need a gradient at all.
pub type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[bool]) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Real> {
    value: Arc<ArrayD<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

fn standard<T: Real>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Records operations for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    inference: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Value of a single-element node.
    pub fn scalar(&self) -> T {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap_or_else(T::zero)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            inference: false,
        }
    }

    /// Tape whose parameters bind as constants, so no backward state is kept.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn var(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(standard(value)), true)
    }

    /// Leaf that never receives a gradient (data, masks, noise).
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(standard(value)), false)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push_leaf(store.get(id).value.clone(), !self.inference);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn push_leaf(&self, value: Arc<ArrayD<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a node with a caller-supplied backward rule.
    pub fn push_op(
        &self,
        value: ArrayD<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parent_ids,
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.len() != 1 {
            return Err(AutodiffError::NonScalar(out_shape));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(ArrayD::from_elem(IxDyn(&out_shape), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p] = Some(pg),
                }
            }
        }
        let params = self.params.borrow().clone();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads[node].as_ref())
    }

    /// Gradients for every bound parameter, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, &ArrayD<T>)> {
        let mut out: Vec<(ParamId, &ArrayD<T>)> = self
            .params
            .iter()
            .filter_map(|(&pid, &node)| self.grads[node].as_ref().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.var(arr1(&[3.0]).into_dyn());
        let y = x.mul(x);
        let z = y.add(x);
        let g = tape.backward(z.sum()).unwrap();
        assert_eq!(g.get(x).unwrap()[[0]], 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = tape.var(arr1(&[0.5, 0.5]).into_dyn());
        let g = tape.backward(a.mul(b).sum()).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let a = tape.var(arr1(&[1.0f32, 2.0]).into_dyn());
        assert!(matches!(
            tape.backward(a.relu()),
            Err(AutodiffError::NonScalar(_))
        ));
    }
}
