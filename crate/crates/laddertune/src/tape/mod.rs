//! Reverse-mode tape over dense tensors.
//!
//! Every operation records which tensors it keeps for its backward pass
//! (vector-Jacobian product), tagged with a reason and the region of the
//! model that caused the retention. Retained-for-backward memory is then a
//! measured quantity, summed over the records, instead of an estimate.
//!
//! Saved-tensor policy: each op keeps the minimal set its VJP needs given
//! which inputs require gradients. Parameters are never counted as retained
//! (they are alive for the whole step regardless). Activation derivatives
//! are materialized at forward time and counted, not recomputed.

mod backward;
mod ops;

pub use ops::Reduction;

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar element of a tape: `f32` for training, `f64` for gradient checks.
pub trait Elem:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Handle to a tape node, passed between op builders.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    pub id: NodeId,
}

/// Region of the model an op ran under; drives the per-owner memory breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Backbone,
    Side,
    /// Ladder machinery: downsamplers, gates, upsampler.
    Ladder,
    /// Modules inserted into the backbone (adapters, LoRA, prompts).
    Inserted,
    /// LM head and loss.
    Head,
    /// Anything outside a named model region (free-standing graphs).
    Other,
}

impl Owner {
    pub const ALL: [Owner; 6] = [
        Owner::Backbone,
        Owner::Side,
        Owner::Ladder,
        Owner::Inserted,
        Owner::Head,
        Owner::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Owner::Backbone => "backbone",
            Owner::Side => "side",
            Owner::Ladder => "ladder",
            Owner::Inserted => "inserted",
            Owner::Head => "head",
            Owner::Other => "other",
        }
    }
}

/// Why a tensor is kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveReason {
    /// An op input needed to form a weight or input gradient.
    InputActivation,
    /// A materialized activation derivative (or equivalent cached factor).
    Derivative,
    Other,
}

/// What a saved-tensor record points at.
#[derive(Debug, Clone, Copy)]
enum SavedSource {
    /// The forward value of another node.
    Value(NodeId),
    /// An extra buffer materialized by the saving node itself.
    Aux,
}

/// One retained-for-backward tensor. `bytes` is zero when the same value is
/// already retained by an earlier record (shared saves count once).
#[derive(Debug, Clone)]
struct SavedRec {
    source: SavedSource,
    bytes: u64,
    reason: SaveReason,
}

pub(crate) struct Node<E> {
    op: ops::Op,
    value: Rc<Vec<E>>,
    shape: Vec<usize>,
    requires_grad: bool,
    owner: Owner,
    /// Some for leaves registered through [`Tape::param`].
    param: Option<ParamInfo>,
    aux: Vec<Vec<E>>,
    saved: Vec<SavedRec>,
}

struct ParamInfo {
    name: String,
    trainable: bool,
}

/// Retained bytes split by save reason, with backbone values retained for
/// ladder projections broken out separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetainedBytes {
    pub input_activations: u64,
    pub derivatives: u64,
    pub ladder_taps: u64,
    pub other: u64,
}

impl RetainedBytes {
    pub fn total(&self) -> u64 {
        self.input_activations + self.derivatives + self.ladder_taps + self.other
    }

    pub fn add(&mut self, rhs: &RetainedBytes) {
        self.input_activations += rhs.input_activations;
        self.derivatives += rhs.derivatives;
        self.ladder_taps += rhs.ladder_taps;
        self.other += rhs.other;
    }
}

/// Measured retained-for-backward memory of one recorded step.
#[derive(Debug, Clone, Default)]
pub struct RetainedReport {
    pub by_owner: std::collections::BTreeMap<Owner, RetainedBytes>,
}

impl RetainedReport {
    pub fn owner(&self, owner: Owner) -> RetainedBytes {
        self.by_owner.get(&owner).copied().unwrap_or_default()
    }

    pub fn total(&self) -> RetainedBytes {
        let mut acc = RetainedBytes::default();
        for v in self.by_owner.values() {
            acc.add(v);
        }
        acc
    }

    pub fn total_bytes(&self) -> u64 {
        self.total().total()
    }
}

/// Gradients keyed by trainable-parameter name. Frozen parameters are absent.
#[derive(Debug, Clone)]
pub struct GradMap<E> {
    pub(crate) map: std::collections::BTreeMap<String, Tensor<E>>,
}

impl<E> Default for GradMap<E> {
    fn default() -> Self {
        GradMap {
            map: std::collections::BTreeMap::new(),
        }
    }
}

impl<E: Elem> GradMap<E> {
    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Single-step reverse-mode computation record.
///
/// One tape per training step; tapes are not shared across threads mid-step.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    scope: Owner,
    /// Buffers already counted as retained (keyed by allocation address, so
    /// reshape views of one buffer count once), see [`Tape::save_value`].
    retained_values: HashSet<usize>,
    /// Buffer addresses of parameter leaves; views of these are never retained.
    param_buffers: HashSet<usize>,
    param_names: HashMap<String, NodeId>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scope: Owner::Other,
            retained_values: HashSet::new(),
            param_buffers: HashSet::new(),
            param_names: HashMap::new(),
        }
    }

    /// Set the owner region for subsequently recorded ops; returns the previous one.
    pub fn set_scope(&mut self, owner: Owner) -> Owner {
        std::mem::replace(&mut self.scope, owner)
    }

    pub fn scope(&self) -> Owner {
        self.scope
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.id.0].shape.iter().product()
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.id.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id.0].requires_grad
    }

    pub fn owner_of(&self, v: Var) -> Owner {
        self.nodes[v.id.0].owner
    }

    /// Copy a node's value out as a host tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        let n = &self.nodes[v.id.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("node shape is consistent")
    }

    /// Register a named parameter leaf. A frozen parameter never receives a
    /// gradient buffer. Registering the same name twice is a wiring error.
    pub fn param(&mut self, name: &str, data: &[E], shape: &[usize], trainable: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "param",
                detail: format!(
                    "`{name}`: shape {shape:?} has {numel} elements but buffer has {}",
                    data.len()
                ),
            });
        }
        if self.param_names.contains_key(name) {
            return Err(Error::Wiring(format!("parameter `{name}` registered twice on one tape")));
        }
        let id = NodeId(self.nodes.len());
        self.param_names.insert(name.to_string(), id);
        let value = Rc::new(data.to_vec());
        self.param_buffers.insert(Rc::as_ptr(&value) as usize);
        self.nodes.push(Node {
            op: ops::Op::Leaf,
            value,
            shape: shape.to_vec(),
            requires_grad: trainable,
            owner: self.scope,
            param: Some(ParamInfo {
                name: name.to_string(),
                trainable,
            }),
            aux: Vec::new(),
            saved: Vec::new(),
        });
        Ok(Var { id })
    }

    /// Register a non-parameter input leaf (never differentiated).
    pub fn input(&mut self, data: &[E], shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "input",
                detail: format!("shape {shape:?} has {numel} elements but buffer has {}", data.len()),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: ops::Op::Leaf,
            value: Rc::new(data.to_vec()),
            shape: shape.to_vec(),
            requires_grad: false,
            owner: self.scope,
            param: None,
            aux: Vec::new(),
            saved: Vec::new(),
        });
        Ok(Var { id })
    }

    /// A leaf that participates in gradients without being a named parameter.
    /// Used by tests and oracles.
    pub fn leaf(&mut self, data: &[E], shape: &[usize], requires_grad: bool) -> Result<Var> {
        let v = self.input(data, shape)?;
        self.nodes[v.id.0].requires_grad = requires_grad;
        Ok(v)
    }

    fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param.is_some()
    }

    fn bytes_of(&self, id: NodeId) -> u64 {
        (self.nodes[id.0].value.len() * E::DTYPE.width()) as u64
    }

    /// Record that `node`'s VJP keeps the forward value of `src`.
    /// Parameters are skipped: they are not retained activations. The first
    /// record of a given buffer carries its bytes; later records of the same
    /// buffer (same node, or a reshape view of it) carry zero, so summing
    /// record bytes never counts one allocation twice.
    fn save_value(&mut self, saved: &mut Vec<SavedRec>, src: NodeId, reason: SaveReason) {
        let key = Rc::as_ptr(&self.nodes[src.0].value) as usize;
        if self.is_param(src) || self.param_buffers.contains(&key) {
            return;
        }
        let bytes = if self.retained_values.insert(key) {
            self.bytes_of(src)
        } else {
            0
        };
        saved.push(SavedRec {
            source: SavedSource::Value(src),
            bytes,
            reason,
        });
    }

    /// Record a materialized extra buffer (pushed to the node's `aux`).
    fn save_aux(&mut self, saved: &mut Vec<SavedRec>, len: usize, reason: SaveReason) {
        saved.push(SavedRec {
            source: SavedSource::Aux,
            bytes: (len * E::DTYPE.width()) as u64,
            reason,
        });
    }

    fn push(
        &mut self,
        op: ops::Op,
        value: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        aux: Vec<Vec<E>>,
        saved: Vec<SavedRec>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Rc::new(value),
            shape,
            requires_grad,
            owner: self.scope,
            param: None,
            aux,
            saved,
        });
        Var { id }
    }

    /// Sum of all per-node saved-byte records grouped by owner and reason.
    ///
    /// A backbone-owned value retained by a ladder-scope op is broken out as
    /// a ladder tap: it is full-width memory the side path keeps alive, and
    /// it falls outside the side network's own activation set.
    pub fn retained(&self) -> RetainedReport {
        let mut report = RetainedReport::default();
        for node in &self.nodes {
            for rec in &node.saved {
                let entry = report.by_owner.entry(node.owner).or_default();
                match rec.reason {
                    SaveReason::Derivative => entry.derivatives += rec.bytes,
                    SaveReason::Other => entry.other += rec.bytes,
                    SaveReason::InputActivation => {
                        let is_tap = matches!(rec.source, SavedSource::Value(src)
                            if node.owner == Owner::Ladder
                                && self.nodes[src.0].owner == Owner::Backbone);
                        if is_tap {
                            entry.ladder_taps += rec.bytes;
                        } else {
                            entry.input_activations += rec.bytes;
                        }
                    }
                }
            }
        }
        report
    }

    /// Raw per-record total; equals `retained().total_bytes()` by construction
    /// and is used to cross-check the grouped report.
    pub fn saved_record_bytes(&self) -> u64 {
        self.nodes.iter().flat_map(|n| n.saved.iter()).map(|r| r.bytes).sum()
    }

    /// Number of saved-tensor records on the whole tape.
    pub fn saved_record_count(&self) -> usize {
        self.nodes.iter().map(|n| n.saved.len()).sum()
    }
}
