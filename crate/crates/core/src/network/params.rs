//! Named parameter storage shared by every sub-network.
//!
//! Weights live outside the tape so that each training step can build a
//! fresh [`Tape`], bind the parameters it touches as gradient-tracked
//! leaves, and read the gradients back out after the backward pass. The
//! same store also holds non-trained buffers (batch-norm running
//! statistics), which are persisted alongside the weights but excluded
//! from optimizer updates.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor};
use crate::container::Container;
use crate::{Error, Result};

/// Handle to one named tensor in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
    /// Temporarily excluded from gradient tracking (alternating
    /// optimization); serialization still treats the entry as a weight.
    frozen: bool,
}

/// Ordered collection of named weight tensors and buffers.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

/// Chunk-name prefix for trainable weights in serialized form.
const WEIGHT_PREFIX: &str = "p:";
/// Chunk-name prefix for non-trained buffers in serialized form.
const BUFFER_PREFIX: &str = "s:";

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter '{name}' data does not match shape {shape:?}"
        );
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            trainable,
            frozen: false,
        });
        id
    }

    /// Registers a trainable weight tensor.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        self.insert(name, shape, data, true)
    }

    /// Registers a non-trained buffer (persisted but never optimized).
    pub fn add_buffer(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        self.insert(name, shape, data, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Handles of every trainable weight, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Whether a weight is currently excluded from gradient tracking.
    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes or thaws every trainable weight whose name starts with
    /// `prefix`. Frozen weights bind as plain constants, so losses built
    /// through them carry no gradient back to the store. Buffers are
    /// unaffected. Returns how many entries changed state.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut changed = 0;
        for e in &mut self.entries {
            if e.trainable && e.name.starts_with(prefix) && e.frozen != frozen {
                e.frozen = frozen;
                changed += 1;
            }
        }
        changed
    }

    /// Total scalar count across trainable weights.
    pub fn n_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    /// Serializes every entry into a container (weights under `p:`,
    /// buffers under `s:`).
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for e in &self.entries {
            let prefix = if e.trainable { WEIGHT_PREFIX } else { BUFFER_PREFIX };
            c.push_f64(format!("{prefix}{}", e.name), e.shape.clone(), e.data.clone())
                .expect("parameter names are unique by construction");
        }
        c
    }

    /// Overwrites values from a container produced by [`to_container`],
    /// validating that every entry is present with its exact shape.
    ///
    /// [`to_container`]: Params::to_container
    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        for e in &mut self.entries {
            let prefix = if e.trainable { WEIGHT_PREFIX } else { BUFFER_PREFIX };
            let key = format!("{prefix}{}", e.name);
            let (dims, data) = c.get_f64(&key)?;
            if dims != e.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter '{}' stored with shape {dims:?}, expected {:?}",
                    e.name, e.shape
                )));
            }
            e.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// Reads gradients for trainable parameters out of a finished tape,
    /// given the binding produced by [`Forward::finish`].
    pub fn collect_gradients(
        &self,
        tape: &Tape,
        bound: &[Option<Tensor>],
    ) -> Vec<(ParamId, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, slot) in bound.iter().enumerate() {
            let Some(t) = slot else { continue };
            if !self.entries[i].trainable {
                continue;
            }
            if let Some(g) = tape.grad(*t) {
                out.push((ParamId(i), g.to_vec()));
            }
        }
        out
    }
}

/// One forward pass: a tape, the parameter store, and the lazily created
/// leaf bindings between them.
///
/// Binding is lazy so that partial passes (e.g. a discriminator-only
/// step) only place the parameters they actually touch on the tape.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    params: &'a mut Params,
    bound: Vec<Option<Tensor>>,
    train: bool,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a mut Params, train: bool) -> Self {
        let n = params.len();
        Self {
            tape,
            params,
            bound: vec![None; n],
            train,
        }
    }

    /// Whether this pass runs in training mode (enables token masking and
    /// batch-norm statistics updates).
    pub fn train(&self) -> bool {
        self.train
    }

    /// The parameter as a tape leaf; trainable (and unfrozen) entries
    /// track gradients. Repeated calls return the same leaf.
    pub fn param(&mut self, id: ParamId) -> Tensor {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let e = &self.params.entries[id.0];
        let t = self.tape.leaf(&e.shape, e.data.clone(), e.trainable && !e.frozen);
        self.bound[id.0] = Some(t);
        t
    }

    /// Current value of a buffer (or any parameter) without tape binding.
    pub fn buffer(&self, id: ParamId) -> &[f64] {
        self.params.value(id)
    }

    /// Overwrites a non-trained buffer in place (running statistics).
    pub fn set_buffer(&mut self, id: ParamId, data: Vec<f64>) {
        assert!(
            !self.params.is_trainable(id),
            "set_buffer on trainable parameter '{}'",
            self.params.name(id)
        );
        let slot = self.params.value_mut(id);
        assert_eq!(slot.len(), data.len(), "buffer length change");
        slot.copy_from_slice(&data);
    }

    /// Ends the pass, returning the leaf binding (indexed by
    /// [`ParamId::index`]) for gradient readout after `backward`.
    pub fn finish(self) -> Vec<Option<Tensor>> {
        self.bound
    }
}
