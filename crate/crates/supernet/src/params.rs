//! Parameter storage shared by every module in a graph.
//!
//! Each slot holds one value tensor and one gradient accumulator. Slots
//! are assigned by graph construction in canonical edge order, so a store
//! initialized for a graph lines up with the graph's module specs, and a
//! pruned sub-network (which keeps parent slot ids) reuses the same store.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ParamSlot, SuperNetGraph};
use crate::tensor::Tensor;

/// Checkpoint magic line; bump the digit when the layout changes.
const CHECKPOINT_MAGIC: &[u8] = b"SNPARAMS v1\n";

/// One parameter tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Slot {
    pub value: Tensor,
    pub grad: Tensor,
}

/// All trainable tensors of a graph, indexed by [`ParamSlot`].
#[derive(Debug, Clone)]
pub struct ParameterStore {
    slots: Vec<Slot>,
}

impl ParameterStore {
    /// Creates and initializes slots for every module of `g`.
    ///
    /// Weights draw from a fan-in scaled uniform distribution, biases start
    /// at zero. Identical (graph, seed) pairs produce identical stores.
    pub fn init_for_graph(g: &SuperNetGraph, seed: u64) -> Self {
        let shapes = slot_shapes(g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let mut value = Tensor::zeros(shape);
            // Biases are rank-1; everything else is a weight.
            if shape.len() > 1 {
                let fan_in: usize = match shape.len() {
                    2 => shape[1],
                    // Convolution weights: channels * kernel area. Transposed
                    // weights store [in, out, k, k]; using dim 1 * k * k for
                    // them scales by output channels instead, which is the
                    // usual fan-out compromise and equally valid for init.
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape.iter().skip(1).product(),
                };
                let bound = (6.0 / fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                for v in value.data_mut() {
                    *v = dist.sample(&mut rng);
                }
            }
            let grad = Tensor::zeros(shape);
            slots.push(Slot { value, grad });
        }
        Self { slots }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn value(&self, slot: ParamSlot) -> &Tensor {
        &self.slots[slot].value
    }

    pub fn value_mut(&mut self, slot: ParamSlot) -> &mut Tensor {
        &mut self.slots[slot].value
    }

    pub fn grad(&self, slot: ParamSlot) -> &Tensor {
        &self.slots[slot].grad
    }

    pub fn grad_mut(&mut self, slot: ParamSlot) -> &mut Tensor {
        &mut self.slots[slot].grad
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Clears every gradient accumulator.
    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill_zero();
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Writes values (not gradients) as a versioned binary checkpoint:
    /// magic line, then `u32` slot count, then per slot `u32` id, `u32`
    /// rank, the dims as `u32`, and the payload as little-endian `f32`.
    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.slots.len() as u32).to_le_bytes())?;
        for (id, s) in self.slots.iter().enumerate() {
            w.write_all(&(id as u32).to_le_bytes())?;
            w.write_all(&(s.value.shape().len() as u32).to_le_bytes())?;
            for &d in s.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in s.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    /// Reads a checkpoint written by [`Self::write_to`], checking it
    /// against the slot layout of `g`.
    pub fn read_from(r: &mut dyn Read, g: &SuperNetGraph) -> Result<Self> {
        let expected = slot_shapes(g);
        let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
        r.read_exact(&mut magic).map_err(|_| Error::Parse("checkpoint too short".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a parameter checkpoint (bad magic)".into()));
        }
        let count = read_u32(r)? as usize;
        if count != expected.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} slots, graph declares {}",
                count,
                expected.len()
            )));
        }
        let mut slots = Vec::with_capacity(count);
        for want_id in 0..count {
            let id = read_u32(r)? as usize;
            if id != want_id {
                return Err(Error::Parse(format!("slot {} out of order (got {})", want_id, id)));
            }
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            if shape != expected[want_id] {
                return Err(Error::Parse(format!(
                    "slot {} shape {:?} does not match graph's {:?}",
                    want_id, shape, expected[want_id]
                )));
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            for v in &mut data {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf).map_err(|_| Error::Parse("checkpoint truncated".into()))?;
                *v = f32::from_le_bytes(buf);
            }
            let grad = Tensor::zeros(&shape);
            slots.push(Slot { value: Tensor::new(shape, data)?, grad });
        }
        Ok(Self { slots })
    }

    pub fn load(path: &Path, g: &SuperNetGraph) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f, g)
    }
}

fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Parse("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Slot shapes declared by a graph, indexed by slot id.
pub fn slot_shapes(g: &SuperNetGraph) -> Vec<Vec<usize>> {
    let mut shapes = vec![Vec::new(); g.num_slots()];
    for e in g.edges() {
        for (slot, shape) in e.module.param_slots.iter().zip(e.module.kind.param_shapes()) {
            shapes[*slot] = shape;
        }
    }
    shapes
}
