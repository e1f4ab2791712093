use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Floating-point element type of parameters and activations.
///
/// Training runs in `f32`; gradient verification runs the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Named dense parameter tensors of a model, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    tensors: Vec<ParamTensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }

    pub(crate) fn from_tensors(tensors: Vec<ParamTensor<F>>) -> Self {
        Self { tensors }
    }

    /// Registers a tensor drawn from uniform(-scale, scale).
    pub(crate) fn uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| F::of(rng.gen_range(-scale..scale)))
            .collect();
        self.push(name, shape, data)
    }

    pub(crate) fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let len = shape.iter().product();
        self.push(name, shape, vec![F::zero(); len])
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<F>) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<F> {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[ParamTensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<F>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Gradients<F> {
        Gradients {
            data: self
                .tensors
                .iter()
                .map(|t| vec![F::zero(); t.data.len()])
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.name.as_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradient buffers laid out exactly like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub(crate) data: Vec<Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn tensor(&self, id: ParamId) -> &[F] {
        &self.data[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.data[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[F]> {
        self.data.iter().map(|v| v.as_slice())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<F>> {
        self.data.iter_mut()
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for v in self.data.iter_mut().flatten() {
            *v *= factor;
        }
    }

    /// Euclidean norm over every element of every tensor, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// Flattened copy in registration order.
    pub fn flatten(&self) -> Vec<F> {
        self.data.iter().flatten().copied().collect()
    }
}
