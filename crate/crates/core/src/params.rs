use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (matrix weights only).
    pub decay: bool,
}

/// Ordered list of named parameters. The insertion order is the checkpoint
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.param(&p.tensor)).collect())
    }

    /// Adds the graph's leaf gradients into each parameter's accumulator.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Concatenated parameter values in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Overwrites values from a flat buffer laid out as by [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::InvalidInput(format!(
                "parameter blob has {} values, model needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
