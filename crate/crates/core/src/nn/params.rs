use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Optimized by gradient descent unless frozen.
    Weight,
    /// Batch-norm running statistic, updated by the forward pass.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
    pub frozen: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role == Role::Weight && !self.frozen
    }
}

/// Named parameter tensors of a model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            role,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Marks every parameter whose name starts with `prefix` as frozen (or not).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Copies values from `other` for every name both sets share, checking dims.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in other {
            if let Some(id) = self.id(name) {
                let p = &mut self.params[id.0];
                if p.value.dims() != t.dims() {
                    return Err(Error::Shape {
                        op: "load_from",
                        detail: format!(
                            "{name}: model expects {:?}, file has {:?}",
                            p.value.dims(),
                            t.dims()
                        ),
                    });
                }
                p.value = t.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// A forward pass in progress: a [`Tape`] plus the parameters bound into it.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    training: bool,
    params_require_grad: bool,
    stat_updates: Vec<StatUpdate>,
}

#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            training,
            params_require_grad: true,
            stat_updates: Vec::new(),
        }
    }

    /// Graph in which every parameter is a constant (gradients w.r.t. inputs only).
    pub fn frozen(params: &'p ParamSet) -> Self {
        let mut g = Self::new(params, false);
        g.params_require_grad = false;
        g
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = if p.trainable() && self.params_require_grad {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    /// `(param, gradient)` for every trainable parameter bound in this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(_, v)| self.tape.requires_grad(*v))
            .map(|(id, v)| (id, grads.wrt(&self.tape, v)))
            .collect()
    }
}

/// Folds batch statistics into running buffers with the given momentum.
pub fn apply_stat_updates(params: &mut ParamSet, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        let unbias = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let mean = params.get_mut(u.mean);
        for (m, b) in mean.value.data_mut().iter_mut().zip(&u.batch_mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        let var = params.get_mut(u.var);
        for (v, b) in var.value.data_mut().iter_mut().zip(&u.batch_var) {
            *v = (1.0 - momentum) * *v + momentum * b * unbias;
        }
    }
}
