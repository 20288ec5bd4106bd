//! Named trainable tensors and their per-graph bindings.

use rand::Rng;

use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-bound, bound) initialization.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("param shape"), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars, trainable or not.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Records every trainable tensor as a gradient leaf. Frozen tensors are
    /// left unbound and read directly from the set.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| e.trainable.then(|| g.param(e.value.clone())))
            .collect();
        Binding { vars }
    }

    /// Records every trainable tensor as a constant, for inference graphs that
    /// never run backward.
    pub fn bind_constant(&self, g: &mut Graph) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| e.trainable.then(|| g.constant(e.value.clone())))
            .collect();
        Binding { vars }
    }
}

#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    /// Graph handle of a trainable parameter.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter is frozen and has no graph handle")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

/// A parameter set together with its binding on one graph.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub params: &'a ParamSet,
    pub binding: &'a Binding,
}

impl<'a> Bound<'a> {
    pub fn new(params: &'a ParamSet, binding: &'a Binding) -> Self {
        Bound { params, binding }
    }

    /// Graph handle of a parameter; frozen tensors enter as constants.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        match self.binding.get(id) {
            Some(v) => v,
            None => g.constant(self.params.get(id).clone()),
        }
    }

    /// Embedding lookup that does not copy a frozen table into the graph.
    pub fn lookup(&self, g: &mut Graph, table: ParamId, ids: &[usize]) -> crate::tensor::Result<Var> {
        match self.binding.get(table) {
            Some(v) => g.embed(v, ids),
            None => {
                let rows = crate::tensor::embed_lookup(self.params.get(table), ids)?;
                Ok(g.constant(rows))
            }
        }
    }
}
