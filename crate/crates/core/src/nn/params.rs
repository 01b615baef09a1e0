use std::fmt;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, IxDyn, Ix1, Ix2, Ix4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::Scalar;

/// The five independently freezable parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleGroup {
    AudioEncoder,
    ImageEncoder,
    Fusion,
    PromptEncoder,
    MaskDecoder,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 5] = [
        ModuleGroup::AudioEncoder,
        ModuleGroup::ImageEncoder,
        ModuleGroup::Fusion,
        ModuleGroup::PromptEncoder,
        ModuleGroup::MaskDecoder,
    ];

    /// Canonical name, also the prefix of every parameter path in the group.
    pub fn name(self) -> &'static str {
        match self {
            ModuleGroup::AudioEncoder => "audio_encoder",
            ModuleGroup::ImageEncoder => "image_encoder",
            ModuleGroup::Fusion => "fusion",
            ModuleGroup::PromptEncoder => "prompt_encoder",
            ModuleGroup::MaskDecoder => "mask_decoder",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ModuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of every trainable tensor in a model.
///
/// Layers hold [`ParamId`]s rather than tensors, so gradients, optimizer
/// moments and checkpoints can all be addressed uniformly by index or by
/// `group.path` name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    groups: Vec<ModuleGroup>,
    values: Vec<ArrayD<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: ModuleGroup, path: &str, value: ArrayD<T>) -> ParamId {
        let name = format!("{}.{}", group.name(), path);
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn numel_in(&self, group: ModuleGroup) -> usize {
        self.iter()
            .filter(|(_, _, g, _)| *g == group)
            .map(|(_, _, _, v)| v.len())
            .sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ModuleGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ModuleGroup, &ArrayD<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (ParamId(i), self.names[i].as_str(), self.groups[i], v))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, T> {
        self.values[id.0].view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.values[id.0].view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn view4(&self, id: ParamId) -> ArrayView4<'_, T> {
        self.values[id.0].view().into_dimensionality::<Ix4>().expect("rank-4 parameter")
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_matching(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                v.fill(T::zero());
                n += 1;
            }
        }
        n
    }

    /// Same names and shapes, different element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::of(x.as_f64())))
                .collect(),
        }
    }

    /// Bitwise equality of all entries, restricted to one group.
    pub fn group_bit_identical(&self, other: &Self, group: ModuleGroup) -> bool {
        self.iter()
            .zip(other.iter())
            .filter(|((_, _, g, _), _)| *g == group)
            .all(|((_, _, _, a), (_, _, _, b))| {
                a.shape() == b.shape()
                    && a.iter()
                        .zip(b.iter())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            values: params
                .values
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    /// Buffers given in store order; `None` if any shape disagrees.
    pub fn from_arrays(params: &ParamStore<T>, arrays: Vec<ArrayD<T>>) -> Option<Self> {
        let ok = arrays.len() == params.values.len()
            && arrays.iter().zip(&params.values).all(|(a, p)| a.shape() == p.shape());
        ok.then_some(Self { values: arrays })
    }

    pub fn cast<U: Scalar>(&self) -> Gradients<U> {
        Gradients {
            values: self.values.iter().map(|v| v.mapv(|x| U::of(x.as_f64()))).collect(),
        }
    }

    /// `grad[id] += delta`; shapes must agree element-count-wise.
    pub fn accumulate<D: ndarray::Dimension>(&mut self, id: ParamId, delta: &ndarray::ArrayView<'_, T, D>) {
        let g = &mut self.values[id.0];
        debug_assert_eq!(g.len(), delta.len(), "gradient shape");
        let delta = delta.as_standard_layout();
        let delta = delta
            .view()
            .into_shape_with_order(IxDyn(g.shape()))
            .expect("gradient shape");
        *g += &delta;
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * k);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), v))
    }

    pub fn global_norm(&self) -> T {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Seeded parameter initializer.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±sqrt(3 / fan_in)`, i.e. unit-variance-preserving for a
    /// linear map.
    pub fn fan_in_uniform(
        &mut self,
        group: ModuleGroup,
        path: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        self.uniform(group, path, shape, bound)
    }

    /// Bias init: uniform in `±1 / sqrt(fan_in)`.
    pub fn bias(&mut self, group: ModuleGroup, path: &str, len: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(group, path, &[len], bound)
    }

    pub fn uniform(&mut self, group: ModuleGroup, path: &str, shape: &[usize], bound: f64) -> ParamId {
        self.uniform_around(group, path, shape, 0.0, bound)
    }

    pub fn uniform_around(
        &mut self,
        group: ModuleGroup,
        path: &str,
        shape: &[usize],
        center: f64,
        bound: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::of(center + self.rng.random_range(-bound..bound)))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape");
        self.store.insert(group, path, value)
    }

    pub fn zeros(&mut self, group: ModuleGroup, path: &str, shape: &[usize]) -> ParamId {
        self.store.insert(group, path, ArrayD::zeros(IxDyn(shape)))
    }
}
