use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Learning-rate group a trainable parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Shared,
    Local,
    Global,
    Vae3d,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Shared, Group::Local, Group::Global, Group::Vae3d];

    pub fn name(self) -> &'static str {
        match self {
            Group::Shared => "shared",
            Group::Local => "local",
            Group::Global => "global",
            Group::Vae3d => "vae3d",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Group::Shared => 0,
            Group::Local => 1,
            Group::Global => 2,
            Group::Vae3d => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.code() == code)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (off for temperatures).
    pub decay: bool,
}

/// Owns every trainable tensor; each belongs to exactly one [`Group`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.add_with_decay(name, group, value, true)
    }

    pub fn add_with_decay(
        &mut self,
        name: impl Into<String>,
        group: Group,
        value: Tensor,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value, decay });
        id
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, group, Tensor::from_vec(fan_in, fan_out, data).expect("shape"))
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Standard-normal matrix, used for frozen stand-in networks as well.
pub fn gaussian_tensor(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect::<Vec<f64>>();
    Tensor::from_vec(rows, cols, data).expect("shape")
}
