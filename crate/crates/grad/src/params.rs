use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::Matrix;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Matrix,
    decay: bool,
}

/// Named, ordered collection of trainable matrices.
///
/// Insertion order is the canonical order for serialization and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Glorot uniform over `(fan_in, fan_out) = (rows, cols)`.
    XavierUniform,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it as subject to weight decay.
    ///
    /// Panics on a duplicate name; parameter names are structural.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        id
    }

    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> ParamId {
        let value = init_matrix(rows, cols, init, rng);
        self.add(name, value, decay)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rounds every value to the nearest `f32`, so the store serializes losslessly.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Matrix {
    let mut m = match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::Ones => Matrix::filled(rows, cols, 1.0),
        Init::TruncNormal(std) => Matrix::from_fn(rows, cols, |_, _| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        }),
        Init::XavierUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        }
    };
    m.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = init_matrix(64, 64, Init::TruncNormal(0.02), &mut rng);
        assert!(m.data().iter().all(|x| x.abs() <= 0.04 + 1e-9));
        assert!(m.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::zeros(1, 1), true);
        s.add("w", Matrix::zeros(1, 1), true);
    }
}
