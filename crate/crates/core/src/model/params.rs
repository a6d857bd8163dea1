use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Real, Tape, ValueGrid, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Decides initialization and whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Gain => 2,
            ParamKind::Embedding => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Gain,
            3 => ParamKind::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ValueGrid<F>,
}

/// Named, ordered parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Weights draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// with `fan_in = shape[0]`, embeddings from `U(-1, 1)`; biases start at
    /// zero and gains at one.
    pub fn add(&mut self, rng: &mut ChaCha8Rng, name: String, kind: ParamKind, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match kind {
            ParamKind::Weight | ParamKind::Embedding => {
                let fan_in = if kind == ParamKind::Embedding { 1 } else { shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
            }
            ParamKind::Bias => vec![F::zero(); n],
            ParamKind::Gain => vec![F::one(); n],
        };
        let value = ValueGrid::new(shape.to_vec(), data).expect("consistent shape").with_grad();
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn push(&mut self, param: Param<F>) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Puts every parameter on `tape`. Tracked leaves collect gradients;
    /// untracked ones are constants for inference.
    pub fn bind(&self, tape: &mut Tape<F>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let v = ValueGrid::new(p.value.shape().to_vec(), p.value.data().to_vec()).expect("shape");
                if track {
                    tape.leaf(v.with_grad())
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    /// Adds gradients of bound leaves into the parameter gradient slots.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = tape.grad(v) {
                p.value.accumulate_grad(g);
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
        }
    }
}
