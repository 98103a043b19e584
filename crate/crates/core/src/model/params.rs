use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TOKEN_POS: &str = "token.pos_emb";
pub const SS_EMB: &str = "token.ss_emb";
pub const SENTENCE_POS: &str = "sentence.pos_emb";
pub const SEG_W: &str = "seg.w";
pub const SEG_B: &str = "seg.b";
pub const COH_W: &str = "coh.w";
pub const COH_B: &str = "coh.b";
/// Name of the fixed snippet-start vector in checkpoints.
pub const S0: &str = "sentence.s0";

/// Offset mixed into the model seed to draw the snippet-start vector.
pub const S0_SEED_OFFSET: u64 = 0x5EED_0000_0000_0001;

/// Parameter names of one encoder layer, relative to its prefix.
#[cfg(test)]
pub(crate) const LAYER_PARAMS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln1.g",
    "ln1.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b", "ln2.g", "ln2.b",
];

pub fn layer_prefix(stack: &str, layer: usize) -> String {
    format!("{stack}.layers.{layer}")
}

/// Every learned tensor of the model, addressable by name, plus the fixed
/// snippet-start vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
    s0: Tensor<F>,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

impl<F: Real> ModelParams<F> {
    /// Seeded initialization: Xavier-uniform matrices, zero biases, unit
    /// gains, N(0, 0.02) embeddings and a unit-norm snippet-start vector.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model();
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            (TOKEN_POS.into(), vec![config.t + 1, config.d_p], Init::Normal(0.02)),
            (SS_EMB.into(), vec![1, config.d_e], Init::Normal(0.02)),
            (SENTENCE_POS.into(), vec![config.k + 1, d], Init::Normal(0.02)),
        ];
        for (stack, layers) in [("token", config.n_tt), ("sentence", config.n_ts)] {
            for l in 0..layers {
                let p = layer_prefix(stack, l);
                for proj in ["q", "k", "v", "o"] {
                    specs.push((format!("{p}.attn.w{proj}"), vec![d, d], Init::Xavier));
                    specs.push((format!("{p}.attn.b{proj}"), vec![d], Init::Zeros));
                }
                specs.push((format!("{p}.ln1.g"), vec![d], Init::Ones));
                specs.push((format!("{p}.ln1.b"), vec![d], Init::Zeros));
                specs.push((format!("{p}.ff1.w"), vec![d, config.ff_dim], Init::Xavier));
                specs.push((format!("{p}.ff1.b"), vec![config.ff_dim], Init::Zeros));
                specs.push((format!("{p}.ff2.w"), vec![config.ff_dim, d], Init::Xavier));
                specs.push((format!("{p}.ff2.b"), vec![d], Init::Zeros));
                specs.push((format!("{p}.ln2.g"), vec![d], Init::Ones));
                specs.push((format!("{p}.ln2.b"), vec![d], Init::Zeros));
            }
        }
        specs.push((SEG_W.into(), vec![d, 2], Init::Xavier));
        specs.push((SEG_B.into(), vec![2], Init::Zeros));
        specs.push((COH_W.into(), vec![d, 1], Init::Xavier));
        specs.push((COH_B.into(), vec![1], Init::Zeros));

        let mut named = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).unwrap();
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            named.push((name, Tensor::new(shape, data.into_iter().map(F::lit).collect())?));
        }

        let mut s0_rng = ChaCha8Rng::seed_from_u64(seed ^ S0_SEED_OFFSET);
        let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut s0_rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s0 = Tensor::new([1, d], raw.iter().map(|x| F::lit(x / norm)).collect())?;
        Self::from_parts(named, s0)
    }

    /// Assembles parameters from named tensors; every tensor becomes trainable.
    pub fn from_parts(named: Vec<(String, Tensor<F>)>, s0: Tensor<F>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (name, t)) in named.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            names.push(name);
            tensors.push(t.with_requires_grad(true));
        }
        Ok(ModelParams {
            names,
            tensors,
            index,
            s0: s0.with_requires_grad(false),
        })
    }

    /// Checks that every expected tensor is present with the right shape.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<F>::init(config, 0)?;
        for (name, t) in reference.iter() {
            match self.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config implies {:?}",
                        mine.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if self.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, config implies {}",
                self.len(),
                reference.len()
            )));
        }
        if self.s0.shape() != reference.s0.shape() {
            return Err(Error::Checkpoint(format!("{S0} has shape {:?}", self.s0.shape())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn s0(&self) -> &Tensor<F> {
        &self.s0
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite) && self.s0.is_finite()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            s0: self.s0.cast(),
        }
    }
}
