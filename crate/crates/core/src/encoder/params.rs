use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{PatError, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Real, Tensor};

/// Positions of one block's tensors inside [`EncoderParams`].
#[derive(Clone, Copy, Debug)]
pub struct BlockSlots {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Debug)]
pub struct ParamSlots {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls_token: usize,
    pub part_tokens: usize,
    pub pos_embed: usize,
    pub blocks: Vec<BlockSlots>,
    pub norm_gamma: usize,
    pub norm_beta: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// Every trainable tensor of the encoder and its classifier, in a fixed order.
#[derive(Clone, Debug)]
pub struct EncoderParams<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    slots: ParamSlots,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: rand_chacha::ChaCha8Rng,
    std: f64,
}

impl<T: Real> Builder<T> {
    fn add(&mut self, name: String, dims: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::full(dims, T::one()),
            Init::Normal => {
                let rng = &mut self.rng;
                Tensor::from_fn(dims, |_| T::of(truncated_normal(rng) * self.std))
            }
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

/// Standard normal truncated to [-2, 2] by rejection.
fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

fn slots_for(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, u8)>, ParamSlots) {
    // (name, dims, init: 0 normal / 1 zeros / 2 ones)
    let d = cfg.embed_dim;
    let mut specs: Vec<(String, Vec<usize>, u8)> = Vec::new();
    let mut push = |name: String, dims: Vec<usize>, init: u8| {
        specs.push((name, dims, init));
        specs.len() - 1
    };
    let patch_w = push("patch.weight".into(), vec![cfg.patch_dim(), d], 0);
    let patch_b = push("patch.bias".into(), vec![d], 1);
    let cls_token = push("cls_token".into(), vec![1, d], 0);
    let part_tokens = push("part_tokens".into(), vec![cfg.num_parts, d], 0);
    let pos_embed = push("pos_embed".into(), vec![cfg.seq_len(), d], 0);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for l in 0..cfg.blocks {
        let p = |s: &str| format!("block{l}.{s}");
        blocks.push(BlockSlots {
            ln1_gamma: push(p("ln1.gamma"), vec![d], 2),
            ln1_beta: push(p("ln1.beta"), vec![d], 1),
            wq: push(p("attn.wq"), vec![d, d], 0),
            bq: push(p("attn.bq"), vec![d], 1),
            wk: push(p("attn.wk"), vec![d, d], 0),
            bk: push(p("attn.bk"), vec![d], 1),
            wv: push(p("attn.wv"), vec![d, d], 0),
            bv: push(p("attn.bv"), vec![d], 1),
            wo: push(p("attn.wo"), vec![d, d], 0),
            bo: push(p("attn.bo"), vec![d], 1),
            ln2_gamma: push(p("ln2.gamma"), vec![d], 2),
            ln2_beta: push(p("ln2.beta"), vec![d], 1),
            fc1_w: push(p("mlp.fc1.weight"), vec![d, cfg.mlp_hidden], 0),
            fc1_b: push(p("mlp.fc1.bias"), vec![cfg.mlp_hidden], 1),
            fc2_w: push(p("mlp.fc2.weight"), vec![cfg.mlp_hidden, d], 0),
            fc2_b: push(p("mlp.fc2.bias"), vec![d], 1),
        });
    }
    let norm_gamma = push("norm.gamma".into(), vec![d], 2);
    let norm_beta = push("norm.beta".into(), vec![d], 1);
    let head_w = push("classifier.weight".into(), vec![d, cfg.num_classes], 0);
    let head_b = push("classifier.bias".into(), vec![cfg.num_classes], 1);
    let slots = ParamSlots {
        patch_w,
        patch_b,
        cls_token,
        part_tokens,
        pos_embed,
        blocks,
        norm_gamma,
        norm_beta,
        head_w,
        head_b,
    };
    (specs, slots)
}

impl<T: Real> EncoderParams<T> {
    /// Truncated-normal (sigma 0.02) weights and tokens, zero biases, unit
    /// layer-norm scales.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, slots) = slots_for(cfg);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: rng::rng(seed, Stream::Init, 0, 0),
            std: cfg.init_std,
        };
        for (name, dims, init) in specs {
            let init = match init {
                0 => Init::Normal,
                1 => Init::Zeros,
                _ => Init::Ones,
            };
            b.add(name, &dims, init);
        }
        Ok(Self {
            names: b.names,
            tensors: b.tensors,
            slots,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and dims.
    pub fn from_named(cfg: &ModelConfig, named: &[(String, Tensor<T>)]) -> Result<Self> {
        cfg.validate()?;
        let (specs, slots) = slots_for(cfg);
        let mut tensors = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (name, dims, _) in specs {
            let t = named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| PatError::config(format!("missing parameter {name}")))?;
            if t.dims() != dims.as_slice() {
                return Err(PatError::shape("from_named", t.dims(), &dims));
            }
            tensors.push(t.clone());
            names.push(name);
        }
        Ok(Self {
            names,
            tensors,
            slots,
        })
    }

    pub fn slots(&self) -> &ParamSlots {
        &self.slots
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    /// Registers every tensor on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Registers every tensor as a constant (inference).
    pub fn register_const(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}
