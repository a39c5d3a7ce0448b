use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

const INIT_STD: f64 = 0.02;

/// Names of the answer-head tensors, which are always the last two entries of
/// [`ModelParams::tensors`].
pub const HEAD_TENSORS: [&str; 2] = ["head.weight", "head.bias"];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gamma: Tensor,
    pub attn_norm_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ffn_norm_gamma: Tensor,
    pub ffn_norm_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_TENSOR_NAMES: [&str; 16] = [
    "attn_norm.gamma",
    "attn_norm.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ffn_norm.gamma",
    "ffn_norm.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

pub(crate) fn tensor_names(n_layers: usize) -> Vec<String> {
    let mut out = vec!["embed.token".to_string(), "embed.position".to_string()];
    for i in 0..n_layers {
        out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
    }
    out.extend(["final_norm.gamma", "final_norm.beta"].map(String::from));
    out.extend(HEAD_TENSORS.map(String::from));
    out
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.attn_norm_gamma,
            &self.attn_norm_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ffn_norm_gamma,
            &self.ffn_norm_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.attn_norm_gamma,
            &mut self.attn_norm_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ffn_norm_gamma,
            &mut self.ffn_norm_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm_gamma: Tensor,
    pub final_norm_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

struct Init {
    rng: rng::Rng,
    normal: Normal<f64>,
}

impl Init {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

impl ModelParams {
    /// Scaled-normal weights (std 0.02), unit norm gains, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: rng::rng(rng::derive_labeled(seed, "encoder-init")),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let d = config.d_model;
        let ff = config.d_ff;
        let token_embedding = init.normal(&[config.vocab_size, d]);
        let position_embedding = init.normal(&[config.max_len, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm_gamma: Tensor::full(&[d], 1.0),
                attn_norm_beta: Tensor::zeros(&[d]),
                wq: init.normal(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: init.normal(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: init.normal(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: init.normal(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ffn_norm_gamma: Tensor::full(&[d], 1.0),
                ffn_norm_beta: Tensor::zeros(&[d]),
                w1: init.normal(&[d, ff]),
                b1: Tensor::zeros(&[ff]),
                w2: init.normal(&[ff, d]),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head_weight = init.normal(&[d]);
        Ok(ModelParams {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm_gamma: Tensor::full(&[d], 1.0),
            final_norm_beta: Tensor::zeros(&[d]),
            head_weight,
            head_bias: Tensor::zeros(&[1]),
        })
    }

    /// A fresh head drawn the same way `init` draws one.
    pub fn random_head(d_model: usize, seed: u64) -> (Tensor, Tensor) {
        let mut init = Init {
            rng: rng::rng(rng::derive_labeled(seed, "head-init")),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        (init.normal(&[d_model]), Tensor::zeros(&[1]))
    }

    /// All tensors in canonical order: embeddings, layers, final norm, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([
            &self.final_norm_gamma,
            &self.final_norm_beta,
            &self.head_weight,
            &self.head_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.final_norm_gamma,
            &mut self.final_norm_beta,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        tensor_names(self.layers.len())
    }

    /// Expected shapes in canonical order for a config.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        let d = config.d_model;
        let ff = config.d_ff;
        let mut out = vec![vec![config.vocab_size, d], vec![config.max_len, d]];
        for _ in 0..config.n_layers {
            out.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, ff],
                vec![ff],
                vec![ff, d],
                vec![d],
            ]);
        }
        out.extend([vec![d], vec![d], vec![d], vec![1]]);
        out
    }

    /// Rebuilds params from tensors in canonical order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(&config);
        if shapes.len() != tensors.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if s.as_slice() != t.shape() {
                return Err(Error::contract(format!(
                    "tensor #{i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm_gamma: next(),
                attn_norm_beta: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ffn_norm_gamma: next(),
                ffn_norm_beta: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Ok(ModelParams {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm_gamma: next(),
            final_norm_beta: next(),
            head_weight: next(),
            head_bias: next(),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm_gamma: Var,
    pub attn_norm_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ffn_norm_gamma: Var,
    pub ffn_norm_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Model parameters registered as tape leaves, in canonical order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub all: Vec<Var>,
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm_gamma: Var,
    pub final_norm_beta: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ParamVars {
    /// Copies every tensor onto the tape; `trainable[i]` decides whether
    /// tensor `i` (canonical order) tracks gradients. `None` means none do.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: Option<&[bool]>) -> Self {
        let all: Vec<Var> = params
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let grad = trainable.is_some_and(|m| m[i]);
                tape.leaf(t.clone().with_requires_grad(grad))
            })
            .collect();
        Self::from_vars(all, params.layers.len())
    }

    /// Wraps already-registered leaves given in canonical order.
    pub fn from_vars(all: Vec<Var>, n_layers: usize) -> Self {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("canonical tensor count");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..n_layers)
            .map(|_| LayerVars {
                attn_norm_gamma: next(),
                attn_norm_beta: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ffn_norm_gamma: next(),
                ffn_norm_beta: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let final_norm_gamma = next();
        let final_norm_beta = next();
        let head_weight = next();
        let head_bias = next();
        ParamVars {
            all,
            token_embedding,
            position_embedding,
            layers,
            final_norm_gamma,
            final_norm_beta,
            head_weight,
            head_bias,
        }
    }
}
