//! Frozen ViT-style backbone conditioned on prepended prompt tokens.
//!
//! The input sequence is `[class token] ⧺ prompt blocks ⧺ patch tokens`.
//! Only the LoRA factors on the query/value projections and the classifier
//! head are trainable; everything else is initialized once and frozen.

mod config;
mod lora;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use config::EncoderConfig;
pub use lora::{lora_apply, LoraAdapter};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameter, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T: Scalar = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar = f32> {
    pub norm1: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub query_lora: LoraAdapter<T>,
    pub value_lora: LoraAdapter<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Backbone θ (frozen) plus the trainable LoRA factors and head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Scalar = f32> {
    config: EncoderConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Parameter<T>,
    pub cls_pos: Parameter<T>,
    pub patch_pos: Parameter<T>,
    pub prompt_pos: Option<Parameter<T>>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head: Linear<T>,
    lora_enabled: bool,
}

struct Init<'r, R: Rng> {
    rng: &'r mut R,
    std: f64,
}

impl<R: Rng> Init<'_, R> {
    /// Normal(0, std) truncated at ±2 std.
    fn trunc_normal<T: Scalar>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let std = self.std;
        if std == 0.0 {
            return Tensor::zeros(shape);
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
    }

    fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
    }

    fn linear<T: Scalar>(&mut self, name: &str, fan_in: usize, fan_out: usize, frozen: bool) -> Linear<T> {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), self.trunc_normal(vec![fan_in, fan_out]), frozen),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), frozen),
        }
    }
}

fn norm<T: Scalar>(name: &str, d: usize) -> Norm<T> {
    Norm {
        gamma: Parameter::new(format!("{name}.gamma"), Tensor::from_fn(vec![d], |_| T::one()), true),
        beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![d]), true),
    }
}

impl<T: Scalar> EncoderWeights<T> {
    /// Random backbone (truncated normal) with zero-initialized LoRA `B`
    /// factors; LoRA `A` factors are uniform in `±1/√d`.
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let r = config.lora_rank;
        let mut init = Init {
            rng,
            std: config.init_std,
        };
        let patch_embed = init.linear("patch_embed", config.patch_dim(), d, true);
        let cls_token = Parameter::new("cls_token", init.trunc_normal(vec![1, d]), true);
        let cls_pos = Parameter::new("pos_embed.cls", init.trunc_normal(vec![1, d]), true);
        let patch_pos = Parameter::new("pos_embed.patches", init.trunc_normal(vec![config.num_patches(), d]), true);
        let prompt_pos = config.prompt_positions.then(|| {
            Parameter::new(
                "pos_embed.prompts",
                init.trunc_normal(vec![config.num_classes * config.prompt_tokens, d]),
                true,
            )
        });
        let scale = config.lora_scale / r as f64;
        let a_bound = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                let mut adapter = |which: &str| LoraAdapter {
                    a: Parameter::new(format!("{p}.lora_{which}.a"), init.uniform(vec![d, r], a_bound), false),
                    b: Parameter::new(format!("{p}.lora_{which}.b"), Tensor::zeros(vec![r, d]), false),
                    scale,
                };
                let query_lora = adapter("q");
                let value_lora = adapter("v");
                Block {
                    norm1: norm(&format!("{p}.norm1"), d),
                    query: init.linear(&format!("{p}.attn.q"), d, d, true),
                    key: init.linear(&format!("{p}.attn.k"), d, d, true),
                    value: init.linear(&format!("{p}.attn.v"), d, d, true),
                    out: init.linear(&format!("{p}.attn.out"), d, d, true),
                    query_lora,
                    value_lora,
                    norm2: norm(&format!("{p}.norm2"), d),
                    fc1: init.linear(&format!("{p}.mlp.fc1"), d, config.mlp_hidden(), true),
                    fc2: init.linear(&format!("{p}.mlp.fc2"), config.mlp_hidden(), d, true),
                }
            })
            .collect();
        let head = init.linear("head", d, config.num_classes, false);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            cls_pos,
            patch_pos,
            prompt_pos,
            blocks,
            norm: norm("norm", d),
            head,
            lora_enabled: true,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn lora_enabled(&self) -> bool {
        self.lora_enabled
    }

    /// Copy with every LoRA delta disabled. The factors themselves are kept,
    /// so [`EncoderWeights::restore_lora`] recovers the original model.
    pub fn strip_lora(&self) -> Self {
        let mut w = self.clone();
        w.lora_enabled = false;
        w
    }

    pub fn restore_lora(&self) -> Self {
        let mut w = self.clone();
        w.lora_enabled = true;
        w
    }

    /// All parameters in a fixed canonical order.
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = vec![
            &self.patch_embed.weight,
            &self.patch_embed.bias,
            &self.cls_token,
            &self.cls_pos,
            &self.patch_pos,
        ];
        out.extend(self.prompt_pos.as_ref());
        for b in &self.blocks {
            out.extend([
                &b.norm1.gamma,
                &b.norm1.beta,
                &b.query.weight,
                &b.query.bias,
                &b.key.weight,
                &b.key.bias,
                &b.value.weight,
                &b.value.bias,
                &b.out.weight,
                &b.out.bias,
                &b.query_lora.a,
                &b.query_lora.b,
                &b.value_lora.a,
                &b.value_lora.b,
                &b.norm2.gamma,
                &b.norm2.beta,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        out.extend([&self.norm.gamma, &self.norm.beta, &self.head.weight, &self.head.bias]);
        out
    }

    /// Mutable view in the same order as [`EncoderWeights::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.cls_token,
            &mut self.cls_pos,
            &mut self.patch_pos,
        ];
        out.extend(self.prompt_pos.as_mut());
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1.gamma,
                &mut b.norm1.beta,
                &mut b.query.weight,
                &mut b.query.bias,
                &mut b.key.weight,
                &mut b.key.bias,
                &mut b.value.weight,
                &mut b.value.bias,
                &mut b.out.weight,
                &mut b.out.bias,
                &mut b.query_lora.a,
                &mut b.query_lora.b,
                &mut b.value_lora.a,
                &mut b.value_lora.b,
                &mut b.norm2.gamma,
                &mut b.norm2.beta,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        out.extend([
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    pub fn trainable_params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params_mut().into_iter().filter(|p| !p.frozen)
    }

    /// Patch tokens (`N×d`) with positional embeddings added.
    pub fn patch_embed<'a>(&'a self, g: &mut Graph<'a, T>, image: &Tensor<T>) -> Result<Var> {
        let patches = patchify(image, &self.config)?;
        let x = g.input(patches);
        let w = g.param(&self.patch_embed.weight);
        let b = g.param(&self.patch_embed.bias);
        let tokens = g.matmul(x, w)?;
        let tokens = g.add_row_bias(tokens, b)?;
        let pos = g.param(&self.patch_pos);
        g.add(tokens, pos)
    }

    /// Class logits (length K) for `image` conditioned on `prompts`, each an
    /// `M×d` block, prepended in the given order.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, image: &Tensor<T>, prompts: &[&'a Parameter<T>]) -> Result<Var> {
        let cfg = &self.config;
        let (m, d) = (cfg.prompt_tokens, cfg.embed_dim);
        if prompts.len() > cfg.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} prompt blocks for {} classes",
                prompts.len(),
                cfg.num_classes
            )));
        }
        let mut parts = Vec::with_capacity(prompts.len() + 2);
        let cls = g.param(&self.cls_token);
        let cls_pos = g.param(&self.cls_pos);
        parts.push(g.add(cls, cls_pos)?);

        let slot_pos = self.prompt_pos.as_ref().map(|p| g.param(p));
        for (slot, p) in prompts.iter().enumerate() {
            if p.tensor.shape() != [m, d] {
                return Err(Error::shape(
                    "forward",
                    format!("prompt block {:?}, expected [{m}, {d}]", p.tensor.shape()),
                ));
            }
            let mut block = g.param(p);
            if let Some(table) = slot_pos {
                let pos = g.rows(table, slot * m, m)?;
                block = g.add(block, pos)?;
            }
            parts.push(block);
        }
        parts.push(self.patch_embed(g, image)?);
        let mut x = g.concat_rows(&parts)?;

        for block in &self.blocks {
            x = self.block_forward(g, block, x)?;
        }
        let x = self.layer_norm(g, &self.norm, x)?;
        let cls_out = g.row(x, 0)?;
        let w = g.param(&self.head.weight);
        let b = g.param(&self.head.bias);
        let logits = g.matmul(cls_out, w)?;
        g.add_row_bias(logits, b)
    }

    fn layer_norm<'a>(&'a self, g: &mut Graph<'a, T>, n: &'a Norm<T>, x: Var) -> Result<Var> {
        let gamma = g.param(&n.gamma);
        let beta = g.param(&n.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn linear<'a>(&'a self, g: &mut Graph<'a, T>, l: &'a Linear<T>, x: Var) -> Result<Var> {
        let w = g.param(&l.weight);
        let b = g.param(&l.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }

    fn adapted<'a>(&'a self, g: &mut Graph<'a, T>, l: &'a Linear<T>, adapter: &'a LoraAdapter<T>, x: Var) -> Result<Var> {
        if !self.lora_enabled {
            return self.linear(g, l, x);
        }
        let w = g.param(&l.weight);
        let a = g.param(&adapter.a);
        let bf = g.param(&adapter.b);
        let y = lora_apply(g, x, w, a, bf, adapter.scale)?;
        let bias = g.param(&l.bias);
        g.add_row_bias(y, bias)
    }

    fn block_forward<'a>(&'a self, g: &mut Graph<'a, T>, b: &'a Block<T>, x: Var) -> Result<Var> {
        let h = self.layer_norm(g, &b.norm1, x)?;
        let q = self.adapted(g, &b.query, &b.query_lora, h)?;
        let k = self.linear(g, &b.key, h)?;
        let v = self.adapted(g, &b.value, &b.value_lora, h)?;
        let attn = g.attention(q, k, v, self.config.heads)?;
        let attn = self.linear(g, &b.out, attn)?;
        let x = g.add(x, attn)?;
        let h = self.layer_norm(g, &b.norm2, x)?;
        let h = self.linear(g, &b.fc1, h)?;
        let h = g.gelu(h);
        let h = self.linear(g, &b.fc2, h)?;
        g.add(x, h)
    }
}

/// Splits an `H×W×C` image into raster-ordered patch rows of length `p·p·C`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, config: &EncoderConfig) -> Result<Tensor<T>> {
    let (s, c, p) = (config.image_size, config.channels, config.patch_size);
    if image.shape() != [s, s, c] {
        return Err(Error::shape(
            "patch_embed",
            format!("image {:?}, expected [{s}, {s}, {c}]", image.shape()),
        ));
    }
    let per_side = s / p;
    let px = image.values();
    let mut out = Vec::with_capacity(s * s * c);
    for py in 0..per_side {
        for pxi in 0..per_side {
            for y in 0..p {
                let row = (py * p + y) * s + pxi * p;
                out.extend_from_slice(&px[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(vec![per_side * per_side, p * p * c], out)
}
