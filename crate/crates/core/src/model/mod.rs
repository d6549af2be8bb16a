//! Trainable models (MLP and a pre-norm vision transformer) with a tagged
//! parameter registry, plus the analytic [`ModelSpec`] calculator.

pub mod checkpoint;
mod registry;
mod spec;

pub use registry::{ParamEntry, ParameterRegistry, Role};
pub use spec::{bottleneck_width, count_params, MlpSpec, ModelSpec, ParamCounts, VitSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::peft::{PromptInit, TuningMode};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone)]
struct BlockLayout {
    norm1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    norm2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
    adapter: Option<[usize; 4]>,
}

#[derive(Debug, Clone)]
struct VitLayout {
    patch: (usize, usize),
    cls: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    norm: (usize, usize),
    head: (usize, usize),
    prompts: Option<usize>,
}

#[derive(Debug, Clone)]
struct MlpLayout {
    layers: Vec<(usize, usize)>,
    head: (usize, usize),
}

#[derive(Debug, Clone)]
enum Layout {
    Mlp(MlpLayout),
    Vit(VitLayout),
}

impl Layout {
    fn resolve(spec: &ModelSpec, reg: &ParameterRegistry) -> Result<Self> {
        let pair = |w: &str, b: &str| -> Result<(usize, usize)> { Ok((reg.index_of(w)?, reg.index_of(b)?)) };
        let head = pair("head.weight", "head.bias")?;
        Ok(match spec {
            ModelSpec::Mlp(s) => Layout::Mlp(MlpLayout {
                layers: (0..s.hidden_dims.len())
                    .map(|i| pair(&format!("layers.{i}.weight"), &format!("layers.{i}.bias")))
                    .collect::<Result<_>>()?,
                head,
            }),
            ModelSpec::Vit(s) => {
                let blocks = (0..s.depth)
                    .map(|i| {
                        let p = |n: &str| format!("blocks.{i}.{n}");
                        let adapter = match reg.index_of(&p("adapter.down.weight")) {
                            Ok(dw) => Some([
                                dw,
                                reg.index_of(&p("adapter.down.bias"))?,
                                reg.index_of(&p("adapter.up.weight"))?,
                                reg.index_of(&p("adapter.up.bias"))?,
                            ]),
                            Err(_) => None,
                        };
                        Ok(BlockLayout {
                            norm1: pair(&p("norm1.weight"), &p("norm1.bias"))?,
                            qkv: pair(&p("attn.qkv.weight"), &p("attn.qkv.bias"))?,
                            proj: pair(&p("attn.proj.weight"), &p("attn.proj.bias"))?,
                            norm2: pair(&p("norm2.weight"), &p("norm2.bias"))?,
                            fc1: pair(&p("mlp.fc1.weight"), &p("mlp.fc1.bias"))?,
                            fc2: pair(&p("mlp.fc2.weight"), &p("mlp.fc2.bias"))?,
                            adapter,
                        })
                    })
                    .collect::<Result<_>>()?;
                Layout::Vit(VitLayout {
                    patch: pair("patch_embed.weight", "patch_embed.bias")?,
                    cls: reg.index_of("cls_token")?,
                    pos: reg.index_of("pos_embed")?,
                    blocks,
                    norm: pair("norm.weight", "norm.bias")?,
                    head,
                    prompts: reg.index_of("prompt_tokens").ok(),
                })
            }
        })
    }
}

/// Output of [`GlobalModel::forward`]: the logits and one graph leaf per
/// registry entry (in registry order).
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// A model: its spec, the parameter registry and the weights behind it.
#[derive(Debug, Clone)]
pub struct GlobalModel<T> {
    spec: ModelSpec,
    registry: ParameterRegistry,
    weights: Vec<Tensor<T>>,
    mode: Option<TuningMode>,
    layout: Layout,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    TruncNormal(f64),
    Uniform(f64),
}

fn init_for(spec: &ModelSpec, entry: &ParamEntry, prompt_init: PromptInit) -> Init {
    let name = entry.name.as_str();
    match entry.role {
        Role::Head if name.ends_with("weight") => Init::TruncNormal(0.01),
        Role::Head | Role::BackboneBias => Init::Zeros,
        Role::Adapter if name.contains(".up.") => Init::Zeros,
        Role::Adapter if name.ends_with("weight") => Init::TruncNormal(0.02),
        Role::Adapter => Init::Zeros,
        Role::Prompt => match prompt_init {
            PromptInit::Uniform { bound } => Init::Uniform(bound),
            PromptInit::Zeros => Init::Zeros,
        },
        Role::BackboneWeight if name.contains("norm") => Init::Ones,
        Role::BackboneWeight => match spec {
            ModelSpec::Vit(_) => Init::TruncNormal(0.02),
            ModelSpec::Mlp(_) => Init::TruncNormal(1.0 / (entry.shape[0] as f64).sqrt()),
        },
    }
}

fn sample_init<T: Real>(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::TruncNormal(std) => (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
            .collect(),
        Init::Uniform(bound) => (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect(),
    }
}

/// Builds and initialises a model deterministically from `seed`.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<GlobalModel<T>> {
    GlobalModel::build(spec, seed)
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, p: &[Var], (w, b): (usize, usize)) -> Result<Var> {
    let y = g.matmul(x, p[w])?;
    g.add(y, p[b])
}

fn norm<T: Real>(g: &mut Graph<T>, x: Var, p: &[Var], (w, b): (usize, usize)) -> Result<Var> {
    let y = g.layer_norm(x)?;
    let y = g.mul(y, p[w])?;
    g.add(y, p[b])
}

impl<T: Real> GlobalModel<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let registry = ParameterRegistry::for_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = registry
            .entries()
            .iter()
            .map(|e| {
                let data = sample_init(init_for(spec, e, PromptInit::default()), e.numel(), &mut rng);
                Tensor::new(e.shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout::resolve(spec, &registry)?;
        Ok(Self {
            spec: spec.clone(),
            registry,
            weights,
            mode: None,
            layout,
        })
    }

    /// Used by the checkpoint reader: adopts already-validated parts.
    pub(crate) fn from_parts(spec: ModelSpec, registry: ParameterRegistry, weights: Vec<Tensor<T>>, mode: Option<TuningMode>) -> Result<Self> {
        if registry.len() != weights.len()
            || registry
                .entries()
                .iter()
                .zip(&weights)
                .any(|(e, w)| e.shape.as_slice() != w.shape())
        {
            return Err(Error::contract("weights do not match the registry"));
        }
        let layout = Layout::resolve(&spec, &registry)?;
        Ok(Self {
            spec,
            registry,
            weights,
            mode,
            layout,
        })
    }

    pub(crate) fn set_mode(&mut self, mode: TuningMode, seed: u64) -> Result<()> {
        if let Some(existing) = &self.mode {
            return Err(Error::contract(format!(
                "model already has mode `{existing}` applied; cannot apply `{mode}`"
            )));
        }
        let first_new = self.registry.apply_mode(&self.spec, &mode)?;
        let prompt_init = match mode {
            TuningMode::Prompt { init, .. } => init,
            _ => PromptInit::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for e in &self.registry.entries()[first_new..] {
            let data = sample_init(init_for(&self.spec, e, prompt_init), e.numel(), &mut rng);
            self.weights.push(Tensor::new(e.shape.clone(), data)?);
        }
        self.layout = Layout::resolve(&self.spec, &self.registry)?;
        self.mode = Some(mode);
        Ok(())
    }

    /// Re-draws the classification head from its initial distribution, e.g.
    /// before fine-tuning a pretrained backbone on a new task.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        for (e, w) in self.registry.entries().iter().zip(self.weights.iter_mut()) {
            if e.role == Role::Head {
                let data = sample_init(init_for(&self.spec, e, PromptInit::default()), e.numel(), &mut rng);
                w.data_mut().copy_from_slice(&data);
            }
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn mode(&self) -> Option<&TuningMode> {
        self.mode.as_ref()
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.weights
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.weights[self.registry.index_of(name)?])
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.registry.index_of(name)?;
        Ok(&mut self.weights[i])
    }

    /// Flat copy of the transmitted parameters, in registry order.
    pub fn snapshot_transmitted(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.registry.transmitted_count() as usize);
        for (e, w) in self.registry.entries().iter().zip(&self.weights) {
            if e.transmitted {
                out.extend_from_slice(w.data());
            }
        }
        out
    }

    /// Overwrites the transmitted parameters from a flat vector produced by
    /// [`GlobalModel::snapshot_transmitted`]. Other parameters are untouched.
    pub fn load_transmitted(&mut self, theta: &[T]) -> Result<()> {
        let expected = self.registry.transmitted_count() as usize;
        if theta.len() != expected {
            return Err(Error::contract(format!(
                "transmitted vector has {} values, model expects {expected}",
                theta.len()
            )));
        }
        let mut offset = 0;
        for (e, w) in self.registry.entries().iter().zip(self.weights.iter_mut()) {
            if e.transmitted {
                let n = w.len();
                w.data_mut().copy_from_slice(&theta[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Arranges raw samples (as produced by the data module) into the model's
    /// input tensor: `[B, in]` for MLPs, `[B, patches, patch_dim]` for ViTs.
    pub fn prepare_input(&self, samples: &[&[f32]]) -> Result<Tensor<T>> {
        let want: usize = self.spec.input_shape().iter().product();
        if let Some(bad) = samples.iter().find(|s| s.len() != want) {
            return Err(Error::shape("prepare_input", &[&self.spec.input_shape(), &[bad.len()]]));
        }
        let b = samples.len();
        match &self.spec {
            ModelSpec::Mlp(s) => {
                let data = samples.iter().flat_map(|x| x.iter().map(|&v| T::c(v as f64))).collect();
                Tensor::new(vec![b, s.input_dim], data)
            }
            ModelSpec::Vit(s) => {
                let (p, c, side) = (s.patch_size, s.channels, s.image_size);
                let grid = side / p;
                let mut data = Vec::with_capacity(b * s.num_patches() * s.patch_dim());
                for img in samples {
                    for py in 0..grid {
                        for px in 0..grid {
                            for ch in 0..c {
                                for dy in 0..p {
                                    let row = (ch * side + py * p + dy) * side + px * p;
                                    data.extend(img[row..row + p].iter().map(|&v| T::c(v as f64)));
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![b, s.num_patches(), s.patch_dim()], data)
            }
        }
    }

    /// Records the forward pass on `g`. Trainable parameters become
    /// gradient-carrying leaves; everything else is constant.
    pub fn forward(&self, g: &mut Graph<T>, input: &Tensor<T>) -> Result<Forward> {
        let params: Vec<Var> = self
            .registry
            .entries()
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| g.param(w.clone(), e.trainable))
            .collect();
        let x = g.input(input.clone());
        let logits = match (&self.layout, &self.spec) {
            (Layout::Mlp(l), ModelSpec::Mlp(s)) => {
                if input.shape() != [input.shape().first().copied().unwrap_or(0), s.input_dim] {
                    return Err(Error::shape("mlp_forward", &[input.shape(), &[s.input_dim]]));
                }
                let mut h = x;
                for &layer in &l.layers {
                    let z = linear(g, h, &params, layer)?;
                    h = g.gelu(z);
                }
                linear(g, h, &params, l.head)?
            }
            (Layout::Vit(l), ModelSpec::Vit(s)) => self.vit_forward(g, &params, x, l, s)?,
            _ => unreachable!("layout always matches the model family"),
        };
        Ok(Forward { logits, params })
    }

    fn vit_forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, l: &VitLayout, s: &VitSpec) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != s.num_patches() || shape[2] != s.patch_dim() {
            return Err(Error::shape(
                "vit_forward",
                &[&shape, &[s.num_patches(), s.patch_dim()]],
            ));
        }
        let batch = shape[0];
        let seq = s.seq_len();
        let d = s.embed_dim;

        let tokens = linear(g, x, p, l.patch)?;
        let cls = g.expand(p[l.cls], batch);
        let mut h = g.concat(&[cls, tokens], 1)?;
        h = g.add(h, p[l.pos])?;

        let prompt_len = match (l.prompts, self.mode) {
            (Some(_), Some(TuningMode::Prompt { length, .. })) => length,
            _ => 0,
        };
        for (i, blk) in l.blocks.iter().enumerate() {
            if prompt_len > 0 {
                let bank = l.prompts.expect("prompt bank present");
                let layer = g.slice(p[bank], 0, i, 1)?;
                let layer = g.reshape(layer, vec![prompt_len, d])?;
                let layer = g.expand(layer, batch);
                h = g.concat(&[layer, h], 1)?;
            }
            h = self.block(g, p, h, blk, s)?;
            if prompt_len > 0 {
                h = g.slice(h, 1, prompt_len, seq)?;
            }
        }

        // The final norm is per-token, so only the class token needs it.
        let cls_out = g.slice(h, 1, 0, 1)?;
        let cls_out = g.reshape(cls_out, vec![batch, d])?;
        let cls_out = norm(g, cls_out, p, l.norm)?;
        linear(g, cls_out, p, l.head)
    }

    fn block(&self, g: &mut Graph<T>, p: &[Var], x: Var, blk: &BlockLayout, s: &VitSpec) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (batch, len, d) = (shape[0], shape[1], shape[2]);
        let heads = s.num_heads;
        let hd = s.head_dim();

        let h = norm(g, x, p, blk.norm1)?;
        let qkv = linear(g, h, p, blk.qkv)?;
        let split = |g: &mut Graph<T>, part: usize| -> Result<Var> {
            let t = g.slice(qkv, 2, part * d, d)?;
            g.reshape(t, vec![batch, len, heads, hd])
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::one() / T::c(hd as f64).sqrt());
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![batch, len, d])?;
        let attn_out = linear(g, ctx, p, blk.proj)?;
        let x = g.add(x, attn_out)?;

        let residual = x;
        let h = norm(g, x, p, blk.norm2)?;
        let h = linear(g, h, p, blk.fc1)?;
        let h = g.gelu(h);
        let mut m = linear(g, h, p, blk.fc2)?;
        if let Some([dw, db, uw, ub]) = blk.adapter {
            let a = linear(g, m, p, (dw, db))?;
            let a = g.gelu(a);
            let a = linear(g, a, p, (uw, ub))?;
            m = g.add(a, m)?;
        }
        g.add(m, residual)
    }

    /// Inference-only logits.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let f = self.forward(&mut g, input)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean cross-entropy on a batch and the gradient of every trainable
    /// parameter (registry order; `None` for frozen entries).
    pub fn loss_and_gradients(&self, input: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<Option<Vec<T>>>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input)?;
        let loss = g.cross_entropy(f.logits, labels)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let per_param = self
            .registry
            .entries()
            .iter()
            .zip(&f.params)
            .map(|(e, &v)| {
                if e.trainable {
                    Some(grads.take(v).unwrap_or_else(|| vec![T::zero(); e.numel()]))
                } else {
                    None
                }
            })
            .collect();
        Ok((value, per_param))
    }
}
