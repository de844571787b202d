//! Miniature promptable segmentation model: a pre-norm ViT image encoder,
//! a box-prompt MLP and a two-way cross-attention mask decoder.
//!
//! Parameters live in a flat name → tensor registry. Forward passes bind the
//! registry onto a fresh [`Graph`], wrapping INT8-designated weights with
//! fake quantization when the model has been quantized.

mod partition;

pub use partition::{apply_fake_quant, classify, partition_precision, Precision, PrecisionPartition, QuantScope};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{adapted_forward, lora_forward, AdapterConfig, AdapterState, AdapterVars, FixedLoraState, LoraVars};
use crate::error::{Error, Result};
use crate::quant::fake_quant;
use crate::tensor::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub d_prompt: usize,
    pub decoder_blocks: usize,
    pub adapter: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            mlp_ratio: 4,
            d_prompt: 32,
            decoder_blocks: 2,
            adapter: AdapterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.d_model,
            self.n_heads,
            self.n_blocks,
            self.mlp_ratio,
            self.d_prompt,
            self.decoder_blocks,
        ];
        if positive.contains(&0) {
            return Err(Error::contract("model dimensions must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::contract(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.patch_size % 2 != 0 {
            return Err(Error::contract("patch_size must be even (the head predicts at half resolution)"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        self.adapter.validate()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side of the sub-patch block each token predicts before upsampling.
    pub fn head_side(&self) -> usize {
        self.patch_size / 2
    }

    /// Layers that carry adapters, in pruning order.
    pub fn adapted_layers(&self) -> Vec<String> {
        (0..self.n_blocks).map(|i| format!("encoder.block{i}.attn.qkv")).collect()
    }
}

/// Named parameters plus optional adapters or fixed-rank LoRA residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub adapters: Vec<AdapterState<T>>,
    pub lora: Vec<FixedLoraState<T>>,
    /// Names whose weights pass through fake quantization in forward.
    pub quantized: BTreeSet<String>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Tensor<f32>>,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, d_out: usize, d_in: usize) {
        let w = Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), &mut self.rng);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.params.insert(format!("{name}.weight"), Tensor::ones(&[d]));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
    }

    fn embed(&mut self, name: &str, shape: &[usize]) {
        let t = Tensor::randn(shape, EMBED_STD, &mut self.rng);
        self.params.insert(name.to_string(), t);
    }
}

/// Deterministically initialized model with fresh AdaLoRA adapters on every
/// encoder QKV projection.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    let d = cfg.d_model;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: &mut params,
    };
    let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
    init.linear("encoder.patch_embed", d, patch_dim);
    init.embed("encoder.pos_embed", &[cfg.n_tokens(), d]);
    for i in 0..cfg.n_blocks {
        let b = format!("encoder.block{i}");
        init.norm(&format!("{b}.norm1"), d);
        init.linear(&format!("{b}.attn.qkv"), 3 * d, d);
        init.linear(&format!("{b}.attn.proj"), d, d);
        init.norm(&format!("{b}.norm2"), d);
        init.linear(&format!("{b}.mlp.fc1"), cfg.mlp_ratio * d, d);
        init.linear(&format!("{b}.mlp.fc2"), d, cfg.mlp_ratio * d);
    }
    init.norm("encoder.norm", d);

    init.linear("prompt.fc1", cfg.d_prompt, 4);
    init.linear("prompt.fc2", cfg.d_prompt, cfg.d_prompt);

    init.linear("decoder.prompt_in", d, cfg.d_prompt);
    init.embed("decoder.mask_token", &[1, d]);
    for j in 0..cfg.decoder_blocks {
        let b = format!("decoder.block{j}");
        for role in ["q", "k", "v", "o"] {
            init.linear(&format!("{b}.t2i.{role}"), d, d);
            init.linear(&format!("{b}.i2t.{role}"), d, d);
        }
        for n in ["norm_t1", "norm_i1", "norm_t2", "norm_i2", "norm_t3"] {
            init.norm(&format!("{b}.{n}"), d);
        }
        init.linear(&format!("{b}.mlp.fc1"), 2 * d, d);
        init.linear(&format!("{b}.mlp.fc2"), d, 2 * d);
    }
    init.norm("decoder.norm", d);
    let s = cfg.head_side();
    init.linear("decoder.head", s * s, d);
    init.linear("decoder.pixel_gain", 1, d);

    let mut model = Model {
        config: cfg.clone(),
        params,
        adapters: Vec::new(),
        lora: Vec::new(),
        quantized: BTreeSet::new(),
    };
    model.attach_adapters(seed.wrapping_add(1));
    Ok(model)
}

/// Graph handles for one bound model.
pub struct Bound {
    vars: BTreeMap<String, Var>,
    adapters: BTreeMap<String, AdapterVars>,
    lora: BTreeMap<String, LoraVars>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} is not bound")))
    }

    pub fn adapter(&self, layer: &str) -> Option<&AdapterVars> {
        self.adapters.get(layer)
    }
}

impl<T: Real> Model<T> {
    /// Replaces any residual modules with fresh AdaLoRA adapters.
    pub fn attach_adapters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        let r = self.config.adapter.r_max;
        self.lora.clear();
        self.adapters = self
            .config
            .adapted_layers()
            .iter()
            .map(|l| AdapterState::init(l, 3 * d, d, r, &mut rng))
            .collect();
    }

    /// Replaces any residual modules with fixed-rank LoRA of rank `r`.
    pub fn attach_lora(&mut self, r: usize, seed: u64) -> Result<()> {
        if r == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        self.adapters.clear();
        self.lora = self
            .config
            .adapted_layers()
            .iter()
            .map(|l| FixedLoraState::init(l, 3 * d, d, r, &mut rng))
            .collect();
        Ok(())
    }

    pub fn detach_residuals(&mut self) {
        self.adapters.clear();
        self.lora.clear();
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            adapters: self
                .adapters
                .iter()
                .map(|a| {
                    let mut out = AdapterState::from_parts(&a.layer_name, a.p.cast(), a.q.cast(), a.lambda.cast(), a.mask().to_vec())
                        .expect("same shapes");
                    out.set_importance(a.importance()).expect("same length");
                    out
                })
                .collect(),
            lora: self
                .lora
                .iter()
                .map(|l| FixedLoraState::from_parts(&l.layer_name, l.a.cast(), l.b.cast()).expect("same shapes"))
                .collect(),
            quantized: self.quantized.clone(),
        }
    }

    /// Every tensor of the model by name: base weights, adapter
    /// `P, Q, lambda, mask` and LoRA `A, B`.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = self.params.clone();
        for a in &self.adapters {
            out.insert(a.p_name(), a.p.clone());
            out.insert(a.q_name(), a.q.clone());
            out.insert(a.lambda_name(), a.lambda.clone());
            out.insert(a.mask_name(), a.mask_tensor());
        }
        for l in &self.lora {
            out.insert(l.a_name(), l.a.clone());
            out.insert(l.b_name(), l.b.clone());
        }
        out
    }

    /// Names of all tensors that can receive gradients (everything except
    /// adapter masks).
    pub fn parameter_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_keys()
            .filter(|n| !n.ends_with(".adapter.mask"))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.ends_with(".adapter.mask"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Mutable access to a trainable tensor (base, adapter `P/Q/lambda` or
    /// LoRA `A/B`).
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if self.params.contains_key(name) {
            return self.params.get_mut(name);
        }
        for a in &mut self.adapters {
            if name == a.p_name() {
                return Some(&mut a.p);
            } else if name == a.q_name() {
                return Some(&mut a.q);
            } else if name == a.lambda_name() {
                return Some(&mut a.lambda);
            }
        }
        for l in &mut self.lora {
            if name == l.a_name() {
                return Some(&mut l.a);
            } else if name == l.b_name() {
                return Some(&mut l.b);
            }
        }
        None
    }

    /// Overwrites the tensor called `name`, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensor_mut(name)
            .ok_or_else(|| Error::contract(format!("no tensor named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_tensor", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// Puts every tensor on `g`. `trainable` decides which leaves require
    /// gradients; adapter masks are always constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            let mut v = g.param(name, value.clone(), trainable(name))?;
            if self.quantized.contains(name) {
                v = fake_quant(g, v)?;
            }
            vars.insert(name.clone(), v);
        }
        let mut adapters = BTreeMap::new();
        for a in &self.adapters {
            let (pn, qn, ln) = (a.p_name(), a.q_name(), a.lambda_name());
            let av = AdapterVars {
                p: g.param(&pn, a.p.clone(), trainable(&pn))?,
                q: g.param(&qn, a.q.clone(), trainable(&qn))?,
                lambda: g.param(&ln, a.lambda.clone(), trainable(&ln))?,
                mask: g.constant(a.mask_tensor()),
            };
            adapters.insert(a.layer_name.clone(), av);
        }
        let mut lora = BTreeMap::new();
        for l in &self.lora {
            let (an, bn) = (l.a_name(), l.b_name());
            let lv = LoraVars {
                a: g.param(&an, l.a.clone(), trainable(&an))?,
                b: g.param(&bn, l.b.clone(), trainable(&bn))?,
            };
            lora.insert(l.layer_name.clone(), lv);
        }
        Ok(Bound { vars, adapters, lora })
    }

    fn linear(&self, g: &mut Graph<T>, b: &Bound, x: Var, layer: &str) -> Result<Var> {
        let w = b.var(&format!("{layer}.weight"))?;
        let bias = b.var(&format!("{layer}.bias"))?;
        if let Some(av) = b.adapters.get(layer) {
            adapted_forward(g, x, w, Some(bias), av)
        } else if let Some(lv) = b.lora.get(layer) {
            lora_forward(g, x, w, Some(bias), lv)
        } else {
            g.linear(x, w, Some(bias))
        }
    }

    fn norm(&self, g: &mut Graph<T>, b: &Bound, x: Var, layer: &str) -> Result<Var> {
        let gamma = b.var(&format!("{layer}.weight"))?;
        let beta = b.var(&format!("{layer}.bias"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn mlp(&self, g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, b, x, &format!("{prefix}.fc1"))?;
        let h = g.gelu(h)?;
        self.linear(g, b, h, &format!("{prefix}.fc2"))
    }

    /// Multi-head scaled dot-product attention on `[B, N, d]` inputs.
    fn attention(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let heads = self.config.n_heads;
        let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let s = g.shape(x).to_vec();
            let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        let (bsz, nq, d) = {
            let s = g.shape(q);
            (s[0], s[1], s[2])
        };
        let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.matmul_t(qh, kh, false, true)?;
        let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let out = g.matmul(attn, vh)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        g.reshape(out, &[bsz, nq, d])
    }

    fn encoder_block(&self, g: &mut Graph<T>, b: &Bound, x: Var, i: usize) -> Result<Var> {
        let p = format!("encoder.block{i}");
        let d = self.config.d_model;
        let h = self.norm(g, b, x, &format!("{p}.norm1"))?;
        let qkv = self.linear(g, b, h, &format!("{p}.attn.qkv"))?;
        let q = g.narrow(qkv, 2, 0, d)?;
        let k = g.narrow(qkv, 2, d, d)?;
        let v = g.narrow(qkv, 2, 2 * d, d)?;
        let a = self.attention(g, q, k, v)?;
        let a = self.linear(g, b, a, &format!("{p}.attn.proj"))?;
        let x = g.add(x, a)?;
        let h = self.norm(g, b, x, &format!("{p}.norm2"))?;
        let m = self.mlp(g, b, h, &format!("{p}.mlp"))?;
        g.add(x, m)
    }

    fn cross(&self, g: &mut Graph<T>, b: &Bound, to: Var, from: Var, prefix: &str) -> Result<Var> {
        let q = self.linear(g, b, to, &format!("{prefix}.q"))?;
        let k = self.linear(g, b, from, &format!("{prefix}.k"))?;
        let v = self.linear(g, b, from, &format!("{prefix}.v"))?;
        let a = self.attention(g, q, k, v)?;
        self.linear(g, b, a, &format!("{prefix}.o"))
    }

    fn decoder_block(&self, g: &mut Graph<T>, b: &Bound, t: Var, img: Var, j: usize) -> Result<(Var, Var)> {
        let p = format!("decoder.block{j}");
        let tn = self.norm(g, b, t, &format!("{p}.norm_t1"))?;
        let inorm = self.norm(g, b, img, &format!("{p}.norm_i1"))?;
        let a = self.cross(g, b, tn, inorm, &format!("{p}.t2i"))?;
        let t = g.add(t, a)?;
        let tn = self.norm(g, b, t, &format!("{p}.norm_t2"))?;
        let m = self.mlp(g, b, tn, &format!("{p}.mlp"))?;
        let t = g.add(t, m)?;
        let inorm = self.norm(g, b, img, &format!("{p}.norm_i2"))?;
        let tn = self.norm(g, b, t, &format!("{p}.norm_t3"))?;
        let a = self.cross(g, b, inorm, tn, &format!("{p}.i2t"))?;
        let img = g.add(img, a)?;
        Ok((t, img))
    }

    /// Mask logits `[B, H, W]` for images `[B, C, H, W]` and pixel boxes
    /// `(x0, y0, x1, y1)`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, images: &Tensor<T>, boxes: &[[f64; 4]]) -> Result<Var> {
        let cfg = &self.config;
        let (bsz, tokens) = self.patchify(images)?;
        let prompt_in = self.box_tensor(boxes, bsz)?;
        let (n, d, s) = (cfg.n_tokens(), cfg.d_model, cfg.head_side());

        let x = g.constant(tokens);
        let x = self.linear(g, b, x, "encoder.patch_embed")?;
        let mut x = g.add(x, b.var("encoder.pos_embed")?)?;
        for i in 0..cfg.n_blocks {
            x = self.encoder_block(g, b, x, i)?;
        }
        let mut img = self.norm(g, b, x, "encoder.norm")?;

        let pb = g.constant(prompt_in);
        let h = self.linear(g, b, pb, "prompt.fc1")?;
        let h = g.gelu(h)?;
        let pe = self.linear(g, b, h, "prompt.fc2")?;
        let pe = g.reshape(pe, &[bsz, 1, cfg.d_prompt])?;
        let pt = self.linear(g, b, pe, "decoder.prompt_in")?;
        let mt = g.expand(b.var("decoder.mask_token")?, &[bsz, 1, d])?;
        let mut t = g.concat(&[pt, mt], 1)?;
        for j in 0..cfg.decoder_blocks {
            (t, img) = self.decoder_block(g, b, t, img, j)?;
        }
        let mask_tok = g.narrow(t, 1, 1, 1)?;
        let h = g.add(img, mask_tok)?;
        let h = self.norm(g, b, h, "decoder.norm")?;
        let logits = self.linear(g, b, h, "decoder.head")?;

        let grid = cfg.grid();
        let r = g.reshape(logits, &[bsz, grid, grid, s, s])?;
        let r = g.permute(r, &[0, 1, 3, 2, 4])?;
        let half = g.reshape(r, &[bsz, grid * s, grid * s])?;
        debug_assert_eq!(n, grid * grid);
        let coarse = g.upsample2x(half)?;

        // Each token scales the centered intensity of its own patch pixels.
        let p = cfg.patch_size;
        let gain = self.linear(g, b, h, "decoder.pixel_gain")?;
        let gain = g.reshape(gain, &[bsz, grid, 1, grid, 1])?;
        let px = g.constant(self.centered_intensity(images)?);
        let px = g.reshape(px, &[bsz, grid, p, grid, p])?;
        let fine = g.mul(gain, px)?;
        let fine = g.reshape(fine, &[bsz, grid * p, grid * p])?;
        g.add(coarse, fine)
    }

    /// Channel-mean intensity minus 0.5, shape `[B, H, W]`.
    fn centered_intensity(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, hw) = (self.config.channels, self.config.image_size);
        let bsz = images.shape()[0];
        let src = images.data();
        let inv = T::lit(1.0 / c as f64);
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); bsz * hw * hw];
        for bi in 0..bsz {
            for (i, o) in out[bi * hw * hw..(bi + 1) * hw * hw].iter_mut().enumerate() {
                let sum = (0..c).fold(T::zero(), |acc, ch| acc + src[(bi * c + ch) * hw * hw + i]);
                *o = sum * inv - half;
            }
        }
        Tensor::new(&[bsz, hw, hw], out)
    }

    /// Inference-only forward.
    pub fn predict(&self, images: &Tensor<T>, boxes: &[[f64; 4]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &|_| false)?;
        let out = self.forward(&mut g, &b, images, boxes)?;
        Ok(g.value(out).clone())
    }

    /// `[B, C, H, W]` (or `[B, H, W]` for one channel) → `[B, N, C·p²]`.
    fn patchify(&self, images: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
        let cfg = &self.config;
        let (c, hw, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
        let s = images.shape();
        let ok = match s.len() {
            3 => c == 1 && s[1] == hw && s[2] == hw,
            4 => s[1] == c && s[2] == hw && s[3] == hw,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "forward",
                format!("images {s:?} do not match {c} channel(s) of {hw}x{hw}"),
            ));
        }
        let bsz = s[0];
        let grid = cfg.grid();
        let pd = c * p * p;
        let src = images.data();
        let mut out = vec![T::zero(); bsz * grid * grid * pd];
        for bi in 0..bsz {
            for gy in 0..grid {
                for gx in 0..grid {
                    let base = ((bi * grid + gy) * grid + gx) * pd;
                    for ch in 0..c {
                        for py in 0..p {
                            let row = ((bi * c + ch) * hw + gy * p + py) * hw + gx * p;
                            let dst = base + (ch * p + py) * p;
                            out[dst..dst + p].copy_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Ok((bsz, Tensor::new(&[bsz, grid * grid, pd], out)?))
    }

    /// Box corners normalized by `size − 1`, shape `[B, 4]`.
    fn box_tensor(&self, boxes: &[[f64; 4]], bsz: usize) -> Result<Tensor<T>> {
        if boxes.len() != bsz {
            return Err(Error::shape("forward", format!("{} boxes for a batch of {bsz}", boxes.len())));
        }
        let lim = (self.config.image_size - 1) as f64;
        let mut data = Vec::with_capacity(4 * bsz);
        for bx in boxes {
            let [x0, y0, x1, y1] = *bx;
            if !(x0 < x1 && y0 < y1) {
                return Err(Error::contract(format!("degenerate box {bx:?}")));
            }
            if bx.iter().any(|&v| !(0.0..=lim).contains(&v)) {
                return Err(Error::contract(format!("box {bx:?} outside the {0}x{0} image", self.config.image_size)));
            }
            data.extend(bx.iter().map(|&v| T::lit(v / lim)));
        }
        Tensor::new(&[bsz, 4], data)
    }
}
