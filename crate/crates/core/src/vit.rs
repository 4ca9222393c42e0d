//! Plain ViT encoder over patch tokens plus one class token per category.
//!
//! The token sequence is `[class tokens (C rows); patch tokens (N² rows)]`.
//! Every post-softmax attention map of every layer and head is returned
//! alongside the final tokens so the CAM stage can fuse them.


use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeakTrError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Side of the square input image in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            num_classes: 4,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WeakTrError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.num_classes == 0 || self.layers == 0 || self.heads == 0 || self.channels == 0 {
            return fail("classes, layers, heads and channels must be positive".into());
        }
        if self.embed_dim < 4 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed dim {} must be >= 4 and divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio <= 0.0 {
            return fail("mlp ratio must be positive".into());
        }
        Ok(())
    }

    /// Patches per side (N).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_classes + self.num_patches()
    }

    /// K·H.
    pub fn num_maps(&self) -> usize {
        self.layers * self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Encoder tokens: `C` class-token rows followed by `N²` patch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub num_classes: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, cfg: &EncoderConfig) -> Result<Self> {
        if tokens.shape() != [cfg.seq_len(), cfg.embed_dim] {
            return Err(WeakTrError::shape(format!(
                "token sequence {:?} does not match ({} + {})×{}",
                tokens.shape(),
                cfg.num_classes,
                cfg.num_patches(),
                cfg.embed_dim
            )));
        }
        Ok(Self {
            tokens,
            num_classes: cfg.num_classes,
        })
    }

    fn rows(&self, start: usize, len: usize) -> Tensor<T> {
        let d = self.tokens.cols();
        Tensor::new(
            vec![len, d],
            self.tokens.data()[start * d..(start + len) * d].to_vec(),
        )
        .unwrap()
    }

    pub fn class_tokens(&self) -> Tensor<T> {
        self.rows(0, self.num_classes)
    }

    pub fn patch_tokens(&self) -> Tensor<T> {
        self.rows(self.num_classes, self.tokens.rows() - self.num_classes)
    }
}

/// All `K·H` attention maps of one forward pass, layer-major then head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<T> {
    /// `(K·H) × (C+N²) × (C+N²)`.
    pub maps: Tensor<T>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new(maps: Tensor<T>, cfg: &EncoderConfig) -> Result<Self> {
        let s = cfg.seq_len();
        if maps.shape() != [cfg.num_maps(), s, s] {
            return Err(WeakTrError::shape(format!(
                "attention stack {:?} does not match {}×{s}×{s}",
                maps.shape(),
                cfg.num_maps()
            )));
        }
        Ok(Self { maps })
    }
}

/// Flat indices into a `(K·H)×S×S` stack producing `(K·H)×N×N×C` class→patch attention.
pub fn cross_attention_index(num_maps: usize, classes: usize, grid: usize) -> Vec<usize> {
    let s = classes + grid * grid;
    let mut idx = Vec::with_capacity(num_maps * grid * grid * classes);
    for h in 0..num_maps {
        for p in 0..grid * grid {
            for c in 0..classes {
                idx.push(h * s * s + c * s + classes + p);
            }
        }
    }
    idx
}

/// Flat indices producing the `(K·H)×N²×N²` patch→patch block of each map.
pub fn patch_attention_index(num_maps: usize, classes: usize, grid: usize) -> Vec<usize> {
    let s = classes + grid * grid;
    let n2 = grid * grid;
    let mut idx = Vec::with_capacity(num_maps * n2 * n2);
    for h in 0..num_maps {
        for i in 0..n2 {
            for j in 0..n2 {
                idx.push(h * s * s + (classes + i) * s + classes + j);
            }
        }
    }
    idx
}

fn gather_tensor<T: Scalar>(src: &Tensor<T>, idx: &[usize], shape: Vec<usize>) -> Result<Tensor<T>> {
    Tensor::new(shape, idx.iter().map(|&i| src.data()[i]).collect())
}

/// Cross-attention maps `CA`, shape `(K·H)×N×N×C`.
pub fn extract_cross_attention<T: Scalar>(
    stack: &AttentionStack<T>,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    AttentionStack::new(stack.maps.clone(), cfg)?;
    let (kh, c, n) = (cfg.num_maps(), cfg.num_classes, cfg.grid());
    gather_tensor(&stack.maps, &cross_attention_index(kh, c, n), vec![kh, n, n, c])
}

/// Patch-attention maps `PA`, shape `(K·H)×N²×N²`, not renormalized.
pub fn extract_patch_attention<T: Scalar>(
    stack: &AttentionStack<T>,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    AttentionStack::new(stack.maps.clone(), cfg)?;
    let (kh, c, n) = (cfg.num_maps(), cfg.num_classes, cfg.grid());
    let n2 = n * n;
    gather_tensor(&stack.maps, &patch_attention_index(kh, c, n), vec![kh, n2, n2])
}

/// Splits an `O×O×channels` image into `N²` flattened patches (row-major
/// patch order; `(dy, dx, channel)` order inside a patch).
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let (o, p, ch) = (cfg.image_size, cfg.patch_size, cfg.channels);
    if image.shape() != [o, o, ch] {
        return Err(WeakTrError::shape(format!(
            "image {:?} does not match {o}×{o}×{ch}",
            image.shape()
        )));
    }
    let n = cfg.grid();
    let src = image.data();
    let mut out = Vec::with_capacity(image.len());
    for py in 0..n {
        for px in 0..n {
            for dy in 0..p {
                let row = (py * p + dy) * o + px * p;
                out.extend_from_slice(&src[row * ch..(row + p) * ch]);
            }
        }
    }
    Tensor::new(vec![n * n, cfg.patch_dim()], out)
}

/// One pre-norm transformer layer: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    dim: usize,
    heads: usize,
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut linear = |name: &str, i: usize, o: usize, rng: &mut R| {
            (
                store.add_trunc_normal(format!("{prefix}.{name}.weight"), &[i, o], INIT_STD, rng),
                store.add_zeros(format!("{prefix}.{name}.bias"), &[o]),
            )
        };
        let qkv = linear("attn.qkv", dim, 3 * dim, rng);
        let proj = linear("attn.proj", dim, dim, rng);
        let fc1 = linear("mlp.fc1", dim, hidden, rng);
        let fc2 = linear("mlp.fc2", hidden, dim, rng);
        let mut norm = |name: &str| {
            (
                store.add_ones(format!("{prefix}.{name}.weight"), &[dim]),
                store.add_zeros(format!("{prefix}.{name}.bias"), &[dim]),
            )
        };
        let ln1 = norm("norm1");
        let ln2 = norm("norm2");
        Self {
            dim,
            heads,
            ln1,
            qkv,
            proj,
            ln2,
            fc1,
            fc2,
        }
    }

    /// Parameter ids of the query/key/value projection `(weight, bias)`.
    pub fn qkv_params(&self) -> (ParamId, ParamId) {
        self.qkv
    }

    /// Returns the layer output and one post-softmax `S×S` map per head.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let eps = T::lit(LN_EPS);
        let dh = self.dim / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();

        let (lg, lb) = (g.param(store, self.ln1.0), g.param(store, self.ln1.1));
        let h = g.layer_norm(x, lg, lb, eps)?;
        let (w, b) = (g.param(store, self.qkv.0), g.param(store, self.qkv.1));
        let qkv = g.linear(h, w, b)?;
        let mut maps = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, self.dim + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * self.dim + head * dh, dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            maps.push(attn);
            outs.push(g.matmul(attn, v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let (w, b) = (g.param(store, self.proj.0), g.param(store, self.proj.1));
        let attn_out = g.linear(merged, w, b)?;
        let x = g.add(x, attn_out)?;

        let (lg, lb) = (g.param(store, self.ln2.0), g.param(store, self.ln2.1));
        let h = g.layer_norm(x, lg, lb, eps)?;
        let (w, b) = (g.param(store, self.fc1.0), g.param(store, self.fc1.1));
        let h = g.linear(h, w, b)?;
        let h = g.gelu(h);
        let (w, b) = (g.param(store, self.fc2.0), g.param(store, self.fc2.1));
        let h = g.linear(h, w, b)?;
        Ok((g.add(x, h)?, maps))
    }
}

/// Output of a graph-level encoder pass.
pub struct EncoderOutput {
    /// `T_final`, `(C+N²)×D`.
    pub tokens: Var,
    /// `K·H` maps, each `S×S`, layer-major.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_proj: (ParamId, ParamId),
    cls_tokens: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
}

impl Encoder {
    /// Registers all encoder parameters under the `encoder.` prefix.
    pub fn new<T: Scalar, R: Rng>(
        cfg: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_proj = (
            store.add_trunc_normal("encoder.patch_embed.weight", &[cfg.patch_dim(), d], INIT_STD, rng),
            store.add_zeros("encoder.patch_embed.bias", &[d]),
        );
        let cls_tokens =
            store.add_trunc_normal("encoder.cls_tokens", &[cfg.num_classes, d], INIT_STD, rng);
        let pos_embed = store.add_trunc_normal("encoder.pos_embed", &[cfg.seq_len(), d], INIT_STD, rng);
        let blocks = (0..cfg.layers)
            .map(|k| Block::new(store, &format!("encoder.blocks.{k}"), d, cfg.heads, cfg.mlp_hidden(), rng))
            .collect();
        let norm = (
            store.add_ones("encoder.norm.weight", &[d]),
            store.add_zeros("encoder.norm.bias", &[d]),
        );
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj,
            cls_tokens,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn patch_bias(&self) -> ParamId {
        self.patch_proj.1
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    /// `T_in`: class tokens stacked over projected patches, plus positions.
    pub fn embed_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<Var> {
        let patches = g.constant(patchify(image, &self.cfg)?);
        let (w, b) = (g.param(store, self.patch_proj.0), g.param(store, self.patch_proj.1));
        let patch_tokens = g.linear(patches, w, b)?;
        let cls = g.param(store, self.cls_tokens);
        let seq = g.concat(&[cls, patch_tokens])?;
        let pos = g.param(store, self.pos_embed);
        g.add(seq, pos)
    }

    /// Runs the K layers and the final norm on a `(C+N²)×D` token matrix.
    pub fn encode_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
    ) -> Result<EncoderOutput> {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.cfg.num_maps());
        for block in &self.blocks {
            let (y, maps) = block.forward(g, store, x)?;
            x = y;
            attention.extend(maps);
        }
        let (ng, nb) = (g.param(store, self.norm.0), g.param(store, self.norm.1));
        let tokens = g.layer_norm(x, ng, nb, T::lit(LN_EPS))?;
        Ok(EncoderOutput { tokens, attention })
    }

    pub fn forward_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<EncoderOutput> {
        let t_in = self.embed_var(g, store, image)?;
        self.encode_var(g, store, t_in)
    }

    pub fn patch_embed<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<TokenSequence<T>> {
        let mut g = Graph::new();
        let v = self.embed_var(&mut g, store, image)?;
        TokenSequence::new(g.value(v).clone(), &self.cfg)
    }

    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seq: &TokenSequence<T>,
    ) -> Result<(TokenSequence<T>, AttentionStack<T>)> {
        TokenSequence::new(seq.tokens.clone(), &self.cfg)?;
        let mut g = Graph::new();
        let t_in = g.constant(seq.tokens.clone());
        let out = self.encode_var(&mut g, store, t_in)?;
        let stacked = g.stack(&out.attention)?;
        Ok((
            TokenSequence::new(g.value(out.tokens).clone(), &self.cfg)?,
            AttentionStack::new(g.value(stacked).clone(), &self.cfg)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(o: usize, p: usize, c: usize, d: usize, k: usize, h: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: o,
            patch_size: p,
            channels: 3,
            num_classes: c,
            embed_dim: d,
            layers: k,
            heads: h,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (enc, store)
    }

    fn random_image(cfg: &EncoderConfig, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_size * cfg.image_size * cfg.channels;
        Tensor::new(
            vec![cfg.image_size, cfg.image_size, cfg.channels],
            (0..n).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 3, 1, 8, 1, 1).validate().is_err());
        assert!(cfg(8, 4, 1, 6, 1, 4).validate().is_err());
        assert!(cfg(8, 4, 1, 2, 1, 1).validate().is_err());
        assert!(cfg(8, 4, 1, 8, 1, 2).validate().is_ok());
    }

    #[test]
    fn patch_embed_shapes_and_linearity() {
        let c = cfg(8, 4, 3, 8, 1, 1);
        let (enc, store) = build(&c, 1);
        let seq = enc.patch_embed(&store, &random_image(&c, 2)).unwrap();
        assert_eq!(seq.tokens.shape(), &[7, 8]);

        let zero = Tensor::zeros(&[8, 8, 3]);
        let seq = enc.patch_embed(&store, &zero).unwrap();
        let pos = store.value(enc.pos_embed());
        assert_eq!(seq.patch_tokens().data(), &pos.data()[3 * 8..]);

        let (enc2, store2) = build(&c, 1);
        let img = random_image(&c, 9);
        assert_eq!(
            enc.patch_embed(&store, &img).unwrap(),
            enc2.patch_embed(&store2, &img).unwrap()
        );
    }

    #[test]
    fn patch_embed_rejects_wrong_image() {
        let c = cfg(8, 4, 3, 8, 1, 1);
        let (enc, store) = build(&c, 1);
        assert!(enc.patch_embed(&store, &Tensor::zeros(&[8, 4, 3])).is_err());
    }

    #[test]
    fn encode_attention_rows_are_distributions() {
        let c = cfg(16, 4, 3, 16, 2, 2);
        let (enc, store) = build(&c, 3);
        let seq = enc.patch_embed(&store, &random_image(&c, 4)).unwrap();
        let (out, stack) = enc.encode(&store, &seq).unwrap();
        assert_eq!(out.tokens.shape(), &[19, 16]);
        assert_eq!(stack.maps.shape(), &[4, 19, 19]);
        for row in stack.maps.data().chunks(19) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(enc.encode(&store, &seq).unwrap(), (out, stack));
    }

    #[test]
    fn minimal_stack_shape() {
        let c = cfg(4, 4, 1, 4, 1, 1);
        let (enc, store) = build(&c, 0);
        let seq = enc.patch_embed(&store, &random_image(&c, 0)).unwrap();
        let (_, stack) = enc.encode(&store, &seq).unwrap();
        assert_eq!(stack.maps.shape(), &[1, 2, 2]);
        let ca = extract_cross_attention(&stack, &c).unwrap();
        assert_eq!(ca.shape(), &[1, 1, 1, 1]);
        assert_eq!(ca.data()[0], stack.maps.data()[1]);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let c = cfg(8, 4, 2, 8, 2, 2);
        let (enc, mut store) = build(&c, 5);
        for block in enc.blocks() {
            let (w, b) = block.qkv_params();
            // Zero the query and key columns only.
            for id in [w, b] {
                let t = &mut store.get_mut(id).value;
                let cols = t.cols();
                for row in t.data_mut().chunks_mut(cols) {
                    row[..16].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let seq = enc.patch_embed(&store, &random_image(&c, 1)).unwrap();
        let (_, stack) = enc.encode(&store, &seq).unwrap();
        let u = 1.0 / 6.0;
        assert!(stack.maps.data().iter().all(|&v| (v - u).abs() < 1e-6));
        let ca = extract_cross_attention(&stack, &c).unwrap();
        let pa = extract_patch_attention(&stack, &c).unwrap();
        assert!(ca.data().iter().chain(pa.data()).all(|&v| (v - u).abs() < 1e-6));
    }
}
