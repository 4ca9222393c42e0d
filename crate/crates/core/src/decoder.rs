//! Segmentation decoder and gradient clipping.
//!
//! The decoder runs transformer layers over `[Q; T]` (learned class queries
//! and encoder patch tokens), scores L2-normalized patches against
//! L2-normalized queries, normalizes the class scores and upsamples them to
//! the input resolution.
//!
//! Clipping works on the per-pixel cross-entropy map `G`, tiled into `L²`
//! non-overlapping `S×S` patches. A pixel is retained iff its value is at
//! most `max(λᵢ, λ_global)` where `λᵢ` is its tile mean and `λ_global` the
//! mean of tile means. Masks only apply once `λ_global ≤ τ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Result, WeakTrError};
use crate::graph::{Graph, Var, IGNORE_LABEL};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{Block, EncoderConfig, INIT_STD, LN_EPS};

/// Which `λ_global` the start-value gate compares against `τ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateScope {
    /// Mean of per-image `λ_global` over the batch.
    #[default]
    Batch,
    PerImage,
}

fn d_layers() -> usize {
    2
}
fn d_output() -> usize {
    64
}
fn d_patch() -> usize {
    16
}
fn d_tau() -> f64 {
    1.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    #[serde(default = "d_layers")]
    pub decoder_layers: usize,
    /// Output resolution `O`.
    #[serde(default = "d_output")]
    pub output_size: usize,
    /// Gradient patch side `S`.
    #[serde(default = "d_patch")]
    pub grad_patch_size: usize,
    /// Clipping start value `τ`.
    #[serde(default = "d_tau")]
    pub start_value: f64,
    #[serde(default)]
    pub gate_scope: GateScope,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            decoder_layers: 2,
            output_size: 64,
            grad_patch_size: 16,
            start_value: 1.2,
            gate_scope: GateScope::Batch,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.grad_patch_size;
        if s == 0 || self.output_size == 0 || self.output_size % s != 0 {
            return Err(WeakTrError::Config(format!(
                "gradient patch size {s} must divide output size {}",
                self.output_size
            )));
        }
        if !(self.start_value > 0.0) {
            return Err(WeakTrError::Config("start value must be positive".into()));
        }
        Ok(())
    }

    /// Tiles per side (`L = O/S`).
    pub fn tiles_per_side(&self) -> usize {
        self.output_size / self.grad_patch_size
    }
}

/// Dense class scores `O×O×C_seg` (channel 0 is background).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn size(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.cols()
    }

    /// Per-pixel argmax.
    pub fn argmax(&self) -> LabelMap {
        let c = self.classes();
        let labels = self
            .logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.size(), labels).unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct SegDecoder {
    dim: usize,
    classes: usize,
    grid: usize,
    out_size: usize,
    blocks: Vec<Block>,
    queries: ParamId,
    mask_norm: (ParamId, ParamId),
}

impl SegDecoder {
    /// Registers `decoder.*` parameters; `C_seg = enc.num_classes + 1`.
    pub fn new<T: Scalar, R: Rng>(
        enc: &EncoderConfig,
        cfg: &DecoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.output_size < enc.grid() {
            return Err(WeakTrError::Config(format!(
                "output size {} below token grid {}",
                cfg.output_size,
                enc.grid()
            )));
        }
        let d = enc.embed_dim;
        let classes = enc.num_classes + 1;
        let blocks = (0..cfg.decoder_layers)
            .map(|k| Block::new(store, &format!("decoder.blocks.{k}"), d, enc.heads, enc.mlp_hidden(), rng))
            .collect();
        let queries = store.add_trunc_normal("decoder.cls_emb", &[classes, d], INIT_STD, rng);
        let mask_norm = (
            store.add_ones("decoder.mask_norm.weight", &[classes]),
            store.add_zeros("decoder.mask_norm.bias", &[classes]),
        );
        Ok(Self {
            dim: d,
            classes,
            grid: enc.grid(),
            out_size: cfg.output_size,
            blocks,
            queries,
            mask_norm,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    /// `P̂ = Upsample(LN(T̂_norm · Q̂_normᵀ / √D))` for queries `q: C_seg×D`
    /// and patch tokens `t: N²×D`.
    pub fn decode_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        t: Var,
    ) -> Result<Var> {
        let n2 = self.grid * self.grid;
        if g.shape(q) != [self.classes, self.dim] || g.shape(t) != [n2, self.dim] {
            return Err(WeakTrError::shape(format!(
                "decode: Q {:?} / T {:?}, expected {}×{d} and {n2}×{d}",
                g.shape(q),
                g.shape(t),
                self.classes,
                d = self.dim
            )));
        }
        let mut x = g.concat(&[q, t])?;
        for block in &self.blocks {
            x = block.forward(g, store, x)?.0;
        }
        let q_hat = g.slice_rows(x, 0, self.classes)?;
        let t_hat = g.slice_rows(x, self.classes, n2)?;
        let eps = T::lit(1e-12);
        let qn = g.l2_normalize_rows(q_hat, eps);
        let tn = g.l2_normalize_rows(t_hat, eps);
        let qt = g.transpose(qn)?;
        let scores = g.matmul(tn, qt)?;
        let scores = g.scale(scores, T::one() / T::from_usize_lossy(self.dim).sqrt());
        let (ng, nb) = (g.param(store, self.mask_norm.0), g.param(store, self.mask_norm.1));
        let scores = g.layer_norm(scores, ng, nb, T::lit(LN_EPS))?;
        let low = g.reshape(scores, &[self.grid, self.grid, self.classes])?;
        g.upsample_bilinear(low, self.out_size, self.out_size)
    }

    /// Decodes from an encoder's `T_final`, using the learned decoder queries.
    pub fn forward_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t_final: Var,
        encoder_classes: usize,
    ) -> Result<Var> {
        let t = g.slice_rows(t_final, encoder_classes, self.grid * self.grid)?;
        let q = g.param(store, self.queries);
        self.decode_var(g, store, q, t)
    }

    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        q: &Tensor<T>,
        t: &Tensor<T>,
    ) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let (qv, tv) = (g.constant(q.clone()), g.constant(t.clone()));
        let out = self.decode_var(&mut g, store, qv, tv)?;
        Ok(Prediction {
            logits: g.value(out).clone(),
        })
    }
}

/// Per-pixel softmax cross-entropy `O×O`; ignored pixels are 0.
pub fn per_pixel_ce<T: Scalar>(pred: &Prediction<T>, seeds: &LabelMap) -> Result<Tensor<T>> {
    let o = pred.size();
    if seeds.size != o || pred.logits.shape()[1] != o {
        return Err(WeakTrError::shape(format!(
            "per-pixel CE: prediction {:?} vs seeds {}×{}",
            pred.logits.shape(),
            seeds.size,
            seeds.size
        )));
    }
    let mut g = Graph::new();
    let logits = g.constant(pred.logits.reshaped(&[o * o, pred.classes()])?);
    let ce = g.softmax_cross_entropy(logits, &seeds.labels)?;
    g.value(ce).reshaped(&[o, o])
}

/// Tiles of the CE map and their statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPatches<T> {
    /// `L²×S×S`, tiles in row-major order.
    pub patches: Tensor<T>,
    /// Tile means over non-ignored pixels (accumulated in f64); 0 for fully
    /// ignored tiles.
    pub lambda_i: Vec<T>,
    /// Whether each tile has at least one non-ignored pixel.
    pub included: Vec<bool>,
}

/// Flat map index of pixel `(j, k)` in tile `i`.
#[inline]
fn map_index(i: usize, j: usize, k: usize, o: usize, s: usize) -> usize {
    let l = o / s;
    let (ty, tx) = (i / l, i % l);
    (ty * s + j) * o + tx * s + k
}

fn map_size<T: Scalar>(map: &Tensor<T>) -> Result<usize> {
    match map.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(WeakTrError::shape(format!("expected a square O×O map, got {s:?}"))),
    }
}

/// Splits an `O×O` map into `L²` tiles of `S×S`.
pub fn to_tiles<T: Scalar>(map: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let o = map_size(map)?;
    if s == 0 || o % s != 0 {
        return Err(WeakTrError::domain(format!("tile size {s} does not divide {o}")));
    }
    let l2 = (o / s) * (o / s);
    let mut out = Vec::with_capacity(o * o);
    for i in 0..l2 {
        for j in 0..s {
            for k in 0..s {
                out.push(map.data()[map_index(i, j, k, o, s)]);
            }
        }
    }
    Tensor::new(vec![l2, s, s], out)
}

/// Inverse of [`to_tiles`].
pub fn from_tiles<T: Scalar>(tiles: &Tensor<T>) -> Result<Tensor<T>> {
    let [l2, s, s2] = *tiles.shape() else {
        return Err(WeakTrError::shape(format!("tiles {:?}", tiles.shape())));
    };
    let l = (l2 as f64).sqrt().round() as usize;
    if s != s2 || l * l != l2 {
        return Err(WeakTrError::shape(format!("tiles {:?}", tiles.shape())));
    }
    let o = l * s;
    let mut out = vec![T::zero(); o * o];
    let mut src = tiles.data().iter();
    for i in 0..l2 {
        for j in 0..s {
            for k in 0..s {
                out[map_index(i, j, k, o, s)] = *src.next().unwrap();
            }
        }
    }
    Tensor::new(vec![o, o], out)
}

/// Tiles the CE map and computes each tile's mean over `valid` pixels
/// (`None` = all pixels valid).
pub fn gradient_patches<T: Scalar>(
    ce_map: &Tensor<T>,
    valid: Option<&[bool]>,
    cfg: &DecoderConfig,
) -> Result<GradientPatches<T>> {
    let o = map_size(ce_map)?;
    let s = cfg.grad_patch_size;
    if o != cfg.output_size || s == 0 || o % s != 0 {
        return Err(WeakTrError::domain(format!(
            "CE map {o}×{o} incompatible with O={} S={s}",
            cfg.output_size
        )));
    }
    if let Some(v) = valid {
        if v.len() != o * o {
            return Err(WeakTrError::shape("valid mask size differs from CE map"));
        }
    }
    let patches = to_tiles(ce_map, s)?;
    let l2 = patches.shape()[0];
    let mut lambda_i = Vec::with_capacity(l2);
    let mut included = Vec::with_capacity(l2);
    for i in 0..l2 {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for j in 0..s {
            for k in 0..s {
                let m = map_index(i, j, k, o, s);
                if valid.map_or(true, |v| v[m]) {
                    total += ce_map.data()[m].as_f64();
                    count += 1;
                }
            }
        }
        if count > 0 {
            lambda_i.push(T::lit(total / count as f64));
            included.push(true);
        } else {
            lambda_i.push(T::zero());
            included.push(false);
        }
    }
    Ok(GradientPatches {
        patches,
        lambda_i,
        included,
    })
}

/// Mean of the included tile means (0 when nothing is included).
pub fn global_lambda<T: Scalar>(lambda_i: &[T], included: &[bool]) -> T {
    let (sum, n) = lambda_i
        .iter()
        .zip(included)
        .filter(|(_, &inc)| inc)
        .fold((0.0f64, 0usize), |(s, n), (&l, _)| (s + l.as_f64(), n + 1));
    if n == 0 {
        T::zero()
    } else {
        T::lit(sum / n as f64)
    }
}

/// `M̂ᵢ(j,k) = 1` iff `Ĝᵢ(j,k) ≤ max(λᵢ, λ_global)`.
pub fn clipping_mask<T: Scalar>(
    grad_patches: &Tensor<T>,
    lambda_i: &[T],
    lambda_global: T,
) -> Result<Tensor<T>> {
    let l2 = grad_patches.shape()[0];
    if lambda_i.len() != l2 || grad_patches.rank() != 3 {
        return Err(WeakTrError::shape(format!(
            "clipping mask: {} thresholds for patches {:?}",
            lambda_i.len(),
            grad_patches.shape()
        )));
    }
    let per = grad_patches.len() / l2;
    let mut out = Vec::with_capacity(grad_patches.len());
    for (tile, &li) in grad_patches.data().chunks(per).zip(lambda_i) {
        let thr = li.max(lambda_global);
        out.extend(tile.iter().map(|&v| if v <= thr { T::one() } else { T::zero() }));
    }
    Tensor::new(grad_patches.shape().to_vec(), out)
}

/// `Ĝ′ = Ĝ ⊙ M̂` if `λ_global ≤ τ`, else `Ĝ`. `masks` are in tile layout.
pub fn gated_clip<T: Scalar>(
    ce_map: &Tensor<T>,
    masks: &Tensor<T>,
    lambda_global: T,
    tau: T,
) -> Result<(Tensor<T>, bool)> {
    if tau <= T::zero() {
        return Err(WeakTrError::domain("start value must be positive"));
    }
    if lambda_global <= tau {
        let m = from_tiles(masks)?;
        Ok((ce_map.mul(&m)?, true))
    } else {
        Ok((ce_map.clone(), false))
    }
}

/// Everything the clipping step decided for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipReport<T> {
    pub grad_patches: Tensor<T>,
    pub lambda_i: Vec<T>,
    pub included: Vec<bool>,
    pub lambda_global: T,
    /// `L²×S×S` in {0,1}; all ones when not gated.
    pub masks: Tensor<T>,
    pub gated: bool,
}

impl<T: Scalar> ClipReport<T> {
    /// Retained pixels in map layout: not ignored and (if gated) unmasked.
    pub fn retained(&self, seeds: &LabelMap) -> Result<Vec<bool>> {
        let m = from_tiles(&self.masks)?;
        Ok(m.data()
            .iter()
            .zip(&seeds.labels)
            .map(|(&v, &l)| v > T::zero() && l != IGNORE_LABEL)
            .collect())
    }
}

/// Runs tiling, thresholds and masking for one CE map. The gate compares
/// `gate_lambda` (this image's or the batch's `λ_global`) against `τ`.
pub fn clip_report<T: Scalar>(
    ce_map: &Tensor<T>,
    seeds: &LabelMap,
    cfg: &DecoderConfig,
    gate_lambda: Option<T>,
) -> Result<ClipReport<T>> {
    let valid = seeds.valid();
    let gp = gradient_patches(ce_map, Some(&valid), cfg)?;
    let lambda_global = global_lambda(&gp.lambda_i, &gp.included);
    let gate = gate_lambda.unwrap_or(lambda_global);
    let gated = gate <= T::lit(cfg.start_value);
    let masks = if gated {
        let mut m = clipping_mask(&gp.patches, &gp.lambda_i, lambda_global)?;
        let per = m.len() / gp.included.len();
        for (tile, &inc) in m.data_mut().chunks_mut(per).zip(&gp.included) {
            if !inc {
                tile.fill(T::one());
            }
        }
        m
    } else {
        Tensor::ones(gp.patches.shape())
    };
    Ok(ClipReport {
        grad_patches: gp.patches,
        lambda_i: gp.lambda_i,
        included: gp.included,
        lambda_global,
        masks,
        gated,
    })
}
