//! End-to-end fine CAM generation.
//!
//! Coarse CAM from the final patch tokens (3×3 convolution), per-head
//! importance weights from the attention stack (pooling → two-layer FFN →
//! sigmoid), weighted class→patch and patch→patch attention, and the fine CAM
//! `PA_hat · (CAM_coarse ⊙ CA_hat)`. Three pooled predictions are scored with
//! the multi-label soft margin loss and summed.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeakTrError};
use crate::graph::{Graph, Var, GATHER_ZERO};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{
    cross_attention_index, patch_attention_index, AttentionStack, Encoder, EncoderConfig,
    TokenSequence, INIT_STD,
};

fn default_hidden() -> usize {
    18
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AafConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
}

impl Default for AafConfig {
    fn default() -> Self {
        Self { hidden_dim: 18 }
    }
}

/// How per-head weights `W′` are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Fusion {
    /// Learned: pooling → FFN → sigmoid.
    #[default]
    Adaptive,
    /// `W′ = 1` for every head (mean-sum baseline).
    MeanSum,
    /// Frozen weights, one per head.
    Fixed { weights: Vec<f64> },
}

/// Per-image CAM artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct CamBundle<T> {
    /// `N×N×C`.
    pub cam_coarse: Tensor<T>,
    /// Pooled head weights `W`, `(K·H)×1`.
    pub weights_w: Tensor<T>,
    /// Interacted weights `W′`, `(K·H)×1`.
    pub weights_wprime: Tensor<T>,
    /// `N×N×C`.
    pub ca_hat: Tensor<T>,
    /// `N²×N²`.
    pub pa_hat: Tensor<T>,
    /// `N×N×C`.
    pub cam_fine: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls_token: f64,
    pub l_coarse_cam: f64,
    pub l_fine_cam: f64,
    pub total: f64,
}

/// Adaptive attention fusion: `W′ = σ(FFN(GAP(A)))` with the FFN mixing heads.
#[derive(Clone, Debug)]
pub struct Aaf {
    num_maps: usize,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl Aaf {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        num_maps: usize,
        cfg: &AafConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.hidden_dim == 0 {
            return Err(WeakTrError::Config("AAF hidden dim must be >= 1".into()));
        }
        let h = cfg.hidden_dim;
        Ok(Self {
            num_maps,
            fc1: (
                store.add_trunc_normal("cam.aaf.fc1.weight", &[num_maps, h], INIT_STD, rng),
                store.add_zeros("cam.aaf.fc1.bias", &[h]),
            ),
            fc2: (
                store.add_trunc_normal("cam.aaf.fc2.weight", &[h, num_maps], INIT_STD, rng),
                store.add_zeros("cam.aaf.fc2.bias", &[num_maps]),
            ),
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.fc1.0, self.fc1.1, self.fc2.0, self.fc2.1]
    }

    /// `(W, W′)`, both of length K·H, from a `(K·H)×S×S` stack.
    pub fn fuse_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stack: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(stack)[0] != self.num_maps {
            return Err(WeakTrError::shape(format!(
                "AAF built for {} maps, stack is {:?}",
                self.num_maps,
                g.shape(stack)
            )));
        }
        let w = g.global_avg_pool(stack)?;
        let row = g.reshape(w, &[1, self.num_maps])?;
        let (a, b) = (g.param(store, self.fc1.0), g.param(store, self.fc1.1));
        let h = g.linear(row, a, b)?;
        let h = g.gelu(h);
        let (a, b) = (g.param(store, self.fc2.0), g.param(store, self.fc2.1));
        let h = g.linear(h, a, b)?;
        let wp = g.sigmoid(h);
        let wp = g.reshape(wp, &[self.num_maps])?;
        Ok((w, wp))
    }

    /// Pure evaluation: `(W, W′)` as `(K·H)×1` tensors.
    pub fn adaptive_fuse<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        stack: &AttentionStack<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let s = g.constant(stack.maps.clone());
        let (w, wp) = self.fuse_var(&mut g, store, s)?;
        let kh = self.num_maps;
        Ok((
            g.value(w).reshaped(&[kh, 1])?,
            g.value(wp).reshaped(&[kh, 1])?,
        ))
    }
}

/// im2col indices for a 3×3, stride-1, zero-padded convolution over an
/// `N×N×D` map stored as `N²×D`; row `p` holds the `(ky, kx, d)` window of pixel `p`.
pub fn conv3x3_index(grid: usize, dim: usize) -> Vec<usize> {
    let n = grid as isize;
    let mut idx = Vec::with_capacity(grid * grid * 9 * dim);
    for y in 0..n {
        for x in 0..n {
            for ky in -1..=1 {
                for kx in -1..=1 {
                    let (sy, sx) = (y + ky, x + kx);
                    let inside = sy >= 0 && sy < n && sx >= 0 && sx < n;
                    for d in 0..dim {
                        idx.push(if inside {
                            ((sy * n + sx) as usize) * dim + d
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Learned pieces of the CAM stage that sit on top of the encoder.
#[derive(Clone, Debug)]
pub struct CamHead {
    grid: usize,
    classes: usize,
    dim: usize,
    /// `(9·D)×C` kernel in `(ky, kx, d)` row order, and `C` bias.
    conv: (ParamId, ParamId),
    /// Shared `D→1` head applied to each class token.
    cls_head: (ParamId, ParamId),
    pub aaf: Aaf,
}

impl CamHead {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &EncoderConfig,
        aaf: &AafConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, c) = (cfg.embed_dim, cfg.num_classes);
        let conv = (
            store.add_trunc_normal("cam.conv.weight", &[9 * d, c], INIT_STD, rng),
            store.add_zeros("cam.conv.bias", &[c]),
        );
        let cls_head = (
            store.add_trunc_normal("cam.cls_head.weight", &[d, 1], INIT_STD, rng),
            store.add_zeros("cam.cls_head.bias", &[1]),
        );
        let aaf = Aaf::new(store, cfg.num_maps(), aaf, rng)?;
        Ok(Self {
            grid: cfg.grid(),
            classes: c,
            dim: d,
            conv,
            cls_head,
            aaf,
        })
    }

    pub fn conv_params(&self) -> (ParamId, ParamId) {
        self.conv
    }

    pub fn cls_head_params(&self) -> (ParamId, ParamId) {
        self.cls_head
    }

    /// `CAM_coarse = Conv(Arrange(T_final[C..]))`, shape `N×N×C`.
    pub fn coarse_cam_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t_final: Var,
    ) -> Result<Var> {
        let n2 = self.grid * self.grid;
        let patches = g.slice_rows(t_final, self.classes, n2)?;
        let cols = g.gather(
            patches,
            Arc::new(conv3x3_index(self.grid, self.dim)),
            &[n2, 9 * self.dim],
        )?;
        let (w, b) = (g.param(store, self.conv.0), g.param(store, self.conv.1));
        let cam = g.linear(cols, w, b)?;
        g.reshape(cam, &[self.grid, self.grid, self.classes])
    }

    /// One logit per class from the class-token rows.
    pub fn class_token_logits_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t_final: Var,
    ) -> Result<Var> {
        let cls = g.slice_rows(t_final, 0, self.classes)?;
        let (w, b) = (g.param(store, self.cls_head.0), g.param(store, self.cls_head.1));
        let y = g.linear(cls, w, b)?;
        g.reshape(y, &[self.classes])
    }

    pub fn coarse_cam<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        t_final: &TokenSequence<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let t = g.constant(t_final.tokens.clone());
        let cam = self.coarse_cam_var(&mut g, store, t)?;
        Ok(g.value(cam).clone())
    }

    /// `(y_cls, y_coarse, y_fine)` for one image.
    pub fn class_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        bundle: &CamBundle<T>,
        t_final: &TokenSequence<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let t = g.constant(t_final.tokens.clone());
        let y_cls = self.class_token_logits_var(&mut g, store, t)?;
        let coarse = g.constant(bundle.cam_coarse.clone());
        let fine = g.constant(bundle.cam_fine.clone());
        let y_coarse = pooled_logits_var(&mut g, coarse)?;
        let y_fine = pooled_logits_var(&mut g, fine)?;
        Ok((
            g.value(y_cls).clone(),
            g.value(y_coarse).clone(),
            g.value(y_fine).clone(),
        ))
    }
}

/// Spatial mean per class channel of an `N×N×C` map.
pub fn pooled_logits_var<T: Scalar>(g: &mut Graph<T>, cam: Var) -> Result<Var> {
    let s = g.shape(cam).to_vec();
    let [h, w, c] = s[..] else {
        return Err(WeakTrError::shape(format!("pooled logits: {s:?}")));
    };
    let flat = g.reshape(cam, &[h * w, c])?;
    let per_class = g.transpose(flat)?;
    g.global_avg_pool(per_class)
}

/// `CA_hat = (1/KH) Σ W′ᵢ CAᵢ`, `PA_hat = (1/KH) Σ W′ᵢ PAᵢ`.
pub fn weighted_attention_var<T: Scalar>(
    g: &mut Graph<T>,
    ca: Var,
    pa: Var,
    wprime: Var,
) -> Result<(Var, Var)> {
    let ca_shape = g.shape(ca).to_vec();
    let pa_shape = g.shape(pa).to_vec();
    let kh = g.value(wprime).len();
    if ca_shape.len() != 4 || pa_shape.len() != 3 || ca_shape[0] != kh || pa_shape[0] != kh {
        return Err(WeakTrError::shape(format!(
            "weighted attention: CA {ca_shape:?}, PA {pa_shape:?}, {kh} weights"
        )));
    }
    let inv = T::one() / T::from_usize_lossy(kh);
    let row = g.reshape(wprime, &[1, kh])?;
    let ca_flat = g.reshape(ca, &[kh, ca_shape[1..].iter().product()])?;
    let pa_flat = g.reshape(pa, &[kh, pa_shape[1..].iter().product()])?;
    let ca_sum = g.matmul(row, ca_flat)?;
    let pa_sum = g.matmul(row, pa_flat)?;
    let ca_hat = g.scale(ca_sum, inv);
    let pa_hat = g.scale(pa_sum, inv);
    Ok((
        g.reshape(ca_hat, &ca_shape[1..])?,
        g.reshape(pa_hat, &pa_shape[1..])?,
    ))
}

/// `CAM_fine = reshape(PA_hat · reshape(CAM_coarse ⊙ CA_hat))`.
pub fn fine_cam_var<T: Scalar>(
    g: &mut Graph<T>,
    cam_coarse: Var,
    ca_hat: Var,
    pa_hat: Var,
) -> Result<Var> {
    let s = g.shape(cam_coarse).to_vec();
    let [h, w, c] = s[..] else {
        return Err(WeakTrError::shape(format!("fine CAM: coarse CAM {s:?}")));
    };
    if g.shape(pa_hat) != [h * w, h * w] {
        return Err(WeakTrError::shape(format!(
            "fine CAM: PA_hat {:?} vs coarse {s:?}",
            g.shape(pa_hat)
        )));
    }
    let gated = g.mul(cam_coarse, ca_hat)?;
    let flat = g.reshape(gated, &[h * w, c])?;
    let prop = g.matmul(pa_hat, flat)?;
    g.reshape(prop, &[h, w, c])
}

pub fn weighted_attention<T: Scalar>(
    ca: &Tensor<T>,
    pa: &Tensor<T>,
    wprime: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let (ca, pa) = (g.constant(ca.clone()), g.constant(pa.clone()));
    let wp = g.constant(wprime.reshaped(&[wprime.len()])?);
    let (a, p) = weighted_attention_var(&mut g, ca, pa, wp)?;
    Ok((g.value(a).clone(), g.value(p).clone()))
}

pub fn fine_cam<T: Scalar>(
    cam_coarse: &Tensor<T>,
    ca_hat: &Tensor<T>,
    pa_hat: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let c = g.constant(cam_coarse.clone());
    let a = g.constant(ca_hat.clone());
    let p = g.constant(pa_hat.clone());
    let f = fine_cam_var(&mut g, c, a, p)?;
    Ok(g.value(f).clone())
}

/// `−(1/C) Σ [yᵢ log σ(ŷᵢ) + (1−yᵢ) log(1−σ(ŷᵢ))]`, log arguments clamped at 1e-12.
pub fn multilabel_soft_margin<T: Scalar>(y_hat: &[T], y: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::new(vec![y_hat.len()], y_hat.to_vec())?);
    let l = g.multilabel_soft_margin(logits, y)?;
    Ok(g.value(l).item())
}

/// Scores each logit vector against the same labels and sums.
pub fn total_loss<T: Scalar>(
    y_cls: &[T],
    y_coarse: &[T],
    y_fine: &[T],
    y: &[T],
) -> Result<LossBreakdown> {
    let l_cls_token = multilabel_soft_margin(y_cls, y)?.as_f64();
    let l_coarse_cam = multilabel_soft_margin(y_coarse, y)?.as_f64();
    let l_fine_cam = multilabel_soft_margin(y_fine, y)?.as_f64();
    Ok(LossBreakdown {
        l_cls_token,
        l_coarse_cam,
        l_fine_cam,
        total: l_cls_token + l_coarse_cam + l_fine_cam,
    })
}

/// Every graph node of a CAM-stage forward pass.
pub struct CamForward {
    pub t_final: Var,
    /// `(K·H)×S×S`.
    pub stack: Var,
    pub w: Var,
    pub wprime: Var,
    pub ca: Var,
    pub pa: Var,
    pub ca_hat: Var,
    pub pa_hat: Var,
    pub cam_coarse: Var,
    pub cam_fine: Var,
    pub y_cls: Var,
    pub y_coarse: Var,
    pub y_fine: Var,
}

/// Encoder plus CAM head: the full phase-one network.
#[derive(Clone, Debug)]
pub struct CamModel {
    pub cfg: EncoderConfig,
    pub fusion: Fusion,
    pub encoder: Encoder,
    pub head: CamHead,
}

impl CamModel {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &EncoderConfig,
        aaf: &AafConfig,
        fusion: Fusion,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if let Fusion::Fixed { weights } = &fusion {
            if weights.len() != cfg.num_maps() {
                return Err(WeakTrError::Config(format!(
                    "fixed fusion needs {} weights, got {}",
                    cfg.num_maps(),
                    weights.len()
                )));
            }
        }
        let encoder = Encoder::new(cfg, store, rng)?;
        let head = CamHead::new(cfg, aaf, store, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            fusion,
            encoder,
            head,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<CamForward> {
        let enc = self.encoder.forward_var(g, store, image)?;
        self.forward_from_encoder(g, store, enc.tokens, &enc.attention)
    }

    pub fn forward_from_encoder<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        t_final: Var,
        attention: &[Var],
    ) -> Result<CamForward> {
        let (kh, c, n) = (self.cfg.num_maps(), self.cfg.num_classes, self.cfg.grid());
        let n2 = n * n;
        let stack = g.stack(attention)?;
        let (w, wprime) = match &self.fusion {
            Fusion::Adaptive => self.head.aaf.fuse_var(g, store, stack)?,
            Fusion::MeanSum => {
                let w = g.global_avg_pool(stack)?;
                (w, g.constant(Tensor::ones(&[kh])))
            }
            Fusion::Fixed { weights } => {
                let w = g.global_avg_pool(stack)?;
                (w, g.constant(Tensor::from_f64(&[kh], weights)?))
            }
        };
        let ca = g.gather(stack, Arc::new(cross_attention_index(kh, c, n)), &[kh, n, n, c])?;
        let pa = g.gather(stack, Arc::new(patch_attention_index(kh, c, n)), &[kh, n2, n2])?;
        let (ca_hat, pa_hat) = weighted_attention_var(g, ca, pa, wprime)?;
        let cam_coarse = self.head.coarse_cam_var(g, store, t_final)?;
        let cam_fine = fine_cam_var(g, cam_coarse, ca_hat, pa_hat)?;
        let y_cls = self.head.class_token_logits_var(g, store, t_final)?;
        let y_coarse = pooled_logits_var(g, cam_coarse)?;
        let y_fine = pooled_logits_var(g, cam_fine)?;
        Ok(CamForward {
            t_final,
            stack,
            w,
            wprime,
            ca,
            pa,
            ca_hat,
            pa_hat,
            cam_coarse,
            cam_fine,
            y_cls,
            y_coarse,
            y_fine,
        })
    }

    /// Unweighted sum of the three soft margin losses.
    pub fn loss_var<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        fwd: &CamForward,
        label: &[T],
    ) -> Result<Var> {
        let a = g.multilabel_soft_margin(fwd.y_cls, label)?;
        let b = g.multilabel_soft_margin(fwd.y_coarse, label)?;
        let c = g.multilabel_soft_margin(fwd.y_fine, label)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    }

    pub fn bundle<T: Scalar>(&self, g: &Graph<T>, fwd: &CamForward) -> Result<CamBundle<T>> {
        let kh = self.cfg.num_maps();
        Ok(CamBundle {
            cam_coarse: g.value(fwd.cam_coarse).clone(),
            weights_w: g.value(fwd.w).reshaped(&[kh, 1])?,
            weights_wprime: g.value(fwd.wprime).reshaped(&[kh, 1])?,
            ca_hat: g.value(fwd.ca_hat).clone(),
            pa_hat: g.value(fwd.pa_hat).clone(),
            cam_fine: g.value(fwd.cam_fine).clone(),
        })
    }

    /// Forward pass without gradients.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<CamBundle<T>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, image)?;
        self.bundle(&g, &fwd)
    }

    /// Bundle plus the three logit vectors.
    pub fn infer_with_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<(CamBundle<T>, [Tensor<T>; 3])> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, image)?;
        let logits = [
            g.value(fwd.y_cls).clone(),
            g.value(fwd.y_coarse).clone(),
            g.value(fwd.y_fine).clone(),
        ];
        Ok((self.bundle(&g, &fwd)?, logits))
    }
}
