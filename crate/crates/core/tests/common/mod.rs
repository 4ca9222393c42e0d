//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance runner. Each one is written from the defining formula with plain
//! loops over explicit indices, without calling into the library.

#![allow(dead_code)]

pub mod props;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Clipping decision for one `O×O` map with `S×S` tiles.
pub struct ClipOracle {
    /// `O×O`, 1 where the pixel is kept.
    pub mask: Vec<f32>,
    pub lambda_i: Vec<f32>,
    pub lambda_global: f32,
}

/// Tile means over valid pixels, their mean over tiles with at least one valid
/// pixel, and `mask(y, x) = [G(y, x) <= max(λ_tile, λ_global)]`. Tiles without
/// valid pixels keep everything.
pub fn clip_oracle(map: &[f32], valid: &[bool], o: usize, s: usize) -> ClipOracle {
    let l = o / s;
    let mut lambda_i = vec![0f32; l * l];
    let mut has_valid = vec![false; l * l];
    for ty in 0..l {
        for tx in 0..l {
            let mut sum = 0f64;
            let mut n = 0usize;
            for y in ty * s..(ty + 1) * s {
                for x in tx * s..(tx + 1) * s {
                    if valid[y * o + x] {
                        sum += map[y * o + x] as f64;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                lambda_i[ty * l + tx] = (sum / n as f64) as f32;
                has_valid[ty * l + tx] = true;
            }
        }
    }
    let mut sum = 0f64;
    let mut n = 0usize;
    for t in 0..l * l {
        if has_valid[t] {
            sum += lambda_i[t] as f64;
            n += 1;
        }
    }
    let lambda_global = if n == 0 { 0.0 } else { (sum / n as f64) as f32 };
    let mut mask = vec![1f32; o * o];
    for y in 0..o {
        for x in 0..o {
            let t = (y / s) * l + x / s;
            if !has_valid[t] {
                continue;
            }
            let thr = if lambda_i[t] > lambda_global { lambda_i[t] } else { lambda_global };
            if map[y * o + x] > thr {
                mask[y * o + x] = 0.0;
            }
        }
    }
    ClipOracle {
        mask,
        lambda_i,
        lambda_global,
    }
}

/// `fine[p][c] = Σ_q pa[p][q] · coarse[q][c] · ca[q][c]` over `N²` positions.
pub fn fine_cam_oracle(coarse: &[f64], ca: &[f64], pa: &[f64], n2: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n2 * c];
    for p in 0..n2 {
        for k in 0..c {
            let mut acc = 0.0;
            for q in 0..n2 {
                acc += pa[p * n2 + q] * coarse[q * c + k] * ca[q * c + k];
            }
            out[p * c + k] = acc;
        }
    }
    out
}

/// Class→patch block of map `h` in a `(K·H)×S×S` stack, laid out `N²×C`.
pub fn cross_block(stack: &[f64], h: usize, c: usize, n2: usize) -> Vec<f64> {
    let s = c + n2;
    let mut out = vec![0.0; n2 * c];
    for cls in 0..c {
        for p in 0..n2 {
            out[p * c + cls] = stack[h * s * s + cls * s + (c + p)];
        }
    }
    out
}

/// Patch→patch block of map `h`, `N²×N²`.
pub fn patch_block(stack: &[f64], h: usize, c: usize, n2: usize) -> Vec<f64> {
    let s = c + n2;
    let mut out = vec![0.0; n2 * n2];
    for i in 0..n2 {
        for j in 0..n2 {
            out[i * n2 + j] = stack[h * s * s + (c + i) * s + (c + j)];
        }
    }
    out
}

/// Fine CAM with every head weighted equally: head-averaged cross and patch
/// attention, then propagation of the gated coarse CAM.
pub fn mean_sum_fine_cam(stack: &[f64], kh: usize, c: usize, n2: usize, coarse: &[f64]) -> Vec<f64> {
    let mut ca = vec![0.0; n2 * c];
    let mut pa = vec![0.0; n2 * n2];
    for h in 0..kh {
        for (a, b) in ca.iter_mut().zip(cross_block(stack, h, c, n2)) {
            *a += b / kh as f64;
        }
        for (a, b) in pa.iter_mut().zip(patch_block(stack, h, c, n2)) {
            *a += b / kh as f64;
        }
    }
    fine_cam_oracle(coarse, &ca, &pa, n2, c)
}

/// Direct 3×3 zero-padded convolution over an `N×N×D` map with a
/// `(ky, kx, d)`-major `(9·D)×C` kernel.
pub fn conv3x3_oracle(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n * c];
    for y in 0..n {
        for xx in 0..n {
            for k in 0..c {
                let mut acc = b[k];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= n as isize || sx >= n as isize {
                            continue;
                        }
                        for dd in 0..d {
                            let xi = ((sy as usize) * n + sx as usize) * d + dd;
                            let wi = ((ky * 3 + kx) * d + dd) * c + k;
                            acc += x[xi] * w[wi];
                        }
                    }
                }
                out[(y * n + xx) * c + k] = acc;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu_tanh(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

/// `σ(W2ᵀ GELU(W1ᵀ w + b1) + b2)` with `w` the spatial means of each map.
pub fn aaf_oracle(
    stack: &[f64],
    kh: usize,
    s: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hidden = b1.len();
    let pooled: Vec<f64> = (0..kh)
        .map(|h| stack[h * s * s..(h + 1) * s * s].iter().sum::<f64>() / (s * s) as f64)
        .collect();
    let mut z = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = b1[j];
        for i in 0..kh {
            acc += pooled[i] * w1[i * hidden + j];
        }
        z[j] = gelu_tanh(acc);
    }
    let mut out = vec![0.0; kh];
    for i in 0..kh {
        let mut acc = b2[i];
        for j in 0..hidden {
            acc += z[j] * w2[j * kh + i];
        }
        out[i] = sigmoid(acc);
    }
    (pooled, out)
}

/// `−(1/C) Σ [y log σ(x) + (1−y) log(1−σ(x))]`.
pub fn soft_margin_oracle(x: &[f64], y: &[f64]) -> f64 {
    let total: f64 = x
        .iter()
        .zip(y)
        .map(|(&x, &y)| y * sigmoid(x).ln() + (1.0 - y) * (1.0 - sigmoid(x)).ln())
        .sum();
    -total / x.len() as f64
}

/// Align-corners bilinear resize of an `H×W×C` map.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| {
        if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        let fy = coord(y, h, oh);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = coord(x, w, ow);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for k in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + k];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(y * ow + x) * c + k] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Segmentation head without decoder blocks: cosine scores scaled by `1/√D`,
/// per-pixel layer norm over classes (γ = 1, β = 0), then bilinear upsampling.
pub fn seg_head_oracle(q: &[f64], t: &[f64], classes: usize, n: usize, d: usize, o: usize) -> Vec<f64> {
    let unit = |v: &[f64]| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let qn: Vec<Vec<f64>> = (0..classes).map(|k| unit(&q[k * d..(k + 1) * d])).collect();
    let mut low = vec![0.0; n * n * classes];
    for p in 0..n * n {
        let tn = unit(&t[p * d..(p + 1) * d]);
        let row: Vec<f64> = qn
            .iter()
            .map(|qk| qk.iter().zip(&tn).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mean = row.iter().sum::<f64>() / classes as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / classes as f64;
        for k in 0..classes {
            low[p * classes + k] = (row[k] - mean) / (var + 1e-6).sqrt();
        }
    }
    bilinear_oracle(&low, n, n, classes, o, o)
}
