//! Property definitions shared by the proptest suite and the acceptance runner.
//! Each property is a strategy plus a check returning `TestCaseError` on failure.

use proptest::collection::vec;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weaktr::cam::{Aaf, AafConfig};
use weaktr::data::LabelMap;
use weaktr::decoder::{clip_report, to_tiles, DecoderConfig};
use weaktr::graph::Graph;
use weaktr::metrics::evaluate;
use weaktr::vit::AttentionStack;
use weaktr::{ParamStore, Tensor};

pub type Check = std::result::Result<(), TestCaseError>;

pub type SoftmaxCase = (usize, usize, Vec<f32>);

pub fn softmax_case() -> impl Strategy<Value = SoftmaxCase> {
    (1usize..8, 1usize..16).prop_flat_map(|(r, c)| (Just(r), Just(c), vec(-20.0f32..20.0, r * c)))
}

pub fn softmax_rows_sum_to_one((rows, cols, data): SoftmaxCase) -> Check {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
    let y = g.softmax(x);
    for row in g.value(y).data().chunks(cols) {
        let s: f32 = row.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
    }
    Ok(())
}

pub type AafCase = (usize, usize, Vec<f32>, Vec<f32>);

pub fn aaf_case() -> impl Strategy<Value = AafCase> {
    (1usize..=8, 2usize..=6).prop_flat_map(|(kh, s)| {
        let n_params = kh * 18 + 18 + 18 * kh + kh;
        (Just(kh), Just(s), vec(0.0f32..1.0, kh * s * s), vec(-0.3f32..0.3, n_params))
    })
}

pub fn head_weights_in_open_unit_interval((kh, s, maps, params): AafCase) -> Check {
    let mut store = ParamStore::<f32>::new();
    let aaf = Aaf::new(&mut store, kh, &AafConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rest = &params[..];
    for p in store.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&rest[..n]);
        rest = &rest[n..];
    }
    let stack = AttentionStack {
        maps: Tensor::new(vec![kh, s, s], maps).unwrap(),
    };
    let (_, wp) = aaf.adaptive_fuse(&store, &stack).unwrap();
    for &w in wp.data() {
        prop_assert!(w > 0.0 && w < 1.0, "W' = {}", w);
    }
    Ok(())
}

/// `(L, S, values, ignore flags)` for an `(L·S)²` CE map.
pub type ClipCase = (usize, usize, Vec<f32>, Vec<bool>);

pub fn clip_case() -> impl Strategy<Value = ClipCase> {
    (1usize..=4, 1usize..=5).prop_flat_map(|(l, s)| {
        let n = (l * s) * (l * s);
        let value = prop_oneof![0.0f32..10.0, (0u8..4).prop_map(|v| v as f32 * 0.1)];
        (Just(l), Just(s), vec(value, n), vec(prop::bool::weighted(0.2), n))
    })
}

fn clip_setup((l, s, values, ignore): ClipCase) -> (usize, usize, LabelMap, weaktr::decoder::ClipReport<f32>) {
    let o = l * s;
    let cfg = DecoderConfig {
        output_size: o,
        grad_patch_size: s,
        start_value: 1e30,
        ..DecoderConfig::default()
    };
    let labels: Vec<u8> = ignore.iter().map(|&i| if i { 255 } else { 1 }).collect();
    let seeds = LabelMap::new(o, labels).unwrap();
    let values: Vec<f32> = values
        .iter()
        .zip(&ignore)
        .map(|(&v, &i)| if i { 0.0 } else { v })
        .collect();
    let ce = Tensor::new(vec![o, o], values).unwrap();
    let r = clip_report(&ce, &seeds, &cfg, None).unwrap();
    (l, s, seeds, r)
}

pub fn mask_is_binary(case: ClipCase) -> Check {
    let (_, _, _, r) = clip_setup(case);
    prop_assert!(r.masks.data().iter().all(|&m| m == 0.0 || m == 1.0));
    Ok(())
}

pub fn global_lambda_is_mean_of_tiles(case: ClipCase) -> Check {
    let (_, _, _, r) = clip_setup(case);
    let inc: Vec<f64> = r
        .lambda_i
        .iter()
        .zip(&r.included)
        .filter(|(_, &i)| i)
        .map(|(&v, _)| v as f64)
        .collect();
    let want = if inc.is_empty() {
        0.0
    } else {
        inc.iter().sum::<f64>() / inc.len() as f64
    };
    prop_assert!((r.lambda_global as f64 - want).abs() <= 1e-6 * want.max(1.0));
    Ok(())
}

/// Every tile with a labeled pixel keeps at least one, and clipping never
/// raises a tile's mean.
pub fn every_tile_retains_a_pixel(case: ClipCase) -> Check {
    let (l, s, seeds, r) = clip_setup(case);
    let o = l * s;
    let per = s * s;
    let tiles = |flags: &[bool]| {
        let m = Tensor::new(vec![o, o], flags.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        to_tiles(&m, s).unwrap()
    };
    let kept = tiles(&r.retained(&seeds).unwrap());
    let valid = tiles(&seeds.valid());
    for i in 0..l * l {
        let k = &kept.data()[i * per..(i + 1) * per];
        let v = &valid.data()[i * per..(i + 1) * per];
        let g = &r.grad_patches.data()[i * per..(i + 1) * per];
        let nv = v.iter().filter(|&&x| x > 0.0).count();
        let nk = k.iter().filter(|&&x| x > 0.0).count();
        prop_assert_eq!(nv > 0, r.included[i]);
        if nv > 0 {
            prop_assert!(nk >= 1, "tile {} keeps nothing", i);
            let mean = |sel: &[f32]| {
                let (s, n) = g
                    .iter()
                    .zip(sel)
                    .filter(|(_, &m)| m > 0.0)
                    .fold((0.0f64, 0), |(s, n), (&x, _)| (s + x as f64, n + 1));
                s / n as f64
            };
            prop_assert!(mean(k) <= mean(v) + 1e-9);
        }
    }
    Ok(())
}

pub type LossCase = (usize, Vec<f32>, Vec<bool>, Vec<(Vec<f32>, u8)>, Vec<bool>);

pub fn loss_case() -> impl Strategy<Value = LossCase> {
    (1usize..=6).prop_flat_map(|c| {
        (
            Just(c),
            vec(-60.0f32..60.0, c),
            vec(any::<bool>(), c),
            vec((vec(-30.0f32..30.0, c + 1), 0u8..=(c as u8)), 1..20),
            vec(any::<bool>(), 20),
        )
    })
}

pub fn losses_are_nonnegative((c, logits, targets, pixels, mask): LossCase) -> Check {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![c], logits).unwrap());
    let y: Vec<f32> = targets.iter().map(|&t| t as u8 as f32).collect();
    let sm = g.multilabel_soft_margin(x, &y).unwrap();
    prop_assert!(g.value(sm).item() >= 0.0);

    let p = pixels.len();
    let flat: Vec<f32> = pixels.iter().flat_map(|(row, _)| row.clone()).collect();
    let labels: Vec<u8> = pixels.iter().map(|(_, l)| *l).collect();
    let z = g.constant(Tensor::new(vec![p, c + 1], flat).unwrap());
    let ce = g.softmax_cross_entropy(z, &labels).unwrap();
    prop_assert!(g.value(ce).data().iter().all(|&v| v >= 0.0));
    let m: Vec<f32> = mask[..p].iter().map(|&b| b as u8 as f32).collect();
    let loss = g.masked_mean(ce, &m).unwrap();
    prop_assert!(g.value(loss).item() >= 0.0);
    Ok(())
}

pub type EvalCase = (Vec<(Vec<u8>, Vec<u8>)>, u64);

pub fn eval_case() -> impl Strategy<Value = EvalCase> {
    (vec((vec(0u8..3, 16), vec(0u8..3, 16)), 1..6), any::<u64>())
}

pub fn evaluation_ignores_sample_order((maps, perm_seed): EvalCase) -> Check {
    let preds: Vec<LabelMap> = maps.iter().map(|(p, _)| LabelMap::new(4, p.clone()).unwrap()).collect();
    let gts: Vec<LabelMap> = maps.iter().map(|(_, g)| LabelMap::new(4, g.clone()).unwrap()).collect();
    let base = evaluate(&preds, &gts, 3).unwrap();
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
    let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
    let g2: Vec<_> = order.iter().map(|&i| gts[i].clone()).collect();
    prop_assert_eq!(evaluate(&p2, &g2, 3).unwrap(), base);
    Ok(())
}
