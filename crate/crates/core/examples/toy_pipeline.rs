//! End-to-end toy run: data, CAM training, seeds, and both retraining modes.
//!
//! `cargo run --release -p weaktr --example toy_pipeline -- [seed]`

use std::time::Instant;

use weaktr::cam::Fusion;
use weaktr::data::{generate_split, DataConfig, LabelMap};
use weaktr::harness::{retrain, seeds_for, train_cam, CamConfig, CamKind, ClipMode, RetrainConfig, SeedConfig};
use weaktr::metrics::{evaluate, multilabel_accuracy};

fn main() -> weaktr::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let data = DataConfig::default();
    let train = generate_split("train", 200, seed, &data)?;
    let val = generate_split("val", 100, seed, &data)?;
    let gts: Vec<LabelMap> = train.iter().map(|s| s.gt_mask.clone()).collect();
    let c_seg = data.num_classes + 1;

    for fusion in [Fusion::Adaptive, Fusion::MeanSum] {
        let mut cfg = CamConfig::default();
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.fusion = fusion.clone();
        let t = Instant::now();
        let run = train_cam(&cfg, &train)?;
        let logits: Vec<Vec<f64>> = train
            .iter()
            .map(|s| {
                let (_, l) = run.model.infer_with_logits(&run.store, &s.image).unwrap();
                l[0].data().iter().map(|&v| v as f64).collect()
            })
            .collect();
        let labels: Vec<Vec<f32>> = train.iter().map(|s| s.label.clone()).collect();
        let fine = seeds_for(&run.model, &run.store, &train, &SeedConfig::default(), CamKind::Fine)?;
        let coarse = seeds_for(&run.model, &run.store, &train, &SeedConfig::default(), CamKind::Coarse)?;
        println!(
            "{fusion:?}: {:.1}s first {:.4} last {:.4} acc {:.3} fine mIoU {:.4} coarse mIoU {:.4}",
            t.elapsed().as_secs_f64(),
            run.curve[0].loss,
            run.curve.last().unwrap().loss,
            multilabel_accuracy(&logits, &labels),
            evaluate(&fine, &gts, c_seg)?.miou,
            evaluate(&coarse, &gts, c_seg)?.miou,
        );
        if fusion != Fusion::Adaptive {
            continue;
        }
        for mode in [ClipMode::Naive, ClipMode::Clip, ClipMode::GtClip] {
            let mut rc = RetrainConfig::default();
            rc.mode = mode;
            rc.train.seed = seed;
            let t = Instant::now();
            let r = retrain(&cfg.model, Some(&run.store), &rc, &train, &fine)?;
            let report = r.model.evaluate(&r.store, &val)?;
            let gated = r.steps.iter().filter(|s| s.gated).count();
            println!(
                "  {mode:?}: {:.1}s loss {:.4}->{:.4} val mIoU {:.4} gated {gated}/{}",
                t.elapsed().as_secs_f64(),
                r.curve[0].loss,
                r.curve.last().unwrap().loss,
                report.miou,
                r.steps.len()
            );
        }
    }
    Ok(())
}
