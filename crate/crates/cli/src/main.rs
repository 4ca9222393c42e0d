//! `weaktr` command-line tool: synthetic data, both training phases, CAM
//! export, evaluation and attention/clipping inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use weaktr::cam::CamModel;
use weaktr::data::{generate_split, load_dataset, save_dataset, sample_file, DataConfig, DatasetMeta, LabelMap, Sample};
use weaktr::decoder::{clip_report, from_tiles, per_pixel_ce};
use weaktr::harness::{
    cam_to_seeds, retrain, train_cam_from, CamConfig, ClipMode, EpochLog, RetrainConfig, SeedConfig, SegModel,
    StepLog,
};
use weaktr::io::{load_checkpoint, read_tensor, save_checkpoint, to_gray8, write_pgm, write_tensor};
use weaktr::metrics::evaluate;
use weaktr::vit::EncoderConfig;
use weaktr::{ParamStore, Tensor};

const CAM_KIND: &str = "cam";
const SEG_KIND: &str = "seg";

#[derive(Parser)]
#[command(name = "weaktr", version, about = "Weakly-supervised segmentation with a plain ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic split (images, masks, labels.csv, config.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Split name; it also salts the per-sample seeds.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Classification phase on image-level labels.
    TrainCam {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write CAMs (WTT1), heatmaps (PGM) and seed maps for a dataset.
    ExportCam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Background threshold for seeds.
        #[arg(long, default_value_t = 0.40)]
        beta: f64,
        /// Build seeds from the coarse CAM instead of the fine one.
        #[arg(long)]
        coarse: bool,
    },
    /// Online retraining of the segmentation decoder on seed maps.
    Retrain {
        #[arg(long)]
        data: PathBuf,
        /// Directory of seed maps, as written to `<export>/seeds`.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CAM checkpoint whose encoder initializes the segmentation model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, conflicts_with = "gt_clip")]
        no_clip: bool,
        #[arg(long)]
        gt_clip: bool,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        patch: Option<usize>,
    },
    /// mIoU, precision and recall of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dump attention maps, fusion weights and CAMs for one image.
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        /// `O×O×3` WTT1 image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump clipping masks (PGM) and λ values (CSV) of a segmentation checkpoint.
    InspectClip {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        patch: Option<usize>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            count,
            seed,
            classes,
            size,
            split,
        } => gen_data(&out, count, seed, classes, size, &split),
        Command::TrainCam { data, config, out } => train_cam_cmd(&data, config.as_deref(), &out),
        Command::ExportCam {
            ckpt,
            data,
            out,
            beta,
            coarse,
        } => export_cam(&ckpt, &data, &out, beta, coarse),
        Command::Retrain {
            data,
            seeds,
            config,
            out,
            init,
            no_clip,
            gt_clip,
            tau,
            patch,
        } => {
            let mut cfg: RetrainConfig = read_config(config.as_deref())?;
            if no_clip {
                cfg.mode = ClipMode::Naive;
            }
            if gt_clip {
                cfg.mode = ClipMode::GtClip;
            }
            if let Some(t) = tau {
                cfg.decoder.start_value = t;
            }
            if let Some(s) = patch {
                cfg.decoder.grad_patch_size = s;
            }
            if let Some(i) = init {
                cfg.train.init_checkpoint = Some(i);
            }
            retrain_cmd(&data, &seeds, cfg, &out)
        }
        Command::Eval { ckpt, data, report } => eval_cmd(&ckpt, &data, report.as_deref()),
        Command::InspectAttention { ckpt, image, out } => inspect_attention(&ckpt, &image, &out),
        Command::InspectClip {
            ckpt,
            data,
            seeds,
            out,
            tau,
            patch,
        } => inspect_clip(&ckpt, &data, &seeds, &out, tau, patch),
    }
}

fn read_config<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_data(dir: &Path) -> Result<(DatasetMeta, Vec<Sample>)> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_curve(path: &Path, curve: &[EpochLog]) -> Result<()> {
    let mut csv = String::from("epoch,lr,loss\n");
    for e in curve {
        writeln!(csv, "{},{},{}", e.epoch, e.lr, e.loss)?;
    }
    fs::write(path, csv)?;
    Ok(())
}

fn write_steps(path: &Path, steps: &[StepLog]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = String::from(
        "step,lr,loss,lambda_global,gated,gated_fraction,retained_fraction,agreement_retained,agreement_all\n",
    );
    for s in steps {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            s.step,
            s.lr,
            s.loss,
            s.lambda_global,
            u8::from(s.gated),
            s.gated_fraction,
            s.retained_fraction,
            opt(s.agreement_retained),
            opt(s.agreement_all)
        )?;
    }
    fs::write(path, csv)?;
    Ok(())
}

fn gen_data(out: &Path, count: usize, seed: u64, classes: usize, size: usize, split: &str) -> Result<()> {
    let data = DataConfig {
        image_size: size,
        num_classes: classes,
        seed,
        ..DataConfig::default()
    };
    data.validate()?;
    let samples = generate_split(split, count, seed, &data)?;
    let meta = DatasetMeta {
        split: split.to_string(),
        count,
        base_seed: seed,
        data,
    };
    save_dataset(out, &meta, &samples)?;
    println!("wrote {count} {split} samples to {}", out.display());
    Ok(())
}

/// Model geometry follows the dataset unless the config sets it explicitly.
fn train_cam_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let (meta, samples) = load_data(data)?;
    let mut cfg: CamConfig = read_config(config)?;
    if config.is_none() {
        cfg.model.image_size = meta.data.image_size;
        cfg.model.num_classes = meta.data.num_classes;
    }
    if cfg.model.image_size != meta.data.image_size || cfg.model.num_classes != meta.data.num_classes {
        bail!(
            "model expects {}px images with {} classes, dataset has {}px with {}",
            cfg.model.image_size,
            cfg.model.num_classes,
            meta.data.image_size,
            meta.data.num_classes
        );
    }
    let mut store = ParamStore::new();
    let mut rng = rand_seeded(cfg.model.seed);
    let model = CamModel::new(&cfg.model, &cfg.aaf, cfg.fusion.clone(), &mut store, &mut rng)?;
    if let Some(init) = &cfg.train.init_checkpoint {
        let (_, src) = load_checkpoint::<f32>(init)?;
        store.load_matching(&src)?;
    }
    let curve = train_cam_from(&model, &mut store, &cfg.train, &samples)?;
    save_checkpoint(out, CAM_KIND, &cfg, &store)?;
    write_curve(&out.join("curve.csv"), &curve)?;
    let last = curve.last().map_or(f64::NAN, |e| e.loss);
    println!("trained {} epochs, final loss {last:.4}; checkpoint at {}", curve.len(), out.display());
    Ok(())
}

fn rand_seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn load_cam(ckpt: &Path) -> Result<(CamConfig, CamModel, ParamStore<f32>)> {
    let (manifest, loaded) = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if manifest.kind != CAM_KIND {
        bail!("{} is a '{}' checkpoint, expected '{CAM_KIND}'", ckpt.display(), manifest.kind);
    }
    let cfg: CamConfig = serde_json::from_value(manifest.config)?;
    let mut store = ParamStore::new();
    let model = CamModel::new(&cfg.model, &cfg.aaf, cfg.fusion.clone(), &mut store, &mut rand_seeded(cfg.model.seed))?;
    store.load_matching(&loaded)?;
    Ok((cfg, model, store))
}

fn load_seg(ckpt: &Path) -> Result<(SegModel, ParamStore<f32>)> {
    let (manifest, loaded) = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if manifest.kind != SEG_KIND {
        bail!("{} is a '{}' checkpoint, expected '{SEG_KIND}'", ckpt.display(), manifest.kind);
    }
    let enc: EncoderConfig = serde_json::from_value(manifest.config["encoder"].clone())?;
    let rc: RetrainConfig = serde_json::from_value(manifest.config["retrain"].clone())?;
    let mut store = ParamStore::new();
    let model = SegModel::new(&enc, &rc.decoder, &mut store, enc.seed)?;
    store.load_matching(&loaded)?;
    Ok((model, store))
}

/// Each `N×N×C` channel as its own upsampled heatmap.
fn write_channel_heatmaps(dir: &Path, stem: &str, cam: &Tensor<f32>, o: usize) -> Result<()> {
    let up = weaktr::tensor::upsample_bilinear(cam, o, o)?;
    let c = cam.shape()[2];
    for k in 0..c {
        let channel: Vec<f32> = up.data().iter().skip(k).step_by(c).copied().collect();
        write_pgm(dir.join(format!("{stem}_c{k}.pgm")), o, o, &to_gray8(&channel))?;
    }
    Ok(())
}

fn label_pgm(map: &LabelMap, classes: usize) -> Vec<u8> {
    let step = 255 / classes.max(1);
    map.labels
        .iter()
        .map(|&l| if l == weaktr::IGNORE_LABEL { 255 } else { (l as usize * step).min(254) as u8 })
        .collect()
}

fn export_cam(ckpt: &Path, data: &Path, out: &Path, beta: f64, coarse: bool) -> Result<()> {
    let (cfg, model, store) = load_cam(ckpt)?;
    let (_, samples) = load_data(data)?;
    let seed_cfg = SeedConfig {
        background_threshold: beta,
        ..SeedConfig::default()
    };
    for sub in ["cams", "heatmaps", "seeds"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.gt_mask.clone()).collect();
    let mut seeds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let b = model.infer(&store, &s.image)?;
        let stem = format!("{i:04}");
        write_tensor(out.join("cams").join(format!("{stem}_fine.wtt")), &b.cam_fine)?;
        write_tensor(out.join("cams").join(format!("{stem}_coarse.wtt")), &b.cam_coarse)?;
        let o = s.gt_mask.size;
        write_channel_heatmaps(&out.join("heatmaps"), &format!("{stem}_fine"), &b.cam_fine, o)?;
        let cam = if coarse { &b.cam_coarse } else { &b.cam_fine };
        let seed = cam_to_seeds(cam, &s.label, &seed_cfg, o)?;
        write_tensor(out.join("seeds").join(sample_file(i)), &seed.to_tensor())?;
        write_pgm(out.join("heatmaps").join(format!("{stem}_seed.pgm")), o, o, &label_pgm(&seed, cfg.model.num_classes))?;
        seeds.push(seed);
    }
    let report = evaluate(&seeds, &gts, cfg.model.num_classes + 1)?;
    fs::write(out.join("seed_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "exported {} samples to {}; seed mIoU {:.4}",
        samples.len(),
        out.display(),
        report.miou
    );
    Ok(())
}

fn load_seeds(dir: &Path, count: usize) -> Result<Vec<LabelMap>> {
    (0..count)
        .map(|i| {
            let path = dir.join(sample_file(i));
            let t = read_tensor(&path).with_context(|| format!("reading seed map {}", path.display()))?;
            Ok(LabelMap::from_tensor(&t)?)
        })
        .collect()
}

fn retrain_cmd(data: &Path, seeds_dir: &Path, cfg: RetrainConfig, out: &Path) -> Result<()> {
    let (meta, samples) = load_data(data)?;
    let seeds = load_seeds(seeds_dir, samples.len())?;
    let (enc, init) = match &cfg.train.init_checkpoint {
        Some(p) => {
            let (cam_cfg, _, store) = load_cam(p)?;
            (cam_cfg.model, Some(store))
        }
        None => (
            EncoderConfig {
                image_size: meta.data.image_size,
                num_classes: meta.data.num_classes,
                ..EncoderConfig::default()
            },
            None,
        ),
    };
    let run = retrain(&enc, init.as_ref(), &cfg, &samples, &seeds)?;
    save_checkpoint(out, SEG_KIND, &json!({"encoder": enc, "retrain": cfg}), &run.store)?;
    write_curve(&out.join("curve.csv"), &run.curve)?;
    write_steps(&out.join("steps.csv"), &run.steps)?;
    let gated = run.steps.iter().filter(|s| s.gated).count();
    println!(
        "retrained {} steps ({gated} gated, mode {:?}); checkpoint at {}",
        run.steps.len(),
        cfg.mode,
        out.display()
    );
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, report_path: Option<&Path>) -> Result<()> {
    let (_, samples) = load_data(data)?;
    let kind = weaktr::io::load_manifest(ckpt)?.kind;
    let report = if kind == CAM_KIND {
        let (cfg, model, store) = load_cam(ckpt)?;
        let seeds = weaktr::harness::seeds_for(
            &model,
            &store,
            &samples,
            &SeedConfig::default(),
            weaktr::harness::CamKind::Fine,
        )?;
        let gts: Vec<LabelMap> = samples.iter().map(|s| s.gt_mask.clone()).collect();
        evaluate(&seeds, &gts, cfg.model.num_classes + 1)?
    } else {
        let (model, store) = load_seg(ckpt)?;
        model.evaluate(&store, &samples)?
    };
    let text = serde_json::to_string_pretty(&report)?;
    match report_path {
        Some(p) => fs::write(p, &text)?,
        None => println!("{text}"),
    }
    println!(
        "mIoU {:.4} precision {:.4} recall {:.4}",
        report.miou, report.precision, report.recall
    );
    Ok(())
}

fn inspect_attention(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (cfg, model, store) = load_cam(ckpt)?;
    let image: Tensor<f32> = read_tensor(image)?;
    let o = cfg.model.image_size;
    if image.shape() != [o, o, 3] {
        bail!("image shape {:?}, model expects [{o}, {o}, 3]", image.shape());
    }
    fs::create_dir_all(out)?;
    let mut g = weaktr::Graph::new();
    let fwd = model.forward(&mut g, &store, &image)?;
    let stack = g.value(fwd.stack).clone();
    let s = cfg.model.seq_len();
    for (h, map) in stack.data().chunks(s * s).enumerate() {
        write_pgm(out.join(format!("attn_{h:02}.pgm")), s, s, &to_gray8(map))?;
    }
    let b = model.bundle(&g, &fwd)?;
    let mut csv = String::from("map,layer,head,w,w_prime\n");
    for (i, (w, wp)) in b.weights_w.data().iter().zip(b.weights_wprime.data()).enumerate() {
        writeln!(csv, "{i},{},{},{w},{wp}", i / cfg.model.heads, i % cfg.model.heads)?;
    }
    fs::write(out.join("weights.csv"), csv)?;
    let n2 = cfg.model.num_patches();
    write_pgm(out.join("pa_hat.pgm"), n2, n2, &to_gray8(b.pa_hat.data()))?;
    write_channel_heatmaps(out, "ca_hat", &b.ca_hat, o)?;
    write_channel_heatmaps(out, "cam_coarse", &b.cam_coarse, o)?;
    write_channel_heatmaps(out, "cam_fine", &b.cam_fine, o)?;
    write_tensor(out.join("attention.wtt"), &stack)?;
    println!("wrote {} attention maps and CAMs to {}", stack.shape()[0], out.display());
    Ok(())
}

fn inspect_clip(
    ckpt: &Path,
    data: &Path,
    seeds_dir: &Path,
    out: &Path,
    tau: Option<f64>,
    patch: Option<usize>,
) -> Result<()> {
    let (model, store) = load_seg(ckpt)?;
    let (_, samples) = load_data(data)?;
    let seeds = load_seeds(seeds_dir, samples.len())?;
    let mut dec = model.dec_cfg.clone();
    if let Some(t) = tau {
        dec.start_value = t;
    }
    if let Some(s) = patch {
        dec.grad_patch_size = s;
    }
    dec.validate()?;
    fs::create_dir_all(out)?;
    let l = dec.tiles_per_side();
    let mut csv = String::from("index,gated,lambda_global");
    for t in 0..l * l {
        write!(csv, ",lambda_{t}")?;
    }
    csv.push('\n');
    for (i, (s, seed)) in samples.iter().zip(&seeds).enumerate() {
        let pred = model.predict(&store, &s.image)?;
        let ce = per_pixel_ce(&pred, seed)?;
        let r = clip_report(&ce, seed, &dec, None)?;
        let mask = from_tiles(&r.masks)?;
        let o = dec.output_size;
        let kept: Vec<u8> = mask.data().iter().map(|&m| if m > 0.0 { 255 } else { 0 }).collect();
        write_pgm(out.join(format!("{i:04}_mask.pgm")), o, o, &kept)?;
        write_pgm(out.join(format!("{i:04}_ce.pgm")), o, o, &to_gray8(ce.data()))?;
        write!(csv, "{i},{},{}", u8::from(r.gated), r.lambda_global)?;
        for v in &r.lambda_i {
            write!(csv, ",{v}")?;
        }
        csv.push('\n');
    }
    fs::write(out.join("lambda.csv"), csv)?;
    println!("wrote clipping masks for {} samples to {}", samples.len(), out.display());
    Ok(())
}
