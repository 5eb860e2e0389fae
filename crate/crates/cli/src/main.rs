//! `tvgseg`: episodic segmentation runs, test-time adaptation, pseudo-label
//! generation and evaluation over synthetic or on-disk datasets.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use tvgseg_core::adapt::{run_task, ParamCache, Pipeline};
use tvgseg_core::episode::{load_episode, load_image, save_mask};
use tvgseg_core::error::Error as CoreError;
use tvgseg_core::harness::{
    ablate, dataset_episodes, default_synthetic_classes, dump_mask_set, evaluate_pipeline,
    sweep_threshold, synthetic_episodes, write_report, write_sweep_csv, write_sweep_plot,
};
use tvgseg_core::tvea::{build_prompts, generate_cam, make_pseudo_label, ThresholdMode};
use tvgseg_core::types::Episode;
use tvgseg_core::Config;

#[derive(Parser)]
#[command(name = "tvgseg", about = "Source-free few-shot segmentation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set adapt.lr=0.005 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Use the built-in synthetic suite instead of dataset.root.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Output directory (defaults to eval.output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt per class and predict every episode (first-episode caching).
    Run {
        #[command(flatten)]
        common: Common,
        /// Also dump per-component maps for each episode.
        #[arg(long)]
        dump: bool,
    },
    /// Adapt on a single episode and write the checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict a single episode with cached (or freshly adapted) weights.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dump per-component maps next to the mask.
        #[arg(long)]
        dump: bool,
    },
    /// Emit the CAM-derived pseudo-label for one image.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        /// Input image path.
        #[arg(long)]
        image: PathBuf,
        /// Foreground class name.
        #[arg(long)]
        class: String,
        /// Comma-separated class list (defaults to just the class).
        #[arg(long)]
        classes: Option<String>,
    },
    /// Run the pipeline over sampled episodes and write a metrics report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also write each episode's predicted mask.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Pseudo-label threshold sweep: CSV table plus plot.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "0.3,0.4,0.5,0.6,0.7,0.8")]
        taus: String,
    },
    /// VVEA/TVEA on-off ablation table over the same episodes.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn build_config(common: &Common) -> Result<Config, CoreError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None if common.synthetic => Config::toy(64),
        None => Config::default(),
    };
    for item in &common.overrides {
        cfg.apply_override(item)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn episodes_for(cfg: &Config, common: &Common) -> Result<Vec<Episode>, CoreError> {
    if common.synthetic {
        let classes = if cfg.dataset.classes.is_empty() {
            default_synthetic_classes(4)
        } else {
            cfg.dataset.classes.clone()
        };
        synthetic_episodes(
            &classes,
            cfg.eval.episodes_per_class,
            cfg.input_size,
            cfg.dataset.k,
            cfg.eval.seed,
        )
    } else {
        dataset_episodes(cfg)
    }
}

fn one_episode(cfg: &Config, common: &Common, class: &str, seed: u64) -> Result<Episode, CoreError> {
    if common.synthetic {
        let mut classes = if cfg.dataset.classes.is_empty() {
            default_synthetic_classes(4)
        } else {
            cfg.dataset.classes.clone()
        };
        if !classes.iter().any(|c| c == class) {
            classes.push(class.to_string());
        }
        let mut spec =
            tvgseg_core::synthetic::SyntheticSpec::new(class, cfg.input_size, cfg.dataset.k);
        spec.all_classes = classes;
        tvgseg_core::synthetic::make_synthetic_episode(&spec, seed)
    } else {
        load_episode(
            Path::new(&cfg.dataset.root),
            &cfg.dataset.id,
            class,
            cfg.dataset.k,
            seed,
            cfg.dataset.adapter,
            cfg.input_size,
        )
    }
}

fn out_dir(cfg: &Config, common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.eval.output_dir))
}

fn cache_for(cfg: &Config) -> ParamCache {
    let dir = if cfg.eval.cache_dir.is_empty() {
        None
    } else {
        Some(PathBuf::from(&cfg.eval.cache_dir))
    };
    ParamCache::new(dir, cfg.adaptation_hash())
}

fn cmd_run(common: Common, dump: bool) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let episodes = episodes_for(&cfg, &common)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let cache = cache_for(&cfg);
    let dir = out_dir(&cfg, &common);
    std::fs::create_dir_all(&dir)?;
    let outputs = run_task(&pipeline, episodes.clone(), &cache)?;
    let mut log_lines = Vec::new();
    for (i, (ep, out)) in episodes.iter().zip(&outputs).enumerate() {
        let stem = format!("{}_{}_{i:04}", ep.dataset_id, ep.fg_class);
        dump_mask_set(&out.mask_set, &dir, &stem, dump)?;
        if let Some(record) = &out.record {
            log_lines.push(serde_json::to_string(record).unwrap());
        }
    }
    std::fs::write(dir.join("adaptation_log.jsonl"), log_lines.join("\n") + "\n")?;
    println!(
        "wrote {} masks and {} adaptation records to {}",
        outputs.len(),
        log_lines.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_adapt(common: Common, class: &str, seed: u64) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let ep = one_episode(&cfg, &common, class, seed)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let (params, record) = pipeline.adapt_episode(&ep)?;
    let dir = out_dir(&cfg, &common);
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join(format!("{}_{}.ckpt", ep.dataset_id, class));
    params.to_tensorfile(&cfg.adaptation_hash()).save(&ckpt)?;
    std::fs::write(
        dir.join(format!("{}_{}_record.json", ep.dataset_id, class)),
        serde_json::to_string_pretty(&record).unwrap(),
    )?;
    cache_for(&cfg).put(&ep.dataset_id, class, &params)?;
    println!(
        "adapted '{class}' for {} epochs (final loss {:.4}); checkpoint at {}",
        record.epochs,
        record.loss_trace.last().map(|b| b.total).unwrap_or(0.0),
        ckpt.display()
    );
    Ok(())
}

fn cmd_predict(common: Common, class: &str, seed: u64, dump: bool) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let ep = one_episode(&cfg, &common, class, seed)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let cache = cache_for(&cfg);
    let params = match cache.get(&ep.dataset_id, class)? {
        Some(p) => p,
        None => {
            let (p, _) = pipeline.adapt_episode(&ep)?;
            cache.put(&ep.dataset_id, class, &p)?;
            p
        }
    };
    let mask_set = pipeline.predict(&ep, &params)?;
    let dir = out_dir(&cfg, &common);
    std::fs::create_dir_all(&dir)?;
    let stem = format!("{}_{class}_{seed}", ep.dataset_id);
    dump_mask_set(&mask_set, &dir, &stem, dump)?;
    if let Some(gt) = &ep.query_gt {
        let miou = tvgseg_core::metrics::iou(&mask_set.final_mask, gt, 1)?;
        println!("foreground IoU vs ground truth: {miou:.4}");
    }
    println!("wrote {}", dir.join(format!("{stem}_mask.png")).display());
    Ok(())
}

fn cmd_pseudolabel(
    common: Common,
    image: &Path,
    class: &str,
    classes: Option<String>,
) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let img = load_image(image)?.resize(cfg.input_size, cfg.input_size);
    let all_classes: Vec<String> = match classes {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec![class.to_string()],
    };
    let pipeline = Pipeline::new(cfg.clone())?;
    let prompts = build_prompts(
        class,
        &all_classes,
        cfg.tvea.multi_label,
        &cfg.tvea.prompt_template,
    )?;
    let enc = pipeline.vl.encode_image(&img)?;
    let cam = generate_cam(&enc, &prompts, pipeline.vl.as_ref(), cfg.input_size)?;
    let mode = match cfg.tvea.threshold_mode.as_str() {
        "fixed" => ThresholdMode::Fixed(cfg.tvea.fixed_tau),
        _ => ThresholdMode::Otsu,
    };
    let pl = make_pseudo_label(&cam, mode, cfg.tvea.crf, &img)?;
    let dir = out_dir(&cfg, &common);
    std::fs::create_dir_all(&dir)?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    save_mask(&pl.mask, &dir.join(format!("{stem}_pseudo.png")))?;
    tvgseg_core::episode::save_gray_map(&pl.source.heatmap, &dir.join(format!("{stem}_cam.png")))?;
    let sidecar = serde_json::json!({
        "class": class,
        "prompts": prompts.class_order,
        "class_scores": pl.source.class_scores.as_slice().unwrap_or(&[]),
        "threshold": pl.source.threshold_used,
        "degenerate": pl.source.degenerate,
        "crf_applied": pl.crf_applied,
    });
    std::fs::write(
        dir.join(format!("{stem}_pseudo.json")),
        serde_json::to_string_pretty(&sidecar).unwrap(),
    )?;
    println!("wrote pseudo-label for '{class}' to {}", dir.display());
    Ok(())
}

fn cmd_evaluate(common: Common, dump_masks: bool) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let episodes = episodes_for(&cfg, &common)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let cache = cache_for(&cfg);
    let dir = out_dir(&cfg, &common);
    let (report, outputs) = evaluate_pipeline(&pipeline, episodes.clone(), &cache)?;
    std::fs::create_dir_all(&dir)?;
    write_report(&report, &dir.join("report.json"))?;
    if dump_masks {
        for (i, (ep, out)) in episodes.iter().zip(&outputs).enumerate() {
            let stem = format!("{}_{}_{i:04}", ep.dataset_id, ep.fg_class);
            save_mask(&out.mask_set.final_mask, &dir.join(format!("{stem}_mask.png")))?;
        }
    }
    println!(
        "mIoU {:.4}  FB-IoU {:.4}  over {} episodes ({} adaptations); report at {}",
        report.miou,
        report.fb_iou,
        report.episode_count,
        report.adaptations,
        dir.join("report.json").display()
    );
    Ok(())
}

fn cmd_sweep(common: Common, taus: &str) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let taus: Vec<f64> = taus
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CoreError::Argument(format!("bad threshold '{t}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    let episodes = episodes_for(&cfg, &common)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let rows = sweep_threshold(&pipeline, &episodes, &taus)?;
    let dir = out_dir(&cfg, &common);
    std::fs::create_dir_all(&dir)?;
    write_sweep_csv(&rows, &dir.join("sweep.csv"))?;
    write_sweep_plot(&rows, &dir.join("sweep.png"))?;
    for row in &rows {
        println!("tau {:.3} -> mIoU {:.4}", row.tau, row.miou);
    }
    println!("wrote {} and sweep.png", dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_ablate(common: Common) -> Result<(), CoreError> {
    let cfg = build_config(&common)?;
    let episodes = episodes_for(&cfg, &common)?;
    let rows = ablate(&cfg, episodes)?;
    let dir = out_dir(&cfg, &common);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("ablation.json"),
        serde_json::to_string_pretty(&rows).unwrap(),
    )?;
    let mut csv = String::from("vvea,tvea,miou,fb_iou\n");
    println!("VVEA  TVEA  mIoU    FB-IoU");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.vvea, r.tvea, r.miou, r.fb_iou));
        println!("{:5} {:5} {:.4}  {:.4}", r.vvea, r.tvea, r.miou, r.fb_iou);
    }
    std::fs::write(dir.join("ablation.csv"), csv)?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common, dump } => cmd_run(common, dump),
        Command::Adapt { common, class, seed } => cmd_adapt(common, &class, seed),
        Command::Predict {
            common,
            class,
            seed,
            dump,
        } => cmd_predict(common, &class, seed, dump),
        Command::Pseudolabel {
            common,
            image,
            class,
            classes,
        } => cmd_pseudolabel(common, &image, &class, classes),
        Command::Evaluate { common, dump_masks } => cmd_evaluate(common, dump_masks),
        Command::Sweep { common, taus } => cmd_sweep(common, &taus),
        Command::Ablate { common } => cmd_ablate(common),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
