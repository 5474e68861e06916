use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use p3ovd_cli::config::PipelineConfig;
use p3ovd_cli::manifest::Workspace;
use p3ovd_cli::sweep::SweepParam;
use p3ovd_cli::{exit_code_for, resolve_root, stages, sweep, sweep_grid};
use std::path::PathBuf;

/// Desk-scale open-vocabulary detection pipeline.
#[derive(Parser)]
#[command(name = "p3ovd", version, about)]
struct Cli {
    /// Flat key=value config file (overrides built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact root (overrides the P3OVD_HOME environment variable).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Root random seed; every stage derives named streams from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the parallel parts (scene generation).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Extra config overrides, repeatable: --set adapt.lr_text=0.2
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark (train/val splits plus sealed truth).
    GenData,
    /// Contrastive-pretrain the toy vision-language model.
    Pretrain,
    /// Fine-tune the prompt modules under dense self-supervision.
    Adapt {
        /// Learnable text prompt: on|off.
        #[arg(long, value_name = "on|off")]
        text_prompt: Option<String>,
        /// Learnable visual prompt: on|off.
        #[arg(long, value_name = "on|off")]
        visual_prompt: Option<String>,
        /// Hand-crafted template such as "a photo of a {}".
        #[arg(long, value_name = "TEMPLATE")]
        hand_prompt: Option<String>,
        /// Prompt layout "before,total" (category token position).
        #[arg(long, value_name = "L,M")]
        layout: Option<String>,
        #[arg(long, default_value = "default")]
        tag: String,
    },
    /// Generate pseudo labels for non-base classes on the train split.
    Label {
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        objectness: Option<f64>,
        /// Use jittered ground-truth geometry instead of the trained RPN.
        #[arg(long)]
        oracle_proposals: bool,
        /// Also write per-image score maps in the binary exchange format.
        #[arg(long)]
        save_scoremaps: bool,
        #[arg(long, default_value = "default")]
        tag: String,
    },
    /// Self-train the detector on ground truth plus pseudo labels.
    TrainDetector {
        /// Baseline arm: train without any pseudo labels.
        #[arg(long)]
        no_pseudo: bool,
        /// Use plain (un-prompted) text embeddings as the classifier.
        #[arg(long)]
        plain_classifier: bool,
        #[arg(long, default_value = "default")]
        tag: String,
        /// Which adapt run supplies prompts/classifier (defaults to --tag).
        #[arg(long)]
        prompts_tag: Option<String>,
    },
    /// Evaluate detections (mAP@0.5) and dense score maps (mIoU) on val.
    Eval {
        #[arg(long, default_value = "default")]
        tag: String,
        #[arg(long)]
        prompts_tag: Option<String>,
        /// Evaluate a pre-computed detections file instead of running inference.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Sweep delta or objectness and chart pseudo-label quality.
    Sweep {
        #[arg(long, value_name = "delta|objectness")]
        param: String,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "default")]
        tag: String,
    },
}

fn parse_on_off(name: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => anyhow::bail!(p3ovd::Error::Config(format!(
            "--{name} expects on|off, got '{value}'"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }

    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| p3ovd::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let ws = Workspace::new(resolve_root(cli.out_dir.clone()));

    match cli.command {
        Command::GenData => {
            cfg.finalize();
            let m = stages::stage_gen_data(&cfg, &ws)?;
            println!(
                "gen-data: {} train + {} val scenes under {} ({:.2}s)",
                cfg.data.n_train,
                cfg.data.n_val,
                ws.data_dir().display(),
                m.wall_time_s
            );
        }
        Command::Pretrain => {
            cfg.finalize();
            let m = stages::stage_pretrain(&cfg, &ws)?;
            println!(
                "pretrain: encoder written to {} ({:.2}s)",
                ws.encoder_ckpt().display(),
                m.wall_time_s
            );
        }
        Command::Adapt {
            text_prompt,
            visual_prompt,
            hand_prompt,
            layout,
            tag,
        } => {
            if let Some(v) = text_prompt {
                cfg.adapt.use_text_prompt = parse_on_off("text-prompt", &v)?;
            }
            if let Some(v) = visual_prompt {
                cfg.adapt.use_visual_prompt = parse_on_off("visual-prompt", &v)?;
            }
            if hand_prompt.is_some() {
                cfg.adapt.hand_template = hand_prompt;
            }
            if let Some(spec) = layout {
                let (l, m) = spec.split_once(',').ok_or_else(|| {
                    p3ovd::Error::Config(format!("--layout expects L,M, got '{spec}'"))
                })?;
                cfg.adapt.layout_before = l
                    .trim()
                    .parse()
                    .map_err(|_| p3ovd::Error::Config(format!("bad layout '{spec}'")))?;
                cfg.adapt.layout_total = m
                    .trim()
                    .parse()
                    .map_err(|_| p3ovd::Error::Config(format!("bad layout '{spec}'")))?;
            }
            cfg.finalize();
            let m = stages::stage_adapt(&cfg, &ws, &tag)?;
            println!(
                "adapt[{}]: mode {} -> {} ({:.2}s)",
                tag,
                cfg.adapt.ablation_mode(),
                ws.prompts_ckpt(&tag).display(),
                m.wall_time_s
            );
        }
        Command::Label {
            delta,
            gamma,
            objectness,
            oracle_proposals,
            save_scoremaps,
            tag,
        } => {
            if let Some(v) = delta {
                cfg.label.thresholds.delta = v;
            }
            if let Some(v) = gamma {
                cfg.label.thresholds.gamma = v;
            }
            if let Some(v) = objectness {
                cfg.label.thresholds.objectness_min = v;
            }
            if oracle_proposals {
                cfg.label.oracle_proposals = true;
            }
            if save_scoremaps {
                cfg.label.save_scoremaps = true;
            }
            cfg.label.thresholds.validate().context("label thresholds")?;
            cfg.finalize();
            let m = stages::stage_label(&cfg, &ws, &tag)?;
            println!(
                "label[{}]: pseudo labels -> {} ({:.2}s)",
                tag,
                ws.labels_file(&tag).display(),
                m.wall_time_s
            );
        }
        Command::TrainDetector {
            no_pseudo,
            plain_classifier,
            tag,
            prompts_tag,
        } => {
            if plain_classifier {
                cfg.prompted_classifier = false;
            }
            cfg.finalize();
            let prompts_tag = prompts_tag.unwrap_or_else(|| tag.clone());
            let m = stages::stage_train_detector(&cfg, &ws, &tag, &prompts_tag, !no_pseudo)?;
            println!(
                "train-detector[{}]: {} -> {} ({:.2}s)",
                tag,
                if no_pseudo { "base GT only" } else { "GT + pseudo labels" },
                ws.detector_ckpt(&tag).display(),
                m.wall_time_s
            );
        }
        Command::Eval {
            tag,
            prompts_tag,
            detections,
        } => {
            cfg.finalize();
            let prompts_tag = prompts_tag.unwrap_or_else(|| tag.clone());
            let (m, report) = stages::stage_eval(&cfg, &ws, &tag, &prompts_tag, detections.as_deref())?;
            print!("{}", report.text_table());
            println!(
                "eval[{}]: report -> {} ({:.2}s)",
                tag,
                ws.eval_report(&tag).display(),
                m.wall_time_s
            );
        }
        Command::Sweep {
            param,
            from,
            to,
            steps,
            tag,
        } => {
            cfg.finalize();
            let param: SweepParam = param.parse().map_err(|e: anyhow::Error| {
                anyhow::Error::new(p3ovd::Error::Config(e.to_string()))
            })?;
            let (default_from, default_to, default_steps) = match param {
                SweepParam::Delta => (0.3, 0.9, 7),
                SweepParam::Objectness => (0.5, 0.99, 6),
            };
            let values = sweep_grid(
                from.unwrap_or(default_from),
                to.unwrap_or(default_to),
                steps.unwrap_or(default_steps),
            )?;
            let (rows, csv, svg) = sweep::run_sweep(&cfg, &ws, &tag, param, &values)?;
            for row in &rows {
                println!(
                    "  value {:>6.3}  novel mAP {:>7.4}  labels {}",
                    row.value, row.map_novel, row.n_labels
                );
            }
            println!("sweep: {} and {}", csv.display(), svg.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}
