//! `fod`: dataset generation, training, restoration, evaluation, ablation
//! comparison, and severity reports for FOD restoration.
//!
//! Every subcommand honors `--seed` for full determinism. Output locations
//! default to `FOD_OUT_DIR` when `--out` is omitted; `FOD_WORKERS` caps the
//! worker pool.

use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fod_core::config::RunConfig;
use fod_core::denoiser::Variant;
use fod_core::error::{FodError, Result};
use fod_core::eval;
use fod_core::kvtext::{KvDoc, KvSection};
use fod_core::phantom;
use fod_core::restorer;
use fod_core::store::{self, DatasetManifest};
use fod_core::trainer::{configs_from_meta, Trainer};

#[derive(Parser)]
#[command(
    name = "fod",
    about = "Restore spherical-harmonic FOD images inside signal-loss masks with a conditional diffusion model",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset (ground truth, corrupted,
    /// masks, manifest).
    GenData {
        /// Sectioned key-value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory (falls back to FOD_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one denoiser variant on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Ablation rung: uncond | vol | vol_enc | full.
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Diffusion steps T for the training schedule.
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Restore a corrupted FOD image inside a distortion mask.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corrupted FOD container (.fodc).
        #[arg(long)]
        input: PathBuf,
        /// Distortion mask container (.fodm).
        #[arg(long)]
        mask: PathBuf,
        /// Output FOD container path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Must equal the checkpoint's training steps (no step skipping).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Restore and score every test item with one checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare the four ablation variants on the test split.
    Ablate {
        /// Directory holding best_<variant>.fodk for all four variants.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Severity grouping and integrity plots from evaluate's records.
    Report {
        /// records.kv written by evaluate.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        groups: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(workers) = std::env::var("FOD_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(match e.category() {
                "invalid-argument" => 2,
                "config" => 3,
                "format" => 4,
                "io" => 5,
                "numeric" => 6,
                _ => 70,
            })
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var("FOD_OUT_DIR") {
        return Ok(PathBuf::from(env));
    }
    Err(FodError::Config(
        "no output location: pass --out or set FOD_OUT_DIR".into(),
    ))
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, seed, out } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(out)?;
            let spec = cfg.data.dataset_spec(&dir, seed);
            let summary = phantom::make_dataset(&spec)?;
            println!("manifest {}", summary.manifest_path.display());
            println!("digest {:016x}", summary.digest);
            println!("items {}", summary.n_items);
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            variant,
            seed,
            out,
            steps,
            checkpoint,
        } => {
            let dir = out_dir(out)?;
            let manifest = DatasetManifest::load(&data)?;
            let mut trainer = match checkpoint {
                Some(ckpt) => Trainer::resume(&ckpt, &manifest)?,
                None => {
                    let mut cfg = load_config(&config)?;
                    cfg.net.variant = Variant::parse(&variant)?;
                    if let Some(s) = seed {
                        cfg.train.seed = s;
                    }
                    if let Some(t) = steps {
                        cfg.train.t_steps = t;
                        // keep the terminal noise level of the reference
                        // 1000-step schedule
                        cfg.train.beta_end = (0.02 * 1000.0 / t as f64).min(0.999);
                    }
                    Trainer::new(cfg.net.clone(), cfg.train.clone(), &manifest)?
                }
            };
            let best = trainer.fit(&dir)?;
            println!("best {}", best.display());
            println!("best_val {:e}", trainer.best_val);
            println!("iterations {}", trainer.iteration);
            Ok(())
        }
        Cmd::Restore {
            checkpoint,
            input,
            mask,
            out,
            seed,
            steps,
        } => {
            let ckpt = store::load_checkpoint(&checkpoint)?;
            let (net_cfg, train_cfg) = configs_from_meta(&ckpt.meta)?;
            if let Some(t) = steps {
                if t != train_cfg.t_steps {
                    return Err(FodError::Config(format!(
                        "--steps {t} does not match the checkpoint's {} training steps; \
                         step skipping is not supported, rerun without --steps or retrain \
                         with the desired schedule",
                        train_cfg.t_steps
                    )));
                }
            }
            let mut model = fod_core::denoiser::DenoiserModel::new(net_cfg, train_cfg.seed)?;
            model.load_params(ckpt.params.into_iter().map(|(_, v)| v).collect())?;
            let sched = train_cfg.schedule()?;
            let image = store::read_fod(&input)?;
            let (mask_arr, _severity) = store::read_mask(&mask)?;
            let restored =
                restorer::restore_image(&model, &image, &mask_arr, &ckpt.scale, &sched, seed)?;
            let out_path = match out {
                Some(p) => p,
                None => out_dir(None)?.join("restored.fodc"),
            };
            if let Some(parent) = out_path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| FodError::io(parent, e))?;
                }
            }
            store::write_fod(&out_path, &restored)?;
            println!("restored {}", out_path.display());
            Ok(())
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            out,
            seed,
            split,
        } => {
            let dir = out_dir(out)?;
            std::fs::create_dir_all(&dir).map_err(|e| FodError::io(&dir, e))?;
            let manifest = DatasetManifest::load(&data)?;
            let outcome = eval::evaluate_checkpoint(&checkpoint, &manifest, &split, seed)?;
            let rows = vec![outcome];
            print!("{}", eval::format_rmse_table(&rows));
            print!("{}", eval::format_angular_table(&rows));

            let report_path = dir.join("report.kv");
            std::fs::write(&report_path, eval::report_doc(&rows).to_text())
                .map_err(|e| FodError::io(&report_path, e))?;
            let records_path = dir.join("records.kv");
            std::fs::write(&records_path, records_doc(&rows[0]).to_text())
                .map_err(|e| FodError::io(&records_path, e))?;
            println!("report {}", report_path.display());
            println!("records {}", records_path.display());
            Ok(())
        }
        Cmd::Ablate {
            checkpoint,
            data,
            out,
            seed,
        } => {
            let dir = out_dir(out)?;
            std::fs::create_dir_all(&dir).map_err(|e| FodError::io(&dir, e))?;
            let manifest = DatasetManifest::load(&data)?;
            let mut paths: BTreeMap<&'static str, PathBuf> = BTreeMap::new();
            for v in Variant::all() {
                paths.insert(
                    v.as_str(),
                    checkpoint.join(format!("best_{}.fodk", v.as_str())),
                );
            }
            let rows = eval::run_baselines(&paths, &manifest, "test", seed)?;
            print!("{}", eval::format_rmse_table(&rows));
            print!("{}", eval::format_angular_table(&rows));
            let path = dir.join("ablation.kv");
            std::fs::write(&path, eval::report_doc(&rows).to_text())
                .map_err(|e| FodError::io(&path, e))?;
            println!("ablation {}", path.display());
            Ok(())
        }
        Cmd::Report {
            records,
            out,
            groups,
        } => {
            let dir = out_dir(out)?;
            std::fs::create_dir_all(&dir).map_err(|e| FodError::io(&dir, e))?;
            let recs = read_records(&records)?;
            let summaries = eval::severity_grouping(&recs, groups)?;
            println!(
                "{:<8} {:>4} {:>18} {:>22} {:>22}",
                "group", "n", "severity", "corrupted (mean/std)", "restored (mean/std)"
            );
            for g in &summaries {
                println!(
                    "G{:<7} {:>4} {:>8.3}..{:<8.3} {:>11.5}/{:<10.5} {:>11.5}/{:<10.5}",
                    g.index + 1,
                    g.n,
                    g.severity_range.0,
                    g.severity_range.1,
                    g.before.mean,
                    g.before.std,
                    g.after.mean,
                    g.after.std
                );
            }
            println!(
                "group-mean spread: corrupted {:.5}, restored {:.5}",
                eval::group_mean_spread(&summaries, false),
                eval::group_mean_spread(&summaries, true)
            );

            let groups_path = dir.join("groups.kv");
            let mut doc = KvDoc::new();
            for g in &summaries {
                let mut sec = KvSection::new(format!("group {}", g.index + 1));
                sec.set("n", g.n)
                    .set(
                        "severity_range",
                        format!("{:.4} {:.4}", g.severity_range.0, g.severity_range.1),
                    )
                    .set("before_mean", format!("{:.6}", g.before.mean))
                    .set("before_std", format!("{:.6}", g.before.std))
                    .set(
                        "before_quartiles",
                        format!(
                            "{:.6} {:.6} {:.6}",
                            g.before.quartiles[0], g.before.quartiles[1], g.before.quartiles[2]
                        ),
                    )
                    .set("after_mean", format!("{:.6}", g.after.mean))
                    .set("after_std", format!("{:.6}", g.after.std))
                    .set(
                        "after_quartiles",
                        format!(
                            "{:.6} {:.6} {:.6}",
                            g.after.quartiles[0], g.after.quartiles[1], g.after.quartiles[2]
                        ),
                    );
                doc.push(sec);
            }
            std::fs::write(&groups_path, doc.to_text())
                .map_err(|e| FodError::io(&groups_path, e))?;
            let svg_path = dir.join("integrity.svg");
            eval::write_integrity_svg(&svg_path, &summaries)?;
            println!("groups {}", groups_path.display());
            println!("plot {}", svg_path.display());
            Ok(())
        }
    }
}

fn records_doc(outcome: &eval::EvalOutcome) -> KvDoc {
    let mut doc = KvDoc::new();
    let mut head = KvSection::new("records");
    head.set("variant", outcome.variant.as_str()).set(
        "ids",
        outcome
            .items
            .iter()
            .map(|i| i.id.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    );
    doc.push(head);
    for item in &outcome.items {
        let mut sec = KvSection::new(format!("record {}", item.id));
        sec.set("severity", format!("{:.6}", item.severity))
            .set("integrity_gt", format!("{:.6}", item.integrity_gt))
            .set(
                "integrity_corrupted",
                format!("{:.6}", item.integrity_corrupted),
            )
            .set(
                "integrity_restored",
                format!("{:.6}", item.integrity_restored),
            )
            .set("rmse_overall", format!("{:.6}", item.rmse_overall));
        doc.push(sec);
    }
    doc
}

fn read_records(path: &Path) -> Result<Vec<eval::IntegrityRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| FodError::io(path, e))?;
    let doc = KvDoc::parse(&text)?;
    let ids: Vec<String> = doc.get_list("records", "ids")?;
    ids.iter()
        .map(|id| {
            let sec = format!("record {id}");
            Ok(eval::IntegrityRecord {
                id: id.clone(),
                severity: doc.get_parsed(&sec, "severity")?,
                integrity_before: doc.get_parsed(&sec, "integrity_corrupted")?,
                integrity_after: doc.get_parsed(&sec, "integrity_restored")?,
            })
        })
        .collect()
}
