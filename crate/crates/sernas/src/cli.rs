//! Command-line interface: synthetic corpus generation, feature
//! extraction, architecture search, cell selection, retraining, fusion,
//! cross-fold evaluation, and DOT export.
//!
//! Every run writes `run_manifest.txt` (resolved config + seed + argv)
//! into its output directory, enough to reproduce the run bit-exactly.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::darts::Genotype;
use crate::dataset::{make_folds, read_manifest, synth_dataset, SynthConfig, UtteranceRecord};
use crate::dot::{genotype_dot, rnn_cell_dot};
use crate::error::{Error, Result};
use crate::features::{
    ingest_feature_matrix, load_wav, pad_or_truncate, spectrogram, write_feature_matrix,
};
use crate::rnn::{CellBank, RnnCellGraph};
use crate::trainer::{
    load_seq_fold, load_spec_fold, read_metrics_csv, read_probs_csv, run_fusion,
    spectrogram_path, train_sequence_branch, train_spectrogram_branch, write_fusion_inputs_csv,
    write_history_csv, write_metrics_csv, write_probs_csv, write_selection_csv,
};

pub const WORKSPACE_ENV: &str = "SERNAS_ROOT";

#[derive(Parser, Debug)]
#[command(name = "sernas", version, about = "Architecture search for speech emotion recognition, desk scale")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Key-value config file; defaults come from the chosen profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile: `paper` or `desk`.
    #[arg(long, global = true, default_value = "paper")]
    profile: String,
    /// Single-key overrides, repeatable: --set cnn.channels=4
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (WAV + sequence features + manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        noise: Option<f32>,
        /// Engineered complementarity: audio merges happy/sad, sequence
        /// features merge neutral/angry.
        #[arg(long)]
        complementary: bool,
    },
    /// Extract spectrograms from manifest WAVs and validate sequence features.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Differentiable architecture search on one fold's spectrograms.
    Search {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Shorthand for --set cnn.epochs=N.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every candidate cell and select the lowest-validation-loss one.
    Select {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Cell bank JSON; the built-in bank is used when omitted.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a derived genotype (spectrogram) or a selected cell (sequence).
    Train {
        /// `spectrogram` or `sequence`.
        #[arg(long)]
        branch: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        cell: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse two branches' probability outputs via the fusion perceptron.
    Fuse {
        /// Directory holding the spectrogram branch probs_val/probs_test CSVs.
        #[arg(long)]
        spec: PathBuf,
        /// Directory holding the sequence branch probs_val/probs_test CSVs.
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics CSVs under a directory into a UA table.
    Eval {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a genotype or a cell graph as Graphviz DOT.
    #[command(name = "export-dot")]
    ExportDot {
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        cell: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point: returns the process exit code. Failures print one
/// machine-readable line: `error kind=<kind> msg="<detail>"`.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            1
        }
    }
}

fn resolve_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => {
            let mut base = Config::by_profile(&common.profile)?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            base.parse_text(&text)?;
            base
        }
        None => Config::by_profile(&common.profile)?,
    };
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Resolved config + seed + argv: everything needed to reproduce the run.
fn write_run_manifest(out_dir: &Path, cfg: &Config, extra: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    let argv: Vec<String> = std::env::args().collect();
    text.push_str(&format!("argv = {}\n", argv.join(" ")));
    if let Ok(root) = std::env::var(WORKSPACE_ENV) {
        text.push_str(&format!("workspace_root = {root}\n"));
    }
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str("--- config ---\n");
    text.push_str(&cfg.to_canonical_string());
    let path = out_dir.join("run_manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_fold(records: &[UtteranceRecord], fold: usize) -> Result<crate::dataset::FoldPlan> {
    let folds = make_folds(records)?;
    folds
        .into_iter()
        .nth(fold)
        .ok_or_else(|| Error::InvalidConfig(format!("fold {fold} out of range")))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Synth {
            out,
            sessions,
            speakers,
            utterances,
            noise,
            complementary,
        } => {
            ensure_dir(out)?;
            let mut synth = if *complementary {
                SynthConfig::complementary(cfg.seed)
            } else {
                SynthConfig {
                    seed: cfg.seed,
                    ..Default::default()
                }
            };
            synth.sample_rate = cfg.sample_rate;
            synth.duration_s = cfg.spec_duration_s;
            if let Some(s) = sessions {
                synth.num_sessions = *s;
            }
            if let Some(s) = speakers {
                synth.speakers_per_session = *s;
            }
            if let Some(u) = utterances {
                synth.utterances_per_speaker = *u;
            }
            if let Some(n) = noise {
                synth.noise_level = *n;
            }
            let records = synth_dataset(&synth, out)?;
            write_run_manifest(
                out,
                &cfg,
                &[
                    ("command".into(), "synth".into()),
                    ("utterances".into(), records.len().to_string()),
                    ("complementary".into(), complementary.to_string()),
                ],
            )?;
            println!(
                "synth: wrote {} utterances to {}",
                records.len(),
                out.display()
            );
            Ok(())
        }
        Command::Features { manifest, out } => {
            ensure_dir(out)?;
            let records = read_manifest(manifest)?;
            let spec_cfg = cfg.spectrogram_config();
            let mut audio_count = 0usize;
            let mut seq_count = 0usize;
            for r in &records {
                if let Some(audio) = &r.audio_path {
                    let wav = load_wav(audio)?;
                    let fixed = pad_or_truncate(&wav, spec_cfg.target_duration_s);
                    let m = spectrogram(&fixed, &spec_cfg)?;
                    write_feature_matrix(&spectrogram_path(out, &r.id), &m)?;
                    audio_count += 1;
                }
                if let Some(feat) = &r.feature_path {
                    ingest_feature_matrix(feat)?; // validate
                    seq_count += 1;
                }
            }
            write_run_manifest(
                out,
                &cfg,
                &[
                    ("command".into(), "features".into()),
                    ("spectrograms".into(), audio_count.to_string()),
                    ("sequence_features".into(), seq_count.to_string()),
                ],
            )?;
            println!("features: {audio_count} spectrograms, {seq_count} sequence files validated");
            Ok(())
        }
        Command::Search {
            manifest,
            features,
            fold,
            epochs,
            out,
        } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.cnn_epochs = *e;
            }
            ensure_dir(out)?;
            let records = read_manifest(manifest)?;
            let plan = load_fold(&records, *fold)?;
            let fold_data = load_spec_fold(&records, &plan, features)?;
            if cfg.cnn_epochs == 0 {
                eprintln!("warning: 0 search epochs; emitting the initialization genotype");
            }
            let outcome_label = format!("fold{fold}");
            let spec_out = train_search_only(&fold_data, &cfg, &outcome_label)?;
            std::fs::write(out.join("genotype.json"), spec_out.0.to_json())
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            write_history_csv(&out.join("history.csv"), &spec_out.1)?;
            write_run_manifest(
                out,
                &cfg,
                &[
                    ("command".into(), "search".into()),
                    ("fold".into(), fold.to_string()),
                ],
            )?;
            println!(
                "search: fold {fold} done, genotype at {}",
                out.join("genotype.json").display()
            );
            Ok(())
        }
        Command::Select {
            manifest,
            fold,
            bank,
            out,
        } => {
            ensure_dir(out)?;
            let records = read_manifest(manifest)?;
            let plan = load_fold(&records, *fold)?;
            let fold_data = load_seq_fold(&records, &plan)?;
            let bank = match bank {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    CellBank::from_json(&text)?
                }
                None => CellBank::builtin(cfg.seed),
            };
            let outcome = train_sequence_branch(&fold_data, &cfg, &bank, &format!("fold{fold}"))?;
            let best = bank
                .get(&outcome.winner)
                .expect("winner comes from the bank");
            let mut cell_json = serde_json::to_string_pretty(best).expect("cell serializes");
            cell_json.push('\n');
            std::fs::write(out.join("best_cell.json"), cell_json)
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            write_selection_csv(&out.join("selection_report.csv"), &outcome.reports)?;
            write_run_manifest(
                out,
                &cfg,
                &[
                    ("command".into(), "select".into()),
                    ("fold".into(), fold.to_string()),
                    ("winner".into(), outcome.winner.clone()),
                ],
            )?;
            println!("select: fold {fold} winner {}", outcome.winner);
            Ok(())
        }
        Command::Train {
            branch,
            manifest,
            features,
            fold,
            genotype,
            cell,
            out,
        } => {
            ensure_dir(out)?;
            let records = read_manifest(manifest)?;
            let plan = load_fold(&records, *fold)?;
            let label = format!("fold{fold}");
            match branch.as_str() {
                "spectrogram" => {
                    let features = features.as_ref().ok_or_else(|| {
                        Error::InvalidConfig("--features is required for the spectrogram branch".into())
                    })?;
                    let fold_data = load_spec_fold(&records, &plan, features)?;
                    let outcome = match genotype {
                        Some(path) => {
                            let text = std::fs::read_to_string(path)
                                .map_err(|e| Error::io(path.display().to_string(), e))?;
                            let g = Genotype::from_json(&text)?;
                            crate::trainer::retrain_spectrogram(&fold_data, &cfg, g, &label)?
                        }
                        None => train_spectrogram_branch(&fold_data, &cfg, &label)?,
                    };
                    std::fs::write(out.join("genotype.json"), outcome.genotype.to_json())
                        .map_err(|e| Error::io(out.display().to_string(), e))?;
                    write_history_csv(&out.join("history.csv"), &outcome.history)?;
                    write_probs_csv(&out.join("probs_val.csv"), &outcome.val_probs)?;
                    write_probs_csv(&out.join("probs_test.csv"), &outcome.test_probs)?;
                    write_metrics_csv(&out.join("metrics.csv"), &format!("{label}/spectrogram"), &outcome.metrics)?;
                    println!(
                        "train spectrogram: fold {fold} test UA {:.4}",
                        outcome.metrics.unweighted_accuracy
                    );
                }
                "sequence" => {
                    let fold_data = load_seq_fold(&records, &plan)?;
                    let bank = match cell {
                        Some(path) => {
                            let text = std::fs::read_to_string(path)
                                .map_err(|e| Error::io(path.display().to_string(), e))?;
                            let cell: RnnCellGraph = serde_json::from_str(&text)
                                .map_err(|e| Error::InvalidCell(format!("parse error: {e}")))?;
                            cell.validate()?;
                            CellBank {
                                version: crate::rnn::CELL_BANK_FORMAT_VERSION,
                                cells: vec![cell],
                            }
                        }
                        None => CellBank::builtin(cfg.seed),
                    };
                    let outcome = train_sequence_branch(&fold_data, &cfg, &bank, &label)?;
                    write_selection_csv(&out.join("selection_report.csv"), &outcome.reports)?;
                    write_probs_csv(&out.join("probs_val.csv"), &outcome.val_probs)?;
                    write_probs_csv(&out.join("probs_test.csv"), &outcome.test_probs)?;
                    write_metrics_csv(&out.join("metrics.csv"), &format!("{label}/sequence"), &outcome.metrics)?;
                    println!(
                        "train sequence: fold {fold} cell {} test UA {:.4}",
                        outcome.winner, outcome.metrics.unweighted_accuracy
                    );
                }
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown branch `{other}` (expected spectrogram or sequence)"
                    )))
                }
            }
            write_run_manifest(
                out,
                &cfg,
                &[
                    ("command".into(), "train".into()),
                    ("branch".into(), branch.clone()),
                    ("fold".into(), fold.to_string()),
                ],
            )?;
            Ok(())
        }
        Command::Fuse { spec, seq, out } => {
            ensure_dir(out)?;
            let spec_val = read_probs_csv(&spec.join("probs_val.csv"))?;
            let spec_test = read_probs_csv(&spec.join("probs_test.csv"))?;
            let seq_val = read_probs_csv(&seq.join("probs_val.csv"))?;
            let seq_test = read_probs_csv(&seq.join("probs_test.csv"))?;
            let outcome = run_fusion(&spec_val, &spec_test, &seq_val, &seq_test, &cfg, "fuse")?;
            write_fusion_inputs_csv(&out.join("fusion_inputs_val.csv"), &outcome.train_examples)?;
            write_fusion_inputs_csv(&out.join("fusion_inputs_test.csv"), &outcome.test_examples)?;
            write_probs_csv(&out.join("fused_probs_test.csv"), &outcome.fused_test)?;
            write_metrics_csv(&out.join("metrics.csv"), "fused", &outcome.metrics)?;
            write_run_manifest(out, &cfg, &[("command".into(), "fuse".into())])?;
            println!(
                "fuse: test UA {:.4}",
                outcome.metrics.unweighted_accuracy
            );
            Ok(())
        }
        Command::Eval { runs, out } => {
            let mut rows = Vec::new();
            collect_metrics(runs, runs, &mut rows)?;
            if rows.is_empty() {
                return Err(Error::InvalidData(format!(
                    "no metrics.csv files under {}",
                    runs.display()
                )));
            }
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            let mut text = String::from("run,unweighted_accuracy\n");
            let mut sum = 0.0;
            for (label, ua) in &rows {
                text.push_str(&format!("{label},{ua:.6}\n"));
                sum += ua;
            }
            text.push_str(&format!("mean,{:.6}\n", sum / rows.len() as f64));
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    ensure_dir(parent)?;
                }
            }
            std::fs::write(out, text).map_err(|e| Error::io(out.display().to_string(), e))?;
            write_sidecar_manifest(out, &cfg, "eval")?;
            println!("eval: {} runs aggregated into {}", rows.len(), out.display());
            Ok(())
        }
        Command::ExportDot { genotype, cell, out } => {
            let text = match (genotype, cell) {
                (Some(g), None) => {
                    let raw = std::fs::read_to_string(g)
                        .map_err(|e| Error::io(g.display().to_string(), e))?;
                    genotype_dot(&Genotype::from_json(&raw)?)
                }
                (None, Some(c)) => {
                    let raw = std::fs::read_to_string(c)
                        .map_err(|e| Error::io(c.display().to_string(), e))?;
                    let cell: RnnCellGraph = serde_json::from_str(&raw)
                        .map_err(|e| Error::InvalidCell(format!("parse error: {e}")))?;
                    cell.validate()?;
                    rnn_cell_dot(&cell)
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "export-dot needs exactly one of --genotype or --cell".into(),
                    ))
                }
            };
            std::fs::write(out, text).map_err(|e| Error::io(out.display().to_string(), e))?;
            write_sidecar_manifest(out, &cfg, "export-dot")?;
            println!("export-dot: wrote {}", out.display());
            Ok(())
        }
    }
}

/// Reproduction manifest for subcommands whose output is a single file:
/// written next to it as `<file>.run_manifest.txt`.
fn write_sidecar_manifest(out_file: &Path, cfg: &Config, command: &str) -> Result<()> {
    let mut text = String::new();
    let argv: Vec<String> = std::env::args().collect();
    text.push_str(&format!("argv = {}\n", argv.join(" ")));
    text.push_str(&format!("command = {command}\n"));
    text.push_str("--- config ---\n");
    text.push_str(&cfg.to_canonical_string());
    let path = out_file.with_file_name(format!(
        "{}.run_manifest.txt",
        out_file.file_name().unwrap_or_default().to_string_lossy()
    ));
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Search only (no retrain): used by the `search` subcommand.
fn train_search_only(
    fold_data: &crate::trainer::SpecFold,
    cfg: &Config,
    label: &str,
) -> Result<(Genotype, Vec<crate::darts::EpochRecord>)> {
    let net_config = cfg.network_config();
    let search_seed = crate::seed::child(cfg.seed, &format!("search:{label}"));
    let mut supernet = crate::darts::CnnSupernet::build(net_config, search_seed)?;
    let mut schedule = cfg.search_schedule();
    schedule.seed = search_seed;
    crate::darts::search(
        &mut supernet,
        &fold_data.train,
        &fold_data.val,
        &schedule,
        cfg.omega_sgd(),
        cfg.alpha_adam(),
    )
}

fn collect_metrics(root: &Path, dir: &Path, rows: &mut Vec<(String, f64)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_metrics(root, &path, rows)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.csv") {
            let (_, ua) = read_metrics_csv(&path)?;
            let rel = path
                .parent()
                .and_then(|p| p.strip_prefix(root).ok())
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| path.display().to_string());
            rows.push((rel, ua));
        }
    }
    Ok(())
}
