//! End-to-end branch training orchestration: features in, trained branch
//! plus probability outputs and metrics out, with the CSV report formats
//! the CLI exchanges between stages.

use std::path::Path;

use crate::batch::{batch_ranges, LabeledExamples};
use crate::config::Config;
use crate::darts::{search, CnnSupernet, DerivedNetwork, EpochRecord, Genotype};
use crate::dataset::{FoldPlan, Label, UtteranceRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::features::{ingest_feature_matrix, FeatureMatrix};
use crate::fusion::{argmax_rows, train_fusion, FusionExamples, FusionNet};
use crate::metrics::{unweighted_accuracy, MetricsReport};
use crate::optim::{train_loop, OptimizerState, TrainHistory};
use crate::rnn::{select_cell, CandidateReport, CellBank, RnnBranchConfig, SeqExamples};
use crate::seed;
use crate::tape::{forward, ParamGroup, ParamStore, Tape};
use crate::tensor::Tensor;

/// Utterance ids per split, aligned with the example order in each split.
#[derive(Debug, Clone, Default)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Per-utterance probability rows: (id, class probabilities, label).
pub type ProbRows = Vec<(String, [f32; 4], usize)>;

// ── Fold data loading ────────────────────────────────────────────────

pub struct SpecFold {
    pub train: LabeledExamples,
    pub val: LabeledExamples,
    pub test: LabeledExamples,
    pub ids: SplitIds,
}

pub struct SeqFold {
    pub train: SeqExamples,
    pub val: SeqExamples,
    pub test: SeqExamples,
    pub ids: SplitIds,
    pub max_len: usize,
    pub dim: usize,
}

fn record_map(records: &[UtteranceRecord]) -> std::collections::BTreeMap<&str, &UtteranceRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

/// Spectrogram file for an utterance inside a features directory.
pub fn spectrogram_path(features_dir: &Path, id: &str) -> std::path::PathBuf {
    features_dir.join(format!("{id}.spec.emns"))
}

/// Load precomputed spectrogram features (`<id>.spec.emns`) for one fold.
/// Each example becomes a `[1, rows, cols]` single-channel image.
pub fn load_spec_fold(
    records: &[UtteranceRecord],
    fold: &FoldPlan,
    features_dir: &Path,
) -> Result<SpecFold> {
    let by_id = record_map(records);
    let load_split = |ids: &[String]| -> Result<LabeledExamples> {
        let mut out = LabeledExamples::default();
        for id in ids {
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidData(format!("fold references unknown id `{id}`")))?;
            let path = spectrogram_path(features_dir, id);
            let m = ingest_feature_matrix(&path)?;
            let tensor = Tensor::from_vec(vec![1, m.rows, m.cols], m.data.clone())?;
            out.push(tensor, rec.label.index());
        }
        Ok(out)
    };
    Ok(SpecFold {
        train: load_split(&fold.train_ids)?,
        val: load_split(&fold.val_ids)?,
        test: load_split(&fold.test_ids)?,
        ids: SplitIds {
            train: fold.train_ids.clone(),
            val: fold.val_ids.clone(),
            test: fold.test_ids.clone(),
        },
    })
}

/// Load sequence features (from each record's feature path) for one fold.
pub fn load_seq_fold(records: &[UtteranceRecord], fold: &FoldPlan) -> Result<SeqFold> {
    let by_id = record_map(records);
    let mut dim = 0usize;
    let load_split = |ids: &[String], dim: &mut usize| -> Result<SeqExamples> {
        let mut out = SeqExamples::default();
        for id in ids {
            let rec = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidData(format!("fold references unknown id `{id}`")))?;
            let path = rec.feature_path.as_ref().ok_or_else(|| {
                Error::InvalidData(format!("utterance `{id}` has no sequence features"))
            })?;
            let m: FeatureMatrix = ingest_feature_matrix(path)?;
            if *dim == 0 {
                *dim = m.cols;
            } else if *dim != m.cols {
                return Err(Error::InvalidData(format!(
                    "sequence width differs: {} vs {}",
                    dim, m.cols
                )));
            }
            out.sequences.push(m.to_tensor());
            out.labels.push(rec.label.index());
        }
        Ok(out)
    };
    let train = load_split(&fold.train_ids, &mut dim)?;
    let val = load_split(&fold.val_ids, &mut dim)?;
    let test = load_split(&fold.test_ids, &mut dim)?;
    let max_len = train.max_len().max(val.max_len()).max(test.max_len());
    Ok(SeqFold {
        train,
        val,
        test,
        ids: SplitIds {
            train: fold.train_ids.clone(),
            val: fold.val_ids.clone(),
            test: fold.test_ids.clone(),
        },
        max_len,
        dim,
    })
}

// ── CNN branch ───────────────────────────────────────────────────────

fn cnn_bindings(examples: &LabeledExamples, idx: &[usize]) -> Result<crate::tape::Bindings> {
    let feats: Vec<&Tensor> = idx.iter().map(|&i| &examples.features[i]).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| examples.labels[i]).collect();
    Ok(crate::tape::Bindings::new()
        .with("x", crate::batch::stack(&feats)?)
        .with("labels", crate::batch::label_tensor(&labels)))
}

/// Class probabilities for every example, in order.
pub fn cnn_predict(
    tape: &Tape,
    store: &ParamStore,
    examples: &LabeledExamples,
    batch_size: usize,
) -> Result<Vec<[f32; 4]>> {
    let mut probs = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for range in batch_ranges(examples.len(), batch_size) {
        let bind = cnn_bindings(examples, &idx[range])?;
        let out = forward(tape, store, &bind)?.output("probs")?;
        for row in out.data().chunks(NUM_CLASSES) {
            probs.push([row[0], row[1], row[2], row[3]]);
        }
    }
    Ok(probs)
}

fn ua_of(probs: &[[f32; 4]], labels: &[usize]) -> Result<f64> {
    let flat: Vec<f32> = probs.iter().flatten().copied().collect();
    let t = Tensor::from_vec(vec![probs.len(), 4], flat)?;
    unweighted_accuracy(&argmax_rows(&t), labels, NUM_CLASSES)
}

pub struct SpecBranchOutcome {
    pub genotype: Genotype,
    pub history: Vec<EpochRecord>,
    pub retrain_history: TrainHistory,
    pub metrics: MetricsReport,
    pub val_probs: ProbRows,
    pub test_probs: ProbRows,
}

/// Search on the fold's train/validation splits, derive, retrain the
/// derived network on train (best-validation-accuracy checkpoint), then
/// report test metrics and per-utterance probabilities.
pub fn train_spectrogram_branch(
    fold_data: &SpecFold,
    config: &Config,
    fold_label: &str,
) -> Result<SpecBranchOutcome> {
    let net_config = config.network_config();
    let search_seed = seed::child(config.seed, &format!("search:{fold_label}"));
    let mut supernet = CnnSupernet::build(net_config, search_seed)?;
    let mut schedule = config.search_schedule();
    schedule.seed = search_seed;
    let (genotype, history) = search(
        &mut supernet,
        &fold_data.train,
        &fold_data.val,
        &schedule,
        config.omega_sgd(),
        config.alpha_adam(),
    )?;
    retrain_with_history(fold_data, config, genotype, history, fold_label)
}

/// Retrain an already-derived genotype (the `train --genotype` path).
pub fn retrain_spectrogram(
    fold_data: &SpecFold,
    config: &Config,
    genotype: Genotype,
    fold_label: &str,
) -> Result<SpecBranchOutcome> {
    retrain_with_history(fold_data, config, genotype, Vec::new(), fold_label)
}

fn retrain_with_history(
    fold_data: &SpecFold,
    config: &Config,
    genotype: Genotype,
    history: Vec<EpochRecord>,
    fold_label: &str,
) -> Result<SpecBranchOutcome> {
    let net_config = config.network_config();
    let retrain_seed = seed::child(config.seed, &format!("retrain:{fold_label}"));
    let mut derived = DerivedNetwork::build(genotype.clone(), net_config, retrain_seed)?;
    let mut opt = OptimizerState::sgd(
        config.omega_sgd(),
        &derived.store,
        derived.store.ids_in_group(ParamGroup::Weight),
    );
    let tape = std::mem::take(&mut derived.tape);
    let train = &fold_data.train;
    let val = &fold_data.val;
    let batch_size = config.cnn_batch_size;
    let retrain_history = train_loop(
        &tape,
        &mut derived.store,
        &mut opt,
        config.cnn_retrain_epochs,
        train.len(),
        batch_size,
        retrain_seed,
        |idx| cnn_bindings(train, idx),
        |tape, store| {
            let probs = cnn_predict(tape, store, val, batch_size)?;
            Ok(-ua_of(&probs, &val.labels)?)
        },
    )?;
    derived.tape = tape;

    let val_prob_rows = cnn_predict(&derived.tape, &derived.store, val, batch_size)?;
    let test_prob_rows = cnn_predict(&derived.tape, &derived.store, &fold_data.test, batch_size)?;
    let preds: Vec<usize> = test_prob_rows.iter().map(argmax4).collect();
    let metrics = MetricsReport::from_predictions(
        &preds,
        &fold_data.test.labels,
        NUM_CLASSES,
        derived.param_count(),
    )?;
    Ok(SpecBranchOutcome {
        genotype,
        history,
        retrain_history,
        metrics,
        val_probs: zip_rows(&fold_data.ids.val, &val_prob_rows, &fold_data.val.labels),
        test_probs: zip_rows(&fold_data.ids.test, &test_prob_rows, &fold_data.test.labels),
    })
}

fn argmax4(row: &[f32; 4]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap()
}

fn zip_rows(ids: &[String], probs: &[[f32; 4]], labels: &[usize]) -> ProbRows {
    ids.iter()
        .zip(probs.iter())
        .zip(labels.iter())
        .map(|((id, p), l)| (id.clone(), *p, *l))
        .collect()
}

// ── RNN branch ───────────────────────────────────────────────────────

pub struct SeqBranchOutcome {
    pub winner: String,
    pub reports: Vec<CandidateReport>,
    pub metrics: MetricsReport,
    pub val_probs: ProbRows,
    pub test_probs: ProbRows,
}

/// Probabilities from a trained recurrent model, in example order.
pub fn rnn_predict(
    model: &crate::rnn::RnnModel,
    examples: &SeqExamples,
    batch_size: usize,
) -> Result<Vec<[f32; 4]>> {
    let mut out = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for range in batch_ranges(examples.len(), batch_size) {
        let ids = &idx[range];
        let (batch, mask, _) = examples.padded_batch(ids, model.config.seq_len)?;
        let probs = model.classify(&batch, &mask)?;
        for row in probs.data().chunks(NUM_CLASSES) {
            out.push([row[0], row[1], row[2], row[3]]);
        }
    }
    Ok(out)
}

/// Select the best bank cell on train/validation, then report test metrics
/// with the trained winner.
pub fn train_sequence_branch(
    fold_data: &SeqFold,
    config: &Config,
    bank: &CellBank,
    fold_label: &str,
) -> Result<SeqBranchOutcome> {
    let rnn_config = RnnBranchConfig::new(fold_data.dim, fold_data.max_len)
        .with_hidden(config.rnn_hidden)
        .with_stacked(config.rnn_cells);
    let mut select_cfg = config.rnn_select();
    select_cfg.seed = seed::child(config.seed, &format!("select:{fold_label}"));
    let outcome = select_cell(bank, &rnn_config, &fold_data.train, &fold_data.val, &select_cfg)?;

    let model = &outcome.winner_model;
    let batch_size = config.rnn_batch_size;
    let val_prob_rows = rnn_predict(model, &fold_data.val, batch_size)?;
    let test_prob_rows = rnn_predict(model, &fold_data.test, batch_size)?;
    let preds: Vec<usize> = test_prob_rows.iter().map(argmax4).collect();
    let metrics = MetricsReport::from_predictions(
        &preds,
        &fold_data.test.labels,
        NUM_CLASSES,
        model.param_count(),
    )?;
    Ok(SeqBranchOutcome {
        winner: outcome.winner,
        reports: outcome.reports,
        metrics,
        val_probs: zip_rows(&fold_data.ids.val, &val_prob_rows, &fold_data.val.labels),
        test_probs: zip_rows(&fold_data.ids.test, &test_prob_rows, &fold_data.test.labels),
    })
}

// ── Fusion stage ─────────────────────────────────────────────────────

pub struct FusionOutcome {
    pub metrics: MetricsReport,
    pub fused_test: ProbRows,
    pub train_examples: FusionExamples,
    pub test_examples: FusionExamples,
}

/// Train the fusion perceptron on validation-split branch outputs, then
/// evaluate on test-split outputs. Training fusion on validation data
/// keeps the test split untouched until the final evaluation.
pub fn run_fusion(
    spec_val: &ProbRows,
    spec_test: &ProbRows,
    seq_val: &ProbRows,
    seq_test: &ProbRows,
    config: &Config,
    fold_label: &str,
) -> Result<FusionOutcome> {
    let train_examples = FusionExamples::align(spec_val, seq_val)?;
    let test_examples = FusionExamples::align(spec_test, seq_test)?;
    let fusion_seed = seed::child(config.seed, &format!("fusion:{fold_label}"));
    let mut net = FusionNet::build(fusion_seed);
    let mut train_cfg = config.fusion_train();
    train_cfg.seed = fusion_seed;
    // checkpoint on the training rows' own loss: the test split stays
    // untouched until the final evaluation
    train_fusion(&mut net, &train_examples, &train_examples, &train_cfg)?;

    let idx: Vec<usize> = (0..test_examples.len()).collect();
    let (spec, w2v, labels) = test_examples.batch(&idx);
    let fused = net.fuse(&spec, &w2v)?;
    let preds = argmax_rows(&fused);
    let metrics = MetricsReport::from_predictions(&preds, &labels, NUM_CLASSES, net.param_count())?;
    let fused_test: ProbRows = test_examples
        .ids
        .iter()
        .zip(fused.data().chunks(NUM_CLASSES))
        .zip(labels.iter())
        .map(|((id, row), l)| (id.clone(), [row[0], row[1], row[2], row[3]], *l))
        .collect();
    Ok(FusionOutcome {
        metrics,
        fused_test,
        train_examples,
        test_examples,
    })
}

// ── CSV report formats ───────────────────────────────────────────────

/// Probability rows: `utterance_id,p0,p1,p2,p3,label`.
pub fn write_probs_csv(path: &Path, rows: &ProbRows) -> Result<()> {
    let mut out = String::from("utterance_id,p_neutral,p_angry,p_happy,p_sad,label\n");
    for (id, p, label) in rows {
        out.push_str(&format!(
            "{id},{:.6},{:.6},{:.6},{:.6},{}\n",
            p[0],
            p[1],
            p[2],
            p[3],
            Label::from_index(*label).unwrap().name()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_probs_csv(path: &Path) -> Result<ProbRows> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::InvalidData(format!(
                "{}:{}: expected 6 columns",
                path.display(),
                i + 1
            )));
        }
        let mut p = [0.0f32; 4];
        for (k, v) in p.iter_mut().enumerate() {
            *v = cols[k + 1].parse().map_err(|_| {
                Error::InvalidData(format!("{}:{}: bad probability", path.display(), i + 1))
            })?;
        }
        let label = Label::from_name(cols[5]).ok_or_else(|| {
            Error::InvalidData(format!("{}:{}: unknown label", path.display(), i + 1))
        })?;
        rows.push((cols[0].to_string(), p, label.index()));
    }
    Ok(rows)
}

/// The branch-output interchange file: both branches' probabilities for
/// the same utterances.
pub fn write_fusion_inputs_csv(path: &Path, examples: &FusionExamples) -> Result<()> {
    let mut out = String::from(
        "utterance_id,spec_p_neutral,spec_p_angry,spec_p_happy,spec_p_sad,\
         w2v_p_neutral,w2v_p_angry,w2v_p_happy,w2v_p_sad,label\n",
    );
    for i in 0..examples.len() {
        let s = examples.p_spec[i];
        let w = examples.p_w2v[i];
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            examples.ids[i],
            s[0],
            s[1],
            s[2],
            s[3],
            w[0],
            w[1],
            w[2],
            w[3],
            Label::from_index(examples.labels[i]).unwrap().name()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Search history: epoch, mean losses, flattened mixing weights.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    let n_norm = history.first().map_or(0, |r| r.alpha_normal.len());
    let n_red = history.first().map_or(0, |r| r.alpha_reduction.len());
    out.push_str("epoch,l_train,l_val");
    for i in 0..n_norm {
        out.push_str(&format!(",alpha_normal_{i}"));
    }
    for i in 0..n_red {
        out.push_str(&format!(",alpha_reduction_{i}"));
    }
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{:.6},{:.6}", r.epoch, r.l_train, r.l_val));
        for v in r.alpha_normal.iter().chain(r.alpha_reduction.iter()) {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Candidate ranking: name, parameter count, final validation loss.
pub fn write_selection_csv(path: &Path, reports: &[CandidateReport]) -> Result<()> {
    let mut out = String::from("cell,param_count,final_val_loss,diverged\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.name, r.param_count, r.final_val_loss, r.diverged
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One-row metrics summary.
pub fn write_metrics_csv(path: &Path, label: &str, m: &MetricsReport) -> Result<()> {
    let mut out = String::from(
        "run,unweighted_accuracy,recall_neutral,recall_angry,recall_happy,recall_sad,param_count\n",
    );
    out.push_str(&format!(
        "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
        m.unweighted_accuracy,
        m.per_class_recall[0],
        m.per_class_recall[1],
        m.per_class_recall[2],
        m.per_class_recall[3],
        m.param_count
    ));
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<(String, f64)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let line = text.lines().nth(1).ok_or_else(|| {
        Error::InvalidData(format!("{}: missing metrics row", path.display()))
    })?;
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() < 2 {
        return Err(Error::InvalidData(format!(
            "{}: malformed metrics row",
            path.display()
        )));
    }
    let ua: f64 = cols[1]
        .parse()
        .map_err(|_| Error::InvalidData(format!("{}: bad accuracy", path.display())))?;
    Ok((cols[0].to_string(), ua))
}
