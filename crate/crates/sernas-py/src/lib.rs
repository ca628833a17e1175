//! Python bindings: feature extraction, synthetic corpus generation, fold
//! planning, CNN cell search, genotype handling, metrics, and a gradient
//! self-check. Matrices cross the boundary as `(rows, cols, values)`
//! tuples; structured artifacts as their canonical JSON.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sernas::config::Config;
use sernas::dataset::{synth_dataset as synth_impl, SynthConfig};
use sernas::error::Error;
use sernas::features;
use sernas::tensor::Tensor;

fn to_py_err(e: Error) -> PyErr {
    PyValueError::new_err(format!("{} ({})", e, e.kind()))
}

fn resolve_config(profile: &str, overrides: Vec<String>) -> PyResult<Config> {
    let mut cfg = Config::by_profile(profile).map_err(to_py_err)?;
    cfg.apply_overrides(&overrides).map_err(to_py_err)?;
    Ok(cfg)
}

/// Engine version string.
#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Generate the synthetic corpus; returns the number of utterances.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, complementary=false, sessions=2, speakers=2, utterances=40))]
fn synth_dataset(
    out_dir: PathBuf,
    seed: u64,
    complementary: bool,
    sessions: usize,
    speakers: usize,
    utterances: usize,
) -> PyResult<usize> {
    let mut cfg = if complementary {
        SynthConfig::complementary(seed)
    } else {
        SynthConfig {
            seed,
            ..Default::default()
        }
    };
    cfg.num_sessions = sessions;
    cfg.speakers_per_session = speakers;
    cfg.utterances_per_speaker = utterances;
    let records = synth_impl(&cfg, &out_dir).map_err(to_py_err)?;
    Ok(records.len())
}

/// WAV to fixed-shape spectrogram: pads or truncates to the configured
/// duration, then returns `(rows, cols, values)` row-major.
#[pyfunction]
#[pyo3(signature = (wav_path, profile="paper", overrides=vec![]))]
fn spectrogram_from_wav(
    wav_path: PathBuf,
    profile: &str,
    overrides: Vec<String>,
) -> PyResult<(usize, usize, Vec<f32>)> {
    let cfg = resolve_config(profile, overrides)?;
    let spec_cfg = cfg.spectrogram_config();
    let wav = features::load_wav(&wav_path).map_err(to_py_err)?;
    let fixed = features::pad_or_truncate(&wav, spec_cfg.target_duration_s);
    let m = features::spectrogram(&fixed, &spec_cfg).map_err(to_py_err)?;
    Ok((m.rows, m.cols, m.data))
}

/// Read a binary feature matrix file.
#[pyfunction]
fn ingest_feature_matrix(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let m = features::ingest_feature_matrix(&path).map_err(to_py_err)?;
    Ok((m.rows, m.cols, m.data))
}

/// Write a binary feature matrix file (sequence kind).
#[pyfunction]
fn write_feature_matrix(path: PathBuf, rows: usize, cols: usize, values: Vec<f32>) -> PyResult<()> {
    let m = features::FeatureMatrix::new(rows, cols, values, features::FeatureKind::Sequence)
        .map_err(to_py_err)?;
    features::write_feature_matrix(&path, &m).map_err(to_py_err)
}

/// Extract spectrograms for every manifest WAV into `out_dir` (the
/// `features` CLI subcommand, callable in-process).
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, profile="paper", overrides=vec![]))]
fn extract_features(
    manifest: PathBuf,
    out_dir: PathBuf,
    profile: &str,
    overrides: Vec<String>,
) -> PyResult<usize> {
    let cfg = resolve_config(profile, overrides)?;
    let spec_cfg = cfg.spectrogram_config();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| to_py_err(Error::io(out_dir.display().to_string(), e)))?;
    let records = sernas::dataset::read_manifest(&manifest).map_err(to_py_err)?;
    let mut count = 0usize;
    for r in &records {
        if let Some(audio) = &r.audio_path {
            let wav = features::load_wav(audio).map_err(to_py_err)?;
            let fixed = features::pad_or_truncate(&wav, spec_cfg.target_duration_s);
            let m = features::spectrogram(&fixed, &spec_cfg).map_err(to_py_err)?;
            let path = sernas::trainer::spectrogram_path(&out_dir, &r.id);
            features::write_feature_matrix(&path, &m).map_err(to_py_err)?;
            count += 1;
        }
    }
    Ok(count)
}

/// Mean of per-class recalls.
#[pyfunction]
#[pyo3(signature = (predictions, labels, num_classes=4))]
fn unweighted_accuracy(
    predictions: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
) -> PyResult<f64> {
    sernas::metrics::unweighted_accuracy(&predictions, &labels, num_classes).map_err(to_py_err)
}

/// Leave-one-session-out folds for a manifest, as JSON.
#[pyfunction]
fn make_folds(manifest: PathBuf) -> PyResult<String> {
    let records = sernas::dataset::read_manifest(&manifest).map_err(to_py_err)?;
    let folds = sernas::dataset::make_folds(&records).map_err(to_py_err)?;
    serde_json::to_string_pretty(&folds).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// The built-in recurrent cell bank, as JSON.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn builtin_cell_bank(seed: u64) -> String {
    sernas::rnn::CellBank::builtin(seed).to_json()
}

/// Graphviz DOT for one recurrent cell (JSON in).
#[pyfunction]
fn cell_to_dot(cell_json: &str) -> PyResult<String> {
    let cell: sernas::rnn::RnnCellGraph = serde_json::from_str(cell_json)
        .map_err(|e| PyValueError::new_err(format!("cell parse error: {e}")))?;
    cell.validate().map_err(to_py_err)?;
    Ok(sernas::dot::rnn_cell_dot(&cell))
}

/// Finite-difference check of the autodiff engine on a small random
/// mixed-op cell; returns the max relative error (should be well under
/// 1e-3).
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check_mixed_cell(seed: u64) -> PyResult<f64> {
    use sernas::darts::{mixed_op_forward, MixedEdge};
    use sernas::space::CnnOpKind;
    use sernas::tape::{ParamGroup, ParamStore, Tape};

    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    let mut rng = {
        use sernas::rand::SeedableRng;
        sernas::rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    };
    let op_set = [
        CnnOpKind::SkipConnect,
        CnnOpKind::SepConv3x3,
        CnnOpKind::AvgPool3x3,
        CnnOpKind::None,
    ];
    let theta = store.add(
        "theta",
        Tensor::uniform(&mut rng, &[op_set.len()], 0.5),
        ParamGroup::Arch,
    );
    let edge = MixedEdge::create(&mut store, &mut rng, &op_set, 2, 1, theta, "py");
    let x = tape.input("x");
    let y = mixed_op_forward(&mut tape, &edge, &op_set, x).map_err(to_py_err)?;
    let loss = tape.mean(y, &[0, 1, 2, 3]);
    tape.mark_output("loss", loss);

    let inputs = sernas::tape::Bindings::new().with("x", Tensor::uniform(&mut rng, &[1, 2, 6, 6], 1.0));
    let out = sernas::gradcheck::grad_check(&tape, &store, &inputs, "loss", 1e-4).map_err(to_py_err)?;
    out.max_rel_err()
        .ok_or_else(|| PyValueError::new_err("pooling tie point; re-seed"))
}

/// A derived CNN architecture: normal and reduction cell wiring plus
/// metadata, round-trippable through its canonical JSON.
#[pyclass(name = "Genotype", skip_from_py_object)]
#[derive(Clone)]
struct PyGenotype {
    inner: sernas::darts::Genotype,
}

#[pymethods]
impl PyGenotype {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyGenotype {
            inner: sernas::darts::Genotype::from_json(text).map_err(to_py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_dot(&self) -> String {
        sernas::dot::genotype_dot(&self.inner)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes
    }

    /// `(source, op)` pairs per node for one cell type.
    fn cell_edges(&self, cell: &str) -> PyResult<Vec<Vec<(usize, String)>>> {
        let nodes = match cell {
            "normal" => &self.inner.normal,
            "reduction" => &self.inner.reduction,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown cell type `{other}` (normal or reduction)"
                )))
            }
        };
        Ok(nodes
            .iter()
            .map(|n| {
                n.edges
                    .iter()
                    .map(|e| (e.source, e.op.name().to_string()))
                    .collect()
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Genotype(num_nodes={}, epochs={})",
            self.inner.num_nodes, self.inner.meta.epochs
        )
    }
}

/// Differentiable architecture search on one fold of a prepared corpus;
/// returns the derived genotype.
#[pyfunction]
#[pyo3(signature = (manifest, features_dir, fold=0, profile="desk", overrides=vec![]))]
fn search_cnn(
    manifest: PathBuf,
    features_dir: PathBuf,
    fold: usize,
    profile: &str,
    overrides: Vec<String>,
) -> PyResult<PyGenotype> {
    let cfg = resolve_config(profile, overrides)?;
    let records = sernas::dataset::read_manifest(&manifest).map_err(to_py_err)?;
    let folds = sernas::dataset::make_folds(&records).map_err(to_py_err)?;
    let plan = folds
        .into_iter()
        .nth(fold)
        .ok_or_else(|| PyValueError::new_err(format!("fold {fold} out of range")))?;
    let fold_data =
        sernas::trainer::load_spec_fold(&records, &plan, Path::new(&features_dir)).map_err(to_py_err)?;

    let seed = sernas::seed::child(cfg.seed, &format!("search:fold{fold}"));
    let mut supernet =
        sernas::darts::CnnSupernet::build(cfg.network_config(), seed).map_err(to_py_err)?;
    let mut schedule = cfg.search_schedule();
    schedule.seed = seed;
    let (genotype, _history) = sernas::darts::search(
        &mut supernet,
        &fold_data.train,
        &fold_data.val,
        &schedule,
        cfg.omega_sgd(),
        cfg.alpha_adam(),
    )
    .map_err(to_py_err)?;
    Ok(PyGenotype { inner: genotype })
}

#[pymodule]
fn sernas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenotype>()?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(spectrogram_from_wav, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_feature_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(write_feature_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(unweighted_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_cell_bank, m)?)?;
    m.add_function(wrap_pyfunction!(cell_to_dot, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_mixed_cell, m)?)?;
    m.add_function(wrap_pyfunction!(search_cnn, m)?)?;
    Ok(())
}
