//! Dataset management: utterance records and manifests, leave-one-session-out
//! fold planning, and the synthetic desk-scale corpus generator that stands
//! in for licensed speech data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{write_feature_matrix, write_wav, FeatureKind, FeatureMatrix, Waveform};
use crate::seed;

pub const NUM_CLASSES: usize = 4;

/// The four emotion classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Neutral,
    Angry,
    Happy,
    Sad,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Neutral, Label::Angry, Label::Happy, Label::Sad];

    pub fn name(&self) -> &'static str {
        match self {
            Label::Neutral => "neutral",
            Label::Angry => "angry",
            Label::Happy => "happy",
            Label::Sad => "sad",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == s)
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|l| l == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// One utterance: audio and/or precomputed sequence features, with its
/// label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: Option<PathBuf>,
    pub feature_path: Option<PathBuf>,
    pub label: Label,
    pub session_id: String,
    pub speaker_id: String,
}

/// Sequence-feature file sitting next to an audio file: `x.wav` pairs with
/// `x.seq.emns`.
pub fn sibling_feature_path(audio: &Path) -> PathBuf {
    let stem = audio.file_stem().unwrap_or_default().to_string_lossy();
    audio.with_file_name(format!("{stem}.seq.emns"))
}

/// Write the manifest CSV: columns path, label, session_id, speaker_id.
/// Paths that sit under the manifest's directory are stored relative to
/// it, so a corpus directory can move (or be reproduced elsewhere)
/// byte-identically.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path.display().to_string(), std::io::Error::other(e))
    })?;
    w.write_record(["path", "label", "session_id", "speaker_id"])
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    for r in records {
        let p = r
            .audio_path
            .as_ref()
            .or(r.feature_path.as_ref())
            .map(|p| p.strip_prefix(base).unwrap_or(p).display().to_string())
            .unwrap_or_default();
        w.write_record([&p, r.label.name(), &r.session_id, &r.speaker_id])
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a manifest CSV. Relative paths resolve against the manifest's
/// directory; a sibling `.seq.emns` file is attached when present.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        Error::io(path.display().to_string(), std::io::Error::other(e))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::InvalidData(format!("manifest row {line}: {e}")))?;
        if row.len() != 4 {
            return Err(Error::InvalidData(format!(
                "manifest row {line} has {} columns, expected 4",
                row.len()
            )));
        }
        let raw_path = PathBuf::from(&row[0]);
        let resolved = if raw_path.is_absolute() {
            raw_path
        } else {
            base.join(raw_path)
        };
        let label = Label::from_name(&row[1]).ok_or_else(|| {
            Error::InvalidData(format!(
                "manifest row {line}: unknown label `{}` (expected one of neutral/angry/happy/sad)",
                &row[1]
            ))
        })?;
        let id = resolved
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("row{line}"));
        let is_audio = resolved.extension().is_some_and(|e| e == "wav");
        let feature = if is_audio {
            let f = sibling_feature_path(&resolved);
            f.exists().then_some(f)
        } else {
            Some(resolved.clone())
        };
        records.push(UtteranceRecord {
            id,
            audio_path: is_audio.then_some(resolved),
            feature_path: feature,
            label,
            session_id: row[2].to_string(),
            speaker_id: row[3].to_string(),
        });
    }
    Ok(records)
}

// ── Fold planning ────────────────────────────────────────────────────

/// One leave-one-session-out fold: train on every other session, validate
/// on one speaker of the held-out session, test on the rest of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub held_out_session: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// One fold per session, in sorted session order. Within the held-out
/// session the validation speaker alternates deterministically by sorted
/// speaker order across folds; the remaining speakers test. Input record
/// order never changes the plan.
pub fn make_folds(records: &[UtteranceRecord]) -> Result<Vec<FoldPlan>> {
    let mut sessions: BTreeMap<&str, BTreeMap<&str, Vec<&UtteranceRecord>>> = BTreeMap::new();
    for r in records {
        sessions
            .entry(r.session_id.as_str())
            .or_default()
            .entry(r.speaker_id.as_str())
            .or_default()
            .push(r);
    }
    for (session, speakers) in &sessions {
        if speakers.len() < 2 {
            return Err(Error::InvalidData(format!(
                "session `{session}` has {} speaker(s); leave-one-session-out needs at least 2",
                speakers.len()
            )));
        }
    }
    let mut folds = Vec::with_capacity(sessions.len());
    for (fold_index, (held_session, speakers)) in sessions.iter().enumerate() {
        let speaker_names: Vec<&str> = speakers.keys().copied().collect();
        let val_speaker = speaker_names[fold_index % speaker_names.len()];
        let mut train_ids = Vec::new();
        let mut val_ids = Vec::new();
        let mut test_ids = Vec::new();
        for (session, spk_map) in &sessions {
            for (speaker, recs) in spk_map {
                let bucket: &mut Vec<String> = if session == held_session {
                    if *speaker == val_speaker {
                        &mut val_ids
                    } else {
                        &mut test_ids
                    }
                } else {
                    &mut train_ids
                };
                bucket.extend(recs.iter().map(|r| r.id.clone()));
            }
        }
        train_ids.sort();
        val_ids.sort();
        test_ids.sort();
        folds.push(FoldPlan {
            fold_index,
            held_out_session: held_session.to_string(),
            train_ids,
            val_ids,
            test_ids,
        });
    }
    Ok(folds)
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// Desk-scale synthetic corpus settings. Classes differ by spectro-temporal
/// texture (tone, harmonic stack, amplitude modulation, noise band) in the
/// audio and by an activated channel band in the sequence features, so the
/// two modalities carry partially independent information. `spec_merge`
/// makes two classes acoustically identical; `seq_merge` does the same in
/// the sequence features (the complementary-information construction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_sessions: usize,
    pub speakers_per_session: usize,
    /// Per speaker, balanced across the four classes.
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub noise_level: f32,
    pub seq_dim: usize,
    pub seq_base_len: usize,
    pub spec_merge: Option<(usize, usize)>,
    pub seq_merge: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_sessions: 2,
            speakers_per_session: 2,
            utterances_per_speaker: 40,
            duration_s: 2.0,
            sample_rate: 16_000,
            noise_level: 0.02,
            seq_dim: 16,
            seq_base_len: 24,
            spec_merge: None,
            seq_merge: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Spectrogram branch cannot tell happy from sad; sequence branch
    /// cannot tell neutral from angry. Fusion has to combine both.
    pub fn complementary(seed: u64) -> Self {
        SynthConfig {
            spec_merge: Some((2, 3)),
            seq_merge: Some((0, 1)),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sessions < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 sessions for leave-one-session-out".into(),
            ));
        }
        if self.speakers_per_session < 2 {
            return Err(Error::InvalidConfig("need at least 2 speakers per session".into()));
        }
        if self.utterances_per_speaker < NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "need at least {NUM_CLASSES} utterances per speaker for class balance"
            )));
        }
        if self.duration_s <= 0.0 || self.sample_rate == 0 {
            return Err(Error::InvalidConfig("bad duration or sample rate".into()));
        }
        Ok(())
    }

    fn merged(class: usize, merge: Option<(usize, usize)>) -> usize {
        match merge {
            Some((a, b)) if class == b => a,
            _ => class,
        }
    }
}

/// Synthesize one utterance's waveform. Texture by class (after
/// `spec_merge`): 0 steady tone, 1 harmonic stack, 2 amplitude-modulated
/// tone, 3 dense noise band. Speakers shift the fundamental.
pub fn synth_waveform(cfg: &SynthConfig, class: usize, speaker_index: usize, rng: &mut ChaCha8Rng) -> Waveform {
    let sig = SynthConfig::merged(class, cfg.spec_merge);
    let n = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    let sr = cfg.sample_rate as f64;
    let f0 = 180.0 + 22.0 * speaker_index as f64;
    // headroom for the noise-band class: its crest factor approaches 4 sigma
    let amp = 0.2f64;
    let two_pi = 2.0 * std::f64::consts::PI;

    // class-3 noise band: fixed component grid, random phases per utterance
    let noise_band: Vec<(f64, f64)> = (0..60)
        .map(|k| {
            let freq = 250.0 + 11.0 * k as f64 + 3.0 * speaker_index as f64;
            let phase: f64 = rng.random_range(0.0..two_pi);
            (freq, phase)
        })
        .collect();

    let mut clean = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let v = match sig {
            0 => (two_pi * f0 * t).sin(),
            1 => (1..=4)
                .map(|k| (two_pi * k as f64 * f0 * t).sin() / k as f64)
                .sum::<f64>(),
            2 => {
                let envelope = 0.55 + 0.45 * (two_pi * 8.0 * t).sin();
                envelope * (two_pi * f0 * t).sin()
            }
            _ => noise_band
                .iter()
                .map(|&(f, p)| (two_pi * f * t + p).sin())
                .sum::<f64>(),
        };
        clean.push(v);
    }
    // fixed RMS across classes: global level carries no class information,
    // only the spectro-temporal texture does
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-9);
    let gain = amp / rms;
    let samples = clean
        .iter()
        .map(|v| {
            let noise: f64 = rng.random_range(-1.0..1.0f64) * cfg.noise_level as f64;
            (v * gain + noise) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    }
}

/// Synthesize one utterance's sequence features `[t, D]`: the class (after
/// `seq_merge`) activates a 3-channel band with a temporal bump; a
/// speaker-dependent bias and noise sit on top. Lengths vary with the
/// utterance index so padding paths get exercised.
pub fn synth_sequence(
    cfg: &SynthConfig,
    class: usize,
    speaker_index: usize,
    utt_index: usize,
    rng: &mut ChaCha8Rng,
) -> FeatureMatrix {
    let sig = SynthConfig::merged(class, cfg.seq_merge);
    let t_len = cfg.seq_base_len + 2 * (utt_index % 5);
    let d = cfg.seq_dim;
    let band = (sig * 3) % d.max(1);
    let mut speaker_rng = ChaCha8Rng::seed_from_u64(seed::child(cfg.seed, &format!("spk{speaker_index}")));
    let bias: Vec<f32> = (0..d).map(|_| speaker_rng.random_range(-0.2..0.2f32)).collect();

    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        let bump = (std::f64::consts::PI * t as f64 / t_len as f64).sin() as f32;
        for ch in 0..d {
            let in_band = ch >= band && ch < band + 3;
            let cue = if in_band { 1.4 * bump } else { 0.0 };
            let noise: f32 = rng.random_range(-1.0..1.0) * cfg.noise_level;
            data.push(cue + bias[ch] * 0.3 + noise);
        }
    }
    FeatureMatrix::new(t_len, d, data, FeatureKind::Sequence).expect("consistent shape")
}

/// Generate the full corpus on disk: WAV plus sequence features per
/// utterance, and the manifest. Output is byte-identical for identical
/// configs (per-utterance RNG streams keyed by id).
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<UtteranceRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut records = Vec::new();
    for s in 0..cfg.num_sessions {
        for p in 0..cfg.speakers_per_session {
            let speaker_index = s * cfg.speakers_per_session + p;
            for u in 0..cfg.utterances_per_speaker {
                let class = u % NUM_CLASSES;
                let id = format!("s{s:02}p{p:02}u{u:03}");
                let mut rng = ChaCha8Rng::seed_from_u64(seed::child(cfg.seed, &id));
                let wav = synth_waveform(cfg, class, speaker_index, &mut rng);
                let seq = synth_sequence(cfg, class, speaker_index, u, &mut rng);
                let wav_path = out_dir.join(format!("{id}.wav"));
                let seq_path = out_dir.join(format!("{id}.seq.emns"));
                write_wav(&wav_path, &wav)?;
                write_feature_matrix(&seq_path, &seq)?;
                records.push(UtteranceRecord {
                    id,
                    audio_path: Some(wav_path),
                    feature_path: Some(seq_path),
                    label: Label::from_index(class).unwrap(),
                    session_id: format!("session{s}"),
                    speaker_id: format!("spk{s}_{p}"),
                });
            }
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &records)?;
    Ok(records)
}

// ── Oracle features (for the centroid sanity oracle) ─────────────────

/// Texture descriptors computed directly from a waveform: spectral
/// flatness, amplitude-modulation depth, and active-bin count. Designed to
/// be pitch-invariant so speakers cluster by class.
pub fn oracle_wav_features(w: &Waveform) -> [f64; 3] {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = w.samples.len().min(32_768).next_power_of_two().min(32_768);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(*w.samples.get(i).unwrap_or(&0.0) as f64, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bins = n / 2;
    let hz_per_bin = w.sample_rate as f64 / n as f64;
    let lo = (100.0 / hz_per_bin) as usize;
    let hi = ((4000.0 / hz_per_bin) as usize).min(bins);
    let mags: Vec<f64> = buf[lo..hi].iter().map(|c| c.norm()).collect();
    let max = mags.iter().cloned().fold(0.0, f64::max).max(1e-12);

    let log_mean = mags.iter().map(|m| (m + 1e-9).ln()).sum::<f64>() / mags.len() as f64;
    let arith_mean = mags.iter().sum::<f64>() / mags.len() as f64;
    let flatness = log_mean.exp() / arith_mean.max(1e-12);

    let frames = 64;
    let frame_len = w.samples.len() / frames;
    let energies: Vec<f64> = (0..frames)
        .map(|f| {
            w.samples[f * frame_len..(f + 1) * frame_len]
                .iter()
                .map(|&s| (s as f64).powi(2))
                .sum::<f64>()
        })
        .collect();
    let e_mean = energies.iter().sum::<f64>() / frames as f64;
    let e_var = energies.iter().map(|e| (e - e_mean).powi(2)).sum::<f64>() / frames as f64;
    let am_depth = e_var.sqrt() / e_mean.max(1e-12);

    let active = mags.iter().filter(|&&m| m > 0.25 * max).count() as f64;
    [flatness, am_depth, (1.0 + active).ln()]
}

/// Per-channel means: the class band dominates them.
pub fn oracle_seq_features(m: &FeatureMatrix) -> Vec<f64> {
    let mut means = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        for c in 0..m.cols {
            means[c] += m.at(r, c) as f64;
        }
    }
    for v in &mut means {
        *v /= m.rows as f64;
    }
    means
}

/// Nearest-centroid classification, used only as a test oracle: fit
/// per-class centroids on one set, classify another.
pub fn nearest_centroid_ua(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    num_classes: usize,
) -> Result<f64> {
    let dim = train.first().map(|(f, _)| f.len()).unwrap_or(0);
    let mut centroids = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (f, c) in train {
        for (acc, v) in centroids[*c].iter_mut().zip(f.iter()) {
            *acc += v;
        }
        counts[*c] += 1;
    }
    for (c, centroid) in centroids.iter_mut().enumerate() {
        if counts[c] == 0 {
            return Err(Error::InvalidData(format!("class {c} has no centroid data")));
        }
        for v in centroid.iter_mut() {
            *v /= counts[c] as f64;
        }
    }
    // per-dimension scale so heterogeneous features compare fairly
    let mut scale = vec![0.0f64; dim];
    for (f, _) in train {
        for (s, (v, c)) in scale.iter_mut().zip(f.iter().zip(centroids[0].iter())) {
            *s += (v - c).abs();
        }
    }
    for s in &mut scale {
        *s = (*s / train.len() as f64).max(1e-9);
    }
    let classify = |f: &[f64]| -> usize {
        centroids
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da: f64 = a
                    .iter()
                    .zip(f)
                    .zip(&scale)
                    .map(|((c, v), s)| ((c - v) / s).powi(2))
                    .sum();
                let db: f64 = b
                    .iter()
                    .zip(f)
                    .zip(&scale)
                    .map(|((c, v), s)| ((c - v) / s).powi(2))
                    .sum();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap()
    };
    let preds: Vec<usize> = test.iter().map(|(f, _)| classify(f)).collect();
    let labels: Vec<usize> = test.iter().map(|(_, c)| *c).collect();
    crate::metrics::unweighted_accuracy(&preds, &labels, num_classes)
}
