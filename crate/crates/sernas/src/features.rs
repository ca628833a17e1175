//! Audio-to-feature pipelines: fixed-shape spectrogram extraction from WAV
//! files and external sequence-feature ingestion with padding and pooling.

use std::io::Read;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic bytes + version of the binary matrix format.
pub const FEATURE_MAGIC: &[u8; 4] = b"EMNS";
pub const FEATURE_FORMAT_VERSION: u8 = 1;

// ── Waveform ─────────────────────────────────────────────────────────

/// Mono audio at a fixed sample rate, normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidData("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "waveform".into(),
                index: i,
            });
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a PCM WAV file (16-bit int or 32-bit float), downmixing stereo to
/// the channel mean and normalizing to [-1, 1].
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: zero channels",
            path.display()
        )));
    }
    let mono: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
            let samples =
                samples.map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
            downmix(&samples, channels, |s| s as f32 / 32768.0)
        }
        (hound::SampleFormat::Float, 32) => {
            let samples: std::result::Result<Vec<f32>, _> = reader.samples::<f32>().collect();
            let samples =
                samples.map_err(|e| Error::UnsupportedAudio(format!("{}: {e}", path.display())))?;
            downmix(&samples, channels, |s| s)
        }
        (format, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{}: {format:?} {bits}-bit not supported (use 16-bit PCM or 32-bit float)",
                path.display()
            )))
        }
    };
    Waveform::new(mono, spec.sample_rate)
}

fn downmix<T: Copy>(samples: &[T], channels: usize, to_f32: impl Fn(T) -> f32) -> Vec<f32> {
    if channels == 1 {
        return samples.iter().map(|&s| to_f32(s)).collect();
    }
    samples
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| to_f32(s)).sum::<f32>() / channels as f32)
        .collect()
}

/// Write a mono 16-bit PCM WAV (values clamped to [-1, 1]).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    Ok(())
}

/// Unify duration: truncation keeps the prefix, padding appends zeros.
pub fn pad_or_truncate(w: &Waveform, target_seconds: f64) -> Waveform {
    assert!(target_seconds > 0.0, "target duration must be positive");
    let target = (target_seconds * w.sample_rate as f64).round() as usize;
    let mut samples = w.samples.clone();
    samples.resize(target, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

// ── Spectrogram ──────────────────────────────────────────────────────

/// Fixed-shape spectrogram extraction settings. Defaults: 8 s at 16 kHz,
/// 25 ms Hamming windows with 14 ms overlap (11 ms hop), 140 log-magnitude
/// bins, pooled to 140 rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub target_duration_s: f64,
    pub sample_rate: u32,
    pub window_ms: f64,
    pub overlap_ms: f64,
    pub feature_bins: usize,
    pub output_rows: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            target_duration_s: 8.0,
            sample_rate: 16_000,
            window_ms: 25.0,
            overlap_ms: 14.0,
            feature_bins: 140,
            output_rows: 140,
        }
    }
}

impl SpectrogramConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Frame hop = window length - overlap.
    pub fn hop_samples(&self) -> usize {
        ((self.window_ms - self.overlap_ms) * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Frame count for an `n`-sample signal: floor((n - W) / H) + 1.
    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        let w = self.window_samples();
        let h = self.hop_samples();
        if n_samples < w {
            return Err(Error::InvalidData(format!(
                "window of {w} samples exceeds signal of {n_samples}"
            )));
        }
        Ok((n_samples - w) / h + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_ms > 0.0 && self.overlap_ms < self.window_ms) {
            return Err(Error::InvalidConfig(format!(
                "overlap {} ms must be inside (0, window {} ms)",
                self.overlap_ms, self.window_ms
            )));
        }
        let fft_bins = self.fft_size() / 2 + 1;
        if self.feature_bins == 0 || self.feature_bins > fft_bins {
            return Err(Error::InvalidConfig(format!(
                "feature_bins {} must be in [1, {fft_bins}]",
                self.feature_bins
            )));
        }
        if self.target_duration_s <= 0.0 || self.output_rows == 0 {
            return Err(Error::InvalidConfig(
                "duration and output_rows must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-shape 2-D feature with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub kind: FeatureKind,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Spectrogram,
    Sequence,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, kind: FeatureKind) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                context: "feature matrix".into(),
                detail: format!("{rows}x{cols} != {} values", data.len()),
            });
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            kind,
            source: String::new(),
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Row-major `[rows, cols]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.rows, self.cols], self.data.clone()).expect("consistent shape")
    }
}

/// Hamming-windowed FFT magnitudes, log(1 + |X|)-compressed, first
/// `feature_bins` bins kept, then non-overlapping average pooling down to
/// `output_rows` frames. Output is time x frequency.
pub fn spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidData(format!(
            "waveform at {} Hz, config expects {} Hz (resampling is out of scope)",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let expected = (cfg.target_duration_s * cfg.sample_rate as f64).round() as usize;
    if w.samples.len() != expected {
        return Err(Error::InvalidData(format!(
            "waveform has {} samples, config expects exactly {expected}; apply pad_or_truncate first",
            w.samples.len()
        )));
    }

    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let n_frames = cfg.frame_count(w.samples.len())?;
    let fft_size = cfg.fft_size();
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut raw = vec![0.0f32; n_frames * cfg.feature_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for f in 0..n_frames {
        let start = f * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(w.samples[start + i] as f64 * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for b in 0..cfg.feature_bins {
            raw[f * cfg.feature_bins + b] = (1.0 + buf[b].norm()).ln() as f32;
        }
    }

    let unpooled = FeatureMatrix::new(n_frames, cfg.feature_bins, raw, FeatureKind::Spectrogram)?;
    pool_to_shape(&unpooled, cfg.output_rows)
}

/// Non-overlapping average pooling along the frame axis: rows partition
/// into `target_rows` contiguous groups, as equal as possible with earlier
/// groups taking the remainder; each output row is the group mean.
pub fn pool_to_shape(m: &FeatureMatrix, target_rows: usize) -> Result<FeatureMatrix> {
    if m.rows < target_rows {
        return Err(Error::InvalidData(format!(
            "cannot pool {} rows up to {target_rows}",
            m.rows
        )));
    }
    if m.rows == target_rows {
        return Ok(m.clone());
    }
    let base = m.rows / target_rows;
    let remainder = m.rows % target_rows;
    let mut data = Vec::with_capacity(target_rows * m.cols);
    let mut row = 0usize;
    for g in 0..target_rows {
        let size = base + usize::from(g < remainder);
        for c in 0..m.cols {
            let mut acc = 0.0f64;
            for r in row..row + size {
                acc += m.at(r, c) as f64;
            }
            data.push((acc / size as f64) as f32);
        }
        row += size;
    }
    let mut out = FeatureMatrix::new(target_rows, m.cols, data, m.kind)?;
    out.source = m.source.clone();
    Ok(out)
}

// ── Binary matrix format ─────────────────────────────────────────────

/// Write the binary matrix format: magic "EMNS", version byte 1, u32-le
/// rows, u32-le cols, then rows*cols f32-le values, row-major.
pub fn write_feature_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + m.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(FEATURE_FORMAT_VERSION);
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read the binary matrix format, validating magic, version, payload
/// length, and finiteness.
pub fn ingest_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = [0u8; 13];
    file.read_exact(&mut header)
        .map_err(|_| Error::CorruptFeatureFile {
            path: path.display().to_string(),
            detail: "file shorter than header".into(),
        })?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(Error::CorruptFeatureFile {
            path: path.display().to_string(),
            detail: format!("bad magic {:?}", &header[0..4]),
        });
    }
    if header[4] != FEATURE_FORMAT_VERSION {
        return Err(Error::CorruptFeatureFile {
            path: path.display().to_string(),
            detail: format!("unsupported version {}", header[4]),
        });
    }
    let rows = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if payload.len() != rows * cols * 4 {
        return Err(Error::CorruptFeatureFile {
            path: path.display().to_string(),
            detail: format!(
                "header says {rows}x{cols} ({} bytes), payload has {}",
                rows * cols * 4,
                payload.len()
            ),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::CorruptFeatureFile {
            path: path.display().to_string(),
            detail: format!("non-finite value at index {i}"),
        });
    }
    let mut m = FeatureMatrix::new(rows, cols, data, FeatureKind::Sequence)?;
    m.source = path.display().to_string();
    Ok(m)
}

// ── Batch padding ────────────────────────────────────────────────────

/// Zero-pad row counts to the longest matrix and stack into `[B, T_max, D]`
/// with a boolean mask marking real frames.
pub fn pad_features_to_max(matrices: &[FeatureMatrix]) -> Result<(Tensor, Vec<Vec<bool>>)> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidData("empty feature batch".into()))?;
    let cols = first.cols;
    let t_max = matrices.iter().map(|m| m.rows).max().unwrap();
    let mut data = vec![0.0f32; matrices.len() * t_max * cols];
    let mut mask = Vec::with_capacity(matrices.len());
    for (b, m) in matrices.iter().enumerate() {
        if m.cols != cols {
            return Err(Error::ShapeMismatch {
                context: "pad_features_to_max".into(),
                detail: format!("column counts differ: {cols} vs {}", m.cols),
            });
        }
        data[b * t_max * cols..b * t_max * cols + m.rows * cols].copy_from_slice(&m.data);
        let mut row_mask = vec![false; t_max];
        row_mask[..m.rows].fill(true);
        mask.push(row_mask);
    }
    Ok((
        Tensor::from_vec(vec![matrices.len(), t_max, cols], data)?,
        mask,
    ))
}
