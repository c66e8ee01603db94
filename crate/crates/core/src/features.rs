//! Feature pipeline (pad/truncate → MFCC → time max-pool), the synthetic
//! speaker-structured generator, WAV ingestion and the EDSET container.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["happiness", "sadness", "anger", "neutral"];

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: usize,
    pub speaker: String,
}

/// One input map: rows are cepstral coefficients, columns are time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub label: usize,
    pub speaker: String,
}

impl FeatureMap {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Stacks maps into a network batch `(B, 1, time, coefficients)`.
pub fn batch_tensor(maps: &[&FeatureMap]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(maps.len() * rows * cols);
    for m in maps {
        if m.values.shape() != [rows, cols] {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", [rows, cols], m.values.shape())));
        }
        let v = m.values.data();
        for t in 0..cols {
            data.extend((0..rows).map(|r| v[r * cols + t]));
        }
    }
    Tensor::new(vec![maps.len(), 1, cols, rows], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub clip_seconds: usize,
    pub frame_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Non-overlapping max-pool width along time.
    pub pool: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16384,
            clip_seconds: 8,
            frame_length: 1024,
            hop: 256,
            n_mels: 128,
            n_mfcc: 128,
            fmin: 0.0,
            fmax: 8192.0,
            pool: 4,
        }
    }
}

impl MfccConfig {
    pub fn clip_samples(&self) -> usize {
        self.clip_seconds * self.sample_rate as usize
    }

    pub fn frames(&self) -> usize {
        self.clip_samples() / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_samples() % self.hop != 0 {
            return Err(Error::Config("clip length must be a whole number of hops".into()));
        }
        if self.n_mfcc > self.n_mels || self.n_mels == 0 {
            return Err(Error::Config("need 0 < n_mfcc <= n_mels".into()));
        }
        if self.pool == 0 || self.frames() % self.pool != 0 {
            return Err(Error::Config("pool width must divide the frame count".into()));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config("need 0 <= fmin < fmax <= Nyquist".into()));
        }
        Ok(())
    }
}

/// Zero-pads or truncates at the tail to exactly one clip.
pub fn pad_or_truncate(samples: &[f64], cfg: &MfccConfig) -> Vec<f64> {
    let n = cfg.clip_samples();
    let mut out: Vec<f64> = samples.iter().copied().take(n).collect();
    out.resize(n, 0.0);
    out
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Triangular mel filters over the `frame_length / 2 + 1` spectrum bins,
/// each scaled to unit area in Hz. Row-major `(n_mels, bins)`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bins = cfg.frame_length / 2 + 1;
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.frame_length as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
            let norm = 2.0 / (r - l);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    norm * up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Centre frequency (Hz) of each mel band.
pub fn mel_centers(cfg: &MfccConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Power spectra of the framed clip, one row of `frame_length/2 + 1` bins
/// per frame. Frames past the end read zeros.
pub fn power_frames(samples: &[f64], cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    if samples.len() != cfg.clip_samples() {
        return Err(Error::Contract(format!(
            "mfcc expects {} samples, got {}",
            cfg.clip_samples(),
            samples.len()
        )));
    }
    let n = cfg.frame_length;
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(cfg.frames());
    for f in 0..cfg.frames() {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

/// Log mel energies per frame, `(frames, n_mels)`.
pub fn log_mel_frames(samples: &[f64], cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let bank = mel_filterbank(cfg);
    Ok(power_frames(samples, cfg)?
        .iter()
        .map(|p| {
            bank.iter()
                .map(|w| w.iter().zip(p).map(|(a, b)| a * b).sum::<f64>().max(LOG_FLOOR).ln())
                .collect()
        })
        .collect())
}

pub const LOG_FLOOR: f64 = 1e-10;

/// Orthonormal DCT-II keeping the first `keep` coefficients.
pub fn dct2_ortho(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// MFCC matrix `(n_mfcc, frames)` for one clip.
pub fn mfcc(samples: &[f64], cfg: &MfccConfig) -> Result<Tensor> {
    cfg.validate()?;
    let logmel = log_mel_frames(samples, cfg)?;
    let frames = logmel.len();
    let mut data = vec![0.0; cfg.n_mfcc * frames];
    for (t, row) in logmel.iter().enumerate() {
        for (k, c) in dct2_ortho(row, cfg.n_mfcc).into_iter().enumerate() {
            data[k * frames + t] = c;
        }
    }
    Tensor::new(vec![cfg.n_mfcc, frames], data)
}

/// Non-overlapping max over `1 × pool` windows along the time axis.
pub fn pool_downsample(m: &Tensor, pool: usize) -> Result<Tensor> {
    let shape = m.shape();
    if shape.len() != 2 || pool == 0 || shape[1] % pool != 0 {
        return Err(Error::Contract(format!("cannot pool {shape:?} by 1x{pool}")));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let out_cols = cols / pool;
    let data = m
        .data()
        .chunks(cols)
        .flat_map(|row| row.chunks(pool).map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    Tensor::new(vec![rows, out_cols], data)
}

/// The full pipeline for one utterance.
pub fn utterance_features(u: &Utterance, cfg: &MfccConfig) -> Result<FeatureMap> {
    let samples = if u.sample_rate == cfg.sample_rate {
        u.samples.clone()
    } else {
        resample_linear(&u.samples, u.sample_rate, cfg.sample_rate)
    };
    let m = mfcc(&pad_or_truncate(&samples, cfg), cfg)?;
    Ok(FeatureMap {
        values: pool_downsample(&m, cfg.pool)?,
        label: u.label,
        speaker: u.speaker.clone(),
    })
}

pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let n_out = ((x.len() as f64) * to as f64 / from as f64).round() as usize;
    let ratio = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Reads a 16-bit PCM mono WAV, scaled to `[-1, 1]` and resampled to
/// `target_rate` when it differs.
pub fn load_wav(path: &Path, target_rate: u32) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Ingestion(format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Ingestion(format!(
            "{}: unsupported encoding ({:?}, {} bits)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok((resample_linear(&samples, spec.sample_rate, target_rate), spec.sample_rate))
}

/// Parameters of the synthetic generator, echoed into dataset headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub speakers: usize,
    pub per_class: usize,
    pub sigma: f64,
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
}

/// Speaker-structured synthetic maps. Class `k` places a ridge at its own
/// frequency band and modulates it over time at its own rate; each speaker
/// shifts the band and scales the gain; gaussian noise is added on top.
pub fn synth_dataset(p: &SynthParams, seed: u64) -> Result<Vec<FeatureMap>> {
    if p.rows < 4 || p.cols < 4 || p.classes == 0 || p.classes > CLASS_NAMES.len() || p.sigma < 0.0 {
        return Err(Error::Config(format!("bad generator parameters {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, p.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let rows = p.rows as f64;
    let width = rows / (3.0 * (p.classes + 1) as f64);
    let mut out = Vec::with_capacity(p.speakers * p.classes * p.per_class);
    for s in 0..p.speakers {
        let offset = rng.random_range(-0.04..0.04) * rows;
        let gain = rng.random_range(0.8..1.2);
        let speaker = format!("spk{s:02}");
        for k in 0..p.classes {
            let center = rows * (k + 1) as f64 / (p.classes + 1) as f64 + offset;
            let rate = (k + 1) as f64;
            let clean: Vec<f64> = (0..p.rows)
                .flat_map(|r| {
                    let band = (-0.5 * ((r as f64 - center) / width).powi(2)).exp();
                    (0..p.cols).map(move |t| {
                        let phase = 2.0 * PI * rate * t as f64 / p.cols as f64;
                        gain * band * (0.5 + 0.5 * phase.cos())
                    })
                })
                .collect();
            for _ in 0..p.per_class {
                let data = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
                out.push(FeatureMap {
                    values: Tensor::new(vec![p.rows, p.cols], data)?,
                    label: k,
                    speaker: speaker.clone(),
                });
            }
        }
    }
    Ok(out)
}

const EDSET_MAGIC: &[u8; 8] = b"EDSET\0v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdsetHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub dims: [usize; 2],
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    pub speakers: Vec<String>,
    pub seed: Option<u64>,
    pub generator: Option<serde_json::Value>,
}

/// A labelled collection of maps plus its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub maps: Vec<FeatureMap>,
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
    pub generator: Option<serde_json::Value>,
}

impl Dataset {
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.maps.first().map(|m| (m.rows(), m.cols()))
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Writes EDSET v1: magic, u64 header length, JSON header, then every map
    /// as row-major little-endian f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (rows, cols) = self.dims().unwrap_or((0, 0));
        let header = EdsetHeader {
            format: "EDSET".into(),
            version: 1,
            count: self.maps.len(),
            dims: [rows, cols],
            class_names: self.class_names.clone(),
            labels: self.maps.iter().map(|m| m.label).collect(),
            speakers: self.maps.iter().map(|m| m.speaker.clone()).collect(),
            seed: self.seed,
            generator: self.generator.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
        w.write_all(EDSET_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut payload = Vec::with_capacity(self.maps.len() * rows * cols * 4);
        for m in &self.maps {
            if m.values.shape() != [rows, cols] {
                return Err(Error::Shape("dataset maps differ in shape".into()));
            }
            for v in m.values.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::parse("edset", m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != EDSET_MAGIC {
            return Err(bad("not an EDSET v1 file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 32 {
            return Err(bad("implausible header length"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let h: EdsetHeader = serde_json::from_slice(&json).map_err(|e| Error::parse("edset.header", e.to_string()))?;
        if h.format != "EDSET" || h.version != 1 {
            return Err(bad("unsupported format or version"));
        }
        if h.labels.len() != h.count || h.speakers.len() != h.count {
            return Err(bad("label/speaker lists disagree with count"));
        }
        if let Some(l) = h.labels.iter().find(|&&l| l >= h.class_names.len()) {
            return Err(Error::parse("edset.labels", format!("label {l} outside class list")));
        }
        let [rows, cols] = h.dims;
        let per = rows * cols;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != h.count * per * 4 {
            return Err(bad("payload size does not match header"));
        }
        let maps = payload
            .chunks_exact(per * 4)
            .zip(h.labels.iter().zip(&h.speakers))
            .map(|(chunk, (&label, speaker))| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect();
                Ok(FeatureMap {
                    values: Tensor::new(vec![rows, cols], data)?,
                    label,
                    speaker: speaker.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            maps,
            class_names: h.class_names,
            seed: h.seed,
            generator: h.generator,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Rounds every value through f32, as a save/load cycle would.
    pub fn quantized(mut self) -> Self {
        for m in &mut self.maps {
            for v in m.values.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests;
