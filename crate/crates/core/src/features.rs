//! Frame embeddings: a deterministic log-mel statistics front-end and a
//! reader for embeddings computed offline by an external model.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Frame;
use crate::error::{Error, Result};

/// Fixed-length representation of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub frame_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrontEndKind {
    #[default]
    Logmel,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontEndConfig {
    pub kind: FrontEndKind,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// Expected dimension of precomputed embeddings.
    pub embedding_dim: usize,
    /// Binary store of precomputed embeddings; the index sits next to it with a `.json` suffix.
    pub store: Option<PathBuf>,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            kind: FrontEndKind::Logmel,
            sample_rate: 16_000,
            n_fft: 512,
            win_length: 400,
            hop_length: 160,
            n_mels: 64,
            fmin: 125.0,
            fmax: 7500.0,
            log_floor: 1e-6,
            embedding_dim: 128,
            store: None,
        }
    }
}

impl FrontEndConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::config("frontend.n_mels", "must be at least 1"));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::config("frontend.fmin", "must be below fmax"));
        }
        if self.fmax > f64::from(self.sample_rate) / 2.0 {
            return Err(Error::config("frontend.fmax", "exceeds the Nyquist frequency"));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::config("frontend.win_length", "must be in 1..=n_fft"));
        }
        if self.hop_length == 0 {
            return Err(Error::config("frontend.hop_length", "must be positive"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("frontend.log_floor", "must be positive"));
        }
        if self.kind == FrontEndKind::Precomputed && self.store.is_none() {
            return Err(Error::config(
                "frontend.store",
                "required for the precomputed front-end",
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            FrontEndKind::Logmel => 2 * self.n_mels,
            FrontEndKind::Precomputed => self.embedding_dim,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` band edges in Hz, equally spaced on the HTK mel scale.
pub fn mel_band_edges(cfg: &FrontEndConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

struct MelBand {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Log-mel front-end: STFT power, triangular mel filterbank, log, then
/// per-band mean and standard deviation over time.
pub struct LogMelFrontEnd {
    cfg: FrontEndConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bands: Vec<MelBand>,
}

impl LogMelFrontEnd {
    pub fn new(cfg: &FrontEndConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // periodic Hann
        let window = (0..cfg.win_length)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64;
                0.5 - 0.5 * x.cos()
            })
            .collect();
        let edges = mel_band_edges(cfg);
        let bin_hz = f64::from(cfg.sample_rate) / cfg.n_fft as f64;
        let n_bins = cfg.n_fft / 2 + 1;
        let bands = (0..cfg.n_mels)
            .map(|j| {
                let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
                let mut first_bin = usize::MAX;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0);
                    if w > 0.0 {
                        if first_bin == usize::MAX {
                            first_bin = k;
                        }
                        weights.resize(k - first_bin, 0.0);
                        weights.push(w);
                    }
                }
                MelBand {
                    first_bin: first_bin.min(n_bins),
                    weights,
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            fft,
            window,
            bands,
        })
    }

    pub fn config(&self) -> &FrontEndConfig {
        &self.cfg
    }

    pub fn frame_samples(&self) -> usize {
        self.cfg.sample_rate as usize
    }

    /// Log mel energies, one row of `n_mels` per spectral frame.
    pub fn log_mel_spectrogram(&self, samples: &[f32]) -> Vec<Vec<f64>> {
        let cfg = &self.cfg;
        if samples.len() < cfg.win_length {
            return Vec::new();
        }
        let n_frames = 1 + (samples.len() - cfg.win_length) / cfg.hop_length;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; cfg.n_fft / 2 + 1];
        let mut rows = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let start = t * cfg.hop_length;
            for (i, c) in buf.iter_mut().enumerate() {
                let v = if i < cfg.win_length {
                    f64::from(samples[start + i]) * self.window[i]
                } else {
                    0.0
                };
                *c = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = self
                .bands
                .iter()
                .map(|band| {
                    let e: f64 = band
                        .weights
                        .iter()
                        .zip(&power[band.first_bin..])
                        .map(|(w, p)| w * p)
                        .sum();
                    (e + cfg.log_floor).ln()
                })
                .collect();
            rows.push(row);
        }
        rows
    }

    pub fn embed_samples(&self, samples: &[f32], frame_index: usize) -> Result<Embedding> {
        let expected = self.frame_samples();
        if samples.len() != expected {
            return Err(Error::FrameLength {
                expected,
                actual: samples.len(),
            });
        }
        let rows = self.log_mel_spectrogram(samples);
        let n_mels = self.cfg.n_mels;
        let n = rows.len() as f64;
        // shifted by the first row so constant bands give exact means and zero spread
        let pivot = rows[0].clone();
        let mut values = vec![0.0; 2 * n_mels];
        for row in &rows {
            for (m, v) in row.iter().enumerate() {
                values[m] += v - pivot[m];
            }
        }
        for (m, v) in values[..n_mels].iter_mut().enumerate() {
            *v = pivot[m] + *v / n;
        }
        for row in &rows {
            for (m, v) in row.iter().enumerate() {
                let d = v - values[m];
                values[n_mels + m] += d * d;
            }
        }
        for v in &mut values[n_mels..] {
            *v = (*v / n).sqrt();
        }
        Ok(Embedding {
            values,
            frame_index,
        })
    }

    pub fn embed(&self, frame: &Frame) -> Result<Embedding> {
        self.embed_samples(&frame.samples, frame.index)
    }
}

/// Convenience wrapper around [`LogMelFrontEnd::embed`].
pub fn logmel_embed(frame: &Frame, cfg: &FrontEndConfig) -> Result<Embedding> {
    LogMelFrontEnd::new(cfg)?.embed(frame)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct StoreEntry {
    pub offset: u64,
    pub dim: usize,
}

pub fn store_key(recording: &str, frame_index: usize) -> String {
    format!("{recording}:{frame_index}")
}

pub fn default_index_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Externally computed embeddings: little-endian f32 vectors in one binary
/// file, indexed by a JSON object `"recording:frame" -> {offset, dim}`.
pub struct EmbeddingStore {
    file: Mutex<File>,
    index: BTreeMap<String, StoreEntry>,
}

impl EmbeddingStore {
    pub fn open(data: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(data.as_ref())?;
        let index: BTreeMap<String, StoreEntry> =
            serde_json::from_reader(std::io::BufReader::new(File::open(index.as_ref())?))?;
        Ok(Self {
            file: Mutex::new(file),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, recording: &str, frame_index: usize) -> bool {
        self.index.contains_key(&store_key(recording, frame_index))
    }

    pub fn get_raw(&self, recording: &str, frame_index: usize) -> Result<Vec<f32>> {
        let key = store_key(recording, frame_index);
        let entry = *self
            .index
            .get(&key)
            .ok_or_else(|| Error::MissingEmbedding(key.clone()))?;
        let mut bytes = vec![0u8; entry.dim * 4];
        {
            let mut file = self.file.lock().expect("embedding store lock poisoned");
            file.seek(SeekFrom::Start(entry.offset))?;
            file.read_exact(&mut bytes)?;
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Looks up the embedding of one frame, checking it has the configured dimension.
pub fn load_embedding(
    store: &EmbeddingStore,
    recording: &str,
    frame_index: usize,
    expected_dim: usize,
) -> Result<Embedding> {
    let key = store_key(recording, frame_index);
    let entry = store
        .index
        .get(&key)
        .ok_or_else(|| Error::MissingEmbedding(key.clone()))?;
    if entry.dim != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            found: entry.dim,
        });
    }
    let raw = store.get_raw(recording, frame_index)?;
    Ok(Embedding {
        values: raw.into_iter().map(f64::from).collect(),
        frame_index,
    })
}

/// Builds an [`EmbeddingStore`] file pair.
pub struct EmbeddingStoreWriter {
    data: BufWriter<File>,
    index_path: PathBuf,
    index: BTreeMap<String, StoreEntry>,
    offset: u64,
}

impl EmbeddingStoreWriter {
    pub fn create(data: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            data: BufWriter::new(File::create(data.as_ref())?),
            index_path: index.as_ref().to_path_buf(),
            index: BTreeMap::new(),
            offset: 0,
        })
    }

    pub fn insert(&mut self, recording: &str, frame_index: usize, values: &[f32]) -> Result<()> {
        for v in values {
            self.data.write_all(&v.to_le_bytes())?;
        }
        self.index.insert(
            store_key(recording, frame_index),
            StoreEntry {
                offset: self.offset,
                dim: values.len(),
            },
        );
        self.offset += 4 * values.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.data.flush()?;
        let f = BufWriter::new(File::create(&self.index_path)?);
        serde_json::to_writer(f, &self.index)?;
        Ok(())
    }
}

/// The configured mapping from frames to embeddings.
pub enum FrontEnd {
    LogMel(LogMelFrontEnd),
    Precomputed { store: EmbeddingStore, dim: usize },
}

impl FrontEnd {
    pub fn from_config(cfg: &FrontEndConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            FrontEndKind::Logmel => Ok(FrontEnd::LogMel(LogMelFrontEnd::new(cfg)?)),
            FrontEndKind::Precomputed => {
                let data = cfg.store.as_ref().expect("validated");
                Ok(FrontEnd::Precomputed {
                    store: EmbeddingStore::open(data, default_index_path(data))?,
                    dim: cfg.embedding_dim,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FrontEnd::LogMel(fe) => 2 * fe.config().n_mels,
            FrontEnd::Precomputed { dim, .. } => *dim,
        }
    }

    /// Embeds a frame of `recording`.
    pub fn embed(&self, recording: &str, frame: &Frame) -> Result<Embedding> {
        match self {
            FrontEnd::LogMel(fe) => fe.embed(frame),
            FrontEnd::Precomputed { store, dim } => {
                load_embedding(store, recording, frame.index, *dim)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(samples: Vec<f32>) -> Frame {
        Frame {
            samples,
            start_offset: 0.0,
            index: 1,
        }
    }

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect()
    }

    #[test]
    fn silence_gives_floor_and_zero_spread() {
        let cfg = FrontEndConfig::default();
        let e = logmel_embed(&frame(vec![0.0; 16_000]), &cfg).unwrap();
        assert_eq!(e.values.len(), 128);
        let floor = cfg.log_floor.ln();
        for m in 0..64 {
            assert!((e.values[m] - floor).abs() < 1e-12);
            assert_eq!(e.values[64 + m], 0.0);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let cfg = FrontEndConfig::default();
        let err = logmel_embed(&frame(vec![0.0; 100]), &cfg).unwrap_err();
        assert!(matches!(err, Error::FrameLength { expected: 16_000, actual: 100 }));
    }

    #[test]
    fn ninety_eight_spectral_frames() {
        let fe = LogMelFrontEnd::new(&FrontEndConfig::default()).unwrap();
        assert_eq!(fe.log_mel_spectrogram(&vec![0.1; 16_000]).len(), 98);
    }

    #[test]
    fn tone_peaks_in_covering_band() {
        let cfg = FrontEndConfig::default();
        let e = logmel_embed(&frame(sine(1000.0, 0.5, 16_000)), &cfg).unwrap();
        // independent edge computation
        let lo = 2595.0 * (1.0f64 + 125.0 / 700.0).log10();
        let hi = 2595.0 * (1.0f64 + 7500.0 / 700.0).log10();
        let edges: Vec<f64> = (0..66)
            .map(|i| 700.0 * (10f64.powf((lo + (hi - lo) * i as f64 / 65.0) / 2595.0) - 1.0))
            .collect();
        let weight = |j: usize| {
            let (a, b, c) = (edges[j], edges[j + 1], edges[j + 2]);
            ((1000.0 - a) / (b - a)).min((c - 1000.0) / (c - b)).max(0.0)
        };
        let expected = (0..64)
            .max_by(|&i, &j| weight(i).partial_cmp(&weight(j)).unwrap())
            .unwrap();
        let got = (0..64)
            .max_by(|&i, &j| e.values[i].partial_cmp(&e.values[j]).unwrap())
            .unwrap();
        assert!(edges[got] < 1000.0 && 1000.0 < edges[got + 2]);
        assert_eq!(got, expected);
    }

    #[test]
    fn scaling_shifts_log_means() {
        let cfg = FrontEndConfig::default();
        let fe = LogMelFrontEnd::new(&cfg).unwrap();
        let mut state = 12345u64;
        let noise: Vec<f32> = (0..16_000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32 * 1.6
            })
            .collect();
        let c = 1.2f32;
        let scaled: Vec<f32> = noise.iter().map(|v| v * c).collect();
        let a = fe.embed_samples(&noise, 1).unwrap();
        let b = fe.embed_samples(&scaled, 1).unwrap();
        let shift = (f64::from(c) * f64::from(c)).ln();
        for m in 0..64 {
            assert!((b.values[m] - a.values[m] - shift).abs() < 1e-6, "band {m}");
            assert!((b.values[64 + m] - a.values[64 + m]).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_frames_identical_embeddings() {
        let fe = LogMelFrontEnd::new(&FrontEndConfig::default()).unwrap();
        let s = sine(440.0, 0.3, 16_000);
        let a = fe.embed_samples(&s, 1).unwrap();
        let b = fe.embed_samples(&s, 1).unwrap();
        assert!(a
            .values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn store_lookup_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("emb.f32");
        let index = default_index_path(&data);
        let mut w = EmbeddingStoreWriter::create(&data, &index).unwrap();
        let v: Vec<f32> = (0..128).map(|i| i as f32 * 0.37 - 3.1).collect();
        let big = vec![0.5f32; 1024];
        w.insert("rec", 1, &v).unwrap();
        w.insert("rec", 2, &big).unwrap();
        w.finish().unwrap();

        let store = EmbeddingStore::open(&data, &index).unwrap();
        let e = load_embedding(&store, "rec", 1, 128).unwrap();
        let back: Vec<f32> = e.values.iter().map(|&x| x as f32).collect();
        assert_eq!(back, v);

        match load_embedding(&store, "rec", 9, 128) {
            Err(Error::MissingEmbedding(k)) => assert_eq!(k, "rec:9"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_embedding(&store, "rec", 2, 128),
            Err(Error::DimensionMismatch { expected: 128, found: 1024 })
        ));
    }
}
