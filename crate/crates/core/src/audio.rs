//! WAV decoding, band-limited resampling and the overlapping frame stream.
//!
//! The same framing is used for training clips and for long recordings, so
//! both the in-memory [`window`] iterator and the chunked [`Framer`] produce
//! identical frames for identical samples.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Copy of the samples in `[start_s, end_s)`, clamped to the buffer.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> AudioBuffer {
        let rate = f64::from(self.sample_rate);
        let a = ((start_s * rate).round().max(0.0) as usize).min(self.len());
        let b = ((end_s * rate).round().max(0.0) as usize).clamp(a, self.len());
        AudioBuffer::new(self.samples[a..b].to_vec(), self.sample_rate)
    }
}

pub(crate) fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let power: f64 = samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
    (power / samples.len() as f64).sqrt()
}

/// Chunked reader that down-mixes a PCM WAV file to mono `[-1, 1]` samples.
pub struct WavStream {
    reader: hound::WavReader<BufReader<File>>,
    path: PathBuf,
    channels: usize,
    format: SampleFormat,
}

#[derive(Debug, Clone, Copy)]
enum SampleFormat {
    Int(u16),
    Float,
}

fn open_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "format not supported by the WAV reader".into(),
        },
        other => Error::Unreadable {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

impl WavStream {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path).map_err(|e| open_error(path, e))?;
        let spec = reader.spec();
        let format = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, b @ (8 | 16 | 24 | 32)) => SampleFormat::Int(b),
            (hound::SampleFormat::Float, 32) => SampleFormat::Float,
            (fmt, bits) => {
                return Err(Error::UnsupportedEncoding {
                    path: path.to_path_buf(),
                    detail: format!("{fmt:?} with {bits} bits per sample"),
                })
            }
        };
        if spec.channels == 0 {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: "zero channels".into(),
            });
        }
        if spec.sample_rate == 0 {
            return Err(Error::InvalidSampleRate(0));
        }
        Ok(Self {
            reader,
            path: path.to_path_buf(),
            channels: usize::from(spec.channels),
            format,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.reader.spec().sample_rate
    }

    /// Number of mono samples in the file, from the header.
    pub fn len_frames(&self) -> usize {
        self.reader.duration() as usize
    }

    /// Reads up to `max_frames` mono samples. Returns an empty vector at end of stream.
    pub fn read_chunk(&mut self, max_frames: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(max_frames);
        let channels = self.channels;
        let inv_channels = 1.0 / channels as f64;
        let mut acc = 0.0f64;
        let mut ch = 0usize;
        let path = &self.path;
        let wrap = |e: hound::Error| Error::Unreadable {
            path: path.clone(),
            reason: e.to_string(),
        };
        match self.format {
            SampleFormat::Int(bits) => {
                let scale = 1.0 / f64::from(1u32 << (bits - 1));
                for s in self.reader.samples::<i32>() {
                    acc += f64::from(s.map_err(wrap)?) * scale;
                    ch += 1;
                    if ch == channels {
                        out.push((acc * inv_channels).clamp(-1.0, 1.0) as f32);
                        acc = 0.0;
                        ch = 0;
                        if out.len() == max_frames {
                            break;
                        }
                    }
                }
            }
            SampleFormat::Float => {
                for s in self.reader.samples::<f32>() {
                    let v = f64::from(s.map_err(wrap)?);
                    acc += if v.is_finite() { v } else { 0.0 };
                    ch += 1;
                    if ch == channels {
                        out.push((acc * inv_channels).clamp(-1.0, 1.0) as f32);
                        acc = 0.0;
                        ch = 0;
                        if out.len() == max_frames {
                            break;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Decodes a whole PCM WAV file into a mono buffer.
pub fn decode_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut stream = WavStream::open(path)?;
    let rate = stream.sample_rate();
    let mut samples = Vec::with_capacity(stream.len_frames());
    loop {
        let chunk = stream.read_chunk(1 << 16)?;
        if chunk.is_empty() {
            break;
        }
        samples.extend_from_slice(&chunk);
    }
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    Ok(AudioBuffer::new(samples, rate))
}

/// Writes a mono buffer as 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &buf.samples {
        let v = (f64::from(s).clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

// Windowed-sinc interpolation table: zero crossings per side and table
// resolution per zero crossing.
const SINC_ZERO_CROSSINGS: usize = 16;
const SINC_OVERSAMPLE: usize = 512;
const KAISER_BETA: f64 = 8.0;
const ROLLOFF: f64 = 0.97;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc_table() -> Vec<f64> {
    let n = SINC_ZERO_CROSSINGS * SINC_OVERSAMPLE + 2;
    let norm = bessel_i0(KAISER_BETA);
    (0..n)
        .map(|j| {
            let u = j as f64 / SINC_OVERSAMPLE as f64;
            if u >= SINC_ZERO_CROSSINGS as f64 {
                return 0.0;
            }
            let r = u / SINC_ZERO_CROSSINGS as f64;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
            let sinc = if u == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * u).sin() / (std::f64::consts::PI * u)
            };
            sinc * window
        })
        .collect()
}

/// Streaming band-limited sample-rate converter (Kaiser-windowed sinc).
///
/// Accepts input in arbitrary chunks; the concatenated output equals that of
/// converting the whole signal at once.
pub struct Resampler {
    source_rate: u32,
    target_rate: u32,
    cutoff: f64,
    half_width: f64,
    table: Vec<f64>,
    buffer: Vec<f32>,
    buffer_start: u64,
    received: u64,
    produced: u64,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self> {
        if source_rate == 0 {
            return Err(Error::InvalidSampleRate(0));
        }
        if target_rate == 0 {
            return Err(Error::InvalidSampleRate(0));
        }
        let ratio = f64::from(target_rate) / f64::from(source_rate);
        let cutoff = ratio.min(1.0) * ROLLOFF;
        let table = if source_rate == target_rate {
            Vec::new()
        } else {
            sinc_table()
        };
        Ok(Self {
            source_rate,
            target_rate,
            cutoff,
            half_width: SINC_ZERO_CROSSINGS as f64 / cutoff,
            table,
            buffer: Vec::new(),
            buffer_start: 0,
            received: 0,
            produced: 0,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.source_rate == self.target_rate
    }

    /// Input position (in source samples) of output sample `n`.
    fn position(&self, n: u64) -> f64 {
        let num = u128::from(n) * u128::from(self.source_rate);
        let whole = num / u128::from(self.target_rate);
        let frac = num % u128::from(self.target_rate);
        whole as f64 + frac as f64 / f64::from(self.target_rate)
    }

    fn kernel(&self, t: f64) -> f64 {
        let u = (t.abs() * self.cutoff) * SINC_OVERSAMPLE as f64;
        let j = u as usize;
        if j + 1 >= self.table.len() {
            return 0.0;
        }
        let frac = u - j as f64;
        let v = self.table[j] + (self.table[j + 1] - self.table[j]) * frac;
        v * self.cutoff
    }

    fn sample_at(&self, idx: i64) -> f64 {
        if idx < self.buffer_start as i64 {
            return 0.0;
        }
        let rel = (idx - self.buffer_start as i64) as usize;
        self.buffer.get(rel).map_or(0.0, |&s| f64::from(s))
    }

    fn emit(&mut self, out: &mut Vec<f32>, limit: u64, finishing: bool) {
        loop {
            if self.produced >= limit {
                break;
            }
            let x = self.position(self.produced);
            let hi = (x + self.half_width).floor() as i64;
            if !finishing && hi >= self.received as i64 {
                break;
            }
            let lo = (x - self.half_width).ceil() as i64;
            let mut acc = 0.0;
            for k in lo.max(0)..=hi {
                acc += self.sample_at(k) * self.kernel(x - k as f64);
            }
            out.push(acc.clamp(-1.0, 1.0) as f32);
            self.produced += 1;
        }
        // drop input no longer needed by the next output
        let next_lo = (self.position(self.produced) - self.half_width).ceil() as i64 - 1;
        if next_lo > self.buffer_start as i64 {
            let drop = ((next_lo - self.buffer_start as i64) as usize).min(self.buffer.len());
            self.buffer.drain(..drop);
            self.buffer_start += drop as u64;
        }
    }

    fn total_outputs(&self) -> u64 {
        let num = u128::from(self.received) * u128::from(self.target_rate);
        num.div_ceil(u128::from(self.source_rate)) as u64
    }

    /// Feeds a chunk of input and returns the output samples that are complete.
    pub fn process(&mut self, input: &[f32]) -> Vec<f32> {
        if self.is_identity() {
            return input.to_vec();
        }
        self.buffer.extend_from_slice(input);
        self.received += input.len() as u64;
        let mut out = Vec::new();
        self.emit(&mut out, u64::MAX, false);
        out
    }

    /// Flushes the tail, treating samples past the end as zero.
    pub fn finish(&mut self) -> Vec<f32> {
        if self.is_identity() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let limit = self.total_outputs();
        self.emit(&mut out, limit, true);
        out
    }
}

/// Converts a buffer to `target_rate`. Same-rate conversion returns an identical copy.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidSampleRate(0));
    }
    if buf.sample_rate == target_rate {
        return Ok(buf.clone());
    }
    let mut rs = Resampler::new(buf.sample_rate, target_rate)?;
    let mut out = rs.process(&buf.samples);
    out.extend(rs.finish());
    Ok(AudioBuffer::new(out, target_rate))
}

/// Frame length, overlap and working sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Frame length in seconds.
    pub tau: f64,
    /// Fraction of a frame shared with the next one.
    pub overlap: f64,
    pub target_rate: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            overlap: 0.8,
            target_rate: 16_000,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("window.tau", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config("window.overlap", "must lie in [0, 1)"));
        }
        if self.target_rate == 0 {
            return Err(Error::config("window.target_rate", "must be positive"));
        }
        if self.frame_len() == 0 || self.hop_len() == 0 {
            return Err(Error::config(
                "window",
                "frame and hop must span at least one sample",
            ));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        (self.tau * f64::from(self.target_rate)).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.tau * (1.0 - self.overlap) * f64::from(self.target_rate)).round() as usize
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_len() as f64 / f64::from(self.target_rate)
    }

    /// Merge horizon in frames, `2 / (1 - overlap)`. Must be a positive integer.
    pub fn lookback(&self) -> Result<usize> {
        let l = 2.0 / (1.0 - self.overlap);
        let r = l.round();
        if r < 1.0 || (l - r).abs() > 1e-6 {
            return Err(Error::config(
                "window.overlap",
                format!("lookback 2/(1-overlap) = {l} is not an integer"),
            ));
        }
        Ok(r as usize)
    }

    /// Number of frames covering `n_samples` samples.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        frame_count(n_samples, self.frame_len(), self.hop_len())
    }

    pub fn frame_start(&self, index: usize) -> f64 {
        (index - 1) as f64 * self.hop_seconds()
    }
}

pub(crate) fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    n.saturating_sub(frame_len).div_ceil(hop) + 1
}

/// One analysis window. `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub samples: Vec<f32>,
    pub start_offset: f64,
    pub index: usize,
}

/// Lazy iterator over the frames of an in-memory buffer.
pub struct Frames<'a> {
    samples: &'a [f32],
    frame_len: usize,
    hop: usize,
    rate: f64,
    next: usize,
    total: usize,
}

impl Iterator for Frames<'_> {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        if self.next >= self.total {
            return None;
        }
        let start = self.next * self.hop;
        let mut samples = vec![0.0f32; self.frame_len];
        if start < self.samples.len() {
            let end = (start + self.frame_len).min(self.samples.len());
            samples[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        self.next += 1;
        Some(Frame {
            samples,
            start_offset: start as f64 / self.rate,
            index: self.next,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Frames<'_> {}

/// Splits a buffer into overlapping frames, zero-padding the last one.
///
/// The buffer must already be at `cfg.target_rate`.
pub fn window<'a>(buf: &'a AudioBuffer, cfg: &WindowConfig) -> Frames<'a> {
    let frame_len = cfg.frame_len();
    let hop = cfg.hop_len();
    Frames {
        samples: &buf.samples,
        frame_len,
        hop,
        rate: f64::from(buf.sample_rate),
        next: 0,
        total: frame_count(buf.len(), frame_len, hop),
    }
}

/// Incremental framer for streams too long to hold in memory.
pub struct Framer {
    frame_len: usize,
    hop: usize,
    rate: f64,
    pending: Vec<f32>,
    /// absolute index of `pending[0]`
    pending_start: usize,
    received: usize,
    emitted: usize,
}

impl Framer {
    pub fn new(cfg: &WindowConfig) -> Self {
        Self {
            frame_len: cfg.frame_len(),
            hop: cfg.hop_len(),
            rate: f64::from(cfg.target_rate),
            pending: Vec::new(),
            pending_start: 0,
            received: 0,
            emitted: 0,
        }
    }

    fn make_frame(&self, start: usize) -> Frame {
        let mut samples = vec![0.0f32; self.frame_len];
        let rel = start - self.pending_start;
        let avail = self.pending.len().saturating_sub(rel).min(self.frame_len);
        samples[..avail].copy_from_slice(&self.pending[rel..rel + avail]);
        Frame {
            samples,
            start_offset: start as f64 / self.rate,
            index: self.emitted + 1,
        }
    }

    /// Appends samples and returns every frame that is now complete.
    pub fn push(&mut self, chunk: &[f32]) -> Vec<Frame> {
        self.pending.extend_from_slice(chunk);
        self.received += chunk.len();
        let mut frames = Vec::new();
        loop {
            let start = self.emitted * self.hop;
            if start + self.frame_len > self.received {
                break;
            }
            frames.push(self.make_frame(start));
            self.emitted += 1;
        }
        let keep_from = self.emitted * self.hop;
        if keep_from > self.pending_start {
            let drop = (keep_from - self.pending_start).min(self.pending.len());
            self.pending.drain(..drop);
            self.pending_start += drop;
        }
        frames
    }

    /// Emits the zero-padded final frame, if the stream needs one.
    pub fn finish(&mut self) -> Option<Frame> {
        let total = frame_count(self.received, self.frame_len, self.hop);
        if self.emitted >= total {
            return None;
        }
        let frame = self.make_frame(self.emitted * self.hop);
        self.emitted += 1;
        Some(frame)
    }
}
