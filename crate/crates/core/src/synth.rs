//! Synthetic soundscapes: background noise with planted tone-complex events
//! and exact ground truth.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{decode_wav, resample, write_wav, AudioBuffer};
use crate::dataset::{Label, LabeledClip, Manifest, Partition, Repertoire};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    White,
    Pink,
    /// A recording, tiled to the requested duration.
    File { path: PathBuf },
}

/// Recipe of one event class: a harmonic tone complex with amplitude modulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventClass {
    pub name: String,
    pub f0_hz: f64,
    pub harmonics: usize,
    pub am_rate_hz: f64,
    /// Event duration range in seconds.
    pub duration_s: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoundscapeSpec {
    pub duration_s: f64,
    pub sample_rate: u32,
    pub background: Background,
    pub background_rms: f64,
    pub classes: Vec<EventClass>,
    pub n_events: usize,
    /// Minimum silence between events and at both ends.
    pub min_gap_s: f64,
    pub snr_db: (f64, f64),
    /// Relative spread of the fundamental from one event to the next.
    pub f0_jitter: f64,
}

impl Default for SoundscapeSpec {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            sample_rate: 16_000,
            background: Background::Pink,
            background_rms: 0.02,
            classes: vec![
                EventClass {
                    name: "low".into(),
                    f0_hz: 300.0,
                    harmonics: 4,
                    am_rate_hz: 4.0,
                    duration_s: (1.0, 3.0),
                },
                EventClass {
                    name: "high".into(),
                    f0_hz: 1200.0,
                    harmonics: 3,
                    am_rate_hz: 7.0,
                    duration_s: (1.0, 3.0),
                },
            ],
            n_events: 10,
            min_gap_s: 2.0,
            snr_db: (5.0, 20.0),
            f0_jitter: 0.03,
        }
    }
}

const RAMP_S: f64 = 0.02;
const AM_DEPTH: f64 = 0.5;

impl SoundscapeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::config("synth.duration_s", "must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidSampleRate(0));
        }
        if !(self.background_rms >= 0.0) {
            return Err(Error::config("synth.background_rms", "must be non-negative"));
        }
        if self.n_events > 0 && self.classes.is_empty() {
            return Err(Error::config("synth.classes", "events requested without classes"));
        }
        for c in &self.classes {
            let (lo, hi) = c.duration_s;
            if !(lo > 2.0 * RAMP_S && lo <= hi) {
                return Err(Error::config(
                    "synth.classes.duration_s",
                    format!("invalid range for class {}", c.name),
                ));
            }
            if !(c.f0_hz > 0.0 && c.f0_hz < f64::from(self.sample_rate) / 2.0) || c.harmonics == 0 {
                return Err(Error::config(
                    "synth.classes.f0_hz",
                    format!("class {} has no audible harmonic", c.name),
                ));
            }
        }
        if self.snr_db.0 > self.snr_db.1 {
            return Err(Error::config("synth.snr_db", "lower bound exceeds upper"));
        }
        if !(self.min_gap_s >= 0.0) {
            return Err(Error::config("synth.min_gap_s", "must be non-negative"));
        }
        if !(0.0..0.5).contains(&self.f0_jitter) {
            return Err(Error::config("synth.f0_jitter", "must lie in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn repertoire(&self) -> Result<Repertoire> {
        Repertoire::new(self.classes.iter().map(|c| c.name.clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub class: String,
    pub snr_db: f64,
    pub start_sample: usize,
    pub end_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub events: Vec<TruthEvent>,
}

impl GroundTruth {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// White noise through Paul Kellet's pink filter.
fn pink(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if ms > 0.0 {
        let g = target / ms.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn background(spec: &SoundscapeSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = match &spec.background {
        Background::White => white(n, &mut rng),
        Background::Pink => pink(n, &mut rng),
        Background::File { path } => {
            let buf = resample(&decode_wav(path)?, spec.sample_rate)?;
            if buf.is_empty() {
                return Err(Error::EmptyAudio(path.clone()));
            }
            buf.samples.iter().cycle().take(n).map(|&v| f64::from(v)).collect()
        }
    };
    scale_to_rms(&mut x, spec.background_rms);
    Ok(x)
}

/// Unit-RMS tone complex of `n` samples with raised-cosine onset and offset.
fn tone_complex(class: &EventClass, f0: f64, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nyquist = rate / 2.0;
    let phases: Vec<f64> = (0..class.harmonics).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    let am_phase = rng.random::<f64>() * 2.0 * PI;
    let ramp = ((RAMP_S * rate) as usize).max(1);
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let mut v = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f >= nyquist {
                    break;
                }
                v += (2.0 * PI * f * t + ph).sin() / (h + 1) as f64;
            }
            let am = 1.0 - AM_DEPTH * 0.5 * (1.0 - (2.0 * PI * class.am_rate_hz * t + am_phase).cos());
            let edge = i.min(n - 1 - i);
            let env = if edge < ramp {
                0.5 * (1.0 - (PI * edge as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            v * am * env
        })
        .collect();
    scale_to_rms(&mut x, 1.0);
    x
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Renders a soundscape and its ground truth.
///
/// The background and the events draw from separate random streams, so the
/// background is the same for every event layout under one seed. Each
/// event's power over its span is set relative to the background power over
/// the same span.
pub fn generate_soundscape(spec: &SoundscapeSpec, seed: u64) -> Result<(AudioBuffer, GroundTruth)> {
    spec.validate()?;
    let rate = f64::from(spec.sample_rate);
    let n = (spec.duration_s * rate).round() as usize;
    let mut x = background(spec, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    // balanced classes, random order
    let mut classes: Vec<usize> = (0..spec.n_events).map(|i| i % spec.classes.len().max(1)).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let lengths: Vec<usize> = classes
        .iter()
        .map(|&c| {
            let (lo, hi) = spec.classes[c].duration_s;
            let d = if hi > lo { rng.random_range(lo..hi) } else { lo };
            (d * rate).round() as usize
        })
        .collect();
    let gap = (spec.min_gap_s * rate).ceil() as usize;
    let needed = lengths.iter().sum::<usize>() + (spec.n_events + 1) * gap;
    if needed > n {
        return Err(Error::InfeasiblePacking {
            events: spec.n_events,
            gap: spec.min_gap_s,
            duration: spec.duration_s,
        });
    }
    // distribute the slack over the n+1 gaps
    let slack = n - needed;
    let mut cuts: Vec<usize> = (0..spec.n_events).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(spec.n_events);
    let mut cursor = 0usize;
    let mut prev_cut = 0usize;
    for (i, (&c, &len)) in classes.iter().zip(&lengths).enumerate() {
        let extra = cuts[i] - prev_cut;
        prev_cut = cuts[i];
        let start = cursor + gap + extra;
        let end = start + len;
        cursor = end;
        let class = &spec.classes[c];
        let f0 = class.f0_hz * (1.0 + spec.f0_jitter * (2.0 * rng.random::<f64>() - 1.0));
        let snr = if spec.snr_db.1 > spec.snr_db.0 {
            rng.random_range(spec.snr_db.0..=spec.snr_db.1)
        } else {
            spec.snr_db.0
        };
        let tone = tone_complex(class, f0, len, rate, &mut rng);
        let bg_power = power(&x[start..end]);
        let gain = (bg_power * 10f64.powf(snr / 10.0)).sqrt();
        for (dst, v) in x[start..end].iter_mut().zip(&tone) {
            *dst += gain * v;
        }
        events.push(TruthEvent {
            start_s: start as f64 / rate,
            end_s: end as f64 / rate,
            class: class.name.clone(),
            snr_db: snr,
            start_sample: start,
            end_sample: end,
        });
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        log::warn!("soundscape peak {peak:.2} exceeds full scale; samples will clip when written as PCM");
    }
    Ok((
        AudioBuffer::new(x.iter().map(|&v| v as f32).collect(), spec.sample_rate),
        GroundTruth {
            sample_rate: spec.sample_rate,
            duration_s: n as f64 / rate,
            events,
        },
    ))
}

/// How a labeled manifest is cut from a soundscape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutConfig {
    /// Time range to cut from, in seconds; the whole soundscape when absent.
    pub range_s: Option<(f64, f64)>,
    /// Margin kept between noise clips and events.
    pub guard_s: f64,
    /// Shorter noise stretches are dropped.
    pub min_noise_s: f64,
    /// Longer noise stretches are split into pieces of at most this length.
    pub max_noise_s: f64,
}

impl Default for CutConfig {
    fn default() -> Self {
        Self {
            range_s: None,
            guard_s: 0.1,
            min_noise_s: 1.0,
            max_noise_s: 5.0,
        }
    }
}

/// A span of the soundscape paired with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct CutSpan {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

/// Event spans fully inside the range plus the noise stretches between them.
pub fn labeled_spans(truth: &GroundTruth, repertoire: &Repertoire, cfg: &CutConfig) -> Result<Vec<CutSpan>> {
    let rate = f64::from(truth.sample_rate);
    let (from_s, to_s) = cfg.range_s.unwrap_or((0.0, truth.duration_s));
    let lo = (from_s.max(0.0) * rate).round() as usize;
    let hi = (to_s.min(truth.duration_s) * rate).round() as usize;
    let guard = (cfg.guard_s * rate).round() as usize;
    let min_noise = (cfg.min_noise_s * rate).round() as usize;
    let max_noise = ((cfg.max_noise_s * rate).round() as usize).max(min_noise.max(1));
    let mut spans = Vec::new();
    let push_noise = |from: usize, to: usize, spans: &mut Vec<CutSpan>| {
        let (from, to) = (from.max(lo), to.min(hi));
        if to <= from || to - from < min_noise {
            return;
        }
        let pieces = (to - from).div_ceil(max_noise);
        let step = (to - from) / pieces;
        for p in 0..pieces {
            let s = from + p * step;
            let e = if p + 1 == pieces { to } else { s + step };
            spans.push(CutSpan {
                start: s,
                end: e,
                label: Label::Noise,
            });
        }
    };
    let mut noise_from = lo;
    for ev in &truth.events {
        if ev.end_sample <= lo || ev.start_sample >= hi {
            continue;
        }
        push_noise(noise_from, ev.start_sample.saturating_sub(guard), &mut spans);
        if ev.start_sample >= lo && ev.end_sample <= hi {
            let k = repertoire
                .index_of(&ev.class)
                .ok_or_else(|| Error::UnknownLabel(ev.class.clone()))?;
            spans.push(CutSpan {
                start: ev.start_sample,
                end: ev.end_sample,
                label: Label::Vocalization(k),
            });
        }
        noise_from = ev.end_sample + guard;
    }
    push_noise(noise_from, hi, &mut spans);
    Ok(spans)
}

/// Writes every labeled span of `audio` as a WAV under `out_dir` and returns
/// the manifest describing them (paths relative to `out_dir`).
pub fn cut_manifest(
    audio: &AudioBuffer,
    truth: &GroundTruth,
    repertoire: &Repertoire,
    cfg: &CutConfig,
    prefix: &str,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    if audio.sample_rate != truth.sample_rate {
        return Err(Error::RateMismatch {
            expected: truth.sample_rate,
            actual: audio.sample_rate,
        });
    }
    let spans = labeled_spans(truth, repertoire, cfg)?;
    let mut clips = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        let id = format!("{prefix}_{i:04}");
        let rel = PathBuf::from(format!("{id}.wav"));
        let end = s.end.min(audio.len());
        let clip = AudioBuffer::new(audio.samples[s.start..end].to_vec(), audio.sample_rate);
        write_wav(out_dir.join(&rel), &clip)?;
        clips.push(LabeledClip {
            id,
            path: rel,
            label: s.label,
            duration: Some(clip.duration()),
            partition: Partition::Unassigned,
            provenance: None,
        });
    }
    Ok(Manifest {
        clips,
        repertoire: repertoire.clone(),
        base_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_events: usize, duration_s: f64) -> SoundscapeSpec {
        SoundscapeSpec {
            duration_s,
            n_events,
            ..SoundscapeSpec::default()
        }
    }

    #[test]
    fn no_events_is_background_only() {
        let (a, t) = generate_soundscape(&spec(0, 5.0), 3).unwrap();
        assert!(t.events.is_empty());
        assert_eq!(a.len(), 80_000);
        assert!((a.rms() - 0.02).abs() < 1e-3);
    }

    #[test]
    fn events_respect_gaps() {
        let s = spec(10, 60.0);
        let (_, t) = generate_soundscape(&s, 8).unwrap();
        assert_eq!(t.events.len(), 10);
        let mut prev_end = 0.0;
        for e in &t.events {
            assert!(e.start_s - prev_end >= s.min_gap_s - 1e-9);
            assert!(e.end_s > e.start_s && e.end_s <= t.duration_s);
            prev_end = e.end_s;
        }
        assert!(t.duration_s - prev_end >= s.min_gap_s - 1e-9);
    }

    #[test]
    fn infeasible_packing() {
        assert!(matches!(
            generate_soundscape(&spec(30, 60.0), 1),
            Err(Error::InfeasiblePacking { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let (a, t) = generate_soundscape(&spec(5, 30.0), 11).unwrap();
        let (b, u) = generate_soundscape(&spec(5, 30.0), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(t, u);
    }

    #[test]
    fn spans_cover_events_and_noise() {
        let s = spec(6, 40.0);
        let (_, t) = generate_soundscape(&s, 2).unwrap();
        let rep = s.repertoire().unwrap();
        let spans = labeled_spans(&t, &rep, &CutConfig::default()).unwrap();
        assert_eq!(spans.iter().filter(|s| s.label.is_signal()).count(), 6);
        for w in spans.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        for sp in spans.iter().filter(|s| !s.label.is_signal()) {
            for e in &t.events {
                assert!(sp.end <= e.start_sample || sp.start >= e.end_sample);
            }
        }
    }
}
