//! Training-set expansion: pitch shifts, tempo changes and background-noise mixes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, rms, AudioBuffer};
use crate::dataset::{LabeledClip, Provenance};
use crate::error::{Error, Result};

pub const VARIANTS_PER_FAMILY: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPlan {
    pub pitch_semitones: Vec<f64>,
    pub speed_factors: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            pitch_semitones: vec![-2.0, -1.0, 1.0, 2.0, 3.0],
            speed_factors: vec![0.8, 0.9, 1.1, 1.2, 1.3],
            snr_db: vec![20.0, 15.0, 10.0, 5.0, 0.0],
            seed: 0,
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        for (field, values) in [
            ("augment.pitch_semitones", &self.pitch_semitones),
            ("augment.speed_factors", &self.speed_factors),
            ("augment.snr_db", &self.snr_db),
        ] {
            if values.len() != VARIANTS_PER_FAMILY {
                return Err(Error::config(
                    field,
                    format!("needs exactly {VARIANTS_PER_FAMILY} values, got {}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(field, "values must be finite"));
            }
        }
        if self.speed_factors.iter().any(|&f| f <= 0.0) {
            return Err(Error::config("augment.speed_factors", "must be positive"));
        }
        Ok(())
    }
}

const STRETCH_WINDOW: usize = 1024;
const STRETCH_SYNTHESIS_HOP: usize = STRETCH_WINDOW / 2;
const STRETCH_TOLERANCE: usize = 256;

fn sample(x: &[f32], i: isize) -> f64 {
    if i < 0 {
        0.0
    } else {
        x.get(i as usize).map_or(0.0, |&v| f64::from(v))
    }
}

/// Changes duration by `1 / factor` without changing pitch (WSOLA).
///
/// Analysis frames are Hann windows of 1024 samples taken every
/// `512 * factor` samples, each shifted by up to ±256 samples to best match
/// the natural continuation of the previous frame, and overlap-added every
/// 512 samples.
pub fn time_stretch(buf: &AudioBuffer, factor: f64) -> Result<AudioBuffer> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::config("time_stretch.factor", "must be positive"));
    }
    if factor == 1.0 || buf.is_empty() {
        return Ok(buf.clone());
    }
    let x = &buf.samples;
    let n = STRETCH_WINDOW;
    let hs = STRETCH_SYNTHESIS_HOP;
    let ha = hs as f64 * factor;
    let out_len = ((x.len() as f64 / factor).round() as usize).max(1);
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();

    let frames = out_len.div_ceil(hs) + 1;
    let mut y = vec![0.0f64; frames * hs + n];
    let mut wsum = vec![0.0f64; frames * hs + n];
    let mut prev: isize = 0;
    let mut template = vec![0.0f64; n];
    for k in 0..frames {
        let pos = if k == 0 {
            0
        } else {
            for (i, t) in template.iter_mut().enumerate() {
                *t = sample(x, prev + hs as isize + i as isize);
            }
            let nominal = (k as f64 * ha).round() as isize;
            let lo = (nominal - STRETCH_TOLERANCE as isize).max(0);
            let hi = nominal + STRETCH_TOLERANCE as isize;
            let mut best = nominal.max(0);
            let mut best_score = f64::NEG_INFINITY;
            for c in lo..=hi {
                let mut score = 0.0;
                for (i, t) in template.iter().enumerate() {
                    score += sample(x, c + i as isize) * t;
                }
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            best
        };
        let base = k * hs;
        for i in 0..n {
            y[base + i] += window[i] * sample(x, pos + i as isize);
            wsum[base + i] += window[i];
        }
        prev = pos;
    }
    let samples = (0..out_len)
        .map(|i| {
            let v = if wsum[i] > 1e-3 { y[i] / wsum[i] } else { y[i] };
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(AudioBuffer::new(samples, buf.sample_rate))
}

/// Scales every frequency by `2^(semitones / 12)` keeping the duration.
pub fn pitch_shift(buf: &AudioBuffer, semitones: f64) -> Result<AudioBuffer> {
    if !semitones.is_finite() {
        return Err(Error::config("pitch_shift.semitones", "must be finite"));
    }
    if semitones == 0.0 || buf.is_empty() {
        return Ok(buf.clone());
    }
    let ratio = 2f64.powf(semitones / 12.0);
    let rate = buf.sample_rate;
    let squeezed_rate = ((f64::from(rate) / ratio).round() as u32).max(1);
    let mut squeezed = resample(buf, squeezed_rate)?;
    // played back at the original rate, frequencies scale by rate/squeezed_rate
    squeezed.sample_rate = rate;
    let factor = squeezed.len() as f64 / buf.len() as f64;
    let mut out = time_stretch(&squeezed, factor)?;
    out.samples.resize(buf.len(), 0.0);
    Ok(out)
}

/// Output of [`mix_noise`].
#[derive(Debug, Clone)]
pub struct Mixture {
    pub audio: AudioBuffer,
    /// Gain applied to the noise slice before summation.
    pub gain: f64,
    /// Start of the noise slice, in samples.
    pub offset: usize,
    /// Overall scale applied to avoid clipping (1 when none was needed).
    pub prescale: f64,
}

/// Noise gain giving `snr_db` between signal and scaled noise powers.
pub fn snr_gain(signal_rms: f64, noise_rms: f64, snr_db: f64) -> f64 {
    signal_rms / (noise_rms * 10f64.powf(snr_db / 20.0))
}

/// Adds a random slice of `noise` to `signal` at the requested SNR.
pub fn mix_noise<R: Rng + ?Sized>(
    signal: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    rng: &mut R,
) -> Result<Mixture> {
    if signal.sample_rate != noise.sample_rate {
        return Err(Error::RateMismatch {
            expected: signal.sample_rate,
            actual: noise.sample_rate,
        });
    }
    let s_rms = signal.rms();
    if s_rms == 0.0 {
        return Err(Error::SilentSignal);
    }
    if noise.len() < signal.len() {
        return Err(Error::NoiseTooShort {
            noise: noise.len(),
            signal: signal.len(),
        });
    }
    let offset = rng.random_range(0..=noise.len() - signal.len());
    let slice = &noise.samples[offset..offset + signal.len()];
    let n_rms = rms(slice);
    if n_rms == 0.0 {
        return Err(Error::config("noise", "selected noise slice is silent"));
    }
    let gain = snr_gain(s_rms, n_rms, snr_db);
    let mixed: Vec<f64> = signal
        .samples
        .iter()
        .zip(slice)
        .map(|(&s, &n)| f64::from(s) + gain * f64::from(n))
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let prescale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let samples = mixed
        .iter()
        .map(|v| (v * prescale).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Mixture {
        audio: AudioBuffer::new(samples, signal.sample_rate),
        gain,
        offset,
        prescale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Pitch,
    Speed,
    Noise,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Pitch => "pitch",
            Family::Speed => "speed",
            Family::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedClip {
    pub clip: LabeledClip,
    pub audio: AudioBuffer,
    pub family: Family,
    pub parameter: f64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Noise long enough for `len` samples: a random pool entry that fits, or
/// the pool concatenated cyclically when none does.
fn pick_noise<R: Rng + ?Sized>(pool: &[AudioBuffer], len: usize, rng: &mut R) -> AudioBuffer {
    let fitting: Vec<&AudioBuffer> = pool.iter().filter(|b| b.len() >= len).collect();
    if !fitting.is_empty() {
        return fitting[rng.random_range(0..fitting.len())].clone();
    }
    let rate = pool[0].sample_rate;
    let mut samples = Vec::with_capacity(len);
    let start = rng.random_range(0..pool.len());
    for b in pool.iter().cycle().skip(start) {
        samples.extend_from_slice(&b.samples);
        if samples.len() >= len {
            break;
        }
    }
    AudioBuffer::new(samples, rate)
}

/// Expands one clip into 15 labeled variants: five pitch shifts, five tempo
/// changes and five noise mixes, in that order.
///
/// `audio` and every noise buffer must share a sample rate. Output is a
/// function of `plan.seed` and the clip id only.
pub fn augment_clip(
    clip: &LabeledClip,
    audio: &AudioBuffer,
    noise_pool: &[AudioBuffer],
    plan: &AugmentPlan,
) -> Result<Vec<AugmentedClip>> {
    plan.validate()?;
    let noise_pool: Vec<AudioBuffer> = noise_pool.iter().filter(|b| !b.is_empty()).cloned().collect();
    if noise_pool.is_empty() {
        return Err(Error::EmptyNoisePool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ fnv1a(&clip.id));
    let mut out = Vec::with_capacity(3 * VARIANTS_PER_FAMILY);
    let mut push = |family: Family, i: usize, parameter: f64, audio: AudioBuffer| {
        let id = format!("{}__{}{}", clip.id, family.as_str(), i);
        out.push(AugmentedClip {
            clip: LabeledClip {
                path: format!("{id}.wav").into(),
                id,
                label: clip.label,
                duration: Some(audio.duration()),
                partition: clip.partition,
                provenance: Some(Provenance {
                    source_id: clip.id.clone(),
                    family: family.as_str().into(),
                    parameter,
                }),
            },
            audio,
            family,
            parameter,
        });
    };
    for (i, &s) in plan.pitch_semitones.iter().enumerate() {
        push(Family::Pitch, i, s, pitch_shift(audio, s)?);
    }
    for (i, &f) in plan.speed_factors.iter().enumerate() {
        push(Family::Speed, i, f, time_stretch(audio, f)?);
    }
    for (i, &snr) in plan.snr_db.iter().enumerate() {
        let noise = pick_noise(&noise_pool, audio.len(), &mut rng);
        let mix = mix_noise(audio, &noise, snr, &mut rng)?;
        push(Family::Noise, i, snr, mix.audio);
    }
    Ok(out)
}
