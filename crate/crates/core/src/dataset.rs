//! Labeled corpus: manifests, stratified partitioning, frame pools and the
//! class-balanced training stream.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{decode_wav, resample, window, WindowConfig};
use crate::error::{Error, Result};
use crate::features::FrontEnd;

pub const NOISE_LABEL: &str = "noise";

/// Ordered vocalization classes. Class indices are positions in this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repertoire {
    names: Vec<String>,
}

impl Repertoire {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("repertoire", "needs at least one class"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if n == NOISE_LABEL {
                return Err(Error::config("repertoire", "\"noise\" is reserved"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::config("repertoire", format!("duplicate class {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parse_label(&self, label: &str) -> Result<Label> {
        if label == NOISE_LABEL {
            return Ok(Label::Noise);
        }
        self.index_of(label)
            .map(Label::Vocalization)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn label_name(&self, label: Label) -> &str {
        match label {
            Label::Noise => NOISE_LABEL,
            Label::Vocalization(k) => self.name(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Noise,
    Vocalization(usize),
}

impl Label {
    pub fn is_signal(self) -> bool {
        matches!(self, Label::Vocalization(_))
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Noise => None,
            Label::Vocalization(k) => Some(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
            Partition::Unassigned => "",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            "" | "unassigned" => Ok(Partition::Unassigned),
            other => Err(Error::config("partition", format!("unknown partition {other:?}"))),
        }
    }
}

/// Where an augmented clip came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub family: String,
    pub parameter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    /// As written in the manifest; relative paths are relative to the manifest directory.
    pub path: PathBuf,
    pub label: Label,
    pub duration: Option<f64>,
    pub partition: Partition,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Deserialize)]
struct ManifestRecord {
    id: String,
    path: String,
    label: String,
    #[serde(default)]
    partition: String,
    #[serde(default)]
    source_id: Option<String>,
    #[serde(default)]
    family: Option<String>,
    #[serde(default)]
    parameter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub clips: Vec<LabeledClip>,
    pub repertoire: Repertoire,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Reads a manifest; the repertoire is the sorted set of non-noise labels.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let records = read_records(path.as_ref())?;
        let mut names: Vec<String> = records
            .iter()
            .filter(|r| r.label != NOISE_LABEL)
            .map(|r| r.label.clone())
            .collect();
        names.sort();
        names.dedup();
        let repertoire = Repertoire::new(names)?;
        Self::from_records(path.as_ref(), records, repertoire)
    }

    /// Reads a manifest whose labels must belong to `repertoire`.
    pub fn read_with_repertoire(path: impl AsRef<Path>, repertoire: &Repertoire) -> Result<Self> {
        let records = read_records(path.as_ref())?;
        Self::from_records(path.as_ref(), records, repertoire.clone())
    }

    fn from_records(
        path: &Path,
        records: Vec<ManifestRecord>,
        repertoire: Repertoire,
    ) -> Result<Self> {
        let clips = records
            .into_iter()
            .map(|r| {
                let provenance = match (r.source_id, r.family, r.parameter) {
                    (Some(source_id), Some(family), Some(parameter)) if !source_id.is_empty() => {
                        Some(Provenance {
                            source_id,
                            family,
                            parameter,
                        })
                    }
                    _ => None,
                };
                Ok(LabeledClip {
                    label: repertoire.parse_label(&r.label)?,
                    id: r.id,
                    path: PathBuf::from(r.path),
                    duration: None,
                    partition: r.partition.parse()?,
                    provenance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clips,
            repertoire,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, clip: &LabeledClip) -> PathBuf {
        if clip.path.is_absolute() {
            clip.path.clone()
        } else {
            self.base_dir.join(&clip.path)
        }
    }

    pub fn is_partitioned(&self) -> bool {
        !self.clips.is_empty()
            && self
                .clips
                .iter()
                .all(|c| c.partition != Partition::Unassigned)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let with_provenance = self.clips.iter().any(|c| c.provenance.is_some());
        if with_provenance {
            w.write_record([
                "id",
                "path",
                "label",
                "partition",
                "source_id",
                "family",
                "parameter",
            ])?;
        } else {
            w.write_record(["id", "path", "label", "partition"])?;
        }
        for c in &self.clips {
            let path = c.path.to_string_lossy();
            let label = self.repertoire.label_name(c.label);
            let partition = c.partition.to_string();
            if with_provenance {
                let (src, fam, par) = match &c.provenance {
                    Some(p) => (p.source_id.clone(), p.family.clone(), p.parameter.to_string()),
                    None => Default::default(),
                };
                w.write_record([c.id.as_str(), &path, label, &partition, &src, &fam, &par])?;
            } else {
                w.write_record([c.id.as_str(), &path, label, &partition])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn read_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let records = rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(records)
}

pub const MIN_CLIPS_PER_CLASS: usize = 4;

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Split sizes `(train, val, test)` for a class of `n` clips.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = round_half_up(0.2 * n as f64);
    let rest = n - test;
    let val = round_half_up(0.25 * rest as f64);
    (rest - val, val, test)
}

/// Stratified split: per label, 20% test, then the remainder 75/25 into train/val.
pub fn partition(manifest: &Manifest, seed: u64) -> Result<Manifest> {
    if manifest.clips.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, c) in manifest.clips.iter().enumerate() {
        groups.entry(c.label).or_default().push(i);
    }
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (label, mut idx) in groups {
        if idx.len() < MIN_CLIPS_PER_CLASS {
            return Err(Error::ClassTooSmall {
                class: manifest.repertoire.label_name(label).to_string(),
                count: idx.len(),
                min: MIN_CLIPS_PER_CLASS,
            });
        }
        idx.shuffle(&mut rng);
        let (_, val, test) = split_sizes(idx.len());
        for (pos, &i) in idx.iter().enumerate() {
            out.clips[i].partition = if pos < test {
                Partition::Test
            } else if pos < test + val {
                Partition::Val
            } else {
                Partition::Train
            };
        }
    }
    Ok(out)
}

/// Embedded frames grouped by label.
#[derive(Debug, Clone, Default)]
pub struct FramePool {
    dim: usize,
    n_classes: usize,
    embeddings: Vec<f64>,
    labels: Vec<Label>,
    origins: Vec<(usize, usize)>,
    clip_ids: Vec<String>,
    class_rows: Vec<Vec<usize>>,
    noise_rows: Vec<usize>,
}

impl FramePool {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            n_classes,
            class_rows: vec![Vec::new(); n_classes],
            ..Default::default()
        }
    }

    /// Adds one embedded frame of clip `clip_id`.
    pub fn push(&mut self, clip_id: &str, frame_index: usize, label: Label, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        let clip = match self.clip_ids.last() {
            Some(last) if last == clip_id => self.clip_ids.len() - 1,
            _ => {
                self.clip_ids.push(clip_id.to_string());
                self.clip_ids.len() - 1
            }
        };
        let row = self.labels.len();
        match label {
            Label::Noise => self.noise_rows.push(row),
            Label::Vocalization(k) => {
                if k >= self.n_classes {
                    return Err(Error::LabelOutOfRange {
                        label: k,
                        classes: self.n_classes,
                    });
                }
                self.class_rows[k].push(row);
            }
        }
        self.embeddings.extend_from_slice(embedding);
        self.labels.push(label);
        self.origins.push((clip, frame_index));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn label(&self, row: usize) -> Label {
        self.labels[row]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// `(clip id, 1-based frame index)` of a row.
    pub fn origin(&self, row: usize) -> (&str, usize) {
        let (clip, frame) = self.origins[row];
        (&self.clip_ids[clip], frame)
    }

    pub fn class_rows(&self, class: usize) -> &[usize] {
        &self.class_rows[class]
    }

    pub fn noise_rows(&self) -> &[usize] {
        &self.noise_rows
    }

    /// Size of the largest vocalization class (the noise list when there is none).
    pub fn largest_class(&self) -> usize {
        self.class_rows
            .iter()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
            .max(if self.n_classes == 0 { self.noise_rows.len() } else { 0 })
    }

    /// Copies the given rows into a contiguous batch.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<Label>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(self.embedding(r));
            y.push(self.labels[r]);
        }
        (x, y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolReport {
    pub clips: usize,
    pub frames: usize,
    pub skipped: Vec<String>,
}

/// Decodes, windows and embeds every clip of `partition` (all clips when `None`).
///
/// Unreadable clips are skipped with a warning and listed in the report.
pub fn build_frame_pool(
    manifest: &Manifest,
    partition: Option<Partition>,
    window_cfg: &WindowConfig,
    front_end: &FrontEnd,
) -> Result<(FramePool, PoolReport)> {
    window_cfg.validate()?;
    let clips: Vec<&LabeledClip> = manifest
        .clips
        .iter()
        .filter(|c| partition.is_none_or(|p| c.partition == p))
        .collect();
    if clips.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let per_clip: Vec<Result<Vec<Vec<f64>>>> = clips
        .par_iter()
        .map(|clip| {
            let audio = decode_wav(manifest.resolve(clip))?;
            let audio = resample(&audio, window_cfg.target_rate)?;
            window(&audio, window_cfg)
                .map(|frame| front_end.embed(&clip.id, &frame).map(|e| e.values))
                .collect()
        })
        .collect();

    let mut pool = FramePool::new(front_end.dim(), manifest.repertoire.len());
    let mut report = PoolReport::default();
    for (clip, result) in clips.iter().zip(per_clip) {
        match result {
            Ok(frames) => {
                report.clips += 1;
                for (i, e) in frames.iter().enumerate() {
                    pool.push(&clip.id, i + 1, clip.label, e)?;
                }
                report.frames += frames.len();
            }
            Err(e @ (Error::Unreadable { .. } | Error::UnsupportedEncoding { .. } | Error::EmptyAudio(_))) => {
                log::warn!("skipping clip {}: {e}", clip.id);
                report.skipped.push(clip.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok((pool, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// `[noise, signal]` draw probabilities.
    pub pi_s: [f64; 2],
    /// Per-class probabilities among signal draws; uniform when absent.
    pub pi_v: Option<Vec<f64>>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pi_s: [0.5, 0.5],
            pi_v: None,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn check_distribution(field: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::config(field, "probabilities must be non-negative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::config(field, format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

impl SamplingConfig {
    pub fn class_distribution(&self, n_classes: usize) -> Result<Vec<f64>> {
        check_distribution("sampling.pi_s", &self.pi_s)?;
        if self.batch_size == 0 {
            return Err(Error::config("sampling.batch_size", "must be positive"));
        }
        match &self.pi_v {
            None => Ok(vec![1.0 / n_classes as f64; n_classes]),
            Some(p) => {
                if p.len() != n_classes {
                    return Err(Error::config(
                        "sampling.pi_v",
                        format!("has {} entries for {n_classes} classes", p.len()),
                    ));
                }
                check_distribution("sampling.pi_v", p)?;
                Ok(p.clone())
            }
        }
    }
}

/// Endless stream of pool rows: noise or signal by `pi_s`, then a class by
/// `pi_v`, then a uniform frame of that class, all with replacement.
pub struct BalancedSampler<'a> {
    pool: &'a FramePool,
    p_noise: f64,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<'a> BalancedSampler<'a> {
    pub fn new(pool: &'a FramePool, cfg: &SamplingConfig) -> Result<Self> {
        let pi_v = cfg.class_distribution(pool.n_classes())?;
        if cfg.pi_s[0] > 0.0 && pool.noise_rows().is_empty() {
            return Err(Error::EmptyClass(NOISE_LABEL.into()));
        }
        if cfg.pi_s[1] > 0.0 {
            for (k, &p) in pi_v.iter().enumerate() {
                if p > 0.0 && pool.class_rows(k).is_empty() {
                    return Err(Error::EmptyClass(format!("class {k}")));
                }
            }
        }
        let mut acc = 0.0;
        let cumulative = pi_v
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            pool,
            p_noise: cfg.pi_s[0],
            cumulative,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn draw(&mut self) -> usize {
        let rows = if self.rng.random::<f64>() < self.p_noise {
            self.pool.noise_rows()
        } else {
            let u = self.rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
            let mut k = self.cumulative.partition_point(|&c| c <= u);
            // skip zero-probability classes hit by rounding at the top end
            while k >= self.cumulative.len() || self.pool.class_rows(k).is_empty() {
                k = if k == 0 { self.cumulative.len() - 1 } else { k - 1 };
            }
            self.pool.class_rows(k)
        };
        rows[self.rng.random_range(0..rows.len())]
    }

    pub fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.draw()).collect()
    }
}

impl Iterator for BalancedSampler<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.draw())
    }
}

/// Creates the balanced stream over `pool`.
pub fn balanced_sampler<'a>(pool: &'a FramePool, cfg: &SamplingConfig) -> Result<BalancedSampler<'a>> {
    BalancedSampler::new(pool, cfg)
}

/// Batches per epoch: enough to see every frame of the largest class once,
/// for each vocalization class plus noise, rounded up.
pub fn epoch_iterations(n_classes: usize, largest_class: usize, batch_size: usize) -> usize {
    debug_assert!(n_classes >= 1 && largest_class >= 1 && batch_size >= 1);
    ((n_classes + 1) * largest_class).div_ceil(batch_size.max(1)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_with(counts: &[(&str, usize)]) -> Manifest {
        let mut names: Vec<String> = counts
            .iter()
            .filter(|(n, _)| *n != NOISE_LABEL)
            .map(|(n, _)| n.to_string())
            .collect();
        names.sort();
        let repertoire = Repertoire::new(names).unwrap();
        let mut clips = Vec::new();
        for (name, n) in counts {
            for i in 0..*n {
                clips.push(LabeledClip {
                    id: format!("{name}{i}"),
                    path: format!("{name}{i}.wav").into(),
                    label: repertoire.parse_label(name).unwrap(),
                    duration: None,
                    partition: Partition::Unassigned,
                    provenance: None,
                });
            }
        }
        Manifest {
            clips,
            repertoire,
            base_dir: PathBuf::new(),
        }
    }

    fn count(m: &Manifest, p: Partition) -> usize {
        m.clips.iter().filter(|c| c.partition == p).count()
    }

    #[test]
    fn hundred_clips_split_60_20_20() {
        let m = partition(&manifest_with(&[("grunt", 100)]), 3).unwrap();
        assert_eq!(count(&m, Partition::Train), 60);
        assert_eq!(count(&m, Partition::Val), 20);
        assert_eq!(count(&m, Partition::Test), 20);
    }

    #[test]
    fn partition_is_deterministic_and_stratified() {
        let base = manifest_with(&[("bark", 269), ("grunt", 502), ("yak", 60), ("noise", 20)]);
        let a = partition(&base, 11).unwrap();
        let b = partition(&base, 11).unwrap();
        assert_eq!(a, b);
        let c = partition(&base, 12).unwrap();
        assert_ne!(a, c);
        let grunt_test = a
            .clips
            .iter()
            .filter(|c| c.id.starts_with("grunt") && c.partition == Partition::Test)
            .count();
        // about 20% of 502, as in the baboon corpus (99 there)
        assert!((99..=101).contains(&grunt_test));
    }

    #[test]
    fn tiny_class_cannot_be_stratified() {
        let err = partition(&manifest_with(&[("bark", 10), ("yak", 3)]), 0).unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { count: 3, .. }));
    }

    #[test]
    fn epoch_iteration_examples() {
        assert_eq!(epoch_iterations(6, 302, 32), 67);
        assert_eq!(epoch_iterations(1, 50, 50), 2);
        assert_eq!(epoch_iterations(5, 3407, 64), 320);
    }

    fn toy_pool(k: usize, per_class: usize, noise: usize) -> FramePool {
        let mut pool = FramePool::new(1, k);
        for c in 0..k {
            for i in 0..per_class {
                pool.push(&format!("c{c}"), i + 1, Label::Vocalization(c), &[c as f64]).unwrap();
            }
        }
        for i in 0..noise {
            pool.push("n", i + 1, Label::Noise, &[-1.0]).unwrap();
        }
        pool
    }

    #[test]
    fn degenerate_pi_s_draws_only_noise() {
        let pool = toy_pool(3, 5, 5);
        let cfg = SamplingConfig {
            pi_s: [1.0, 0.0],
            ..Default::default()
        };
        let s = balanced_sampler(&pool, &cfg).unwrap();
        assert!(s.take(1000).all(|r| pool.label(r) == Label::Noise));
    }

    #[test]
    fn empty_class_is_an_error() {
        let mut pool = toy_pool(2, 3, 3);
        pool.class_rows[1].clear();
        assert!(matches!(
            BalancedSampler::new(&pool, &SamplingConfig::default()),
            Err(Error::EmptyClass(_))
        ));
    }

    #[test]
    fn bad_distributions_are_rejected() {
        let pool = toy_pool(2, 3, 3);
        let cfg = SamplingConfig {
            pi_v: Some(vec![0.7, 0.2]),
            ..Default::default()
        };
        assert!(matches!(BalancedSampler::new(&pool, &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn pool_tracks_largest_class() {
        let mut pool = toy_pool(2, 3, 10);
        pool.push("x", 1, Label::Vocalization(1), &[0.5]).unwrap();
        assert_eq!(pool.largest_class(), 4);
        assert_eq!(pool.origin(pool.len() - 1), ("x", 1));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = partition(&manifest_with(&[("bark", 5), ("noise", 4)]), 1).unwrap();
        m.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,path,label,partition\n"));
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.clips, m.clips);
        assert_eq!(back.repertoire, m.repertoire);
    }
}
