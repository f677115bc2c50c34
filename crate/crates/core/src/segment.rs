//! Streaming inference over long recordings: frame decisions are merged into
//! vocalization segments and each segment gets a class by majority vote.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{Frame, Framer, Resampler, WavStream, WindowConfig};
use crate::checkpoint::Model;
use crate::dataset::Repertoire;
use crate::error::{Error, Result};
use crate::features::FrontEnd;
use crate::metrics::THRESHOLD;
use crate::nnet::{predict, PredictionBatch};

/// Model output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDecision {
    /// 1-based frame index.
    pub index: usize,
    pub p_signal: f64,
    pub is_signal: bool,
    /// Most probable class, 0-based; ties go to the smallest index.
    pub class: usize,
    pub class_probs: Vec<f64>,
}

impl FrameDecision {
    pub fn new(index: usize, p_signal: f64, class_probs: Vec<f64>) -> Self {
        let class = argmax(&class_probs);
        Self {
            index,
            p_signal,
            is_signal: p_signal > THRESHOLD,
            class,
            class_probs,
        }
    }

    /// A decision carrying only the signal flag and a class vote.
    pub fn hard(index: usize, is_signal: bool, class: usize) -> Self {
        Self {
            index,
            p_signal: if is_signal { 1.0 } else { 0.0 },
            is_signal,
            class,
            class_probs: Vec::new(),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Frame span found by the detector, before classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub first: usize,
    pub last: usize,
    /// Indices of the frames predicted positive; absorbed frames are not listed.
    pub positives: Vec<usize>,
    /// Vote count per class over the positive frames.
    pub votes: Vec<u64>,
    pub p_signal_sum: f64,
}

impl Detection {
    pub fn n_frames(&self) -> usize {
        self.last - self.first + 1
    }

    /// Majority class of the positive frames; ties go to the smallest index.
    pub fn majority(&self) -> usize {
        let mut best = 0;
        for (k, &c) in self.votes.iter().enumerate() {
            if c > self.votes[best] {
                best = k;
            }
        }
        best
    }

    pub fn mean_p_signal(&self) -> f64 {
        self.p_signal_sum / self.positives.len() as f64
    }
}

/// One-pass segment detector.
///
/// A positive frame joins the open segment when the previous positive frame
/// lies at most `lookback` indices before it (intermediate negatives are
/// absorbed); otherwise it opens a new segment. A segment is closed once
/// `lookback` indices pass without a positive frame, and ends at its last
/// positive frame.
#[derive(Debug, Clone)]
pub struct SegmentDetector {
    lookback: usize,
    last_index: Option<usize>,
    open: Option<Detection>,
}

impl SegmentDetector {
    pub fn new(lookback: usize) -> Self {
        assert!(lookback > 0, "lookback must be positive");
        Self {
            lookback,
            last_index: None,
            open: None,
        }
    }

    pub fn from_window(cfg: &WindowConfig) -> Result<Self> {
        Ok(Self::new(cfg.lookback()?))
    }

    /// Feeds the next decision; returns a segment if one has just closed.
    pub fn push(&mut self, d: &FrameDecision) -> Result<Option<Detection>> {
        if let Some(prev) = self.last_index {
            if d.index <= prev {
                return Err(Error::OutOfOrder {
                    index: d.index,
                    previous: prev,
                });
            }
        }
        self.last_index = Some(d.index);
        let mut closed = None;
        if let Some(open) = &self.open {
            let gap = d.index - open.last;
            if gap > self.lookback || (gap == self.lookback && !d.is_signal) {
                closed = self.open.take();
            }
        }
        if d.is_signal {
            let open = self.open.get_or_insert_with(|| Detection {
                first: d.index,
                last: d.index,
                positives: Vec::new(),
                votes: Vec::new(),
                p_signal_sum: 0.0,
            });
            open.last = d.index;
            open.positives.push(d.index);
            if open.votes.len() <= d.class {
                open.votes.resize(d.class + 1, 0);
            }
            open.votes[d.class] += 1;
            open.p_signal_sum += d.p_signal;
        }
        Ok(closed)
    }

    /// Closes the segment still open at end of stream.
    pub fn finish(&mut self) -> Option<Detection> {
        self.open.take()
    }
}

/// Runs the detector over a whole decision sequence.
pub fn detect_segments(decisions: &[FrameDecision], cfg: &WindowConfig) -> Result<Vec<Detection>> {
    let mut det = SegmentDetector::from_window(cfg)?;
    let mut out = Vec::new();
    for d in decisions {
        out.extend(det.push(d)?);
    }
    out.extend(det.finish());
    Ok(out)
}

/// Majority vote over the positive frames of a span; absorbed negatives do not vote.
pub fn classify_segment(span: &[FrameDecision]) -> Result<usize> {
    let mut votes: Vec<u64> = Vec::new();
    for d in span.iter().filter(|d| d.is_signal) {
        if votes.len() <= d.class {
            votes.resize(d.class + 1, 0);
        }
        votes[d.class] += 1;
    }
    if votes.is_empty() {
        return Err(Error::NoPositiveFrame);
    }
    let mut best = 0;
    for (k, &c) in votes.iter().enumerate() {
        if c > votes[best] {
            best = k;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub recording: String,
    pub start_s: f64,
    pub end_s: f64,
    pub first_frame: usize,
    pub last_frame: usize,
    /// Frames spanned, absorbed ones included.
    pub n_frames: usize,
    /// 0-based class index.
    pub class: usize,
    pub positives: Vec<usize>,
    /// Mean signal probability over the positive frames.
    pub mean_p_signal: f64,
}

impl Segment {
    pub fn from_detection(recording: &str, det: &Detection, cfg: &WindowConfig) -> Self {
        let rate = f64::from(cfg.target_rate);
        let hop = cfg.hop_len();
        Self {
            recording: recording.to_string(),
            start_s: ((det.first - 1) * hop) as f64 / rate,
            end_s: ((det.last - 1) * hop + cfg.frame_len()) as f64 / rate,
            first_frame: det.first,
            last_frame: det.last,
            n_frames: det.n_frames(),
            class: det.majority(),
            positives: det.positives.clone(),
            mean_p_signal: det.mean_p_signal(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Time-ordered segments of one recording.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentSet {
    pub recording: String,
    /// Length of the recording in seconds.
    pub duration_s: f64,
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }

    pub fn class_durations(&self, n_classes: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_classes];
        for s in &self.segments {
            out[s.class] += s.duration();
        }
        out
    }
}

/// Record written to the segment database, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub recording: String,
    pub start_s: f64,
    pub end_s: f64,
    pub class: String,
    pub n_frames: usize,
    pub mean_p_signal: f64,
}

pub fn write_jsonl(sets: &[SegmentSet], repertoire: &Repertoire, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for set in sets {
        for s in &set.segments {
            let rec = SegmentRecord {
                recording: s.recording.clone(),
                start_s: s.start_s,
                end_s: s.end_s,
                class: repertoire.name(s.class).to_string(),
                n_frames: s.n_frames,
                mean_p_signal: s.mean_p_signal,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub segments: usize,
    pub total_s: f64,
}

/// Segment count and total duration per class, over all recordings.
pub fn summarize(sets: &[SegmentSet], repertoire: &Repertoire) -> Vec<ClassSummary> {
    let mut rows: Vec<ClassSummary> = repertoire
        .names()
        .iter()
        .map(|n| ClassSummary {
            class: n.clone(),
            segments: 0,
            total_s: 0.0,
        })
        .collect();
    for s in sets.iter().flat_map(|s| &s.segments) {
        rows[s.class].segments += 1;
        rows[s.class].total_s += s.duration();
    }
    rows
}

pub fn format_summary(rows: &[ClassSummary]) -> String {
    let width = rows.iter().map(|r| r.class.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>12}\n", "class", "segments", "seconds");
    let (mut n, mut t) = (0, 0.0);
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>8}  {:>12.1}\n", r.class, r.segments, r.total_s));
        n += r.segments;
        t += r.total_s;
    }
    out.push_str(&format!("{:<width$}  {:>8}  {:>12.1}\n", "total", n, t));
    out
}

/// Streaming options for [`process_recording`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Frames embedded before one forward pass.
    pub batch_frames: usize,
    /// Samples decoded per read.
    pub read_chunk: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            batch_frames: 256,
            read_chunk: 1 << 16,
        }
    }
}

/// Recording id used in outputs: the file stem.
pub fn recording_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

struct Pipeline<'a> {
    model: &'a Model,
    front: &'a FrontEnd,
    recording: String,
    detector: SegmentDetector,
    pending: Vec<Frame>,
    batch_frames: usize,
    segments: Vec<Segment>,
}

impl Pipeline<'_> {
    fn accept(&mut self, frames: Vec<Frame>) -> Result<()> {
        for f in frames {
            self.pending.push(f);
            if self.pending.len() >= self.batch_frames {
                self.flush()?;
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let dim = self.model.params.config.input_dim;
        let mut x = Vec::with_capacity(self.pending.len() * dim);
        for f in &self.pending {
            let e = self.front.embed(&self.recording, f)?;
            if e.values.len() != dim {
                return Err(Error::FrontEndMismatch(format!(
                    "embedding of {} values, model expects {dim}",
                    e.values.len()
                )));
            }
            x.extend_from_slice(&e.values);
        }
        let preds: PredictionBatch = predict(&self.model.params, &x, self.pending.len())?;
        for (i, f) in self.pending.iter().enumerate() {
            let d = FrameDecision::new(f.index, preds.p_signal[i], preds.probs(i).to_vec());
            if let Some(det) = self.detector.push(&d)? {
                self.segments
                    .push(Segment::from_detection(&self.recording, &det, &self.model.window));
            }
        }
        self.pending.clear();
        Ok(())
    }
}

/// Decodes, resamples, frames, embeds and classifies one recording in a
/// single streaming pass with memory bounded by the batch size.
pub fn process_recording(
    path: impl AsRef<Path>,
    model: &Model,
    front: &FrontEnd,
    cfg: &StreamConfig,
) -> Result<SegmentSet> {
    let path = path.as_ref();
    model.validate()?;
    if front.dim() != model.params.config.input_dim {
        return Err(Error::FrontEndMismatch(format!(
            "front-end produces {} values, model expects {}",
            front.dim(),
            model.params.config.input_dim
        )));
    }
    let window = &model.window;
    let mut stream = WavStream::open(path)?;
    let mut resampler = Resampler::new(stream.sample_rate(), window.target_rate)?;
    let mut framer = Framer::new(window);
    let mut pipe = Pipeline {
        model,
        front,
        recording: recording_id(path),
        detector: SegmentDetector::from_window(window)?,
        pending: Vec::with_capacity(cfg.batch_frames),
        batch_frames: cfg.batch_frames.max(1),
        segments: Vec::new(),
    };
    let mut samples = 0usize;
    loop {
        let chunk = stream.read_chunk(cfg.read_chunk.max(1))?;
        if chunk.is_empty() {
            break;
        }
        let out = resampler.process(&chunk);
        samples += out.len();
        pipe.accept(framer.push(&out))?;
    }
    let tail = resampler.finish();
    samples += tail.len();
    pipe.accept(framer.push(&tail))?;
    if samples == 0 {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    pipe.accept(framer.finish().into_iter().collect())?;
    pipe.flush()?;
    if let Some(det) = pipe.detector.finish() {
        pipe.segments
            .push(Segment::from_detection(&pipe.recording, &det, window));
    }
    Ok(SegmentSet {
        recording: pipe.recording,
        duration_s: samples as f64 / f64::from(window.target_rate),
        segments: pipe.segments,
    })
}

/// Clip file name for a segment: `<recording>_<start_ms>_<class>.wav`.
pub fn clip_name(segment: &Segment, repertoire: &Repertoire) -> String {
    format!(
        "{}_{}_{}.wav",
        segment.recording,
        (segment.start_s * 1000.0).round() as u64,
        repertoire.name(segment.class)
    )
}

/// Writes each segment of `set` as a 16-bit WAV at the working rate,
/// re-reading the recording in one streaming pass.
pub fn export_clips(
    path: impl AsRef<Path>,
    set: &SegmentSet,
    repertoire: &Repertoire,
    window: &WindowConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let rate = window.target_rate;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let bounds: Vec<(usize, usize)> = set
        .segments
        .iter()
        .map(|s| {
            (
                (s.start_s * f64::from(rate)).round() as usize,
                (s.end_s * f64::from(rate)).round() as usize,
            )
        })
        .collect();
    let mut stream = WavStream::open(path.as_ref())?;
    let mut resampler = Resampler::new(stream.sample_rate(), rate)?;
    let mut written = Vec::new();
    let mut current: Option<(usize, hound::WavWriter<std::io::BufWriter<std::fs::File>>)> = None;
    let mut next = 0usize;
    let mut pos = 0usize;
    let mut finished = false;
    while !finished {
        let chunk = stream.read_chunk(1 << 16)?;
        let out = if chunk.is_empty() {
            finished = true;
            resampler.finish()
        } else {
            resampler.process(&chunk)
        };
        for &v in &out {
            if current.is_none() && next < bounds.len() && pos >= bounds[next].0 {
                let p = out_dir.join(clip_name(&set.segments[next], repertoire));
                current = Some((next, hound::WavWriter::create(&p, spec)?));
                written.push(p);
                next += 1;
            }
            if let Some((i, w)) = current.as_mut() {
                if pos < bounds[*i].1 {
                    w.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
                }
                if pos + 1 >= bounds[*i].1 {
                    let (_, w) = current.take().expect("open clip");
                    w.finalize()?;
                }
            }
            pos += 1;
        }
    }
    if let Some((_, w)) = current.take() {
        w.finalize()?;
    }
    // segments starting past the end of the audio still get a (short) file
    for s in &set.segments[next..] {
        let p = out_dir.join(clip_name(s, repertoire));
        hound::WavWriter::create(&p, spec)?.finalize()?;
        written.push(p);
    }
    Ok(written)
}

/// Per-recording outcome of a batch run.
pub type RecordingResult = (PathBuf, Result<SegmentSet>);

/// Processes many recordings on the current rayon pool, results in input order.
pub fn process_many(
    paths: &[PathBuf],
    model: &Model,
    front: &FrontEnd,
    cfg: &StreamConfig,
) -> Vec<RecordingResult> {
    use rayon::prelude::*;
    paths
        .par_iter()
        .map(|p| (p.clone(), process_recording(p, model, front, cfg)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decisions(positives: &[usize], len: usize) -> Vec<FrameDecision> {
        (1..=len)
            .map(|i| FrameDecision::hard(i, positives.contains(&i), 0))
            .collect()
    }

    fn spans(positives: &[usize], len: usize) -> Vec<(usize, usize)> {
        detect_segments(&decisions(positives, len), &WindowConfig::default())
            .unwrap()
            .iter()
            .map(|d| (d.first, d.last))
            .collect()
    }

    #[test]
    fn isolated_run_is_one_segment() {
        assert_eq!(spans(&[10, 11, 12], 40), vec![(10, 12)]);
    }

    #[test]
    fn short_gap_is_absorbed() {
        assert_eq!(spans(&[10, 18], 40), vec![(10, 18)]);
        assert_eq!(spans(&[10, 20], 40), vec![(10, 20)]);
    }

    #[test]
    fn long_gap_splits() {
        assert_eq!(spans(&[10, 25], 40), vec![(10, 10), (25, 25)]);
        assert_eq!(spans(&[10, 21], 40), vec![(10, 10), (21, 21)]);
    }

    #[test]
    fn open_segment_closed_at_end() {
        assert_eq!(spans(&[39, 40], 40), vec![(39, 40)]);
        assert!(spans(&[], 40).is_empty());
    }

    #[test]
    fn out_of_order_rejected() {
        let mut det = SegmentDetector::new(10);
        det.push(&FrameDecision::hard(5, true, 0)).unwrap();
        assert!(matches!(
            det.push(&FrameDecision::hard(5, false, 0)),
            Err(Error::OutOfOrder { .. })
        ));
    }

    #[test]
    fn majority_vote() {
        let span = |v: &[usize]| -> Vec<FrameDecision> {
            v.iter()
                .enumerate()
                .map(|(i, &k)| FrameDecision::hard(i + 1, true, k))
                .collect()
        };
        assert_eq!(classify_segment(&span(&[1, 1, 0])).unwrap(), 1);
        assert_eq!(classify_segment(&span(&[2, 2, 2])).unwrap(), 2);
        assert_eq!(classify_segment(&span(&[0, 0, 1, 1])).unwrap(), 0);
        let mut with_absorbed = span(&[1, 0, 0, 1]);
        with_absorbed[1].is_signal = false;
        with_absorbed[2].is_signal = false;
        assert_eq!(classify_segment(&with_absorbed).unwrap(), 1);
        assert!(matches!(
            classify_segment(&decisions(&[], 3)),
            Err(Error::NoPositiveFrame)
        ));
    }

    #[test]
    fn segment_times() {
        let det = Detection {
            first: 6,
            last: 8,
            positives: vec![6, 8],
            votes: vec![2],
            p_signal_sum: 1.5,
        };
        let s = Segment::from_detection("r", &det, &WindowConfig::default());
        assert!((s.start_s - 1.0).abs() < 1e-12);
        assert!((s.end_s - 2.4).abs() < 1e-12);
        assert_eq!(s.n_frames, 3);
        assert_eq!(s.mean_p_signal, 0.75);
    }
}
