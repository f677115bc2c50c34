mod common;

use std::path::PathBuf;
use std::sync::OnceLock;

use common::{match_events, train_on_soundscape};
use vocalseg::audio::{write_wav, WindowConfig};
use vocalseg::checkpoint::Model;
use vocalseg::config::RunConfig;
use vocalseg::features::FrontEnd;
use vocalseg::segment::{
    detect_segments, export_clips, process_many, process_recording, FrameDecision, Segment,
    StreamConfig,
};
use vocalseg::synth::{generate_soundscape, SoundscapeSpec};

fn training_spec() -> SoundscapeSpec {
    SoundscapeSpec {
        duration_s: 180.0,
        n_events: 30,
        min_gap_s: 3.0,
        ..SoundscapeSpec::default()
    }
}

fn model() -> &'static (tempfile::TempDir, Model) {
    static MODEL: OnceLock<(tempfile::TempDir, Model)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let m = train_on_soundscape(dir.path(), &training_spec(), &RunConfig::default(), 1);
        (dir, m)
    })
}

fn recording(dir: &std::path::Path, name: &str, n_events: usize, seed: u64) -> (PathBuf, vocalseg::synth::GroundTruth) {
    let spec = SoundscapeSpec {
        duration_s: 30.0,
        n_events,
        min_gap_s: 4.0,
        ..SoundscapeSpec::default()
    };
    let (audio, truth) = generate_soundscape(&spec, seed).unwrap();
    let path = dir.join(format!("{name}.wav"));
    write_wav(&path, &audio).unwrap();
    (path, truth)
}

#[test]
fn planted_events_are_found_and_classified() {
    let (_, m) = model();
    let dir = tempfile::tempdir().unwrap();
    let (path, truth) = recording(dir.path(), "planted", 3, 77);
    let front = FrontEnd::from_config(&m.frontend).unwrap();
    let set = process_recording(&path, m, &front, &StreamConfig::default()).unwrap();
    assert_eq!(set.recording, "planted");
    assert!((set.duration_s - 30.0).abs() < 1e-9);
    let matched = match_events(&truth.events, &set.segments, &m.repertoire);
    assert!(matched.iter().all(|&(hit, class_ok)| hit && class_ok), "{matched:?} {:?}", set.segments);
    for w in set.segments.windows(2) {
        assert!(w[0].end_s <= w[1].start_s + 1.0);
    }
}

#[test]
fn background_alone_gives_no_segments() {
    let (_, m) = model();
    let dir = tempfile::tempdir().unwrap();
    let (path, truth) = recording(dir.path(), "quiet", 0, 78);
    assert!(truth.events.is_empty());
    let front = FrontEnd::from_config(&m.frontend).unwrap();
    let set = process_recording(&path, m, &front, &StreamConfig::default()).unwrap();
    assert!(set.segments.is_empty(), "{:?}", set.segments);
}

#[test]
fn batch_size_and_resampling_do_not_change_decisions() {
    let (_, m) = model();
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = recording(dir.path(), "rec", 3, 79);
    let front = FrontEnd::from_config(&m.frontend).unwrap();
    let a = process_recording(&path, m, &front, &StreamConfig::default()).unwrap();
    let small = StreamConfig {
        batch_frames: 7,
        read_chunk: 1000,
    };
    let b = process_recording(&path, m, &front, &small).unwrap();
    let same_frames = |x: &[Segment], y: &[Segment]| {
        x.len() == y.len()
            && x.iter()
                .zip(y)
                .all(|(p, q)| p.first_frame == q.first_frame && p.last_frame == q.last_frame && p.class == q.class)
    };
    assert!(same_frames(&a.segments, &b.segments));

    let many = process_many(&[path.clone(), path.clone()], m, &front, &StreamConfig::default());
    for (_, r) in many {
        assert_eq!(r.unwrap(), a);
    }
    let clips = export_clips(&path, &a, &m.repertoire, &m.window, dir.path().join("clips")).unwrap();
    assert_eq!(clips.len(), a.segments.len());
    for (c, s) in clips.iter().zip(&a.segments) {
        let r = hound::WavReader::open(c).unwrap();
        let expected = ((s.end_s - s.start_s) * 16_000.0).round() as u32;
        assert!(r.duration().abs_diff(expected) <= 1);
    }
}

#[test]
fn truth_derived_frames_bracket_each_event() {
    // a frame is positive when its centre falls inside an event
    let spec = SoundscapeSpec {
        duration_s: 60.0,
        n_events: 6,
        min_gap_s: 3.0,
        ..SoundscapeSpec::default()
    };
    let (audio, truth) = generate_soundscape(&spec, 5).unwrap();
    let cfg = WindowConfig::default();
    let n = cfg.frame_count(audio.len());
    let decisions: Vec<FrameDecision> = (1..=n)
        .map(|b| {
            let centre = cfg.frame_start(b) + 0.5;
            let hit = truth
                .events
                .iter()
                .position(|e| e.start_s <= centre && centre < e.end_s);
            FrameDecision::hard(b, hit.is_some(), usize::from(hit.is_some_and(|i| truth.events[i].class == "high")))
        })
        .collect();
    let dets = detect_segments(&decisions, &cfg).unwrap();
    assert_eq!(dets.len(), truth.events.len());
    for (d, e) in dets.iter().zip(&truth.events) {
        let s = Segment::from_detection("x", d, &cfg);
        assert!((s.start_s - (e.start_s - 0.5)).abs() <= 0.2 + 1e-9, "{s:?} {e:?}");
        assert!((s.end_s - (e.end_s + 0.5)).abs() <= 0.2 + 1e-9, "{s:?} {e:?}");
        assert_eq!(s.class, usize::from(e.class == "high"));
    }
}
