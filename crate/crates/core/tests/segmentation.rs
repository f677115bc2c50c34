mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{detect_reference, vote_reference};
use vocalseg::audio::WindowConfig;
use vocalseg::segment::{classify_segment, detect_segments, FrameDecision, SegmentDetector};

fn window(overlap: f64) -> WindowConfig {
    WindowConfig {
        overlap,
        ..WindowConfig::default()
    }
}

fn decisions(flags: &[bool], classes: &[usize]) -> Vec<FrameDecision> {
    flags
        .iter()
        .zip(classes)
        .enumerate()
        .map(|(i, (&s, &c))| FrameDecision::hard(i + 1, s, c))
        .collect()
}

fn check_against_reference(flags: &[bool], classes: &[usize], overlap: f64) {
    let cfg = window(overlap);
    let lookback = cfg.lookback().unwrap();
    let got = detect_segments(&decisions(flags, classes), &cfg).unwrap();
    let want = detect_reference(flags, lookback);
    assert_eq!(got.len(), want.len(), "flags {flags:?}");
    for (g, (first, last, positives)) in got.iter().zip(&want) {
        assert_eq!((g.first, g.last), (*first, *last));
        assert_eq!(&g.positives, positives);
        let votes: Vec<usize> = positives.iter().map(|&i| classes[i - 1]).collect();
        assert_eq!(g.majority(), vote_reference(&votes, 4));
    }
}

#[test]
fn lookback_values() {
    assert_eq!(window(0.8).lookback().unwrap(), 10);
    assert_eq!(window(0.5).lookback().unwrap(), 4);
}

#[test]
fn matches_reference_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let n = rng.random_range(1..=200);
        let density = rng.random_range(0.02..0.6);
        let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let overlap = if rng.random_bool(0.5) { 0.5 } else { 0.8 };
        check_against_reference(&flags, &classes, overlap);
    }
}

#[test]
fn gap_at_lookback_merges_and_beyond_splits() {
    let cfg = window(0.8);
    let mut flags = vec![false; 40];
    flags[0] = true;
    flags[10] = true; // gap of exactly 10
    flags[21] = true; // gap of 11
    let classes = vec![0; 40];
    let got = detect_segments(&decisions(&flags, &classes), &cfg).unwrap();
    let spans: Vec<(usize, usize)> = got.iter().map(|d| (d.first, d.last)).collect();
    assert_eq!(spans, vec![(1, 11), (22, 22)]);
}

#[test]
fn streaming_equals_batch_with_sparse_indices() {
    // indices need not be contiguous for the streaming detector
    let mut det = SegmentDetector::new(4);
    let mut out = Vec::new();
    for (i, s) in [(1, true), (3, true), (9, true), (10, false), (14, false)] {
        out.extend(det.push(&FrameDecision::hard(i, s, 0)).unwrap());
    }
    out.extend(det.finish());
    let spans: Vec<(usize, usize)> = out.iter().map(|d| (d.first, d.last)).collect();
    assert_eq!(spans, vec![(1, 3), (9, 9)]);
}

#[test]
fn vote_enumeration_small() {
    // every class sequence of length <= 6 over 3 classes
    for len in 1..=6u32 {
        for code in 0..3usize.pow(len) {
            let mut c = code;
            let classes: Vec<usize> = (0..len)
                .map(|_| {
                    let k = c % 3;
                    c /= 3;
                    k
                })
                .collect();
            let span: Vec<FrameDecision> = classes
                .iter()
                .enumerate()
                .map(|(i, &k)| FrameDecision::hard(i + 1, true, k))
                .collect();
            assert_eq!(classify_segment(&span).unwrap(), vote_reference(&classes, 3));
        }
    }
}

#[test]
fn negative_frames_do_not_vote() {
    let span = vec![
        FrameDecision::hard(1, true, 1),
        FrameDecision::hard(2, false, 0),
        FrameDecision::hard(3, false, 0),
        FrameDecision::hard(4, true, 1),
    ];
    assert_eq!(classify_segment(&span).unwrap(), 1);
}

proptest! {
    #[test]
    fn segments_are_disjoint_ordered_and_bounded(
        flags in prop::collection::vec(any::<bool>(), 1..300),
        half in any::<bool>(),
    ) {
        let cfg = window(if half { 0.5 } else { 0.8 });
        let lookback = cfg.lookback().unwrap();
        let classes = vec![0; flags.len()];
        let got = detect_segments(&decisions(&flags, &classes), &cfg).unwrap();
        let positives = flags.iter().filter(|&&f| f).count();
        prop_assert_eq!(got.iter().map(|d| d.positives.len()).sum::<usize>(), positives);
        for d in &got {
            prop_assert!(flags[d.first - 1] && flags[d.last - 1]);
            for w in d.positives.windows(2) {
                prop_assert!(w[1] - w[0] <= lookback);
            }
        }
        for w in got.windows(2) {
            prop_assert!(w[1].first - w[0].last > lookback);
        }
    }
}
