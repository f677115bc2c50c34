use vocalseg::synth::{generate_soundscape, SoundscapeSpec};

fn spec(n_events: usize) -> SoundscapeSpec {
    SoundscapeSpec {
        duration_s: 120.0,
        n_events,
        min_gap_s: 3.0,
        ..SoundscapeSpec::default()
    }
}

#[test]
fn event_snr_matches_label() {
    let (mix, truth) = generate_soundscape(&spec(15), 21).unwrap();
    let (bg, empty) = generate_soundscape(&spec(0), 21).unwrap();
    assert!(empty.events.is_empty());
    assert_eq!(truth.events.len(), 15);
    for e in &truth.events {
        let range = e.start_sample..e.end_sample;
        let (mut p_ev, mut p_bg) = (0.0, 0.0);
        for i in range.clone() {
            let b = f64::from(bg.samples[i]);
            let s = f64::from(mix.samples[i]) - b;
            p_ev += s * s;
            p_bg += b * b;
        }
        let measured = 10.0 * (p_ev / p_bg).log10();
        assert!(
            (measured - e.snr_db).abs() < 1.0,
            "event at {} s: labeled {} dB, measured {measured} dB",
            e.start_s,
            e.snr_db
        );
        assert!((5.0..=20.0).contains(&e.snr_db));
    }
}

#[test]
fn events_are_ordered_and_separated() {
    let s = spec(20);
    let (audio, truth) = generate_soundscape(&s, 5).unwrap();
    assert_eq!(audio.len(), 120 * 16_000);
    assert!(truth.events[0].start_s >= s.min_gap_s - 1e-9);
    assert!(truth.events.last().unwrap().end_s <= s.duration_s - s.min_gap_s + 1e-9);
    for w in truth.events.windows(2) {
        assert!(w[1].start_s - w[0].end_s >= s.min_gap_s - 1e-9);
    }
    for c in ["low", "high"] {
        assert_eq!(truth.events.iter().filter(|e| e.class == c).count(), 10);
    }
    assert!(audio.samples.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn same_seed_same_soundscape() {
    let a = generate_soundscape(&spec(5), 8).unwrap();
    let b = generate_soundscape(&spec(5), 8).unwrap();
    assert_eq!(a.0.samples, b.0.samples);
    assert_eq!(a.1, b.1);
    let c = generate_soundscape(&spec(5), 9).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn impossible_packing_is_rejected() {
    let s = SoundscapeSpec {
        duration_s: 10.0,
        n_events: 10,
        ..SoundscapeSpec::default()
    };
    assert!(generate_soundscape(&s, 0).is_err());
}
