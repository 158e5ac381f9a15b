use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::{write_wav, Waveform};
use crate::manifest::ManifestEntry;
use crate::nn::ParamTree;
use crate::sslcore::{EncoderConfig, EncoderParams};

fn rec(i: usize, set: &str, label: Label, score: f64) -> ScoreRecord {
    ScoreRecord {
        id: format!("{set}-{i}"),
        set_name: set.to_string(),
        label,
        score,
    }
}

fn records(set: &str, bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
    bona.iter()
        .map(|&s| (Label::Bonafide, s))
        .chain(spoof.iter().map(|&s| (Label::Spoof, s)))
        .enumerate()
        .map(|(i, (l, s))| rec(i, set, l, s))
        .collect()
}

/// Counts every rate from scratch at every candidate threshold.
fn brute_eer(rs: &[ScoreRecord]) -> f64 {
    let mut cands: Vec<f64> = rs.iter().map(|r| r.score).collect();
    cands.push(f64::NEG_INFINITY);
    cands.push(f64::INFINITY);
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    let nb = rs.iter().filter(|r| r.label == Label::Bonafide).count() as f64;
    let ns = rs.len() as f64 - nb;
    let pts: Vec<(f64, f64)> = cands
        .iter()
        .map(|&t| {
            let far = rs.iter().filter(|r| r.label == Label::Spoof && r.score >= t).count() as f64 / ns;
            let frr = rs.iter().filter(|r| r.label == Label::Bonafide && r.score < t).count() as f64 / nb;
            (far, frr)
        })
        .collect();
    if let Some(&(far, _)) = pts.iter().find(|(a, b)| a == b) {
        return far;
    }
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 > 0.0 && d1 < 0.0 {
            // Both rates are linear in the interpolation weight; solve far = frr.
            let a = d0 / (d0 - d1);
            let far = w[0].0 + a * (w[1].0 - w[0].0);
            let frr = w[0].1 + a * (w[1].1 - w[0].1);
            return 0.5 * (far + frr);
        }
    }
    unreachable!()
}

#[test]
fn perfect_separation_gives_zero() {
    let r = compute_eer(&records("s", &[0.9, 0.8], &[0.1, 0.2])).unwrap();
    assert_eq!(r.eer, 0.0);
    assert_eq!((r.n_bona, r.n_spoof), (2, 2));
    assert!(r.threshold > 0.2 && r.threshold <= 0.8);
}

#[test]
fn interleaved_scores_give_one_third() {
    let rs = records("s", &[0.8, 0.6, 0.4], &[0.7, 0.5, 0.3]);
    let r = compute_eer(&rs).unwrap();
    assert!((r.eer - 1.0 / 3.0).abs() < 1e-15);
    assert!((brute_eer(&rs) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn interpolates_between_sweep_points() {
    // One bona fide and two spoof: FAR - FRR goes 1, 1/2, -1 with no exact zero.
    let rs = records("s", &[0.5], &[0.2, 0.9]);
    let r = compute_eer(&rs).unwrap();
    let b = brute_eer(&rs);
    assert!((r.eer - b).abs() < 1e-12);
    assert!(r.eer > 0.0 && r.eer < 1.0);
}

#[test]
fn single_class_is_an_input_error() {
    assert!(matches!(compute_eer(&records("s", &[0.1, 0.2], &[])), Err(Error::Input(_))));
    assert!(matches!(compute_eer(&records("s", &[], &[0.1])), Err(Error::Input(_))));
}

#[test]
fn misaligned_sets_pool_to_one_half() {
    let a = records("A", &[0.9, 0.8], &[0.6, 0.5]);
    let b = records("B", &[0.4, 0.3], &[0.1, 0.0]);
    assert_eq!(compute_eer(&a).unwrap().eer, 0.0);
    assert_eq!(compute_eer(&b).unwrap().eer, 0.0);
    assert_eq!(pooled_eer(&[a.clone(), b.clone()]).unwrap().eer, 0.5);
    assert_eq!(pooled_eer(&[b, a.clone()]).unwrap().eer, 0.5);
    assert_eq!(pooled_eer(&[a.clone()]).unwrap(), compute_eer(&a).unwrap());
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let n = rng.random_range(2..=50);
    // Coarse grid so that ties within and across classes are common.
    let levels = rng.random_range(2..12);
    let mut rs: Vec<ScoreRecord> = (0..n)
        .map(|i| {
            let label = if rng.random_bool(0.5) { Label::Bonafide } else { Label::Spoof };
            let score = rng.random_range(0..levels) as f64 * 0.25 - 1.0;
            rec(i, "r", label, score)
        })
        .collect();
    rs[0].label = Label::Bonafide;
    rs[1].label = Label::Spoof;
    rs
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..300 {
        let rs = random_records(&mut rng);
        let fast = compute_eer(&rs).unwrap().eer;
        let slow = brute_eer(&rs);
        assert!((fast - slow).abs() < 1e-9, "case {case}: {fast} vs {slow}");
        assert!((0.0..=1.0).contains(&fast));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn agrees_with_brute_force(seed in any::<u64>()) {
        let rs = random_records(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((compute_eer(&rs).unwrap().eer - brute_eer(&rs)).abs() < 1e-9);
    }

    #[test]
    fn rank_invariant(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0, kind in 0usize..3) {
        let rs = random_records(&mut ChaCha8Rng::seed_from_u64(seed));
        let f = |x: f64| match kind {
            0 => a * x + b,
            1 => (a * x).exp(),
            _ => (x + 3.0).powi(3) + b,
        };
        let mapped: Vec<ScoreRecord> = rs.iter().map(|r| ScoreRecord { score: f(r.score), ..r.clone() }).collect();
        prop_assert!((compute_eer(&rs).unwrap().eer - compute_eer(&mapped).unwrap().eer).abs() < 1e-12);
    }

    #[test]
    fn negating_and_swapping_labels_keeps_eer(seed in any::<u64>()) {
        let rs = random_records(&mut ChaCha8Rng::seed_from_u64(seed));
        let flipped: Vec<ScoreRecord> = rs
            .iter()
            .map(|r| ScoreRecord {
                score: -r.score,
                label: match r.label { Label::Bonafide => Label::Spoof, Label::Spoof => Label::Bonafide },
                ..r.clone()
            })
            .collect();
        prop_assert!((compute_eer(&rs).unwrap().eer - compute_eer(&flipped).unwrap().eer).abs() < 1e-12);
    }

    #[test]
    fn zero_exactly_when_separated(seed in any::<u64>()) {
        let rs = random_records(&mut ChaCha8Rng::seed_from_u64(seed));
        let min_b = rs.iter().filter(|r| r.label == Label::Bonafide).map(|r| r.score).fold(f64::INFINITY, f64::min);
        let max_s = rs.iter().filter(|r| r.label == Label::Spoof).map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(compute_eer(&rs).unwrap().eer == 0.0, min_b > max_s);
    }

    #[test]
    fn pooling_is_concatenation(seed in any::<u64>(), parts in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rs = random_records(&mut rng);
        let mut sets = vec![Vec::new(); parts];
        for r in &rs {
            sets[rng.random_range(0..parts)].push(r.clone());
        }
        prop_assert_eq!(pooled_eer(&sets).unwrap(), compute_eer(&sets.concat()).unwrap());
    }

    #[test]
    fn score_file_round_trips_bit_exactly(scores in prop::collection::vec(-1e6f64..1e6, 1..20), tiny in 1e-300f64..1e-200) {
        let mut rs: Vec<ScoreRecord> = scores.iter().enumerate().map(|(i, &s)| rec(i, "test-a", Label::Spoof, s)).collect();
        rs.push(rec(99, "test-b", Label::Bonafide, tiny));
        let back = parse_scores(&scores_to_text(&rs), Path::new("x")).unwrap();
        prop_assert_eq!(back, rs);
    }
}

#[test]
fn score_file_has_at_least_nine_significant_digits() {
    let t = scores_to_text(&[rec(0, "s", Label::Bonafide, 0.5)]);
    let score = t.trim_end().rsplit('\t').next().unwrap();
    let mantissa = score.split('e').next().unwrap().replace(['.', '-'], "");
    assert!(mantissa.len() >= 9, "{score}");
    assert!(parse_scores("a\tb\tbonafide\n", Path::new("x")).is_err());
    assert!(parse_scores("a\t\tbonafide\t1.0\n", Path::new("x")).is_err());
    assert!(parse_scores("a\tb\tmaybe\t1.0\n", Path::new("x")).is_err());
}

// ---- multi-round ------------------------------------------------------------------------

fn round_sets(seed: u64) -> Vec<(String, Vec<ScoreRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ["test-a", "test-b"]
        .iter()
        .map(|s| {
            let bona: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let spoof: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.7)).collect();
            (s.to_string(), records(s, &bona, &spoof))
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_rounds() {
    let rep = multi_round(&[5, 5, 5], |_, s| Ok(round_sets(s))).unwrap();
    assert_eq!(rep.rounds[0], rep.rounds[1]);
    assert_eq!(rep.rounds[1], rep.rounds[2]);
    assert_eq!(rep.mean["test-a"], rep.rounds[0].per_set["test-a"].eer);
    assert_eq!(rep.mean[POOLED], rep.rounds[0].pooled.eer);
}

#[test]
fn mean_is_arithmetic_average_and_report_lists_every_set() {
    let rep = multi_round(&[1, 2, 3], |_, s| Ok(round_sets(s))).unwrap();
    for set in ["test-a", "test-b"] {
        let want = rep.rounds.iter().map(|r| r.per_set[set].eer).sum::<f64>() / 3.0;
        assert_eq!(rep.mean[set], want);
    }
    let pooled = rep.rounds.iter().map(|r| r.pooled.eer).sum::<f64>() / 3.0;
    assert_eq!(rep.mean[POOLED], pooled);
    let text = rep.to_text();
    for set in ["test-a", "test-b", POOLED] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{set}\t"))), "{text}");
    }
    let table = eer_report(&rep.rounds[0]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "set\teer_pct\tthreshold\tn_bona\tn_spoof");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("Pooled\t"));
    assert_eq!(rows[1].split('\t').nth(3), Some("6"));
}

#[test]
fn failing_round_names_its_index() {
    let e = multi_round(&[1, 2, 3], |i, s| {
        if i == 1 {
            Err(Error::input("boom"))
        } else {
            Ok(round_sets(s))
        }
    })
    .unwrap_err();
    assert!(matches!(e, Error::Round { round: 1, .. }), "{e}");
    assert!(multi_round(&[], |_, s| Ok(round_sets(s))).is_err());
}

// ---- scoring and diagnostics ------------------------------------------------------------

fn tiny_encoder(seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        dim: 4,
        blocks: 1,
        heads: 2,
        ff_mult: 2,
        conv_channels: 2,
    };
    let mut p = EncoderParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.weights.visit_mut("", &mut |_, m| m.mapv_inplace(|v| v + rng.random_range(-0.3..0.3)));
    p
}

fn wave(i: usize, n: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
    Waveform::new(format!("w{i}"), (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
}

fn manifest_of(dir: &Path, n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new(dir);
    for i in 0..n {
        let w = wave(i, 1200 + 160 * i);
        let rel = format!("w{i}.wav");
        write_wav(&dir.join(&rel), &w).unwrap();
        m.entries.push(ManifestEntry {
            id: w.id.clone(),
            path: rel,
            label: if i % 3 == 0 { Label::Spoof } else { Label::Bonafide },
            source: "human".into(),
            subset: "test-x".into(),
        });
    }
    m
}

#[test]
fn scoring_keeps_manifest_order_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_of(dir.path(), 10);
    let model = CMModel::single(tiny_encoder(1), 2);
    let rs = score_dataset(&model, &m, "test-x").unwrap();
    assert_eq!(rs.len(), 10);
    for (r, e) in rs.iter().zip(&m.entries) {
        assert_eq!((&r.id, r.label, r.set_name.as_str()), (&e.id, e.label, "test-x"));
        assert!(r.score.is_finite());
    }
    assert_eq!(rs, score_dataset(&model, &m, "test-x").unwrap());
}

#[test]
fn unreadable_audio_lists_every_failed_id() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_of(dir.path(), 4);
    std::fs::remove_file(dir.path().join("w1.wav")).unwrap();
    std::fs::write(dir.path().join("w3.wav"), b"not audio").unwrap();
    let model = CMModel::single(tiny_encoder(1), 2);
    let msg = score_dataset(&model, &m, "test-x").unwrap_err().to_string();
    assert!(msg.contains("w1") && msg.contains("w3") && !msg.contains("w2 "), "{msg}");
}

#[test]
fn histogram_of_identical_encoders_is_a_spike_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_of(dir.path(), 3);
    let e = tiny_encoder(4);
    let h = feature_diff_histogram(&e, &e, &m, 9).unwrap();
    let n: u64 = (0..3).map(|i| ((1200 + 160 * i) / 320 * 4) as u64).sum();
    assert_eq!(h.counts[4], n);
    assert_eq!(h.total(), n);
    assert_eq!(h.edges.len(), 10);
    assert!(feature_diff_histogram(&e, &e, &m, 8).is_err());
}

#[test]
fn histogram_conserves_mass_and_mirrors() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_of(dir.path(), 4);
    let (a, b) = (tiny_encoder(4), tiny_encoder(5));
    let ab = feature_diff_histogram(&a, &b, &m, 21).unwrap();
    let ba = feature_diff_histogram(&b, &a, &m, 21).unwrap();
    let n: u64 = (0..4).map(|i| ((1200 + 160 * i) / 320 * 4) as u64).sum();
    assert_eq!(ab.total(), n);
    let mut rev = ba.counts.clone();
    rev.reverse();
    assert_eq!(ab.counts, rev);
    assert_eq!(ab.edges, ba.edges);
    assert_eq!(ab.edges[0], -ab.edges[21]);
}

#[test]
fn trajectory_table_shape_and_selection() {
    let w = wave(7, 16000);
    let (a, b) = (tiny_encoder(4), tiny_encoder(5));
    let t = feature_trajectory_export(&[("a".into(), &a), ("b".into(), &b)], &w, DimSelect::MaxDiffVariance).unwrap();
    assert_eq!(t.values.dim(), (50, 3));
    assert_eq!(t.columns, vec!["a", "b", "diff"]);
    assert!(!t.fallback);
    // Exhaustive variance scan over the difference.
    let fa = a.encode(&w).unwrap().values;
    let fb = b.encode(&w).unwrap().values;
    let var = |j: usize| {
        let col: Vec<f64> = (0..50).map(|i| fa[[i, j]] - fb[[i, j]]).collect();
        let m = col.iter().sum::<f64>() / 50.0;
        col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 50.0
    };
    for j in 0..4 {
        assert!(var(t.dim) >= var(j));
    }
    for i in 0..50 {
        assert_eq!(t.values[[i, 2]], fa[[i, t.dim]] - fb[[i, t.dim]]);
    }
    assert!(t.to_text().lines().nth(1).unwrap().starts_with("frame\ta\tb\tdiff"));
}

#[test]
fn trajectory_degenerate_cases() {
    let w = wave(7, 16000);
    let a = tiny_encoder(4);
    let t = feature_trajectory_export(&[("a".into(), &a), ("a2".into(), &a)], &w, DimSelect::MaxDiffVariance).unwrap();
    assert!(t.fallback);
    assert_eq!(t.dim, 0);
    assert!(t.values.column(2).iter().all(|&v| v == 0.0));
    let e = feature_trajectory_export(&[("a".into(), &a), ("b".into(), &a)], &w, DimSelect::Index(4)).unwrap_err();
    assert!(matches!(e, Error::Input(_)));
    let t = feature_trajectory_export(&[("a".into(), &a), ("b".into(), &a)], &w, DimSelect::Index(3)).unwrap();
    assert_eq!(t.dim, 3);
}
