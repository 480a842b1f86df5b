use proptest::prelude::*;

use limbchan_core::archive::{decode_archive, encode_archive};
use limbchan_core::autodiff::{Graph, Tensor};
use limbchan_core::checkpoint::{decode_weights, encode_weights};
use limbchan_core::eval::{f1_score, generalization_report};
use limbchan_core::experiments::{build_scenario, scenario_definition, ScenarioOptions};
use limbchan_core::layers::{attention, Param};
use limbchan_core::preprocess::{downsample, frame, normalize, ChannelConfig, FrameDataset, STANDARD_LEADS};
use limbchan_core::rng::SeededRng;
use limbchan_core::train::{holdout_split, minibatches};
use limbchan_core::wfdb::{parse_header, DiagnosisLabel, CLASS_TABLE};

fn finite(range: f64) -> impl Strategy<Value = f64> {
    -range..range
}

fn label_strategy() -> impl Strategy<Value = DiagnosisLabel> {
    (0..CLASS_TABLE.len()).prop_map(|i| DiagnosisLabel::from_class_name(CLASS_TABLE[i].0))
}

fn dataset_strategy() -> impl Strategy<Value = FrameDataset> {
    (1usize..12, 1usize..6, 1usize..4)
        .prop_flat_map(|(n, t, records)| {
            (
                prop::collection::vec(finite(50.0), n * t * 12),
                prop::collection::vec(label_strategy(), n),
                prop::collection::vec(0..records, n),
                Just((n, t, records)),
            )
        })
        .prop_map(|(data, labels, record_ids, (n, t, records))| FrameDataset {
            data,
            n,
            t,
            k: 12,
            labels,
            channel_names: STANDARD_LEADS.iter().map(|s| s.to_string()).collect(),
            sampling_rate: 64.0,
            record_ids,
            record_names: (0..records).map(|r| format!("patient{r:03}/s{r:04}_re")).collect(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| 30.0 * rng.normal()).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_context_lies_in_the_state_hull(t in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let states: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let q: Vec<f64> = (0..d).map(|_| 3.0 * rng.normal()).collect();
        let (c, w) = attention(&q, &states).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..d {
            let lo = states.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min);
            let hi = states.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c[j] >= lo - 1e-12 && c[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn f1_counts_partition_the_input(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (p, l): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let m = f1_score(&p, &l).unwrap();
        prop_assert_eq!(m.total(), p.len());
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12 || m.f1 == 0.0);
        let mut rev_p = p.clone();
        let mut rev_l = l.clone();
        rev_p.reverse();
        rev_l.reverse();
        prop_assert_eq!(f1_score(&rev_p, &rev_l).unwrap(), m);
    }

    #[test]
    fn report_rows_cover_every_label(
        items in prop::collection::vec((any::<bool>(), label_strategy()), 1..80)
    ) {
        let (p, labels): (Vec<bool>, Vec<DiagnosisLabel>) = items.into_iter().unzip();
        let rep = generalization_report(&p, &labels).unwrap();
        prop_assert_eq!(rep.rows.iter().map(|r| r.n).sum::<usize>(), labels.len());
        prop_assert_eq!(rep.overall.total(), labels.len());
    }

    #[test]
    fn archive_round_trips(ds in dataset_strategy()) {
        let bytes = encode_archive(&ds).unwrap();
        let stored = FrameDataset {
            data: ds.data.iter().map(|&v| f64::from(v as f32)).collect(),
            ..ds
        };
        prop_assert_eq!(decode_archive(&bytes).unwrap(), stored);
    }

    #[test]
    fn truncated_archives_never_decode_to_other_data(ds in dataset_strategy(), cut in 1usize..64) {
        let bytes = encode_archive(&ds).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        if let Ok(back) = decode_archive(&bytes[..keep]) {
            prop_assert_eq!(back, decode_archive(&bytes).unwrap());
        }
    }

    #[test]
    fn weights_round_trip_through_f32(values in prop::collection::vec(finite(1e3), 1..40)) {
        let n = values.len();
        let p = Param::new("w", Tensor::new(vec![n], values.clone()).unwrap());
        let stored = decode_weights(&encode_weights(&[&p])).unwrap();
        prop_assert_eq!(stored.len(), 1);
        prop_assert_eq!(&stored[0].shape, &vec![n]);
        for (a, b) in stored[0].values.iter().zip(&values) {
            prop_assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn header_text_round_trips(
        rate in 1u32..5000,
        samples in 1usize..100_000,
        gains in prop::collection::vec((1u32..5000, -200i32..200), 1..12),
        comment in "[A-Za-z :()-]{0,40}",
    ) {
        let mut text = format!("rec{rate} {} {rate} {samples}\n", gains.len());
        for (i, (gain, base)) in gains.iter().enumerate() {
            text.push_str(&format!("rec.dat 16 {gain}({base})/mV 16 0 {base} 0 0 {}\n", STANDARD_LEADS[i].to_lowercase()));
        }
        text.push_str(&format!("#{comment}\n"));
        let h = parse_header(&text).unwrap();
        prop_assert_eq!(h.n_signals, gains.len());
        prop_assert_eq!(parse_header(&h.to_text()).unwrap(), h);
    }

    #[test]
    fn resampling_keeps_constants_and_length(level in finite(10.0), seconds in 6usize..9) {
        // the anti-aliasing filter reaches about 2.3 s to either side
        let margin = 160;
        let n = 1000 * seconds;
        let x = Tensor::new(vec![n, 2], vec![level; 2 * n]).unwrap();
        let y = downsample(&x, 1000.0, 64.0).unwrap();
        prop_assert_eq!(y.shape(), &[64 * seconds, 2]);
        let m = y.shape()[0];
        for v in &y.data()[2 * margin..2 * (m - margin)] {
            prop_assert!((v - level).abs() < 1e-9 * level.abs().max(1.0));
        }
    }

    #[test]
    fn normalized_frames_are_standardized(t in 2usize..50, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::new(vec![t, 3], (0..3 * t).map(|_| 5.0 + 4.0 * rng.normal()).collect()).unwrap();
        let y = normalize(&x);
        for c in 0..3 {
            let col: Vec<f64> = (0..t).map(|i| y.data()[i * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frames_tile_the_signal(t in 1usize..300, len in 1usize..50, stride in 1usize..50) {
        let x = Tensor::new(vec![t, 1], (0..t).map(|i| i as f64).collect()).unwrap();
        let frames = frame(&x, len, stride);
        let expected = if t < len { 0 } else { (t - len) / stride + 1 };
        prop_assert_eq!(frames.len(), expected);
        for (i, f) in frames.iter().enumerate() {
            prop_assert_eq!(f.data()[0], (i * stride) as f64);
            prop_assert_eq!(f.shape(), &[len, 1]);
        }
    }

    #[test]
    fn lead_resolution_is_case_insensitive(picks in prop::sample::subsequence((0..12).collect::<Vec<usize>>(), 1..12)) {
        let leads: Vec<String> = picks.iter().map(|&i| STANDARD_LEADS[i].to_uppercase()).collect();
        let c = ChannelConfig::standard(&leads).unwrap();
        prop_assert_eq!(c.indices, picks);
    }

    #[test]
    fn minibatches_partition_indices(n in 1usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let batches = minibatches(n, bs, true, &mut SeededRng::new(seed));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        if bs > 1 && batches.len() > 1 {
            prop_assert!(batches.iter().all(|b| b.len() >= 2));
        }
    }

    #[test]
    fn holdout_is_a_partition(n in 1usize..200, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let (train, val) = holdout_split(n, frac, &mut SeededRng::new(seed));
        prop_assert!(!train.is_empty());
        let mut all = [train, val].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn scenario_splits_are_disjoint(ds in dataset_strategy(), scenario in 1u32..3, seed in any::<u64>(), grouped in any::<bool>()) {
        let opts = ScenarioOptions { group_by_record: grouped, ..ScenarioOptions::default() };
        let (_, classes) = scenario_definition(scenario, &opts).unwrap();
        let split = build_scenario(scenario, &ds, seed, &opts).unwrap();
        let mut all = [split.train.clone(), split.test.clone()].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.n).collect::<Vec<_>>());
        if !grouped {
            for &i in &split.train {
                prop_assert!(classes.contains(&ds.labels[i].class_name));
            }
        } else {
            for &i in &split.train {
                prop_assert!(split.test.iter().all(|&j| ds.record_ids[j] != ds.record_ids[i]));
            }
        }
    }
}
