use gta_core::data_io::{
    edge_recovery_metrics, generate_synthetic, make_windows, median_downsample, parse_series, read_scores,
    read_series, stack_windows, write_scores, write_series, AnomalyKind, AnomalySpec, NormalizerStats, RawSeries,
    ScoreRow, SyntheticSpec, WindowConfig,
};
use gta_core::graph_policy::AdjacencySample;
use gta_core::numerics::generator;
use proptest::prelude::*;
use rand::Rng;

fn series(values: Vec<Vec<f64>>, labels: Option<Vec<u8>>) -> RawSeries {
    let len = values[0].len();
    let names = (0..values.len()).map(|i| format!("x{i}")).collect();
    RawSeries::new(names, (0..len).map(|t| t.to_string()).collect(), values, labels).unwrap()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

// normalization ---------------------------------------------------------------

#[test]
fn normalize_examples() {
    let train = series(vec![vec![0.0, 2.0, 1.0], vec![5.0, 5.0, 5.0]], None);
    let stats = NormalizerStats::fit(&train).unwrap();
    let n = stats.normalize(&train).unwrap();
    assert_eq!(n.values[0], vec![0.0, 1.0, 0.5]);
    assert_eq!(n.values[1], vec![0.0, 0.0, 0.0]);
    let test = series(vec![vec![3.0], vec![5.0]], None);
    assert_eq!(stats.normalize(&test).unwrap().values[0], vec![1.5]);
    let wrong = series(vec![vec![3.0]], None);
    assert!(stats.normalize(&wrong).is_err());
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(values in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let train = series(vec![values.clone()], None);
        let stats = NormalizerStats::fit(&train).unwrap();
        let back = stats.denormalize(&stats.normalize(&train).unwrap()).unwrap();
        for (a, b) in back.values[0].iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn downsampled_labels_are_block_maxima(labels in prop::collection::vec(0u8..2, 1..60), factor in 1usize..8) {
        let x = series(vec![vec![0.0; labels.len()]], Some(labels.clone()));
        let d = median_downsample(&x, factor).unwrap();
        let dl = d.labels.unwrap();
        prop_assert_eq!(dl.len(), labels.len().div_ceil(factor));
        for (b, &l) in dl.iter().enumerate() {
            let any = labels[b * factor..((b + 1) * factor).min(labels.len())].contains(&1);
            prop_assert_eq!(l == 1, any);
        }
    }

    #[test]
    fn windows_tile_the_series(len in 8usize..40, window in 2usize..7, stride in 1usize..4) {
        let x = series(vec![(0..len).map(|t| t as f64).collect(), (0..len).map(|t| -(t as f64)).collect()], None);
        let cfg = WindowConfig { window, label_len: 1, stride };
        let ws = make_windows(&x, &cfg).unwrap();
        prop_assert_eq!(ws.len(), (len - window).div_ceil(stride));
        for w in &ws {
            // last encoder element of each sensor precedes the target
            prop_assert_eq!(w.encoder[window - 1], w.target[0] - 1.0);
            prop_assert_eq!(w.encoder[2 * window - 1], w.target[1] + 1.0);
        }
    }
}

// downsampling ----------------------------------------------------------------

#[test]
fn median_examples() {
    let x = series(vec![vec![1.0, 9.0, 2.0, 8.0, 3.0]], Some(vec![0, 0, 1, 0, 0]));
    assert_eq!(median_downsample(&x, 1).unwrap(), x);
    let d = median_downsample(&x, 5).unwrap();
    assert_eq!(d.values[0], vec![3.0]);
    assert_eq!(d.labels, Some(vec![1]));
    let even = series(vec![vec![1.0, 2.0, 3.0, 10.0]], None);
    assert_eq!(median_downsample(&even, 4).unwrap().values[0], vec![2.5]);
    assert!(median_downsample(&even, 0).is_err());
}

// windows -----------------------------------------------------------------------

#[test]
fn window_counting_and_layout() {
    let x = series(vec![(0..100).map(f64::from).collect(), (0..100).map(|t| f64::from(t) * 10.0).collect()], None);
    let cfg = WindowConfig::default();
    let ws = make_windows(&x, &cfg).unwrap();
    assert_eq!(ws.len(), 40);
    assert_eq!(ws[0].target_index, 60);
    assert_eq!(ws[39].target_index, 99);
    // the 61st step, one-based
    assert_eq!(ws[0].target, vec![60.0, 600.0]);
    for w in &ws {
        assert_eq!(&w.decoder[30 * 2..], &[0.0, 0.0]);
        let t = w.target_index as f64;
        assert_eq!(&w.decoder[..2], &[t - 30.0, (t - 30.0) * 10.0]);
        assert_eq!(w.decoder[29 * 2], t - 1.0);
    }
    let batch = stack_windows(&[&ws[0], &ws[5]], 2, &cfg).unwrap();
    assert_eq!(batch.encoder.shape(), &[2, 2, 60]);
    assert_eq!(batch.decoder.shape(), &[2, 31, 2]);
    assert_eq!(batch.target.at(&[1, 1]), 650.0);
    assert_eq!(batch.encoder.at(&[1, 1, 0]), 50.0);

    let short = series(vec![vec![0.0; 60]], None);
    assert!(make_windows(&short, &cfg).is_err());
    let bad = WindowConfig { window: 10, label_len: 10, stride: 1 };
    assert!(make_windows(&x, &bad).is_err());
}

// synthetic generator ----------------------------------------------------------------

fn quiet_spec(nodes: usize, edges: Vec<[usize; 2]>, lags: Vec<usize>, couplings: Vec<f64>) -> SyntheticSpec {
    SyntheticSpec {
        nodes,
        train_length: 300,
        test_length: 200,
        edges,
        lags,
        couplings,
        noise: 0.0,
        anomalies: vec![],
        ..SyntheticSpec::default()
    }
}

#[test]
fn child_is_base_plus_lagged_parent() {
    let spec = quiet_spec(2, vec![[0, 1]], vec![2], vec![1.0]);
    let data = generate_synthetic(&spec, &mut generator(1)).unwrap();
    let full = |i: usize| -> Vec<f64> {
        let mut v = data.train.values[i].clone();
        v.extend(&data.test.values[i]);
        v
    };
    let (parent, child) = (full(0), full(1));
    assert_eq!(parent, data.base[0]);
    for t in 2..parent.len() {
        assert_eq!(child[t], data.base[1][t] + parent[t - 2]);
    }
}

#[test]
fn spike_on_root_reaches_descendants() {
    let mut spec = quiet_spec(3, vec![[0, 1], [1, 2]], vec![2, 3], vec![1.0, 0.5]);
    spec.anomalies = vec![AnomalySpec {
        kind: AnomalyKind::Spike,
        node: 0,
        start: 50,
        duration: 4,
        magnitude: 2.0,
    }];
    let with = generate_synthetic(&spec, &mut generator(2)).unwrap();
    spec.anomalies.clear();
    let without = generate_synthetic(&spec, &mut generator(2)).unwrap();
    let delta = |i: usize, t: usize| with.test.values[i][t] - without.test.values[i][t];
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(delta(0, 50), 2.0));
    assert_eq!(delta(1, 51), 0.0);
    assert!(close(delta(1, 52), 2.0));
    assert!(close(delta(2, 55), 1.0));
    assert_eq!(delta(2, 54), 0.0);
    assert!(with.train.values == without.train.values);
    let labels = with.test.labels.unwrap();
    let flagged: Vec<usize> = (0..200).filter(|&t| labels[t] == 1).collect();
    // segment plus the longest downstream lag (2 + 3)
    assert_eq!(flagged, (50..59).collect::<Vec<_>>());
}

#[test]
fn stuck_and_drift_shapes() {
    let mut spec = quiet_spec(2, vec![[0, 1]], vec![1], vec![0.5]);
    spec.anomalies = vec![
        AnomalySpec { kind: AnomalyKind::Stuck, node: 0, start: 20, duration: 5, magnitude: 0.0 },
        AnomalySpec { kind: AnomalyKind::Drift, node: 1, start: 100, duration: 4, magnitude: 2.0 },
    ];
    let data = generate_synthetic(&spec, &mut generator(3)).unwrap();
    let x0 = &data.test.values[0];
    assert!((20..25).all(|t| x0[t] == x0[19]));
    spec.anomalies.clear();
    let clean = generate_synthetic(&spec, &mut generator(3)).unwrap();
    let ramp: Vec<f64> = (100..104).map(|t| data.test.values[1][t] - clean.test.values[1][t]).collect();
    for (k, r) in ramp.iter().enumerate() {
        assert!((r - 0.5 * (k + 1) as f64).abs() < 1e-12);
    }
}

#[test]
fn uncoupled_nodes_are_uncorrelated() {
    let spec = SyntheticSpec {
        train_length: 10_000,
        test_length: 10,
        couplings: vec![0.0; 12],
        anomalies: vec![],
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &mut generator(4)).unwrap();
    for i in 0..10 {
        for j in i + 1..10 {
            let r = pearson(&data.train.values[i], &data.train.values[j]);
            assert!(r.abs() < 0.05, "nodes {i},{j}: r = {r}");
        }
    }
}

#[test]
fn default_spec_shape_and_reproducibility() {
    let spec = SyntheticSpec::default();
    spec.validate().unwrap();
    assert_eq!(spec.nodes, 10);
    assert_eq!(spec.edges.len(), 12);
    assert_eq!(spec.anomalies.len(), 8);
    let a = generate_synthetic(&spec, &mut generator(5)).unwrap();
    let b = generate_synthetic(&spec, &mut generator(5)).unwrap();
    assert_eq!((a.train.len(), a.test.len()), (5000, 2000));
    let bits = |s: &RawSeries| s.values.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.train), bits(&b.train));
    assert_eq!(bits(&a.test), bits(&b.test));
    assert_eq!(a.test.labels, b.test.labels);
    let c = generate_synthetic(&spec, &mut generator(6)).unwrap();
    assert_ne!(bits(&a.train), bits(&c.train));
    assert_eq!(a.planted.edge_count(), 12);
    assert_eq!(a.test.timestamps[0], "5000");
}

#[test]
fn invalid_specs_are_rejected() {
    let base = SyntheticSpec::default();
    let cases = [
        SyntheticSpec { nodes: 1, ..base.clone() },
        SyntheticSpec {
            edges: vec![[0, 1], [1, 0]],
            lags: vec![1, 1],
            couplings: vec![0.5, 0.5],
            anomalies: vec![],
            ..base.clone()
        },
        SyntheticSpec { lags: vec![0; 12], ..base.clone() },
        SyntheticSpec { couplings: vec![0.5], ..base.clone() },
        SyntheticSpec {
            anomalies: vec![AnomalySpec { kind: AnomalyKind::Spike, node: 0, start: 1995, duration: 10, magnitude: 1.0 }],
            ..base.clone()
        },
    ];
    for spec in cases {
        assert!(generate_synthetic(&spec, &mut generator(0)).is_err(), "{spec:?}");
    }
}

#[test]
fn spec_reads_from_key_value_text() {
    let text = r#"
        nodes = 3
        train_length = 50
        test_length = 40
        edges = [[0, 1], [1, 2]]
        lags = [1, 2]
        couplings = [0.5, 0.4]
        noise = 0.1

        [[anomalies]]
        kind = "drift"
        node = 0
        start = 10
        duration = 5
        magnitude = 1.5
    "#;
    let spec = SyntheticSpec::from_toml(text).unwrap();
    assert_eq!(spec.edges, vec![[0, 1], [1, 2]]);
    assert_eq!(spec.anomalies[0].kind, AnomalyKind::Drift);
    assert_eq!(spec.ar, SyntheticSpec::default().ar);
    assert!(SyntheticSpec::from_toml("nodes = 3\nbogus = 1").is_err());
    assert!(SyntheticSpec::from_toml("nodes = 1").is_err());
}

// edge recovery -------------------------------------------------------------------

#[test]
fn edge_recovery_examples() {
    let planted = SyntheticSpec::default().planted();
    let same = edge_recovery_metrics(&planted, &planted).unwrap();
    assert_eq!(same.f1, 1.0);
    let complete = edge_recovery_metrics(&AdjacencySample::complete(10), &planted).unwrap();
    assert_eq!(complete.recall, 1.0);
    assert_eq!(complete.precision, 12.0 / 90.0);
    assert!(edge_recovery_metrics(&AdjacencySample::complete(3), &planted).is_err());
}

#[test]
fn edge_recovery_matches_pair_count() {
    let mut rng = generator(7);
    let planted = SyntheticSpec::default().planted();
    for _ in 0..20 {
        let edges: Vec<(usize, usize)> = (0..10)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j)
            .filter(|_| rng.gen_bool(0.2))
            .collect();
        let learned = AdjacencySample::from_edges(10, &edges).unwrap();
        let r = edge_recovery_metrics(&learned, &planted).unwrap();
        let truth: Vec<(usize, usize)> = planted.edges();
        let tp = edges.iter().filter(|e| truth.contains(e)).count();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (tp, edges.len() - tp, 12 - tp, 90 - edges.len() - 12 + tp));
    }
}

// files ---------------------------------------------------------------------------

#[test]
fn series_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(
        &SyntheticSpec { train_length: 50, test_length: 30, anomalies: vec![], ..SyntheticSpec::default() },
        &mut generator(8),
    )
    .unwrap();
    let path = dir.path().join("test.csv");
    write_series(&path, &data.test, Some("seed=7\nsynthetic test split")).unwrap();
    let back = read_series(&path).unwrap();
    assert_eq!(back, data.test);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# seed=7\n# synthetic test split\ntimestamp,s0,s1,"));
    assert!(text.lines().nth(2).unwrap().ends_with(",label"));
}

#[test]
fn csv_rejects_gaps_and_bad_labels() {
    let ok = "timestamp,a,b\n0,1.0,2\n1,3,4.5\n";
    let s = parse_series(ok.as_bytes()).unwrap();
    assert_eq!(s.values, vec![vec![1.0, 3.0], vec![2.0, 4.5]]);
    assert_eq!(s.labels, None);
    for bad in [
        "timestamp,a,b\n0,1.0,\n",
        "timestamp,a,b\n0,1.0\n",
        "timestamp,a,label\n0,1.0,2\n",
        "timestamp,a\n0,nan\n",
        "time,a\n0,1\n",
        "timestamp,a\n0,x\n",
    ] {
        assert!(parse_series(bad.as_bytes()).is_err(), "{bad:?}");
    }
}

#[test]
fn score_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    let rows = vec![
        ScoreRow { timestamp: "60".into(), score: 0.125, gt_label: Some(0), pred_label: 0 },
        ScoreRow { timestamp: "61".into(), score: 3.5e-7, gt_label: None, pred_label: 1 },
    ];
    write_scores(&path, &rows, Some("seed=1")).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("# seed=1\ntimestamp,score,gt_label,pred_label\n"));
    assert_eq!(read_scores(&path).unwrap(), rows);
}
