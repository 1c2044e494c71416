use groupclip_core::pipeline::{build_schedule, ClipMode, CostModel, Workaround};
use groupclip_harness::config::Mode;
use groupclip_harness::presets;
use groupclip_harness::run::{run, write_artifacts};
use groupclip_harness::telemetry::{
    metrics_header, write_metrics, write_norms, write_trace, MetricsRow, NormHistogram,
    NORMS_HEADER, TRACE_HEADER,
};
use proptest::prelude::*;

fn parse(bytes: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("not a number: {s:?}"))
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, 0.0f64..1.0, Just(0.0)]
}

prop_compose! {
    fn metrics_rows(groups: usize)(
        rows in proptest::collection::vec(
            (any::<u32>(), finite(), proptest::option::of(0.0f64..=1.0),
             proptest::collection::vec((finite(), 0.0f64..=1.0, finite()), groups),
             0.0f64..1e4, any::<u32>()),
            0..12)
    ) -> Vec<MetricsRow> {
        rows.into_iter().enumerate().map(|(i, (epoch, loss, accuracy, per_group, ms, bytes))| MetricsRow {
            step: i as u64,
            epoch: epoch as u64,
            loss,
            accuracy,
            thresholds: per_group.iter().map(|g| g.0).collect(),
            clipped_fraction: per_group.iter().map(|g| g.1).collect(),
            noise_std: per_group.iter().map(|g| g.2).collect(),
            wall_time_ms: ms,
            peak_grad_bytes: bytes as usize,
        }).collect()
    }
}

proptest! {
    #[test]
    fn metrics_csv_follows_the_schema((groups, rows) in (1usize..6).prop_flat_map(|k| (Just(k), metrics_rows(k)))) {
        let mut buf = Vec::new();
        write_metrics(&mut buf, groups, &rows).unwrap();
        let (header, records) = parse(&buf);
        prop_assert_eq!(&header, &metrics_header(groups));
        prop_assert_eq!(header.len(), 6 + 3 * groups);
        prop_assert_eq!(records.len(), rows.len());
        for (rec, row) in records.iter().zip(&rows) {
            prop_assert_eq!(rec.len(), header.len());
            prop_assert_eq!(rec[0].parse::<u64>().unwrap(), row.step);
            prop_assert_eq!(rec[1].parse::<u64>().unwrap(), row.epoch);
            prop_assert_eq!(num(&rec[2]), row.loss);
            prop_assert_eq!(rec[3].is_empty(), row.accuracy.is_none());
            let per: Vec<f64> = rec[4..4 + 3 * groups].iter().map(|s| num(s)).collect();
            let want: Vec<f64> = row.thresholds.iter().chain(&row.clipped_fraction).chain(&row.noise_std).copied().collect();
            prop_assert_eq!(per, want);
            prop_assert_eq!(rec[rec.len() - 1].parse::<usize>().unwrap(), row.peak_grad_bytes);
        }
    }

    #[test]
    fn norm_rows_are_ordered(norms in proptest::collection::vec(0.0f64..1e3, 1..300), step in any::<u32>(), group in 1usize..9) {
        let h = NormHistogram::from_norms(step as u64, group, &norms);
        prop_assert!(h.quantiles.windows(2).all(|w| w[0] <= w[1]));
        let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().copied().fold(0.0, f64::max);
        prop_assert!(h.quantiles[0] >= lo && h.quantiles[5] <= hi);

        let mut buf = Vec::new();
        write_norms(&mut buf, std::slice::from_ref(&h)).unwrap();
        let (header, records) = parse(&buf);
        prop_assert_eq!(header, NORMS_HEADER.map(String::from).to_vec());
        prop_assert_eq!(records.len(), 1);
        let back: Vec<f64> = records[0][2..].iter().map(|s| num(s)).collect();
        prop_assert_eq!(back, h.quantiles.to_vec());
    }

    #[test]
    fn traces_follow_the_schema(devices in 1usize..5, j in 1usize..6, w in 0usize..4) {
        let mode = [
            ClipMode::PerDevice,
            ClipMode::Flat(Workaround::Retain),
            ClipMode::Flat(Workaround::Offload),
            ClipMode::Flat(Workaround::Rematerialize),
        ][w];
        let schedule = build_schedule(devices, j, mode, &CostModel::default()).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &schedule).unwrap();
        let (header, records) = parse(&buf);
        prop_assert_eq!(header, TRACE_HEADER.map(String::from).to_vec());
        prop_assert_eq!(records.len(), schedule.events.len());
        let mut last = 0.0;
        for (i, rec) in records.iter().enumerate() {
            prop_assert_eq!(rec[0].parse::<usize>().unwrap(), i);
            let t = num(&rec[1]);
            prop_assert!(t >= last);
            last = t;
            if !rec[2].is_empty() {
                prop_assert!(rec[2].parse::<usize>().unwrap() < devices);
            }
            if !rec[3].is_empty() {
                prop_assert!(rec[3].parse::<usize>().unwrap() < j);
            }
            prop_assert!(["forward", "backward", "recompute", "sync"].contains(&rec[4].as_str()));
        }
    }
}

#[test]
fn training_artifacts_follow_the_schema() {
    let mut cfg = presets::drift().unwrap();
    cfg.optimizer.epochs = 3;
    cfg.telemetry.norms_every = 5;
    let out = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&out, &cfg, dir.path()).unwrap();
    let k = out.groups;

    let (header, rows) = parse(&std::fs::read(dir.path().join("metrics.csv")).unwrap());
    assert_eq!(header, metrics_header(k));
    let steps = out.state.step as usize;
    assert_eq!(rows.len(), steps);
    let spe = steps / 3;
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        assert_eq!(num(&r[1]) as usize, i / spe + 1);
        // Accuracy only on each epoch's last step; no timing unless enabled.
        assert_eq!(!r[3].is_empty(), (i + 1) % spe == 0, "row {i}");
        for f in &r[4 + k..4 + 2 * k] {
            assert!((0.0..=1.0).contains(&num(f)));
        }
        assert_eq!(r[4 + 3 * k], "0");
    }

    let (header, rows) = parse(&std::fs::read(dir.path().join("norms.csv")).unwrap());
    assert_eq!(header, NORMS_HEADER.map(String::from).to_vec());
    assert_eq!(rows.len(), steps.div_ceil(5) * k);
    for r in &rows {
        assert_eq!(num(&r[0]) as usize % 5, 0);
        let q: Vec<f64> = r[2..].iter().map(|s| num(s)).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }
    let written = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    let back = groupclip_harness::RunConfig::from_toml(&written, "config.toml".as_ref()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn nonprivate_runs_record_no_norms() {
    let mut cfg = presets::drift().unwrap();
    cfg.optimizer.epochs = 1;
    cfg.policy.mode = Mode::Nonprivate;
    let out = run(&cfg).unwrap();
    assert!(out.norms.is_empty());
    assert!(out
        .metrics
        .iter()
        .all(|m| m.noise_std.iter().all(|&s| s == 0.0)));
}

#[test]
fn wall_time_is_recorded_when_enabled() {
    let mut cfg = presets::drift().unwrap();
    cfg.optimizer.epochs = 1;
    cfg.telemetry.wall_time = true;
    let out = run(&cfg).unwrap();
    assert!(out.metrics.iter().any(|m| m.wall_time_ms > 0.0));
}
