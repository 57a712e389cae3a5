use proptest::prelude::*;
use segforge_core::bench::{
    average_power, emit_report, energy_wh, parse_power_text, parse_report_csv, BenchReport, LatencyStats,
    PowerFormat, ReportFormat,
};

/// Piecewise-linear power sampled finely and integrated with small rectangles.
fn fine_average(points: &[(f64, f64)]) -> f64 {
    let steps = 200_000;
    let (t0, t1) = (points[0].0, points[points.len() - 1].0);
    let dt = (t1 - t0) / steps as f64;
    let at = |t: f64| {
        let i = points.windows(2).position(|w| t <= w[1].0).unwrap_or(points.len() - 2);
        let (a, b) = (points[i], points[i + 1]);
        a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
    };
    (0..steps).map(|k| at(t0 + (k as f64 + 0.5) * dt)).sum::<f64>() * dt / (t1 - t0)
}

#[test]
fn average_matches_fine_integration() {
    let points = [(0.0, 4.0), (0.1, 6.0), (0.35, 5.0), (0.4, 9.5), (1.0, 3.25)];
    let text: String = points
        .iter()
        .map(|(t, w)| format!("{},0,5000,{}\n", 1_717_000_000_000.0 + t * 1000.0, w * 1000.0))
        .collect();
    let trace = parse_power_text(PowerFormat::InaSysfs, &text).unwrap();
    assert!((average_power(&trace, None).unwrap() - fine_average(&points)).abs() <= 1e-6);
}

#[test]
fn garbage_lines_are_skipped() {
    let text = "timestamp, power.draw [W]\n\
                2024-05-29T16:26:40.000Z, 10 W\n\
                not a line\n\
                2024-05-29T16:26:41.000Z, -3 W\n\
                2024-05-29T16:26:39.000Z, 50 W\n\
                2024-05-29 16:26:42.000, 20\n";
    let trace = parse_power_text(PowerFormat::GpuSmiCsv, text).unwrap();
    assert_eq!(trace.samples.len(), 2);
    assert_eq!(trace.skipped, 4);
    assert!((average_power(&trace, None).unwrap() - 15.0).abs() < 1e-12);
    assert!(parse_power_text(PowerFormat::GpuSmiCsv, "junk\n").is_err());
}

#[test]
fn report_columns_are_consistent_after_csv() {
    let latency = LatencyStats::from_samples(vec![31.0, 34.0, 36.5, 33.25], 2, 7, false).unwrap();
    let report = BenchReport::new("fcn8s", "fcn8s_64x128_c35", "all", 38.44, latency, 1525, 22.65);
    let csv = emit_report(std::slice::from_ref(&report), ReportFormat::Csv).unwrap();
    let rows = parse_report_csv(&csv).unwrap();
    assert_eq!(rows, vec![report.row()]);
    assert!(rows[0].derived_error(1525) <= 1e-9);
    assert_eq!(rows[0].median_ms, 33.625);
}

proptest! {
    #[test]
    fn energy_is_linear(n in 1usize..5000, ms in 0.1f64..1000.0, w in 0.1f64..100.0, k in 1usize..5) {
        let e = energy_wh(n, ms, w);
        prop_assert!((energy_wh(n * k, ms, w) - k as f64 * e).abs() <= 1e-9 * e.max(1.0) * k as f64);
        prop_assert!((energy_wh(n, ms * k as f64, w) - k as f64 * e).abs() <= 1e-9 * e.max(1.0) * k as f64);
    }
}
