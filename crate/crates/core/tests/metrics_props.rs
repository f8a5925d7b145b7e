use evidex::metrics::{
    aggregate, area_fraction, binary_tv, crisp_fraction, random_mask, read_reports, summary_row, truth_iou,
    write_reports, EvidenceReport, Method,
};
use proptest::prelude::*;

fn row(i: usize, method: Method) -> EvidenceReport {
    let f = i as f64;
    EvidenceReport {
        image_id: format!("img_{i:05}"),
        method,
        y: i % 4,
        conf_x: 0.5 + 0.04 * f,
        conf_e: 0.3 + 0.06 * f,
        decision_preserved: i % 3 != 0,
        area_fraction: 0.01 * f * f,
        bin_fraction: 1.0 - 0.01 * f,
        tv_norm: 0.002 * f,
        rob_pass_rate: (i % 5) as f64 / 4.0,
        truth_iou: (i % 4 != 0).then(|| 0.1 * f),
        wall_seconds: 1.0 + f,
        seed: 7,
    }
}

/// Spreadsheet-style: plain column sums and population variance.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn ten_row_fixture_matches_recomputation() {
    let rows: Vec<_> = (0..10).map(|i| row(i, Method::MedCam)).collect();
    let summary = aggregate(&rows).unwrap();
    let check = |metric: &str, values: Vec<f64>| {
        let (mean, std) = mean_std(&values);
        let r = summary.iter().find(|r| r.metric == metric).unwrap_or_else(|| panic!("{metric}"));
        assert_eq!(r.n, values.len(), "{metric}");
        assert!((r.mean - mean).abs() < 1e-12, "{metric}: {} vs {mean}", r.mean);
        assert!((r.std - std).abs() < 1e-12, "{metric}: {} vs {std}", r.std);
    };
    check("conf_x", rows.iter().map(|r| r.conf_x).collect());
    check("conf_e", rows.iter().map(|r| r.conf_e).collect());
    check("area_fraction", rows.iter().map(|r| r.area_fraction).collect());
    check("tv_norm", rows.iter().map(|r| r.tv_norm).collect());
    check("rob_pass_rate", rows.iter().map(|r| r.rob_pass_rate).collect());
    check("truth_iou", rows.iter().filter_map(|r| r.truth_iou).collect());
    check(
        "preservation_rate",
        rows.iter().map(|r| f64::from(u8::from(r.decision_preserved))).collect(),
    );
    let delta = mean_std(&rows.iter().map(|r| r.conf_e).collect::<Vec<_>>()).0
        - mean_std(&rows.iter().map(|r| r.conf_x).collect::<Vec<_>>()).0;
    assert!((summary_row(&summary, Method::MedCam, "confidence_delta").unwrap() - delta).abs() < 1e-12);
}

#[test]
fn empty_input_is_rejected() {
    assert!(aggregate(&[]).is_err());
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(order in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
        let rows: Vec<_> = (0..12).map(|i| row(i, Method::ALL[i % 3])).collect();
        let shuffled: Vec<_> = order.iter().map(|&i| rows[i].clone()).collect();
        prop_assert_eq!(aggregate(&rows).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn scores_stay_in_unit_interval(
        bits in prop::collection::vec(any::<bool>(), 64),
        truth in prop::collection::vec(any::<bool>(), 64),
        soft in prop::collection::vec(0.0f64..=1.0, 64),
    ) {
        prop_assert!((0.0..=1.0).contains(&area_fraction(&bits)));
        prop_assert!((0.0..=1.0).contains(&crisp_fraction(&soft)));
        prop_assert!((0.0..=1.0).contains(&binary_tv(&bits, 8, 8)));
        match truth_iou(&bits, &truth).unwrap() {
            Some(v) => prop_assert!((0.0..=1.0).contains(&v)),
            None => prop_assert!(truth.iter().all(|&t| !t)),
        }
    }

    #[test]
    fn random_mask_marks_rounded_count(n in 1usize..500, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = random_mask(n, fraction, seed);
        prop_assert_eq!(m.iter().filter(|&&b| b).count(), (fraction * n as f64).round() as usize);
        prop_assert_eq!(m, random_mask(n, fraction, seed));
    }

    #[test]
    fn report_csv_round_trips(i in 0usize..50) {
        let rows = vec![row(i, Method::GradCam), row(i + 1, Method::Random)];
        let mut buf = Vec::new();
        write_reports(&mut buf, &rows).unwrap();
        prop_assert_eq!(read_reports(buf.as_slice()).unwrap(), rows);
    }
}
