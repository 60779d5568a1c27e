use mdsampler_demo::{gumbel_explorer_json, schedule_json, tv_curve_json};
use serde_json::Value;

fn parse(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn gumbel_explorer_matches_exact_prefix_law() {
    let out = parse(&gumbel_explorer_json("0.5, -1, 2, 0", 2, 200_000, 3).unwrap());
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    let total: f64 = rows.iter().map(|r| r["exact"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    // Most likely prefix starts with the largest logit.
    let best = rows.iter().max_by(|a, b| a["exact"].as_f64().unwrap().total_cmp(&b["exact"].as_f64().unwrap())).unwrap();
    assert_eq!(best["prefix"][0], 2);
    assert!(out["tv"].as_f64().unwrap() < 0.01);
}

#[test]
fn gumbel_explorer_rejects_bad_input() {
    assert!(gumbel_explorer_json("1, x", 1, 10, 0).is_err());
    assert!(gumbel_explorer_json("1, 2", 3, 10, 0).is_err());
    assert!(gumbel_explorer_json("0 0 0 0 0 0 0 0 0 0", 5, 10, 0).is_err());
    assert!(gumbel_explorer_json("1, 2", 1, 0, 0).is_err());
}

#[test]
fn tv_curve_stays_under_bound_and_reports_skips() {
    let out = parse(&tv_curve_json(1, 2, 1.0, "4, 8, 12, 40", 0).unwrap());
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let tvs: Vec<f64> = rows.iter().map(|r| r["tv"].as_f64().unwrap()).collect();
    assert!(tvs.windows(2).all(|w| w[1] < w[0]));
    for r in rows {
        assert!(r["tv"].as_f64().unwrap() <= r["bound"].as_f64().unwrap().min(1.0));
    }
    assert_eq!(out["skipped"][0]["N"], 40);
}

#[test]
fn schedule_rows_cover_the_sequence() {
    let rows = parse(&schedule_json("cosine", 64, 8, 6.0).unwrap());
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[7]["unmasked"], 64);
    let sizes: u64 = rows.iter().map(|r| r["round_size"].as_u64().unwrap()).sum();
    assert_eq!(sizes, 64);
    assert_eq!(rows[7]["temperature"], 0.0);
    assert!(schedule_json("linear", 64, 8, 6.0).is_err());
}
