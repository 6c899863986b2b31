use ms2tiv_web::{monte_carlo_json, sensitivity_curve_json, simulate_and_estimate_json, MAX_SITES};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn estimate_reports_both_fits_and_sites() {
    let v = parse(&simulate_and_estimate_json(30, 80, "base", 7).unwrap());
    assert_eq!(v["true_ate"], 21.0);
    for key in ["unadjusted", "adjusted"] {
        let e = &v[key];
        let (lo, pt, hi) = (
            e["ci_lower"].as_f64().unwrap(),
            e["point"].as_f64().unwrap(),
            e["ci_upper"].as_f64().unwrap(),
        );
        assert!(lo < pt && pt < hi, "{key}");
        let g: Vec<f64> = e["gamma"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        assert_eq!(g.len(), 4);
    }
    let sites = v["sites"].as_array().unwrap().len();
    assert_eq!(sites + v["excluded_sites"].as_u64().unwrap() as usize, 30);
    // Same seed, same answer.
    assert_eq!(
        simulate_and_estimate_json(30, 80, "base", 7).unwrap(),
        simulate_and_estimate_json(30, 80, "base", 7).unwrap()
    );
}

#[test]
fn estimate_rejects_bad_input() {
    assert!(simulate_and_estimate_json(30, 80, "nope", 1)
        .unwrap_err()
        .contains("unknown variant"));
    assert!(simulate_and_estimate_json(MAX_SITES + 1, 80, "base", 1).is_err());
}

#[test]
fn sensitivity_curve_is_linear_in_theta() {
    let inputs = r#"{"theta_v":0,"cov_b1_a1":0.2,"cov_b2_a1":0.1,"cov_b1_b2":0.05,
        "var_b1":0.3,"var_b2":0.2,"beta1":0.4,"beta2":0.7}"#;
    let v = parse(&sensitivity_curve_json(inputs, -2.0, 2.0, 5).unwrap());
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 5);
    assert_eq!(pts[2]["theta_v"], 0.0);
    assert_eq!(pts[2]["total_bias"], 0.0);
    let lo = pts[0]["total_bias"].as_f64().unwrap();
    let hi = pts[4]["total_bias"].as_f64().unwrap();
    assert!((lo + hi).abs() < 1e-12);
    assert!(sensitivity_curve_json(inputs, 1.0, -1.0, 5).is_err());
    assert!(sensitivity_curve_json("{}", -1.0, 1.0, 5)
        .unwrap_err()
        .starts_with("invalid inputs"));
}

#[test]
fn monte_carlo_summarizes_three_estimators() {
    let v = parse(&monte_carlo_json(20, 60, "base", 20, 3).unwrap());
    let rows = v["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["estimator"].as_str().unwrap()).collect();
    assert_eq!(names, ["naive", "ms2tiv", "ms2tiv_adj"]);
    let adj = &rows[2];
    let cov = adj["coverage_improper"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    assert!(monte_carlo_json(20, 60, "base", 10_000, 3).is_err());
}
