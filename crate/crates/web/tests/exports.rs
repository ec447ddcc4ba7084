use rowleak_web::{lifo_placement, projected_range_json, simulate_recovery};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn lifo_reverses_release_order() {
    let v = parse(&lifo_placement("0:1, 1:0, 2:1", 8));
    assert_eq!(v["placed"], serde_json::json!(["2:1", "1:0", "0:1"]));
    assert_eq!(v["pageset_after"], serde_json::json!([]));
}

#[test]
fn lifo_reports_bad_input() {
    let v = parse(&lifo_placement("0-1", 8));
    assert!(v["error"].as_str().unwrap().contains("row:slot"));
    let v = parse(&lifo_placement("99:0", 8));
    assert!(v.get("error").is_some());
}

#[test]
fn range_for_sign_bit_only() {
    let v = parse(&projected_range_json(0x80, 0x00, 1.0));
    assert_eq!(v["prefix_len"], 1);
    assert_eq!(v["code_min"], 0);
    assert_eq!(v["code_max"], 127);
    assert_eq!(v["class"], "partial(1)");
    let v = parse(&projected_range_json(0xff, 0x81, 1.0));
    assert_eq!(v["class"], "full");
    assert_eq!(v["code_min"], -127);
}

#[test]
fn recovery_curves_for_both_strategies() {
    let v = parse(&simulate_recovery(3, 20));
    for s in ["msb", "allbits"] {
        let pts = v[s].as_array().unwrap();
        assert_eq!(pts.len(), 20);
        let msb: Vec<f64> = pts.iter().map(|p| p["msb"].as_f64().unwrap()).collect();
        assert!(msb.windows(2).all(|w| w[0] <= w[1]));
    }
}
