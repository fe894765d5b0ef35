use comeir_demo::{beam_points, quantize_points, scaling_rows};

const POINTS: &str = "0,0, 0.2,0.1, 5,5, 5.3,4.9, -4,3, -4.2,3.1, 3,-3, 3.1,-2.8";

#[test]
fn scaling_rows_report_bases_and_growth() {
    let v = scaling_rows("intra", "0.125,1.0").unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows[0]["levels"][0]["base"], 16.0);
    assert_eq!(rows[1]["levels"][0]["base"], 128.0);
    assert!(rows[0]["params"].as_u64() < rows[1]["params"].as_u64());
    assert!(scaling_rows("both", "1").is_err());
    assert!(scaling_rows("inter", "").is_err());
}

#[test]
fn quantized_points_reconstruct_inside_the_plane() {
    let v = quantize_points(POINTS, 2, 4, 1).unwrap();
    let items = v["items"].as_array().unwrap();
    assert_eq!(items.len(), 8);
    for it in items {
        assert_eq!(it["sid"].as_array().unwrap().len(), 2);
        let (p, r) = (&it["point"], &it["recon"]);
        let d = (p[0].as_f64().unwrap() - r[0].as_f64().unwrap()).hypot(p[1].as_f64().unwrap() - r[1].as_f64().unwrap());
        assert!(d < 1.0, "{it}");
    }
    assert!(quantize_points("1,2,3", 2, 4, 1).is_err());
}

#[test]
fn full_width_beam_matches_exhaustive() {
    let v = beam_points(POINTS, 2, 4, 1, 5.1, 5.0, 16, 1.0).unwrap();
    assert_eq!(v["agreeing_prefix"].as_u64().unwrap() as usize, v["beam"].as_array().unwrap().len());
    let top = v["beam"][0]["id"].as_str().unwrap();
    assert!(top == "p002" || top == "p003", "{top}");
}
