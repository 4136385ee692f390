use dribble_web::{ball_in_view, fit_turn, fov_footprint, Sandbox};

#[test]
fn footprint_contains_only_visible_points() {
    let poly = fov_footprint(0.0, 0.0, 0.3, 0.2, -0.2, 1.0);
    assert!(poly.len() >= 6 && poly.len() % 2 == 0);
    let n = poly.len() / 2;
    let cx = poly.chunks(2).map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = poly.chunks(2).map(|p| p[1]).sum::<f64>() / n as f64;
    assert!(ball_in_view(0.0, 0.0, 0.3, 0.2, -0.2, 1.0, cx, cy));
    assert!(!ball_in_view(0.0, 0.0, 0.3, 0.2, -0.2, 1.0, -cx, -cy));
}

#[test]
fn wider_scale_sees_more() {
    let (bx, by) = (1.0, 1.73);
    assert!(!ball_in_view(0.0, 0.0, 0.0, 0.0, -0.3, 1.0, bx, by));
    assert!(ball_in_view(0.0, 0.0, 0.0, 0.0, -0.3, 2.0, bx, by));
}

#[test]
fn sandbox_moves_ball_along_command() {
    let mut s = Sandbox::new(1).unwrap();
    s.set_command(1.0, 0.0);
    s.step(400).unwrap();
    assert!((s.time() - 8.0).abs() < 1e-9);
    let v: serde_json::Value = serde_json::from_str(&s.state_json()).unwrap();
    assert_eq!(v["type"], "state");
    assert!(v["ball"]["x"].as_f64().unwrap() > 2.0, "{v}");
    assert!(v["task"].is_null());

    s.reset("obstacle_avoidance").unwrap();
    let v: serde_json::Value = serde_json::from_str(&s.state_json()).unwrap();
    assert_eq!(v["task"]["kind"], "obstacle_avoidance");
    assert!(s.reset("moon").is_err());
    s.place_ball(0.5, 0.5).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s.state_json()).unwrap();
    assert_eq!((v["ball"]["x"].as_f64(), v["ball"]["y"].as_f64()), (Some(0.5), Some(0.5)));
}

#[test]
fn turn_fit_recovers_polyline_corner() {
    let mut pts = Vec::new();
    for i in 0..20 {
        pts.extend([i as f64 * 0.1, 0.0]);
    }
    let a = 60f64.to_radians();
    for i in 1..=20 {
        let r = i as f64 * 0.1;
        pts.extend([1.9 + r * a.cos(), r * a.sin()]);
    }
    let fit = fit_turn(&pts, 19, 2).unwrap();
    assert!((fit[0] - 60.0).abs() < 1e-9, "{}", fit[0]);
    assert!((fit[3] - 1.0).abs() < 1e-12 && fit[4].abs() < 1e-12);
    assert!(fit_turn(&pts, 5, 0).is_err());
    assert!(fit_turn(&pts, 100, 0).is_err());
}
