use dpn_demo::{cost_report, free_energy_trace, refine_scene};

#[test]
fn refinement_shapes_and_scores() {
    let r = refine_scene(3, 0.35, 0.1);
    assert_eq!((r.width(), r.height()), (32, 32));
    for px in [r.gt(), r.unary(), r.refined()] {
        assert_eq!(px.len(), 32 * 32 * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
    }
    assert!((0.0..=1.0).contains(&r.unary_miou()));
    assert!(r.refined_miou() > r.unary_miou());
}

#[test]
fn zero_smoothing_keeps_unary_labels() {
    let r = refine_scene(8, 0.3, 0.0);
    assert_eq!(r.unary(), r.refined());
    assert_eq!(r.unary_miou(), r.refined_miou());
}

#[test]
fn clean_scene_is_perfect() {
    let r = refine_scene(1, 0.0, 0.05);
    assert_eq!(r.unary(), r.gt());
    assert_eq!(r.unary_miou(), 1.0);
}

#[test]
fn trace_has_initial_value_plus_one_per_pass() {
    let t = free_energy_trace(2, 0.3, 0.1, 4, true);
    assert_eq!(t.len(), 5);
    assert!(t.iter().all(|v| v.is_finite()));
    assert_eq!(free_energy_trace(2, 0.3, 0.1, 0, false).len(), 2);
}

#[test]
fn cost_text() {
    let text = cost_report(21, 5, 512, 50, 10);
    assert!(text.contains("b12 137625600000 (1.376×10^11)"), "{text}");
    assert!(cost_report(0, 5, 512, 50, 10).starts_with("error:"));
}
