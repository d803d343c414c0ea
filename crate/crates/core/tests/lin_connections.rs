use rtip::lin::{self, ConnectionKind, FoldBranch, LinSetup, LinSolution};
use rtip::SystemParams;

const TOL: f64 = 1e-8;

fn base() -> SystemParams {
    SystemParams::default()
}

fn check_geometry(sol: &LinSolution) {
    let d = &sol.diagnostics;
    assert!(d.gap_identity_error <= TOL, "gap identity {}", d.gap_identity_error);
    assert!(d.section_error <= TOL, "section {}", d.section_error);
    for v in d.departure_projection.iter().chain(&d.arrival_projection) {
        assert!(v.abs() <= TOL, "projection {v}");
    }
    assert!(d.lin_space_rank == 2, "Lin space rank {}", d.lin_space_rank);
    let m = sol.subintervals;
    assert!((sol.w_minus[m][2] - sol.params.lambda_max / 2.0).abs() <= TOL);
}

fn r0(setup: &LinSetup) -> f64 {
    let c = lin::find_critical_rate(&base(), 0.1, (0.19, 0.21), setup).unwrap();
    check_geometry(&c.solution);
    assert!(c.solution.xi.abs() < 1e-9);
    c.r
}

#[test]
fn ptoe_rate_at_reference_point() {
    let r = r0(&LinSetup::default());
    assert!((r - 0.198422).abs() < 2e-3, "r0 = {r}");
}

#[test]
fn ptoe_rate_is_robust_to_segment_length() {
    let r = r0(&LinSetup::default());
    let longer = r0(&LinSetup {
        time_factor: 1.25,
        ..LinSetup::default()
    });
    assert!((r - longer).abs() < 1e-4, "{r} vs {longer}");
}

#[test]
fn ptoe_rate_is_insensitive_to_departure_offset() {
    let r = r0(&LinSetup::default());
    let closer = r0(&LinSetup {
        delta: 1e-4,
        ..LinSetup::default()
    });
    assert!((r - closer).abs() < 1e-4, "{r} vs {closer}");
}

#[test]
fn partial_tipping_threshold_lower_branch() {
    let c = lin::critical_ptop_rate(&base(), 0.1, FoldBranch::Lower, lin::PTOP_SEED_RATE, &LinSetup::default()).unwrap();
    assert!((c.r - 0.13321).abs() < 2e-3, "r1 = {}", c.r);
    let s = &c.solution;
    assert_eq!(s.kind, ConnectionKind::Ptop1);
    check_geometry(s);
    assert!(s.xi.abs() < 1e-9);
    let um = s.u_minus.as_ref().unwrap();
    assert!((um[s.subintervals].dot(&s.adjoint_normal) - 1.0).abs() < 1e-8);
    let dropped = s.diagnostics.dropped_adjoint_condition.unwrap();
    assert!(dropped.abs() < 1e-4, "dropped adjoint condition {dropped}");
}

#[test]
fn total_tipping_threshold_upper_branch() {
    let c = lin::critical_ptop_rate(&base(), 0.1, FoldBranch::Upper, lin::PTOP_SEED_RATE, &LinSetup::default()).unwrap();
    assert!((c.r - 0.201226).abs() < 2e-3, "r2 = {}", c.r);
    check_geometry(&c.solution);
}

#[test]
fn partial_threshold_is_robust_to_segment_length() {
    let run = |setup: &LinSetup| {
        lin::critical_ptop_rate(&base(), 0.1, FoldBranch::Lower, lin::PTOP_SEED_RATE, setup)
            .unwrap()
            .r
    };
    let (r, longer) = (
        run(&LinSetup::default()),
        run(&LinSetup {
            time_factor: 1.25,
            ..LinSetup::default()
        }),
    );
    assert!((r - longer).abs() < 1e-4, "{r} vs {longer}");
}

#[test]
fn thresholds_close_up_towards_the_fold_of_cycles() {
    let setup = LinSetup::default();
    let rate = |a: f64, branch: FoldBranch, seed: f64| lin::critical_ptop_rate(&base(), a, branch, seed, &setup).unwrap().r;
    let (r1a, r2a) = (rate(0.1, FoldBranch::Lower, 0.15), rate(0.1, FoldBranch::Upper, 0.15));
    let (r1b, r2b) = (rate(0.15, FoldBranch::Lower, 0.13), rate(0.15, FoldBranch::Upper, 0.13));
    assert!(r1b < r1a && r2b < r2a);
    assert!(r2b - r1b < r2a - r1a);
    // PtoE rate sits inside the partial band at a = 0.1.
    let r0 = r0(&setup);
    assert!(r1a < r0 && r0 < r2a);
}

#[test]
fn ptoe_curve_points_reconverge_from_scratch() {
    let setup = LinSetup::default();
    let seed = lin::find_critical_rate(&base(), 0.1, (0.19, 0.21), &setup).unwrap().solution;
    let curve = lin::continue_threshold(&seed, (0.02, 0.22), &setup).unwrap();
    assert!(curve.points.len() > 10);
    assert!(curve.points.first().unwrap().a < 0.03 && curve.points.last().unwrap().a > 0.2);
    for w in curve.points.windows(2) {
        assert!(w[1].a > w[0].a && w[1].r > w[0].r, "r0 increases with a");
    }
    for pt in curve.points.iter().step_by(curve.points.len() / 4) {
        let again = lin::find_critical_rate(&base(), pt.a, (pt.r - 0.005, pt.r + 0.005), &setup).unwrap();
        assert!((again.r - pt.r).abs() < 1e-6, "a = {}: {} vs {}", pt.a, again.r, pt.r);
    }
}

#[test]
fn partial_threshold_curve_matches_pointwise_solves() {
    let setup = LinSetup::default();
    let seed = lin::critical_ptop_rate(&base(), 0.1, FoldBranch::Lower, 0.15, &setup).unwrap().solution;
    let curve = lin::continue_threshold(&seed, (0.08, 0.12), &setup).unwrap();
    assert!(curve.points.len() > 3);
    for w in curve.points.windows(2) {
        assert!(w[1].r < w[0].r, "r1 decreases with a");
    }
    for pt in [&curve.points[0], curve.points.last().unwrap()] {
        let again = lin::critical_ptop_rate(&base(), pt.a, FoldBranch::Lower, 0.15, &setup).unwrap();
        assert!((again.r - pt.r).abs() < 1e-6, "a = {}: {} vs {}", pt.a, again.r, pt.r);
    }
}
