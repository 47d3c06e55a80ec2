mod common;

use proptest::prelude::*;
use racekit::geom::{Pose2D, VehicleState};
use racekit::lattice::{BvpOptions, SplineParams};
use racekit::rbf::{
    build_training_set, test_error, train_rbf, Axis, GoalLattice, RbfError, RbfNetwork, RbfOptions, TrainingSet,
};
use rand::Rng;
use std::sync::OnceLock;

fn symmetric_lattice() -> GoalLattice {
    GoalLattice {
        x: Axis::new(1.5, 3.5, 5),
        y: Axis::new(-1.0, 1.0, 5),
        theta: Axis::new(-0.4, 0.4, 3),
    }
}

fn trained() -> &'static (TrainingSet, RbfNetwork) {
    static NET: OnceLock<(TrainingSet, RbfNetwork)> = OnceLock::new();
    NET.get_or_init(|| {
        let set = build_training_set(&VehicleState::default(), &symmetric_lattice().points(), &BvpOptions::default())
            .unwrap();
        let net = train_rbf(&set, &RbfOptions::default()).unwrap();
        (set, net)
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn mirrored_goals_mirror_the_parameters() {
    let (set, net) = trained();
    assert_eq!(set.excluded, 0, "the symmetric lattice must be fully solved");
    let mut rng = common::rng(3);
    for _ in 0..200 {
        let g = Pose2D::new(rng.random_range(1.5..3.5), rng.random_range(-1.0..1.0), rng.random_range(-0.4..0.4));
        let m = Pose2D::new(g.x, -g.y, -g.theta);
        let (p, q) = (net.infer(&g).unwrap(), net.infer(&m).unwrap());
        let tol = 1e-3;
        assert!(close(q.s, p.s, tol) && q.a == p.a, "{p:?} vs {q:?}");
        assert!(close(q.b, -p.b, tol) && close(q.c, -p.c, tol) && close(q.d, -p.d, tol), "{p:?} vs {q:?}");
    }
}

#[test]
fn training_goals_reproduce_their_endpoints() {
    let (set, net) = trained();
    let goals: Vec<Pose2D> = set.samples.iter().map(|s| s.goal).collect();
    let report = test_error(net, &goals, &symmetric_lattice().error_scale(), &BvpOptions::default()).unwrap();
    // the residue is the solver's own tolerance, not interpolation error
    assert!(report.worst < 1e-3, "{report:?}");
    assert_eq!(test_error(net, &[], &symmetric_lattice().error_scale(), &BvpOptions::default()).unwrap().count, 0);
}

#[test]
fn training_is_deterministic_and_persists_bit_exactly() {
    let (set, net) = trained();
    let again = train_rbf(set, &RbfOptions::default()).unwrap();
    assert_eq!(&again, net);
    let text = net.to_text();
    let back = RbfNetwork::from_text(&text).unwrap();
    assert_eq!(&back, net);
    assert_eq!(back.to_text(), text);
    let mut rng = common::rng(8);
    for _ in 0..100 {
        let g = Pose2D::new(rng.random_range(1.0..4.0), rng.random_range(-1.5..1.5), rng.random_range(-0.6..0.6));
        let (p, q) = (net.infer(&g).unwrap(), back.infer(&g).unwrap());
        assert_eq!(bits(&p), bits(&q));
    }
}

fn bits(p: &SplineParams) -> [u64; 5] {
    [p.s, p.a, p.b, p.c, p.d].map(f64::to_bits)
}

#[test]
fn untrained_and_corrupt_networks_are_rejected() {
    assert_eq!(RbfNetwork::default().infer(&Pose2D::origin()), Err(RbfError::Untrained));
    let text = trained().1.to_text();
    let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
    assert!(matches!(RbfNetwork::from_text(&truncated), Err(RbfError::Format { .. })));
    assert!(matches!(RbfNetwork::from_text("not a network"), Err(RbfError::Format { .. })));
}

#[test]
fn denser_lattices_do_not_get_worse() {
    let default = GoalLattice::default();
    let sparse = GoalLattice {
        x: Axis::new(1.0, 4.0, 5),
        y: Axis::new(-1.5, 1.5, 5),
        theta: Axis::new(-0.6, 0.6, 2),
    };
    let dense = default.refined(2);
    // cell centres of the densest lattice are disjoint from every training set
    let probes = dense.midpoints();
    let opts = BvpOptions::default();
    let errs: Vec<f64> = [sparse, default, dense]
        .iter()
        .map(|lattice| {
            let set = build_training_set(&VehicleState::default(), &lattice.points(), &opts).unwrap();
            let net = train_rbf(&set, &RbfOptions::default()).unwrap();
            test_error(&net, &probes, &default.error_scale(), &opts).unwrap().worst
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= 1.2 * w[0], "worst errors by density: {errs:?}");
    }
}

#[test]
fn lattice_refinement_keeps_bounds() {
    let l = GoalLattice::default();
    assert_eq!(l.points().len(), 9 * 9 * 3);
    assert_eq!(l.midpoints().len(), 8 * 8 * 2);
    let r = l.refined(2);
    assert_eq!((r.x.count, r.y.count, r.theta.count), (17, 17, 5));
    assert_eq!((r.x.min, r.x.max), (l.x.min, l.x.max));
    let points = r.points();
    assert!(l.points().iter().all(|p| points.contains(p)));
}

proptest! {
    #![proptest_config(common::proptest_config(256))]

    #[test]
    fn inference_is_pure(x in 1.0..4.0f64, y in -1.5..1.5f64, t in -0.6..0.6f64) {
        let net = &trained().1;
        let g = Pose2D::new(x, y, t);
        let p = net.infer(&g).unwrap();
        prop_assert_eq!(bits(&p), bits(&net.infer(&g).unwrap()));
        prop_assert_eq!(p.a, 0.0);
    }
}
