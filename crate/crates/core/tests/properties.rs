use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgloop::covering::{closed_geodesic_from_clifford, is_clifford_translation, lorentz_distance_flat};
use tgloop::geodesic::{exp_map, integrate_geodesic};
use tgloop::hillclimb::{
    hill_climb, hill_step, is_closed_geodesic, radial_decomposition, ClimbParams, Direction, Verdict,
};
use tgloop::jacobi::{dexp, determinant_profile, JacobiPropagator};
use tgloop::loopspace::{
    class_length_bounds, continuation_path, find_loop, loop_residual, BasePath, LoopCandidate, Sampler, SolveOptions,
};
use tgloop::manifold::{DeckElement, SpacetimeModel, TangentVec, WarpProfile};

fn opts() -> SolveOptions {
    SolveOptions::default()
}

fn warped() -> SpacetimeModel {
    SpacetimeModel::warped_cylinder(WarpProfile::Cosh, 1.0)
}

fn warped_loop(x: f64, vx: f64) -> LoopCandidate {
    let m = warped();
    let t = m.deck_element("T").unwrap();
    find_loop(&m, &TangentVec::new([0.0, x], [1.05, vx]), &t, &opts()).unwrap()
}

fn minkowski_quotient(b: Vec<f64>) -> (SpacetimeModel, DeckElement) {
    let g = DeckElement::translation("g", b);
    let m = SpacetimeModel::flat_quotient(
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]),
        vec![1.0, 0.0],
        vec![g.clone()],
        2,
    )
    .unwrap();
    (m, g)
}

fn boost(rapidity: f64) -> DeckElement {
    let (c, s) = (rapidity.cosh(), rapidity.sinh());
    DeckElement {
        label: "B".into(),
        a: vec![vec![c, s], vec![s, c]],
        b: vec![0.0, 0.0],
    }
}

/// Lorentzian length of a chart curve by Simpson quadrature.
fn curve_length(m: &SpacetimeModel, curve: impl Fn(f64) -> (Vec<f64>, Vec<f64>), n: usize) -> f64 {
    let h = 1.0 / n as f64;
    (0..=n)
        .map(|k| {
            let (p, v) = curve(k as f64 * h);
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * (-m.inner(&p, &v, &v).unwrap()).max(0.0).sqrt()
        })
        .sum::<f64>()
        * h
        / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solutions_lie_in_loop_space(t0 in -2.0..2.0f64, x0 in 0.0..1.0f64, v0 in 0.8..1.3f64, v1 in -0.2..0.2f64) {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let lp = find_loop(&m, &TangentVec::new([t0, x0], [v0, v1]), &t, &opts()).unwrap();
        let (_, r) = loop_residual(&m, &lp.v, &t, 1e-12).unwrap();
        prop_assert!(r < 1e-9);
        prop_assert!(m.classify(&lp.v).unwrap().is_timelike());
    }

    #[test]
    fn continuation_conserves_deck_and_length_is_continuous(x0 in 0.1..0.5f64, target in -0.3..0.3f64) {
        let m = warped();
        let start = warped_loop(x0, 0.05);
        let steps = 8;
        let path = continuation_path(&m, &start, &BasePath::Segment(vec![0.0, target]), steps, &opts()).unwrap();
        prop_assert!(path.completed());
        prop_assert!(path.nodes.iter().all(|n| n.deck.label == start.deck.label));
        prop_assert!(path.continuous);
        let dp = (target - x0).abs() / steps as f64;
        for w in path.nodes.windows(2) {
            prop_assert!((w[1].length - w[0].length).abs() < 10.0 * dp);
        }
    }

    #[test]
    fn dexp_matches_finite_differences(
        model in 0usize..4, b0 in -1.0..1.0f64, b1 in -1.0..1.0f64,
        v0 in -2.0..2.0f64, v1 in -2.0..2.0f64, w0 in -1.0..1.0f64, w1 in -1.0..1.0f64,
    ) {
        let m = [SpacetimeModel::minkowski(2), SpacetimeModel::cylinder(1.0), warped(), SpacetimeModel::ads2()][model].clone();
        let v = TangentVec::new([b0, b1], [v0, v1]);
        let h = 1e-5;
        let lin = dexp(&m, &v, &[w0, w1], 1e-12).unwrap();
        let plus = exp_map(&m, &TangentVec::new([b0, b1], [v0 + h * w0, v1 + h * w1]), 1e-12).unwrap();
        let minus = exp_map(&m, &TangentVec::new([b0, b1], [v0 - h * w0, v1 - h * w1]), 1e-12).unwrap();
        let fd: Vec<f64> = m.chart_delta(&plus, &minus).iter().map(|d| d / (2.0 * h)).collect();
        let err = ((lin[0] - fd[0]).powi(2) + (lin[1] - fd[1]).powi(2)).sqrt();
        let scale = (lin[0].powi(2) + lin[1].powi(2)).sqrt().max(1e-3);
        prop_assert!(err / scale < 1e-4, "lin {:?} fd {:?}", lin, fd);
    }

    #[test]
    fn flat_determinant_keeps_sign(b0 in -3.0..3.0f64, b1 in 0.0..1.0f64, speed in 0.1..2.0f64, slope in -0.99..0.99f64) {
        let m = SpacetimeModel::cylinder(1.0);
        let seg = integrate_geodesic(&m, &TangentVec::new([b0, b1], [speed, speed * slope]), 10.0, 1e-10).unwrap();
        let prof = determinant_profile(&JacobiPropagator::new(&m, &seg).unwrap(), 200);
        prop_assert!(prof.iter().skip(1).all(|(_, d)| *d > 0.5));
    }

    #[test]
    fn gauss_lemma_holds(x0 in 0.1..0.5f64, delta in 0.005..0.04f64, sign in prop::bool::ANY) {
        let m = warped();
        let lp = warped_loop(x0, 0.05);
        let d = if sign { delta } else { -delta };
        let dec = radial_decomposition(&m, &lp, d, 1.5 * delta, 1e-11).unwrap();
        prop_assert!(dec.max_gauss() < 1e-8);
        prop_assert!(dec.min_abs_rdot() >= 1.0 - 1e-8);
        prop_assert!(dec.rdot.iter().all(|r| r.signum() as i32 == dec.rdot_sign));
    }

    #[test]
    fn stretch_and_shorten_split_non_closed_loops(x0 in 0.1..0.5f64, delta in 0.005..0.02f64) {
        let m = warped();
        let lp = warped_loop(x0, 0.05);
        prop_assert!(!is_closed_geodesic(&m, &lp, 1e-8));
        let up = hill_step(&m, &lp, delta, Direction::Stretch, &opts()).unwrap();
        let down = hill_step(&m, &lp, delta, Direction::Shorten, &opts()).unwrap();
        prop_assert!(up.lp.length > lp.length && down.lp.length < lp.length);
    }

    #[test]
    fn clifford_distance_is_constant(b0 in 0.5..3.0f64, frac in -0.9..0.9f64, seed in 0u64..1000) {
        let m = SpacetimeModel::minkowski(2);
        let g = DeckElement::translation("g", vec![b0, frac * b0]);
        let r = is_clifford_translation(&m, &g, 50, 1e-12, seed).unwrap();
        prop_assert!(r.clifford && r.future_timelike);
        let expected = (b0 * b0 * (1.0 - frac * frac)).sqrt();
        prop_assert!(r.distance_samples.iter().all(|(_, d)| (d - expected).abs() < 1e-12));
    }

    #[test]
    fn conjugated_translation_stays_clifford(b0 in 0.5..3.0f64, frac in -0.9..0.9f64, rapidity in -1.0..1.0f64) {
        let m = SpacetimeModel::minkowski(2);
        let g = DeckElement::translation("g", vec![b0, frac * b0]);
        let bst = boost(rapidity);
        let conj = bst.compose(&g).compose(&bst.inverse().unwrap());
        prop_assert!((conj.matrix() - DMatrix::identity(2, 2)).norm() < 1e-12);
        let a = is_clifford_translation(&m, &g, 30, 1e-12, 1).unwrap();
        let b = is_clifford_translation(&m, &conj, 30, 1e-10, 1).unwrap();
        prop_assert!(b.clifford && b.future_timelike);
        prop_assert!((a.distance_samples[0].1 - b.distance_samples[0].1).abs() < 1e-10);
    }

    #[test]
    fn closed_geodesics_are_locally_maximizing(amp in 0.01..0.1f64, mode in 1usize..4, which in 0usize..3, transverse in prop::bool::ANY) {
        // Endpoint-fixed variations of a closed timelike geodesic in the cover.
        let (m, start, dir) = match which {
            0 => (SpacetimeModel::cylinder(1.0), vec![0.0, 0.3], vec![1.0, 0.0]),
            1 => (warped(), vec![0.0, 0.0], vec![1.0, 0.0]),
            _ => {
                let (m, _) = minkowski_quotient(vec![2.0, 1.0]);
                (m, vec![0.0, 0.0], vec![2.0, 1.0])
            }
        };
        let geo = curve_length(&m, |s| (start.iter().zip(&dir).map(|(p, d)| p + s * d).collect(), dir.clone()), 400);
        let k = mode as f64 * PI;
        let bump = if transverse { [0.0, 1.0] } else { [1.0, 0.0] };
        let varied = curve_length(
            &m,
            |s| {
                let e = amp * (k * s).sin();
                let de = amp * k * (k * s).cos();
                (
                    start.iter().zip(&dir).zip(&bump).map(|((p, d), b)| p + s * d + e * b).collect(),
                    dir.iter().zip(&bump).map(|(d, b)| d + de * b).collect(),
                )
            },
            400,
        );
        // Longitudinal bumps only reparametrize the flat segments.
        prop_assert!(varied <= geo + 1e-12, "varied {} geodesic {}", varied, geo);
        if transverse {
            prop_assert!(varied < geo - 1e-6, "varied {} geodesic {}", varied, geo);
        }
    }
}

#[test]
fn hill_climb_traces_are_monotone() {
    let m = warped();
    let lp = warped_loop(0.4, 0.1);
    for dir in [Direction::Stretch, Direction::Shorten] {
        let params = ClimbParams {
            max_steps: 25,
            ..ClimbParams::default()
        };
        let tr = hill_climb(&m, &lp, dir, &params, &opts()).unwrap();
        let ls = tr.lengths();
        assert!(ls.len() > 2);
        let ok = match dir {
            Direction::Stretch => ls.windows(2).all(|w| w[1] >= w[0]),
            _ => ls.windows(2).all(|w| w[1] <= w[0]),
        };
        assert!(ok, "{dir:?}: {ls:?}");
    }
}

#[test]
fn closed_geodesics_are_fixed_points() {
    let m = warped();
    let t = m.deck_element("T").unwrap();
    let circle = LoopCandidate::evaluate(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, 1e-12).unwrap();
    assert!(is_closed_geodesic(&m, &circle, 1e-10));
    let tr = hill_climb(&m, &circle, Direction::Auto, &ClimbParams::default(), &opts()).unwrap();
    assert_eq!(tr.verdict, Verdict::ClosedGeodesic);
    assert!(tr.steps.len() <= 1);
    assert!((tr.final_loop.length - 1.0).abs() < 1e-12);
}

#[test]
fn builtins_validate_at_twenty_points() {
    let (q, _) = minkowski_quotient(vec![2.0, 1.0]);
    for m in [
        SpacetimeModel::minkowski(2),
        SpacetimeModel::minkowski(3),
        SpacetimeModel::cylinder(1.0),
        warped(),
        SpacetimeModel::warped_cylinder(WarpProfile::OnePlusEpsX2 { eps: 0.1 }, 1.0),
        SpacetimeModel::ads2(),
        q,
    ] {
        m.validate(20, 11).unwrap_or_else(|e| panic!("{}: {e}", m.name()));
    }
}

#[test]
fn quotient_closed_geodesics_share_length() {
    let (m, g) = minkowski_quotient(vec![2.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let lengths: Vec<f64> = (0..20)
        .map(|_| {
            let p = m.sample_point(&mut rng);
            let lp = closed_geodesic_from_clifford(&m, &g, &p, 20, 1e-12, 0).unwrap();
            assert!(is_closed_geodesic(&m, &lp, 1e-12));
            lp.length
        })
        .collect();
    let d = lorentz_distance_flat(&m, &[0.0, 0.0], &g.b).unwrap();
    assert!(lengths.iter().all(|l| (l - d).abs() < 1e-12));
}

#[test]
fn bounds_independent_of_thread_count() {
    let m = SpacetimeModel::cylinder(1.0);
    let t = m.deck_element("T").unwrap();
    let start = find_loop(&m, &TangentVec::new([0.0, 0.0], [1.0, 0.0]), &t, &opts()).unwrap();
    let s = Sampler {
        n_samples: 8,
        radius: 0.5,
        steps: 3,
    };
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = serial.install(|| class_length_bounds(&m, &start, &s, 4, &opts()).unwrap());
    let b = class_length_bounds(&m, &start, &s, 4, &opts()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn deck_conjugation_by_inverse_is_identity() {
    let bst = boost(0.7);
    let id = bst.compose(&bst.inverse().unwrap());
    assert!((id.matrix() - DMatrix::identity(2, 2)).norm() < 1e-12 && id.shift().norm() < 1e-12);
    let v = DVector::from_vec(vec![1.0, 0.2]);
    let pushed = bst.matrix() * &v;
    let m = SpacetimeModel::minkowski(2);
    let g0 = m.inner(&[0.0, 0.0], v.as_slice(), v.as_slice()).unwrap();
    let g1 = m.inner(&[0.0, 0.0], pushed.as_slice(), pushed.as_slice()).unwrap();
    assert!((g0 - g1).abs() < 1e-12);
}
