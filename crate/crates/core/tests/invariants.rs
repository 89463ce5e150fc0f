use std::sync::OnceLock;

use mfkam::action::{discrete_action, BvpOptions, DiscretePath};
use mfkam::dynamics::{apriori_bounds, energy, integrate, PhasePoint};
use mfkam::grid::{Grid, GridSpec};
use mfkam::kam::convergents;
use mfkam::kernel::{build_kernels, KernelMatrix};
use mfkam::model::{ModelParams, PotentialSpec, WTerm};
use mfkam::torus::{dist_s, dist_z, Configuration};
use mfkam::transport::{monotone_matching, BoundaryPair};
use mfkam::weakkam::{alpha_exact, lax_oleinik_backward, lax_oleinik_forward, solve_alpha, IterOptions};
use proptest::prelude::*;

fn interacting() -> PotentialSpec {
    PotentialSpec {
        w: vec![WTerm {
            freq: 1,
            amplitude: -0.2,
        }],
        ..PotentialSpec::pendulum(0.1)
    }
}

fn kernel() -> &'static (Grid, KernelMatrix) {
    static K: OnceLock<(Grid, KernelMatrix)> = OnceLock::new();
    K.get_or_init(|| {
        let grid = Grid::new(GridSpec::new(2, 6).unwrap());
        let params = ModelParams::new(2, 0.0, interacting()).unwrap();
        let k = build_kernels(&grid, &params, &[0.25], &BvpOptions::default())
            .unwrap()
            .kernels
            .remove(0);
        (grid, k)
    })
}

/// Sorted points in `[0, 1)`.
fn config(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, n).prop_map(|mut v| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| (config(n), config(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dist_s_is_a_pseudometric_below_dist_z((a, b) in pair(), shift in -3i32..3, r in 0usize..5) {
        let ca = Configuration::new(a.clone()).unwrap();
        let cb = Configuration::new(b.clone()).unwrap();
        let d = dist_s(&ca, &cb).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(dist_s(&ca, &ca).unwrap() < 1e-12);
        prop_assert!((d - dist_s(&cb, &ca).unwrap()).abs() < 1e-12);
        prop_assert!(d <= dist_z(&ca, &cb).unwrap() + 1e-12);
        let moved = cb.shifted(shift as f64).relabeled(r % b.len());
        prop_assert!((d - dist_s(&ca, &moved).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dist_s_triangle_inequality(a in config(3), b in config(3), c in config(3)) {
        let [ca, cb, cc] = [a, b, c].map(|v| Configuration::new(v).unwrap());
        let ab = dist_s(&ca, &cb).unwrap();
        let bc = dist_s(&cb, &cc).unwrap();
        let ac = dist_s(&ca, &cc).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn action_ignores_relabeling_and_common_shifts(
        first in config(3),
        last in config(3),
        middle in prop::collection::vec(prop::collection::vec(-1.0..2.0f64, 3), 3),
        r in 0usize..3,
        k in -2i32..3,
        c in -1.0..1.0f64,
    ) {
        let mut nodes = vec![first];
        nodes.extend(middle);
        nodes.push(last);
        let path = DiscretePath::new(0.0, 1.0, nodes).unwrap();
        let params = ModelParams::new(3, c, interacting()).unwrap();
        let perm: Vec<usize> = (0..3).map(|i| (i + r) % 3).collect();
        let shift: Vec<f64> = (0..3).map(|i| k as f64 + if i + r >= 3 { 1.0 } else { 0.0 }).collect();
        let moved = path.relabeled(&perm, &shift);
        let (s0, s1) = (discrete_action(&path, &params), discrete_action(&moved, &params));
        prop_assert!((s0 - s1).abs() < 1e-10 * (1.0 + s0.abs()), "{s0} vs {s1}");
    }

    #[test]
    fn flow_commutes_with_integer_shifts(
        q in config(3),
        v in prop::collection::vec(-1.0..1.0f64, 3),
        k in -2i32..3,
    ) {
        let pot = interacting();
        let start = PhasePoint::new(0.0, q.clone(), v.clone()).unwrap();
        let lifted = PhasePoint::new(0.0, q.iter().map(|x| x + k as f64).collect(), v).unwrap();
        let a = integrate(&pot, &start, 1.0, 1e-3).pop().unwrap();
        let b = integrate(&pot, &lifted, 1.0, 1e-3).pop().unwrap();
        for i in 0..3 {
            prop_assert!((b.q[i] - a.q[i] - k as f64).abs() < 1e-9);
            prop_assert!((b.v[i] - a.v[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn energy_error_is_second_order(q in config(2), v in prop::collection::vec(-1.0..1.0f64, 2)) {
        let pot = interacting();
        let start = PhasePoint::new(0.0, q, v).unwrap();
        let e0 = energy(&pot, &start).unwrap();
        let excursion = |step: f64| {
            integrate(&pot, &start, 1.0, step)
                .iter()
                .map(|p| (energy(&pot, p).unwrap() - e0).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (excursion(2e-3), excursion(1e-3));
        prop_assert!(coarse < 1e-4);
        prop_assert!(fine <= coarse / 3.0 + 1e-13, "{coarse} then {fine}");
    }

    #[test]
    fn lax_oleinik_is_monotone_and_commutes_with_constants(
        seed in prop::collection::vec(-1.0..1.0f64, 21),
        bump in prop::collection::vec(0.0..1.0f64, 21),
        k in -5.0..5.0f64,
    ) {
        let (grid, kern) = kernel();
        prop_assume!(grid.len() == seed.len());
        let u = seed.clone();
        let w: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let shifted: Vec<f64> = u.iter().map(|x| x + k).collect();
        for op in [lax_oleinik_backward, lax_oleinik_forward] {
            let tu = op(kern, &u).unwrap().values;
            let tw = op(kern, &w).unwrap().values;
            let ts = op(kern, &shifted).unwrap().values;
            for i in 0..u.len() {
                prop_assert!(tu[i] <= tw[i] + 1e-12);
                prop_assert!((ts[i] - tu[i] - k).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn monotone_matching_beats_every_pairing((a, b) in pair(), r in 0usize..5) {
        let n = a.len();
        let boundary = BoundaryPair::new(a.clone(), b.clone()).unwrap();
        let best = monotone_matching(&boundary).cost;
        let other = (0..n).map(|i| (b[(i + r) % n] - a[i]).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(best <= other + 1e-12);
    }

    #[test]
    fn convergents_approximate_their_number(omega in 0.01..0.99f64) {
        let cs = convergents(omega, 10);
        for (i, w) in cs.windows(2).enumerate() {
            prop_assert!(w[1].1 > w[0].1 || (i == 0 && w[1].1 == w[0].1));
        }
        for &(p, q) in &cs {
            prop_assert!((omega - p as f64 / q as f64).abs() <= 1.0 / (q as f64).powi(2) + 1e-12);
        }
    }

    #[test]
    fn velocity_bound_grows_with_c(c in 0.0..3.0f64, dc in 0.0..1.0f64) {
        let lo = apriori_bounds(&ModelParams::new(2, c, interacting()).unwrap());
        let hi = apriori_bounds(&ModelParams::new(2, -(c + dc), interacting()).unwrap());
        prop_assert!(hi.r_c >= lo.r_c);
        prop_assert_eq!(hi.accel, lo.accel);
    }
}

#[test]
fn value_iteration_agrees_with_the_cycle_mean() {
    let (_, kern) = kernel();
    let table = solve_alpha(kern, &IterOptions::default()).unwrap();
    let exact = alpha_exact(kern);
    assert!(table.alpha_bracket[0] - 1e-12 <= exact && exact <= table.alpha_bracket[1] + 1e-12);
    assert!((table.alpha - exact).abs() < 1e-9);
}
