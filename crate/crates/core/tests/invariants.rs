use std::f64::consts::PI;

use hyperloc::flow::{flow_with_jacobian, symplectic_defect};
use hyperloc::io::fmt_num;
use hyperloc::microlocal::{uniform_axis, GridFunction};
use hyperloc::model::{gamma0_lattice, make_barrier_model, spectral_params, PhasePoint};
use hyperloc::oracle::weber_connection;
use hyperloc::phase::{ScenarioConfig, TransitionScenario};
use hyperloc::poly::Poly;
use hyperloc::special::gamma;
use hyperloc::transition::{apply_j, CauchyData};
use num_complex::Complex64;
use proptest::prelude::*;

fn lambdas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.3f64..3.0, 1..4).prop_map(|mut v| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lattice_points_lie_on_the_formula(lams in lambdas(), h in 0.01f64..0.3, scale in 1.0f64..6.0) {
        let half: f64 = 0.5 * lams.iter().sum::<f64>();
        let bound = scale * h * half;
        let lat = gamma0_lattice(&lams, h, bound).unwrap();
        prop_assert!(!lat.points.is_empty());
        for (p, a) in lat.points.iter().zip(&lat.multi_indices) {
            let w: f64 = a.iter().zip(&lams).map(|(k, l)| *k as f64 * l).sum();
            prop_assert_eq!(p.re, 0.0);
            prop_assert!((p.im + h * (w + half)).abs() <= 1e-12 * bound);
            prop_assert!(p.norm() <= bound * (1.0 + 1e-12));
        }
        for w in lat.points.windows(2) {
            prop_assert!(w[0].norm() <= w[1].norm());
        }
    }

    #[test]
    fn gamma_reflection(re in -3.0f64..3.0, im in 0.05f64..3.0) {
        let z = Complex64::new(re, im);
        let lhs = gamma(z) * gamma(1.0 - z);
        let rhs = PI / (PI * z).sin();
        prop_assert!((lhs - rhs).norm() <= 1e-11 * rhs.norm());
    }

    #[test]
    fn fmt_num_round_trips(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let s = fmt_num(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 1e-14 * v.abs());
        prop_assert_eq!(fmt_num(back), s);
    }

    #[test]
    fn grid_function_csv_round_trips(vals in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 12)) {
        let axes = vec![uniform_axis(-1.0, 1.0, 4), uniform_axis(0.0, 0.5, 3)];
        let values: Vec<Complex64> = vals.iter().map(|(a, b)| Complex64::new(*a, *b)).collect();
        let u = GridFunction::new(axes, values, 0.1).unwrap();
        let back = GridFunction::from_csv(&u.to_csv(), 2, 0.1).unwrap();
        prop_assert_eq!(back.shape(), u.shape());
        for (a, b) in back.values.iter().zip(&u.values) {
            prop_assert!((a - b).norm() <= 1e-13 * (1.0 + b.norm()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_is_symplectic(
        x in prop::collection::vec(-0.2f64..0.2, 2),
        xi in prop::collection::vec(-0.2f64..0.2, 2),
        t in -0.5f64..0.5,
    ) {
        let m = make_barrier_model(&[1.0, 1.6], &Poly::monomial(vec![2, 1], 0.05)).unwrap();
        let (_, jac) = flow_with_jacobian(&m, &PhasePoint::new(x, xi), t, 1e-12).unwrap();
        prop_assert!(symplectic_defect(&jac) <= 1e-8);
    }

    #[test]
    fn real_energy_scattering_is_unitary(w in -0.5f64..0.5, h in 0.05f64..0.2) {
        let r = weber_connection(1.0, Complex64::new(w * h, 0.0), h, 0.1, 4.0, 1e-12).unwrap();
        prop_assert!(r.unitarity_defect().abs() <= 1e-8);
    }

    #[test]
    fn transition_is_linear(a in (-2.0f64..2.0, -2.0f64..2.0), b in (-2.0f64..2.0, -2.0f64..2.0), x in 0.1f64..0.6) {
        let m = make_barrier_model(&[1.0], &Poly::zero(1)).unwrap();
        let h = 0.05;
        let sp = spectral_params(Complex64::new(0.01, -0.02), h, 1.0, 2.0, 0.1, &[1.0]).unwrap();
        let sc = TransitionScenario::new(&m, &ScenarioConfig::with_epsilon(0.1), sp).unwrap();
        let (a, b) = (Complex64::new(a.0, a.1), Complex64::new(b.0, b.1));
        let xs = vec![vec![x], vec![-x]];
        let ja = apply_j(&sc, &CauchyData::point(a), &xs).unwrap();
        let jb = apply_j(&sc, &CauchyData::point(b), &xs).unwrap();
        let jab = apply_j(&sc, &CauchyData::point(a + b), &xs).unwrap();
        for k in 0..2 {
            prop_assert!((jab[k] - ja[k] - jb[k]).norm() <= 1e-12 * (1.0 + ja[k].norm() + jb[k].norm()));
        }
    }
}
