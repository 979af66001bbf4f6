use mfgar_pdebench::validate::{fidelity_ordering, refinement_error};
use mfgar_pdebench::{solve, solve_poisson, Fidelity, MeshVariant, PdeKind, PdeSpec};
use proptest::prelude::*;

const KINDS: [PdeKind; 3] = [PdeKind::Burgers, PdeKind::Poisson, PdeKind::Heat];

#[test]
fn low_fidelity_is_less_accurate_than_high() {
    for variant in [MeshVariant::Main, MeshVariant::Appendix] {
        for kind in KINDS {
            let o = fidelity_ordering(&PdeSpec::new(kind, variant), 32).unwrap();
            println!("{kind:?} {variant:?}: low {:.3e} high {:.3e}", o.low_error, o.high_error);
            assert!(o.holds(), "{kind:?} {variant:?}: {o:?}");
        }
    }
}

#[test]
fn error_shrinks_under_refinement() {
    let cases: [(PdeKind, Vec<f64>); 3] =
        [(PdeKind::Burgers, vec![0.05]), (PdeKind::Poisson, vec![0.2, 0.7, 0.4, 0.9, 0.1]), (PdeKind::Heat, vec![0.4, -0.6, 0.03])];
    for (kind, input) in cases {
        let mut spec = PdeSpec::new(kind, MeshVariant::Main);
        let mut prev = f64::INFINITY;
        for n in [4, 8, 16] {
            spec.mesh_low = n;
            spec.mesh_high = 2 * n;
            let e = refinement_error(&spec, &input, Fidelity::Low).unwrap();
            assert!(e < prev, "{kind:?} mesh {n}: {e} after {prev}");
            prev = e;
        }
    }
}

#[test]
fn constant_boundary_poisson_is_constant() {
    let spec = PdeSpec::new(PdeKind::Poisson, MeshVariant::Main);
    for fid in [Fidelity::Low, Fidelity::High] {
        let s = solve_poisson([0.62; 5], &spec, fid).unwrap();
        assert!(s.field.data().iter().all(|v| (v - 0.62).abs() < 1e-10));
    }
}

fn unit_input(kind: PdeKind) -> impl Strategy<Value = Vec<f64>> {
    let d = PdeSpec::new(kind, MeshVariant::Main).input_dim();
    proptest::collection::vec(0.0..=1.0f64, d)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn solvers_are_deterministic_and_finite(k in 0usize..3, u in unit_input(PdeKind::Poisson)) {
        let spec = PdeSpec::new(KINDS[k], MeshVariant::Main);
        let x = spec.scale_unit(&u[..spec.input_dim()]);
        let a = solve(&spec, &x, Fidelity::Low).unwrap();
        let b = solve(&spec, &x, Fidelity::Low).unwrap();
        prop_assert!(a.field.data().iter().all(|v| v.is_finite()));
        prop_assert_eq!(a.field.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.field.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn poisson_respects_the_maximum_principle(u in unit_input(PdeKind::Poisson), appendix in any::<bool>()) {
        let variant = if appendix { MeshVariant::Appendix } else { MeshVariant::Main };
        let spec = PdeSpec::new(PdeKind::Poisson, variant);
        let x = spec.scale_unit(&u);
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for fid in [Fidelity::Low, Fidelity::High] {
            let s = solve(&spec, &x, fid).unwrap();
            prop_assert!(s.field.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }
}
