use std::sync::Arc;

use cpdil::algebra::{Algebra, StandardForm, State};
use cpdil::bimodule::{check_prop_formula, GnsTensor, MapFlags};
use cpdil::cli::seeded_lindblad;
use cpdil::cpdyn::CpSemigroup;
use cpdil::heatmarkov::{MarkovModel, PathFunction};
use cpdil::linalg;
use cpdil::prodsys::{CellComplex, Partition};
use cpdil::Rational;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn partition() -> impl Strategy<Value = Partition> {
    prop::collection::vec((1i64..6, 1i64..5), 1..5)
        .prop_map(|v| Partition::new(v.into_iter().map(|(n, d)| Rational::new(n, d)).collect()).unwrap())
}

/// A partition of `total` into `k` parts with positive integer weights.
fn composition(total: Rational, weights: &[i64]) -> Partition {
    let sum: i64 = weights.iter().sum();
    Partition::new(weights.iter().map(|&w| total * Rational::new(w, sum)).collect()).unwrap()
}

fn pair() -> (CpSemigroup, Arc<StandardForm>) {
    let sg = CpSemigroup::stochastic_pair();
    let sf = StandardForm::new(sg.algebra(), &State::from_diagonal(sg.algebra(), &[0.5, 0.5]).unwrap()).unwrap();
    (sg, Arc::new(sf))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn join_is_associative_and_additive(a in partition(), b in partition(), c in partition()) {
        prop_assert_eq!(a.join(&b).join(&c), a.join(&b.join(&c)));
        prop_assert_eq!(a.join(&b).total(), a.total() + b.total());
        prop_assert_eq!(a.join(&Partition::empty()), a.clone());
    }

    #[test]
    fn common_refinement_refines_both(w1 in prop::collection::vec(1i64..6, 1..5), w2 in prop::collection::vec(1i64..6, 1..5)) {
        let t = Rational::new(3, 2);
        let (p, q) = (composition(t, &w1), composition(t, &w2));
        let r = p.common_refinement(&q).unwrap();
        prop_assert!(r.refines(&p).unwrap() && r.refines(&q).unwrap());
        prop_assert!(r.len() < p.len() + q.len());
        let d = p.dyadic_refinement();
        prop_assert!(d.refines(&p).unwrap());
        prop_assert_eq!(d.groups(&p).unwrap(), vec![2; p.len()]);
    }

    #[test]
    fn lindblad_semigroup_law(seed in any::<u64>(), s in 0.05f64..1.0, t in 0.05f64..1.0) {
        let alg = Algebra::new(&[2]).unwrap();
        let sg = seeded_lindblad(&alg, seed).unwrap();
        let (ts, tt, tst) = (sg.evaluate(s).unwrap(), sg.evaluate(t).unwrap(), sg.evaluate(s + t).unwrap());
        prop_assert!(ts.compose(&tt).distance(&tst) < 1e-10);
        let ucp = tst.verify_ucp(1e-10);
        prop_assert!(ucp.unital_defect < 1e-12 && ucp.choi_min_eigenvalue > -1e-10);
    }

    #[test]
    fn gns_inner_products(seed in any::<u64>(), t in 0.05f64..2.0) {
        let alg = Algebra::new(&[2]).unwrap();
        let sg = seeded_lindblad(&alg, seed).unwrap();
        let sf = StandardForm::new(&alg, &State::from_diagonal(&alg, &[0.4, 0.6]).unwrap()).unwrap();
        let gns = GnsTensor::new(&sf, &sg.evaluate(t).unwrap()).unwrap();
        prop_assert!(gns.space().check_invariants(&alg).max() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let e: Vec<_> = (0..4).map(|_| alg.random_element(&mut rng)).collect();
        prop_assert!(check_prop_formula(&sf, &gns, &e[0], &e[1], &e[2], &e[3]) < 1e-10);
    }

    #[test]
    fn pair_cell_dimension(weights in prop::collection::vec(1i64..6, 1..6), num in 1i64..5) {
        let (sg, sf) = pair();
        let cx = CellComplex::new(sf, Arc::new(sg));
        let p = composition(Rational::new(num, 2), &weights);
        prop_assert_eq!(cx.cell(&p).unwrap().dim(), p.len() + 2);
    }

    #[test]
    fn refinement_maps_are_isometric(weights in prop::collection::vec(1i64..5, 1..4)) {
        let (sg, sf) = pair();
        let cx = CellComplex::new(sf, Arc::new(sg));
        let coarse = composition(Rational::from_integer(1), &weights);
        let fine = coarse.dyadic_refinement();
        let (a, r) = cx.refinement_isometry(&fine, &coarse).unwrap();
        prop_assert!(r < 1e-10);
        prop_assert!(a.verify(MapFlags::BILINEAR_ISOMETRIC, 1e-10).pass);
    }

    #[test]
    fn box_product_is_associative(seed in any::<u64>(), a in 1usize..3, b in 1usize..3, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = PathFunction::random(3, a, &mut rng);
        let g = PathFunction::random(3, b, &mut rng);
        let h = PathFunction::random(3, c, &mut rng);
        let lhs = f.boxed(&g).unwrap().boxed(&h).unwrap();
        let rhs = f.boxed(&g.boxed(&h).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert!(f.boxed(&PathFunction::constant(3, 1, 1.0)).unwrap().max_abs_diff(&f) == 0.0);
    }

    #[test]
    fn heat_kernel_chapman_kolmogorov(m in 3usize..7, s in 0.05f64..1.5, t in 0.05f64..1.5) {
        let model = MarkovModel::cycle(m).unwrap();
        let rep = model.kernel_report(s, t).unwrap();
        prop_assert!(rep.max() < 1e-12, "{:?}", rep);
        prop_assert!(rep.min_entry > 0.0);
        let p = model.transition(s);
        for i in 0..m {
            prop_assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pi_phi_respects_both_actions(seed in any::<u64>()) {
        let alg = Algebra::new(&[1, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sf = StandardForm::new(&alg, &State::normalized_trace(&alg)).unwrap();
        let (x, y) = (alg.random_element(&mut rng), alg.random_element(&mut rng));
        let d = sf.left_action(&(&x * &y)) - sf.left_action(&x) * sf.left_action(&y);
        prop_assert!(linalg::frob(&d) < 1e-12);
        let v = sf.x_phi(&x);
        prop_assert!((linalg::vnorm(&v).powi(2) - sf.expect(&(&x.adjoint() * &x)).re).abs() < 1e-12);
    }
}
