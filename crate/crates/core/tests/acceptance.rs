//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed:
//! `cargo test -p cpdil-core --test acceptance`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cpdil::algebra::{Algebra, Element, StandardForm, State};
use cpdil::bimodule::{check_prop_formula, GnsTensor, MapFlags};
use cpdil::classify::{broken_perturbation, cocycle_equivalence, seeded_perturbation, E0Semigroup};
use cpdil::cli::seeded_lindblad;
use cpdil::cpdyn::{CpSemigroup, TimeEvolution};
use cpdil::dilation::{cocycle_distance, unit_distance, TruncatedLimit};
use cpdil::heatmarkov::{self, HeatEvolution, MarkovModel};
use cpdil::linalg;
use cpdil::prodsys::{cp_from_unit, rational_to_f64, CellComplex, CellSystem, GridSystem, Partition, Unit};
use cpdil::{Rational, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Result<Outcome>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn r(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

fn pair_form() -> (CpSemigroup, Arc<StandardForm>) {
    let sg = CpSemigroup::stochastic_pair();
    let sf = StandardForm::new(sg.algebra(), &State::from_diagonal(sg.algebra(), &[0.5, 0.5]).unwrap()).unwrap();
    (sg, Arc::new(sf))
}

fn m2_lindblad(seed: u64) -> (CpSemigroup, Arc<StandardForm>) {
    let alg = Algebra::new(&[2]).unwrap();
    let sg = seeded_lindblad(&alg, seed).unwrap();
    let sf = StandardForm::new(&alg, &State::from_diagonal(&alg, &[0.3, 0.7]).unwrap()).unwrap();
    (sg, Arc::new(sf))
}

fn limit(sg: &CpSemigroup, sf: &Arc<StandardForm>, step: Rational, n: usize) -> Result<TruncatedLimit> {
    let cx = Arc::new(CellComplex::new(sf.clone(), Arc::new(sg.clone())));
    let sys: Arc<dyn GridSystem> = Arc::new(CellSystem::new(cx, step)?);
    let unit = Unit::distinguished(sys.as_ref(), n)?;
    TruncatedLimit::new(sys, unit, n)
}

/// Rank of the Gram matrix of all words x₁⊗⋯⊗x_k⊗y in basis elements, from
/// the nested M-valued inner products T_{t_k}(x_k*⋯T_{t_1}(x₁*x₁')⋯x_k').
fn gram_rank(sg: &CpSemigroup, sf: &StandardForm, p: &Partition) -> usize {
    let alg = sf.algebra();
    let basis = alg.basis_elements();
    let maps: Vec<_> = p.parts().iter().map(|t| sg.evaluate(rational_to_f64(t)).unwrap()).collect();
    let k = p.len();
    let d = basis.len();
    let words: Vec<Vec<usize>> = (0..d.pow(k as u32 + 1))
        .map(|mut idx| {
            (0..=k)
                .map(|_| {
                    let i = idx % d;
                    idx /= d;
                    i
                })
                .collect()
        })
        .collect();
    let n = words.len();
    let mut g = linalg::CMat::zeros(n, n);
    for (a, wa) in words.iter().enumerate() {
        for (b, wb) in words.iter().enumerate() {
            let mut inner = alg.identity();
            for (i, m) in maps.iter().enumerate() {
                inner = m.apply(&(&(&basis[wa[i]].adjoint() * &inner) * &basis[wb[i]]));
            }
            let (y, y2) = (&basis[wa[k]], &basis[wb[k]]);
            g[(a, b)] = sf.expect(&(&(&y.adjoint() * &inner) * y2));
        }
    }
    let (ev, _) = linalg::eigh(&g);
    let hi = ev.iter().copied().fold(0.0_f64, f64::max);
    ev.iter().filter(|&&v| v > 1e-10 * hi).count()
}

fn random_composition(t: Rational, k: usize, rng: &mut ChaCha8Rng) -> Partition {
    let w: Vec<i64> = (0..k).map(|_| rng.gen_range(1..=5)).collect();
    let total: i64 = w.iter().sum();
    Partition::new(w.iter().map(|&wi| t * r(wi, total)).collect()).unwrap()
}

fn dimension_law() -> Result<Outcome> {
    let start = Instant::now();
    let (sg, sf) = pair_form();
    let cx = CellComplex::new(sf.clone(), Arc::new(sg.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checked = 0;
    let mut bad = Vec::new();
    for t in [r(1, 2), r(1, 1), r(2, 1)] {
        for k in 1..=6 {
            let mut ps = vec![Partition::uniform(t / Rational::from_integer(k as i64), k)];
            ps.extend((0..2).map(|_| random_composition(t, k, &mut rng)));
            for p in ps {
                let dim = cx.cell(&p)?.dim();
                let oracle = gram_rank(&sg, &sf, &p);
                checked += 1;
                if dim != k + 2 || oracle != k + 2 {
                    bad.push(format!("{p}: cell {dim}, gram {oracle}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && start.elapsed() < Duration::from_secs(5);
    Ok(outcome(pass, format!("{checked} partitions, mismatches {bad:?}, {secs:.2} s (< 5 s)")))
}

fn prop_formula() -> Result<Outcome> {
    let (sg, sf) = m2_lindblad(7);
    let alg = sf.algebra().clone();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = [0.25, 0.5, 1.0][seed as usize % 3];
        let gns = GnsTensor::new(&sf, &sg.evaluate(t)?)?;
        let e: Vec<Element> = (0..4).map(|_| alg.random_element(&mut rng)).collect();
        worst = worst.max(check_prop_formula(&sf, &gns, &e[0], &e[1], &e[2], &e[3]));
    }
    Ok(outcome(worst <= 1e-10, format!("max defect {worst:.3e} over 100 cases (<= 1e-10)")))
}

fn refinement_net() -> Result<Outcome> {
    let (sg, sf) = pair_form();
    let cx = CellComplex::new(sf, Arc::new(sg));
    let mut worst: f64 = 0.0;
    for start in [Partition::single(r(1, 1))?, Partition::new(vec![r(1, 3), r(2, 3)])?] {
        let mut chain = vec![start];
        while chain.last().unwrap().len() < 16 {
            let next = chain.last().unwrap().dyadic_refinement();
            chain.push(next);
        }
        for i in 0..chain.len() {
            for j in i + 1..chain.len() {
                let (a, res) = cx.refinement_isometry(&chain[j], &chain[i])?;
                worst = worst.max(a.verify(MapFlags::BILINEAR_ISOMETRIC, 1e-10).worst(MapFlags::BILINEAR_ISOMETRIC)).max(res);
                for k in j + 1..chain.len() {
                    let (b, _) = cx.refinement_isometry(&chain[k], &chain[j])?;
                    let (ba, _) = cx.refinement_isometry(&chain[k], &chain[i])?;
                    worst = worst.max(linalg::frob(&(&b.matrix * &a.matrix - &ba.matrix)));
                }
            }
        }
    }
    Ok(outcome(worst <= 1e-10, format!("max isometry/composition defect {worst:.3e} (<= 1e-10)")))
}

fn roundtrip() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, (sg, sf), n) in [("stochastic_pair", pair_form(), 4), ("M2 lindblad", m2_lindblad(11), 3)] {
        let cx = Arc::new(CellComplex::new(sf, Arc::new(sg.clone())));
        let sys = CellSystem::new(cx, r(1, 4))?;
        let unit = Unit::distinguished(&sys, n)?;
        let (fam, resid) = cp_from_unit(&sys, &unit)?;
        let mut d = resid;
        for k in 0..=n {
            d = d.max(fam.at(k).unwrap().distance(&sg.map_at(&(r(1, 4) * Rational::from_integer(k as i64)))?));
        }
        worst = worst.max(d);
        parts.push(format!("{name} {d:.3e}"));
    }
    Ok(outcome(worst <= 1e-10, format!("{} (<= 1e-10)", parts.join(", "))))
}

fn dilation() -> Result<Outcome> {
    let start = Instant::now();
    let (sg, sf) = pair_form();
    let tl = limit(&sg, &sf, r(1, 8), 8)?;
    let mut comp: f64 = 0.0;
    for k in 0..=7 {
        for x in sf.algebra().basis_elements() {
            comp = comp.max(tl.compression_defect(&sg, k, &x)?);
        }
    }
    let min = tl.minimality_evidence(8, 3)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = comp <= 1e-9 && min.full() && start.elapsed() < Duration::from_secs(60);
    Ok(outcome(
        pass,
        format!("compression {comp:.3e} (<= 1e-9), span rank {}/{}, {secs:.2} s (< 60 s)", min.span_rank, min.dim),
    ))
}

fn unit_cocycle() -> Result<Outcome> {
    let (sg, sf) = pair_form();
    let tl = limit(&sg, &sf, r(1, 4), 3)?;
    let sys = tl.system().clone();
    let xi = tl.unit().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut zeta = linalg::random_vector(sys.fiber(1)?.dim(), &mut rng);
    let norm = linalg::op_norm(&sf.pi_phi(&*sys.fiber(1)?, &zeta));
    zeta *= linalg::c(0.9 / norm, 0.0);
    let generated = Unit::generated(sys.as_ref(), zeta, 3)?;
    let (mut there, mut back, mut corner): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut contractive = true;
    for (lambda, unital) in [(xi.clone(), true), (xi.scaled(0.5), false), (generated, false)] {
        let w = tl.cocycle_from_unit(&lambda)?;
        let rep = tl.cocycle_report(&w)?;
        contractive &= rep.contraction_norm <= 1.0 + 1e-10;
        if unital {
            corner = rep.corner_isometric_defect;
        }
        let recovered = tl.unit_from_cocycle(&w);
        there = there.max(unit_distance(&recovered, &lambda));
        back = back.max(cocycle_distance(&tl.cocycle_from_unit(&recovered)?, &w));
    }
    let pass = there <= 1e-9 && back <= 1e-9 && corner <= 1e-9 && contractive;
    Ok(outcome(
        pass,
        format!("unit roundtrip {there:.3e}, cocycle roundtrip {back:.3e}, unital corner isometry {corner:.3e} (<= 1e-9)"),
    ))
}

fn heat_suite() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    // path spaces grow like states^(levels+1), so the cycle stops one level earlier
    for (model, levels) in [(MarkovModel::two_state(), 3), (MarkovModel::cycle(5)?, 2)] {
        let model = Arc::new(model);
        let kernel = model.kernel_report(0.25, 0.5)?.max().max(model.kernel_report(0.5, 1.0)?.max());
        let sf = Arc::new(heatmarkov::heat_standard_form(&model)?);
        let cx = CellComplex::new(sf, Arc::new(HeatEvolution(model.clone())));
        let mut gram: f64 = 0.0;
        let mut adjoint: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for p in ["1", "1/2,1/2"] {
            let p: Partition = p.parse()?;
            gram = gram.max(heatmarkov::check_path_model(&model, &cx, &p)?.0.gram_defect);
            adjoint = adjoint.max(heatmarkov::b_adjoint_check(&model, &p, &mut rng, 6)?);
        }
        let mut fs = model.algebra().basis_elements();
        fs.push(model.algebra().identity());
        let d = heatmarkov::check_heat_dilation(&model, r(1, 4), levels, &fs)?;
        let dil = d.theta_route.max(d.formula_route);
        pass &= kernel <= 1e-12 && gram <= 1e-10 && adjoint <= 1e-12 && dil <= 1e-10;
        parts.push(format!(
            "{} states: kernel {kernel:.1e}, gram {gram:.1e}, adjoint {adjoint:.1e}, dilation {dil:.1e}",
            model.states()
        ));
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn classifier() -> Result<Outcome> {
    let alg = Algebra::new(&[2])?;
    let sf = Arc::new(StandardForm::new(&alg, &State::from_diagonal(&alg, &[0.3, 0.7])?)?);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let step = r(1, 4);
    let alpha = Arc::new(E0Semigroup::inner(&alg, &alg.random_hermitian(&mut rng), step)?);
    let (beta, _) = seeded_perturbation(&alpha, 4, 3)?;
    let eq = cocycle_equivalence(&sf, &alpha, &Arc::new(beta), 4, 1)?;
    let conj = eq.levels.iter().map(|l| l.conjugation_defect.max(l.unitary_defect)).fold(0.0, f64::max);
    let broken = broken_perturbation(&alpha, 4, 8)?;
    let neq = cocycle_equivalence(&sf, &alpha, &Arc::new(broken), 4, 1)?;
    let failing = neq.failing_level.map(|k| step * Rational::from_integer(k as i64));
    let pass = eq.equivalent && eq.cocycle.is_some() && conj <= 1e-9 && !neq.equivalent && failing.is_some();
    Ok(outcome(
        pass,
        format!(
            "perturbed: equivalent={} residual {conj:.3e} (<= 1e-9); broken: equivalent={} first failing time {}",
            eq.equivalent,
            neq.equivalent,
            failing.map_or("none".to_string(), |t| t.to_string())
        ),
    ))
}

fn continuity() -> Result<Outcome> {
    let (sg, sf) = pair_form();
    let d = sf.algebra().dim();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); d];
    for step in [r(1, 4), r(1, 8), r(1, 16)] {
        let tl = limit(&sg, &sf, step, 1)?;
        for e in tl.continuity_profile(&sg)?.into_iter().filter(|e| e.level == 1) {
            rows[e.basis_index].push(e.value);
        }
    }
    let pass = rows.iter().all(|v| v.len() == 3 && v[0] > v[1] && v[1] > v[2]);
    let shown: Vec<String> =
        rows.iter().map(|v| v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(" > ")).collect();
    Ok(outcome(pass, shown.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("dimension law #p+2", dimension_law),
        ("GNS inner product formula", prop_formula),
        ("refinement net", refinement_net),
        ("semigroup from the distinguished unit", roundtrip),
        ("truncated dilation", dilation),
        ("unit/cocycle bijection", unit_cocycle),
        ("heat semigroup suite", heat_suite),
        ("cocycle classifier", classifier),
        ("continuity profile", continuity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("[{}] criterion {} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
