//! E₀-semigroups, their twisted product systems, the canonical isomorphism
//! onto the cells, cocycle equivalence, and units as cocycles.

use std::sync::{Arc, Mutex};
use std::collections::HashMap;

use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algebra::{Algebra, Element, StandardForm};
use crate::bimodule::{self, Bimodule, BimoduleMap, Generator, MapFlags, Provenance, RelativeTensor};
use crate::cpdyn::{CpMap, TimeEvolution};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};
use crate::prodsys::{self, CellSystem, ElementaryTensor, FiberProduct, GridSystem};
use crate::Rational;

#[derive(Clone, Debug)]
pub enum E0Kind {
    /// θ_t(x) = u_t*xu_t with u_t = exp(itK).
    Inner(Element),
    /// θ_{kδ} = σ^k for a single unital *-endomorphism σ.
    Stepped(CpMap),
    /// Maps listed at grid times 0, δ, 2δ, … (the semigroup law is not assumed).
    Explicit(Vec<CpMap>),
}

#[derive(Clone, Debug)]
pub struct E0Semigroup {
    algebra: Algebra,
    step: Rational,
    kind: E0Kind,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EndomorphismReport {
    pub multiplicative: f64,
    pub adjoint: f64,
    pub unital: f64,
    pub semigroup: f64,
}

impl EndomorphismReport {
    pub fn max(&self) -> f64 {
        self.multiplicative.max(self.adjoint).max(self.unital).max(self.semigroup)
    }
}

/// exp(itK) for Hermitian K, blockwise.
pub fn unitary_exp(k: &Element, t: f64) -> Element {
    k.map_blocks(|b| {
        let (vals, vecs) = linalg::eigh(b);
        let d = CMat::from_diagonal(&CVec::from_iterator(vals.len(), vals.iter().map(|&v| c(0.0, v * t).exp())));
        &vecs * d * vecs.adjoint()
    })
}

/// x ↦ u*xu.
pub fn conjugation(alg: &Algebra, u: &Element) -> CpMap {
    let us = u.adjoint();
    CpMap::from_fn(alg, |x| &(&us * x) * u)
}

fn element_polar(w: &Element) -> Element {
    w.map_blocks(linalg::polar_unitary)
}

impl E0Semigroup {
    pub fn inner(alg: &Algebra, k: &Element, step: Rational) -> Result<Self> {
        if k.distance(&k.adjoint()) > 1e-12 {
            return Err(Error::Domain("inner generator must be Hermitian".into()));
        }
        Ok(Self { algebra: alg.clone(), step, kind: E0Kind::Inner(k.clone()) })
    }

    pub fn identity(alg: &Algebra, step: Rational) -> Self {
        Self { algebra: alg.clone(), step, kind: E0Kind::Stepped(CpMap::identity(alg)) }
    }

    /// One step is a unital *-endomorphism; rejects anything else.
    pub fn stepped(map: CpMap, step: Rational) -> Result<Self> {
        let alg = map.algebra().clone();
        let hom = map.homomorphism_defect();
        let unital = map.apply(&alg.identity()).distance(&alg.identity());
        if hom > 1e-10 || unital > 1e-10 {
            return Err(Error::Domain(format!(
                "step map is not a unital *-endomorphism (multiplicative defect {hom:e}, unital defect {unital:e})"
            )));
        }
        Ok(Self { algebra: alg, step, kind: E0Kind::Stepped(map) })
    }

    /// Permutes blocks of equal size: θ(x)_b = x_{perm[b]}.
    pub fn block_permutation(alg: &Algebra, perm: &[usize], step: Rational) -> Result<Self> {
        let sizes = alg.blocks();
        let mut seen = vec![false; sizes.len()];
        if perm.len() != sizes.len() {
            return Err(Error::Domain("permutation length differs from block count".into()));
        }
        for (b, &p) in perm.iter().enumerate() {
            if p >= sizes.len() || seen[p] || sizes[p] != sizes[b] {
                return Err(Error::Domain(format!("{perm:?} is not a permutation of equal-size blocks")));
            }
            seen[p] = true;
        }
        let perm = perm.to_vec();
        let map = CpMap::from_fn(alg, |x| {
            alg.from_blocks(perm.iter().map(|&p| x.block(p).clone()).collect()).expect("block sizes agree")
        });
        Self::stepped(map, step)
    }

    pub fn explicit(alg: &Algebra, step: Rational, maps: Vec<CpMap>) -> Self {
        Self { algebra: alg.clone(), step, kind: E0Kind::Explicit(maps) }
    }

    /// β_k = Ad(w_k*)∘α_k for the discrete cocycle w_{k+1} = α_k(v)w_k, w_0 = 1;
    /// returns β and the cocycle.
    pub fn perturbed(alpha: &E0Semigroup, v: &Element, levels: usize) -> Result<(E0Semigroup, Vec<Element>)> {
        let alg = &alpha.algebra;
        let mut w = vec![alg.identity()];
        for k in 0..levels {
            let next = &alpha.map(k)?.apply(v) * &w[k];
            w.push(next);
        }
        let maps = (0..=levels)
            .map(|k| {
                let a = alpha.map(k)?;
                let wk = w[k].clone();
                let wks = wk.adjoint();
                Ok(CpMap::from_fn(alg, |x| &(&wks * &a.apply(x)) * &wk))
            })
            .collect::<Result<_>>()?;
        Ok((Self::explicit(alg, alpha.step, maps), w))
    }

    pub fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    pub fn step(&self) -> Rational {
        self.step
    }

    pub fn kind(&self) -> &E0Kind {
        &self.kind
    }

    /// θ_{kδ}.
    pub fn map(&self, k: usize) -> Result<CpMap> {
        match &self.kind {
            E0Kind::Inner(h) => {
                let t = (self.step * Rational::from_integer(k as i64)).to_f64().unwrap_or(f64::NAN);
                Ok(conjugation(&self.algebra, &unitary_exp(h, t)))
            }
            E0Kind::Stepped(s) => {
                let mut out = CpMap::identity(&self.algebra);
                for _ in 0..k {
                    out = s.compose(&out);
                }
                Ok(out)
            }
            E0Kind::Explicit(maps) => maps
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Domain(format!("grid index {k} beyond the listed maps"))),
        }
    }

    /// The implementing unitary u_t for inner semigroups.
    pub fn implementing_unitary(&self, k: usize) -> Option<Element> {
        match &self.kind {
            E0Kind::Inner(h) => {
                Some(unitary_exp(h, (self.step * Rational::from_integer(k as i64)).to_f64().unwrap_or(f64::NAN)))
            }
            _ => None,
        }
    }

    pub fn endomorphism_report(&self, levels: usize) -> Result<EndomorphismReport> {
        let alg = &self.algebra;
        let maps: Vec<CpMap> = (0..=levels).map(|k| self.map(k)).collect::<Result<_>>()?;
        let mut rep = EndomorphismReport::default();
        for m in &maps {
            rep.multiplicative = rep.multiplicative.max(m.homomorphism_defect());
            rep.unital = rep.unital.max(m.apply(&alg.identity()).distance(&alg.identity()));
            for e in alg.basis_elements() {
                rep.adjoint = rep.adjoint.max(m.apply(&e.adjoint()).distance(&m.apply(&e).adjoint()));
            }
        }
        for j in 0..=levels {
            for k in 0..=levels - j {
                rep.semigroup = rep.semigroup.max(maps[j].compose(&maps[k]).distance(&maps[j + k]));
            }
        }
        Ok(rep)
    }
}

impl TimeEvolution for E0Semigroup {
    fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    fn map_at(&self, t: &Rational) -> Result<CpMap> {
        if *t < Rational::zero() {
            return Err(Error::Domain(format!("negative time {t}")));
        }
        if let E0Kind::Inner(h) = &self.kind {
            return Ok(conjugation(&self.algebra, &unitary_exp(h, t.to_f64().unwrap_or(f64::NAN))));
        }
        let q = t / self.step;
        if !q.is_integer() {
            return Err(Error::Domain(format!("time {t} is not on the grid of step {}", self.step)));
        }
        self.map(q.to_integer() as usize)
    }
}

/// L²(M) with left action θ_t(x) and the usual right action, for grid times.
pub struct TwistedSystem {
    sf: Arc<StandardForm>,
    theta: Arc<E0Semigroup>,
    fibers: Mutex<HashMap<usize, Arc<Bimodule>>>,
    products: Mutex<HashMap<(usize, usize), Arc<FiberProduct>>>,
}

impl TwistedSystem {
    pub fn new(sf: Arc<StandardForm>, theta: Arc<E0Semigroup>) -> Self {
        Self { sf, theta, fibers: Mutex::default(), products: Mutex::default() }
    }

    pub fn theta(&self) -> &Arc<E0Semigroup> {
        &self.theta
    }
}

impl GridSystem for TwistedSystem {
    fn standard_form(&self) -> &Arc<StandardForm> {
        &self.sf
    }

    fn step(&self) -> Rational {
        self.theta.step()
    }

    fn fiber(&self, k: usize) -> Result<Arc<Bimodule>> {
        if let Some(f) = self.fibers.lock().expect("fiber cache").get(&k) {
            return Ok(f.clone());
        }
        let alg = self.sf.algebra();
        let theta = self.theta.map(k)?;
        let basis = alg.basis_elements();
        let left = basis.iter().map(|e| self.sf.left_action(&theta.apply(e))).collect();
        let right = basis.iter().map(|e| self.sf.right_action(e)).collect();
        let gens = vec![Generator { label: "φ^½".into(), vector: self.sf.cyclic_vector().clone() }];
        let f = Arc::new(Bimodule::new(self.sf.dim(), left, right, gens, Provenance::Twisted));
        self.fibers.lock().expect("fiber cache").insert(k, f.clone());
        Ok(f)
    }

    /// ξφ^{-1/2}η ↦ θ_k(ξρ^{-1/2})η.
    fn product(&self, j: usize, k: usize) -> Result<Arc<FiberProduct>> {
        if let Some(p) = self.products.lock().expect("product cache").get(&(j, k)) {
            return Ok(p.clone());
        }
        let (hj, hk) = (self.fiber(j)?, self.fiber(k)?);
        let domain = Arc::new(RelativeTensor::new(&self.sf, hj, hk.clone())?);
        let target = self.fiber(j + k)?;
        let d = self.sf.dim();
        let mut samples = Vec::with_capacity(d * d);
        for a in 0..d {
            for b in 0..d {
                let (ea, eb) = (linalg::unit_vector(d, a), linalg::unit_vector(d, b));
                let left = hk.left_action(&self.sf.materialize_left(&ea));
                samples.push((domain.embed(&ea, &eb), left * eb));
            }
        }
        let (m, fit_residual) = bimodule::fit_from_samples(domain.dim(), d, &samples)?;
        let map = BimoduleMap::new(domain.space().clone(), target, m);
        let fp = Arc::new(FiberProduct { domain, map, fit_residual });
        self.products.lock().expect("product cache").insert((j, k), fp.clone());
        Ok(fp)
    }

    fn unit(&self, _k: usize) -> Result<CVec> {
        Ok(self.sf.cyclic_vector().clone())
    }
}

/// u^θ: cell((δ)^k) of θ → twisted fiber k via the nested formula
/// θ_{t_n}(⋯θ_{t_2}(θ_{t_1}(x₁)y₁x₂)y₂⋯x_n)y_nφ^{1/2}; returns maps with fit residuals.
pub fn canonical_iso(cells: &CellSystem, twisted: &TwistedSystem, levels: usize) -> Result<Vec<(BimoduleMap, f64)>> {
    let sf = twisted.standard_form().clone();
    let alg = sf.algebra().clone();
    let theta1 = twisted.theta().map(1)?;
    let mut out = Vec::with_capacity(levels + 1);
    for k in 0..=levels {
        let src = cells.fiber(k)?;
        let tgt = twisted.fiber(k)?;
        if k == 0 {
            out.push((BimoduleMap::new(src, tgt, linalg::identity(sf.dim())), 0.0));
            continue;
        }
        let cell = cells.complex().cell(&cells.level(k))?;
        let seed = linalg::seed_from(&format!("canonical{k}"), 0xc1a5);
        out.push(prodsys::sample_fit(&src, &tgt, seed, |rng| {
            let et = ElementaryTensor::random(&alg, k, rng);
            let mut acc = alg.identity();
            for (x, y) in &et.factors {
                acc = &theta1.apply(&(&acc * x)) * y;
            }
            Ok((cell.vector(&sf, &et)?, sf.x_phi(&acc)))
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LevelDefects {
    pub level: usize,
    pub intertwiner_dim: usize,
    pub conjugation_defect: f64,
    pub unitary_defect: f64,
}

#[derive(Clone, Debug)]
pub struct Equivalence {
    pub equivalent: bool,
    /// w_{kδ} with β_{kδ} = Ad(w_{kδ}*)∘α_{kδ}, when certified.
    pub cocycle: Option<Vec<Element>>,
    /// First grid index at which certification failed.
    pub failing_level: Option<usize>,
    pub reason: String,
    pub levels: Vec<LevelDefects>,
    pub law_defect: f64,
    /// Bilinear/unitary and product-compatibility defects of u = L(w) between the twisted systems.
    pub isomorphism_defect: f64,
    /// max ‖w_{k+1} − w_k‖, a sampled modulus only.
    pub modulus: f64,
}

/// Solves w ∈ M with wβ(E_j) = α(E_j)w for all matrix units.
pub fn intertwiners(alpha: &CpMap, beta: &CpMap) -> Vec<Element> {
    let alg = alpha.algebra();
    let d = alg.dim();
    let basis = alg.basis_elements();
    let mut stacked = CMat::zeros(d * d, d);
    for (j, e) in basis.iter().enumerate() {
        let op = alg.right_mult_matrix(&beta.apply(e)) - alg.left_mult_matrix(&alpha.apply(e));
        stacked.view_mut((j * d, 0), (d, d)).copy_from(&op);
    }
    linalg::columns(&linalg::null_space(&stacked, 1e-14)).iter().map(|v| alg.from_coords(v)).collect()
}

fn conjugation_defect(alg: &Algebra, alpha: &CpMap, beta: &CpMap, w: &Element) -> f64 {
    let ws = w.adjoint();
    alg.basis_elements()
        .iter()
        .map(|e| beta.apply(e).distance(&(&(&ws * &alpha.apply(e)) * w)))
        .fold(0.0, f64::max)
}

fn unitary_defect(w: &Element) -> f64 {
    let alg_id = (&w.adjoint() * w).map_blocks(|b| b - CMat::identity(b.nrows(), b.ncols()));
    alg_id.frob()
}

/// Decides whether β is a cocycle perturbation of α on the grid 0..=levels.
pub fn cocycle_equivalence(
    sf: &Arc<StandardForm>,
    alpha: &Arc<E0Semigroup>,
    beta: &Arc<E0Semigroup>,
    levels: usize,
    seed: u64,
) -> Result<Equivalence> {
    let alg = sf.algebra();
    if alpha.algebra() != beta.algebra() {
        return Err(Error::Domain("cocycle equivalence needs a common algebra".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Equivalence {
        equivalent: false,
        cocycle: None,
        failing_level: None,
        reason: String::new(),
        levels: Vec::new(),
        law_defect: 0.0,
        isomorphism_defect: 0.0,
        modulus: 0.0,
    };
    let alphas: Vec<CpMap> = (0..=levels).map(|k| alpha.map(k)).collect::<Result<_>>()?;
    let betas: Vec<CpMap> = (0..=levels).map(|k| beta.map(k)).collect::<Result<_>>()?;
    let mut w = vec![alg.identity()];
    for k in 1..=levels {
        let space = intertwiners(&alphas[k], &betas[k]);
        let wk = if space.is_empty() {
            None
        } else if k == 1 {
            let mut comb = alg.zero();
            for v in &space {
                comb = &comb + &v.scale(linalg::random_complex(&mut rng));
            }
            // λ = u φ^{1/2} with u = L(w), read back through w φ^{1/2} x = λ x
            let lambda = sf.x_phi(&element_polar(&comb));
            Some(sf.materialize_left(&lambda))
        } else {
            Some(&alphas[k - 1].apply(&w[1]) * &w[k - 1])
        };
        let (conj, unit_def) = match &wk {
            Some(wk) => (conjugation_defect(alg, &alphas[k], &betas[k], wk), unitary_defect(wk)),
            None => (f64::INFINITY, f64::INFINITY),
        };
        report.levels.push(LevelDefects { level: k, intertwiner_dim: space.len(), conjugation_defect: conj, unitary_defect: unit_def });
        let Some(wk) = wk else {
            report.failing_level = Some(k);
            report.reason = format!("no intertwiner w with wβ(x) = α(x)w at grid index {k}");
            return Ok(report);
        };
        if conj > 1e-9 || unit_def > 1e-9 {
            report.failing_level = Some(k);
            report.reason = format!(
                "cocycle extension fails at grid index {k}: conjugation defect {conj:.3e}, unitary defect {unit_def:.3e}"
            );
            return Ok(report);
        }
        w.push(wk);
    }
    for s in 0..=levels {
        for t in 0..=levels - s {
            let d = w[s + t].distance(&(&alphas[t].apply(&w[s]) * &w[t]));
            report.law_defect = report.law_defect.max(d);
        }
    }
    for k in 1..=levels {
        report.modulus = report.modulus.max(w[k].distance(&w[k - 1]));
    }
    report.isomorphism_defect = isomorphism_from_cocycle(sf, alpha, beta, &w)?;
    report.equivalent = report.law_defect <= 1e-9 && report.isomorphism_defect <= 1e-9;
    if !report.equivalent {
        report.reason = format!(
            "cocycle law defect {:.3e}, isomorphism defect {:.3e}",
            report.law_defect, report.isomorphism_defect
        );
    } else {
        report.reason = "certified cocycle".into();
    }
    report.cocycle = Some(w);
    Ok(report)
}

/// Builds u_k = L(w_k): H̃^β_k → H̃^α_k and returns the worst of its bilinear,
/// unitary and product-compatibility defects.
pub fn isomorphism_from_cocycle(
    sf: &Arc<StandardForm>,
    alpha: &Arc<E0Semigroup>,
    beta: &Arc<E0Semigroup>,
    w: &[Element],
) -> Result<f64> {
    let ha = TwistedSystem::new(sf.clone(), alpha.clone());
    let hb = TwistedSystem::new(sf.clone(), beta.clone());
    let mut maps = Vec::with_capacity(w.len());
    let mut worst: f64 = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let m = BimoduleMap::new(hb.fiber(k)?, ha.fiber(k)?, sf.left_action(wk));
        worst = worst.max(m.verify(MapFlags::BILINEAR_UNITARY, 1e-9).worst(MapFlags::BILINEAR_UNITARY));
        maps.push(m);
    }
    worst = worst.max(prodsys::roundtrip_compatibility(&hb, &ha, &maps)?);
    Ok(worst)
}

/// a_{kδ} = ξ(kδ)ρ^{-1/2} for a unit of the twisted system, with the defect of
/// θ_t(a_s)a_t = a_{s+t} and the residual of reading ξ as aφ^{1/2}.
pub fn unit_to_cocycle(sf: &StandardForm, theta: &E0Semigroup, unit: &[CVec]) -> Result<(Vec<Element>, f64, f64)> {
    let a: Vec<Element> = unit.iter().map(|v| sf.materialize_left(v)).collect();
    let resid = a
        .iter()
        .zip(unit)
        .map(|(ak, v)| linalg::vnorm(&(sf.x_phi(ak) - v)))
        .fold(0.0, f64::max);
    let n = a.len() - 1;
    let mut law: f64 = 0.0;
    for s in 0..=n {
        for t in 0..=n - s {
            law = law.max(a[s + t].distance(&(&theta.map(t)?.apply(&a[s]) * &a[t])));
        }
    }
    Ok((a, law, resid))
}

#[derive(Clone, Debug)]
pub struct UnitOperatorReport {
    pub operators: Vec<CMat>,
    pub intertwining_defect: f64,
    pub semigroup_defect: f64,
}

/// X_t(xφ^{1/2}) = θ_t(x)a_tφ^{1/2} for tracial φ.
pub fn unit_operator(sf: &StandardForm, theta: &E0Semigroup, a: &[Element]) -> Result<UnitOperatorReport> {
    if !sf.state().is_tracial() {
        return Err(Error::Domain("unit operators are only defined here for tracial states".into()));
    }
    let alg = sf.algebra();
    let basis = alg.basis_elements();
    let input = linalg::from_columns(sf.dim(), &basis.iter().map(|e| sf.x_phi(e)).collect::<Vec<_>>());
    let input_inv = input.clone().try_inverse().ok_or_else(|| Error::Consistency("x ↦ xφ^½ not invertible".into()))?;
    let mut ops = Vec::with_capacity(a.len());
    for (k, ak) in a.iter().enumerate() {
        let th = theta.map(k)?;
        let cols: Vec<CVec> = basis.iter().map(|e| sf.x_phi(&(&th.apply(e) * ak))).collect();
        ops.push(linalg::from_columns(sf.dim(), &cols) * &input_inv);
    }
    let mut inter: f64 = 0.0;
    for (k, x_k) in ops.iter().enumerate() {
        let th = theta.map(k)?;
        for e in &basis {
            let d = x_k * sf.left_action(e) - sf.left_action(&th.apply(e)) * x_k;
            inter = inter.max(linalg::frob(&d));
        }
    }
    let n = ops.len() - 1;
    let mut semi: f64 = 0.0;
    for s in 0..=n {
        for t in 0..=n - s {
            semi = semi.max(linalg::frob(&(&ops[s] * &ops[t] - &ops[s + t])));
        }
    }
    Ok(UnitOperatorReport { operators: ops, intertwining_defect: inter, semigroup_defect: semi })
}

/// A seeded unitary v and the perturbation of α by the cocycle it generates.
pub fn seeded_perturbation(alpha: &E0Semigroup, levels: usize, seed: u64) -> Result<(E0Semigroup, Vec<Element>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = alpha.algebra().random_unitary(&mut rng);
    E0Semigroup::perturbed(alpha, &v, levels)
}

/// β_k = Ad(v_k*)∘α_k with independent random unitaries v_k for k ≥ 2, so that
/// the semigroup law fails from the second grid time on.
pub fn broken_perturbation(alpha: &E0Semigroup, levels: usize, seed: u64) -> Result<E0Semigroup> {
    let alg = alpha.algebra().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = alg.random_unitary(&mut rng);
    let mut maps = vec![CpMap::identity(&alg)];
    for k in 1..=levels {
        let v = if k == 1 { v1.clone() } else { alg.random_unitary(&mut rng) };
        maps.push(conjugation(&alg, &v).compose(&alpha.map(k)?));
    }
    Ok(E0Semigroup::explicit(&alg, alpha.step(), maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::State;
    use crate::prodsys::{cp_from_unit, CellComplex, Unit};

    fn m2(weights: &[f64]) -> Arc<StandardForm> {
        let alg = Algebra::new(&[2]).unwrap();
        Arc::new(StandardForm::new(&alg, &State::from_diagonal(&alg, weights).unwrap()).unwrap())
    }

    fn inner_alpha(sf: &StandardForm) -> E0Semigroup {
        let alg = sf.algebra();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        E0Semigroup::inner(alg, &alg.random_hermitian(&mut rng), Rational::new(1, 4)).unwrap()
    }

    #[test]
    fn inner_semigroup_is_e0() {
        let sf = m2(&[0.3, 0.7]);
        let a = inner_alpha(&sf);
        assert!(a.endomorphism_report(4).unwrap().max() < 1e-10);
        let alg = Algebra::new(&[1, 1, 2, 2]).unwrap();
        let p = E0Semigroup::block_permutation(&alg, &[1, 0, 3, 2], Rational::new(1, 2)).unwrap();
        assert!(p.endomorphism_report(3).unwrap().max() < 1e-12);
        assert!(E0Semigroup::block_permutation(&alg, &[2, 1, 0, 3], Rational::new(1, 2)).is_err());
        let sg = crate::cpdyn::CpSemigroup::stochastic_pair();
        assert!(E0Semigroup::stepped(sg.evaluate(0.5).unwrap(), Rational::new(1, 2)).is_err());
    }

    #[test]
    fn twisted_system_recovers_theta() {
        let sf = m2(&[0.3, 0.7]);
        let alpha = Arc::new(inner_alpha(&sf));
        let tw = TwistedSystem::new(sf.clone(), alpha.clone());
        for k in 0..=3 {
            assert!(tw.fiber(k).unwrap().check_invariants(sf.algebra()).commutation < 1e-12);
        }
        let fp = tw.product(1, 2).unwrap();
        assert!(fp.fit_residual < 1e-10);
        assert!(fp.map.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        let unit = Unit::distinguished(&tw, 3).unwrap();
        assert!(unit.factorization_defect(&tw).unwrap() < 1e-10);
        let (fam, _) = cp_from_unit(&tw, &unit).unwrap();
        for k in 0..=3 {
            assert!(fam.at(k).unwrap().distance(&alpha.map(k).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn canonical_iso_is_unitary_and_keeps_units() {
        let sf = m2(&[0.3, 0.7]);
        let alpha = Arc::new(inner_alpha(&sf));
        let cx = Arc::new(CellComplex::new(sf.clone(), alpha.clone()));
        let cells = CellSystem::new(cx, alpha.step()).unwrap();
        let tw = TwistedSystem::new(sf.clone(), alpha.clone());
        let maps = canonical_iso(&cells, &tw, 3).unwrap();
        for (k, (m, r)) in maps.iter().enumerate() {
            assert!(*r < 1e-10);
            assert!(m.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
            let image = m.apply(&cells.unit(k).unwrap());
            assert!(linalg::vnorm(&(image - sf.cyclic_vector())) < 1e-12);
        }
        let only: Vec<_> = maps.into_iter().map(|(m, _)| m).collect();
        assert!(prodsys::roundtrip_compatibility(&cells, &tw, &only).unwrap() < 1e-10);
    }

    #[test]
    fn perturbed_semigroup_is_equivalent() {
        let sf = m2(&[0.3, 0.7]);
        let alpha = Arc::new(inner_alpha(&sf));
        let (beta, _) = seeded_perturbation(&alpha, 4, 3).unwrap();
        let beta = Arc::new(beta);
        assert!(beta.endomorphism_report(4).unwrap().max() < 1e-10);
        let rep = cocycle_equivalence(&sf, &alpha, &beta, 4, 1).unwrap();
        assert!(rep.equivalent, "{rep:?}");
        assert!(rep.levels.iter().all(|l| l.conjugation_defect < 1e-9));
        let back = cocycle_equivalence(&sf, &beta, &alpha, 4, 1).unwrap();
        assert!(back.equivalent);
        let same = cocycle_equivalence(&sf, &alpha, &alpha, 4, 1).unwrap();
        assert!(same.equivalent);
        let id = Arc::new(E0Semigroup::identity(sf.algebra(), alpha.step()));
        assert!(cocycle_equivalence(&sf, &alpha, &id, 4, 1).unwrap().equivalent);
    }

    #[test]
    fn broken_semigroup_fails_with_certificate() {
        let sf = m2(&[0.3, 0.7]);
        let alpha = Arc::new(inner_alpha(&sf));
        let beta = Arc::new(broken_perturbation(&alpha, 4, 8).unwrap());
        let rep = cocycle_equivalence(&sf, &alpha, &beta, 4, 1).unwrap();
        assert!(!rep.equivalent);
        assert_eq!(rep.failing_level, Some(2));
    }

    #[test]
    fn block_swap_is_not_equivalent_to_identity() {
        let alg = Algebra::new(&[1, 1]).unwrap();
        let sf = Arc::new(StandardForm::new(&alg, &State::from_diagonal(&alg, &[0.5, 0.5]).unwrap()).unwrap());
        let swap = Arc::new(E0Semigroup::block_permutation(&alg, &[1, 0], Rational::new(1, 2)).unwrap());
        let id = Arc::new(E0Semigroup::identity(&alg, Rational::new(1, 2)));
        let rep = cocycle_equivalence(&sf, &swap, &id, 2, 0).unwrap();
        assert!(!rep.equivalent);
        assert_eq!(rep.failing_level, Some(1));
        assert_eq!(rep.levels[0].intertwiner_dim, 0);
    }

    #[test]
    fn units_give_cocycles_and_operators() {
        let sf = m2(&[0.5, 0.5]);
        let alpha = inner_alpha(&sf);
        let n = 3;
        // ξ(t) = u_t*φ^{1/2}
        let unit: Vec<CVec> = (0..=n).map(|k| sf.x_phi(&alpha.implementing_unitary(k).unwrap().adjoint())).collect();
        let (a, law, resid) = unit_to_cocycle(&sf, &alpha, &unit).unwrap();
        assert!(law < 1e-9 && resid < 1e-12);
        assert!(a[2].distance(&alpha.implementing_unitary(2).unwrap().adjoint()) < 1e-12);
        let rep = unit_operator(&sf, &alpha, &a).unwrap();
        assert!(rep.intertwining_defect < 1e-12 && rep.semigroup_defect < 1e-12);
        // X_t(xφ^{1/2}) = u_t*xφ^{1/2}
        let x = sf.algebra().basis(1);
        let want = sf.x_phi(&(&alpha.implementing_unitary(2).unwrap().adjoint() * &x));
        assert!(linalg::vnorm(&(&rep.operators[2] * sf.x_phi(&x) - want)) < 1e-12);
        let id = E0Semigroup::identity(sf.algebra(), Rational::new(1, 4));
        let decay: Vec<Element> = (0..=n).map(|k| sf.algebra().identity().scale(c((-0.25 * k as f64).exp(), 0.0))).collect();
        let rep = unit_operator(&sf, &id, &decay).unwrap();
        assert!(linalg::frob(&(&rep.operators[1] - linalg::identity(4) * c((-0.25f64).exp(), 0.0))) < 1e-12);
        let (_, law, _) = unit_to_cocycle(&sf, &id, &decay.iter().map(|a| sf.x_phi(a)).collect::<Vec<_>>()).unwrap();
        assert!(law < 1e-12);
        assert!(unit_operator(&m2(&[0.3, 0.7]), &alpha, &a).is_err());
    }
}
