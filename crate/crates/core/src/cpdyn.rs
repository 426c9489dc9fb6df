//! Unital completely positive maps and CP₀-semigroups given by generators.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use num_traits::ToPrimitive;

use crate::algebra::{Algebra, Element};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, I};
use crate::Rational;

/// A linear map on M acting on element coordinates.
#[derive(Clone, Debug)]
pub struct CpMap {
    algebra: Algebra,
    matrix: CMat,
}

#[derive(Clone, Copy, Debug)]
pub struct UcpReport {
    pub unital_defect: f64,
    pub choi_min_eigenvalue: f64,
    pub pass: bool,
}

impl CpMap {
    pub fn new(algebra: &Algebra, matrix: CMat) -> Result<Self> {
        let d = algebra.dim();
        if matrix.shape() != (d, d) {
            return Err(Error::Config(format!("map matrix must be {d}x{d}")));
        }
        Ok(Self { algebra: algebra.clone(), matrix })
    }

    /// Builds the coordinate matrix of an arbitrary linear map on M.
    pub fn from_fn(algebra: &Algebra, f: impl Fn(&Element) -> Element) -> Self {
        let cols: Vec<_> = algebra.basis_elements().iter().map(|e| f(e).coords()).collect();
        Self { algebra: algebra.clone(), matrix: linalg::from_columns(algebra.dim(), &cols) }
    }

    pub fn identity(algebra: &Algebra) -> Self {
        Self { algebra: algebra.clone(), matrix: linalg::identity(algebra.dim()) }
    }

    /// Blockwise transpose; positive but not completely positive.
    pub fn transpose(algebra: &Algebra) -> Self {
        Self::from_fn(algebra, |x| x.map_blocks(|b| b.transpose()))
    }

    pub fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn apply(&self, x: &Element) -> Element {
        self.algebra.from_coords(&(&self.matrix * x.coords()))
    }

    /// self ∘ other.
    pub fn compose(&self, other: &CpMap) -> CpMap {
        Self { algebra: self.algebra.clone(), matrix: &self.matrix * &other.matrix }
    }

    pub fn scale(&self, s: f64) -> CpMap {
        Self { algebra: self.algebra.clone(), matrix: &self.matrix * c(s, 0.0) }
    }

    pub fn distance(&self, other: &CpMap) -> f64 {
        linalg::frob(&(&self.matrix - &other.matrix))
    }

    /// Σ_ij E_ij ⊗ F(E_ij) for each source block, assembled block-diagonally.
    pub fn choi(&self) -> CMat {
        let alg = &self.algebra;
        let big = alg.full_size();
        let parts: Vec<CMat> = alg
            .blocks()
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let mut m = CMat::zeros(n * big, n * big);
                for i in 0..n {
                    for j in 0..n {
                        let img = alg.embed_full(&self.apply(&alg.basis(alg.index(b, i, j))));
                        m.view_mut((i * big, j * big), (big, big)).copy_from(&img);
                    }
                }
                m
            })
            .collect();
        linalg::block_diag(&parts)
    }

    pub fn verify_ucp(&self, tol: f64) -> UcpReport {
        let one = self.algebra.identity();
        let unital_defect = self.apply(&one).distance(&one);
        let choi_min_eigenvalue = linalg::min_eigenvalue(&self.choi());
        UcpReport {
            unital_defect,
            choi_min_eigenvalue,
            pass: unital_defect <= tol && choi_min_eigenvalue >= -tol,
        }
    }

    /// True when F(xy) = F(x)F(y) and F(x*) = F(x)* on basis elements.
    pub fn homomorphism_defect(&self) -> f64 {
        let basis = self.algebra.basis_elements();
        let mut worst: f64 = 0.0;
        for x in &basis {
            worst = worst.max(self.apply(&x.adjoint()).distance(&self.apply(x).adjoint()));
            for y in &basis {
                let lhs = self.apply(&(x * y));
                let rhs = &self.apply(x) * &self.apply(y);
                worst = worst.max(lhs.distance(&rhs));
            }
        }
        worst
    }
}

/// Anything that yields a normal CP map on M at exact rational times.
pub trait TimeEvolution: Send + Sync {
    fn algebra(&self) -> &Algebra;
    fn map_at(&self, t: &Rational) -> Result<CpMap>;
}

/// T_t = exp(tL) for a generator L with L(1) = 0.
#[derive(Debug)]
pub struct CpSemigroup {
    algebra: Algebra,
    generator: CMat,
    cache: RwLock<HashMap<u64, Arc<CMat>>>,
}

impl Clone for CpSemigroup {
    fn clone(&self) -> Self {
        Self { algebra: self.algebra.clone(), generator: self.generator.clone(), cache: RwLock::default() }
    }
}

impl CpSemigroup {
    pub fn from_generator(algebra: &Algebra, generator: CMat) -> Result<Self> {
        let d = algebra.dim();
        if generator.shape() != (d, d) {
            return Err(Error::Config(format!("generator must be {d}x{d}")));
        }
        let defect = linalg::vnorm(&(&generator * algebra.identity().coords()));
        if defect > 1e-10 {
            return Err(Error::NonUnitalGenerator(defect));
        }
        Ok(Self { algebra: algebra.clone(), generator, cache: RwLock::default() })
    }

    pub fn from_generator_fn(algebra: &Algebra, l: impl Fn(&Element) -> Element) -> Result<Self> {
        Self::from_generator(algebra, CpMap::from_fn(algebra, l).matrix)
    }

    /// L(a⊕b) = (b−a)⊕0 on ℂ⊕ℂ.
    pub fn stochastic_pair() -> Self {
        let alg = Algebra::new(&[1, 1]).expect("two points");
        let l = CMat::from_row_slice(2, 2, &[c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        Self::from_generator(&alg, l).expect("stochastic generator is unital")
    }

    pub fn identity(algebra: &Algebra) -> Self {
        let d = algebra.dim();
        Self::from_generator(algebra, CMat::zeros(d, d)).expect("zero generator")
    }

    /// T_t(x) = v_t* x v_t with v_t = exp(itH).
    pub fn unitary_conjugation(algebra: &Algebra, h: &Element) -> Result<Self> {
        let h = h.clone();
        Self::from_generator_fn(algebra, move |x| (&(x * &h) - &(&h * x)).scale(I))
    }

    /// L(x) = i(xH − Hx) + Σ V*xV − ½(V*V x + x V*V).
    pub fn lindblad(algebra: &Algebra, h: Option<&Element>, ops: &[Element]) -> Result<Self> {
        let h = h.cloned();
        let ops = ops.to_vec();
        Self::from_generator_fn(algebra, move |x| {
            let mut out = match &h {
                Some(h) => (&(x * h) - &(h * x)).scale(I),
                None => x.scale(c(0.0, 0.0)),
            };
            for v in &ops {
                let vd = v.adjoint();
                let vv = &vd * v;
                let anti = &(&vv * x) + &(x * &vv);
                out = &out + &(&(&(&vd * x) * v) - &anti.scale(c(0.5, 0.0)));
            }
            out
        })
    }

    pub fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    pub fn generator(&self) -> &CMat {
        &self.generator
    }

    pub fn evaluate(&self, t: f64) -> Result<CpMap> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("semigroup time must be nonnegative, got {t}")));
        }
        if t == 0.0 {
            return Ok(CpMap::identity(&self.algebra));
        }
        let key = t.to_bits();
        if let Some(m) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(CpMap { algebra: self.algebra.clone(), matrix: (**m).clone() });
        }
        let m = (&self.generator * c(t, 0.0)).exp();
        self.cache.write().expect("cache lock").insert(key, Arc::new(m.clone()));
        Ok(CpMap { algebra: self.algebra.clone(), matrix: m })
    }
}

impl TimeEvolution for CpSemigroup {
    fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    fn map_at(&self, t: &Rational) -> Result<CpMap> {
        let tf = t.to_f64().ok_or_else(|| Error::Domain(format!("time {t} not representable")))?;
        self.evaluate(tf)
    }
}

/// A family of maps known only at multiples of a step.
#[derive(Clone, Debug)]
pub struct GridFamily {
    algebra: Algebra,
    step: Rational,
    maps: Vec<CpMap>,
}

impl GridFamily {
    pub fn new(algebra: &Algebra, step: Rational, maps: Vec<CpMap>) -> Self {
        Self { algebra: algebra.clone(), step, maps }
    }

    pub fn step(&self) -> Rational {
        self.step
    }

    pub fn maps(&self) -> &[CpMap] {
        &self.maps
    }

    pub fn at(&self, k: usize) -> Option<&CpMap> {
        self.maps.get(k)
    }

    /// max ‖T_j∘T_k − T_{j+k}‖ over grid sums inside the family.
    pub fn semigroup_defect(&self) -> f64 {
        let n = self.maps.len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for k in 0..n - j {
                worst = worst.max(self.maps[j].compose(&self.maps[k]).distance(&self.maps[j + k]));
            }
        }
        worst
    }
}

impl TimeEvolution for GridFamily {
    fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    fn map_at(&self, t: &Rational) -> Result<CpMap> {
        let q = t / self.step;
        if !q.is_integer() || q < Rational::from_integer(0) {
            return Err(Error::Domain(format!("time {t} is not on the grid of step {}", self.step)));
        }
        let k = q.to_integer() as usize;
        self.maps
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("time {t} is beyond the known grid")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ONE;

    #[test]
    fn stochastic_pair_closed_form() {
        let sg = CpSemigroup::stochastic_pair();
        let alg = sg.algebra().clone();
        for &t in &[0.3, 1.0, 2.5] {
            let f = sg.evaluate(t).unwrap();
            let (a, b) = (c(0.4, 0.1), c(-1.2, 0.7));
            let got = f.apply(&alg.function(&[a, b]));
            let e = (-t).exp();
            let want = alg.function(&[a * e + b * (1.0 - e), b]);
            assert!(got.distance(&want) < 1e-13);
        }
    }

    #[test]
    fn log_two_halves() {
        let sg = CpSemigroup::stochastic_pair();
        let alg = sg.algebra().clone();
        let got = sg.evaluate(2f64.ln()).unwrap().apply(&alg.function(&[ONE, c(3.0, 0.0)]));
        assert!(got.distance(&alg.function(&[c(2.0, 0.0), c(3.0, 0.0)])) < 1e-13);
    }

    #[test]
    fn time_zero_is_identity_exactly() {
        let sg = CpSemigroup::stochastic_pair();
        assert_eq!(sg.evaluate(0.0).unwrap().matrix(), &linalg::identity(2));
        assert!(sg.evaluate(-1.0).is_err());
    }

    #[test]
    fn zero_generator_is_identity() {
        let alg = Algebra::new(&[2, 1]).unwrap();
        let sg = CpSemigroup::identity(&alg);
        assert!(sg.evaluate(1.7).unwrap().distance(&CpMap::identity(&alg)) < 1e-15);
    }

    #[test]
    fn non_unital_generator_rejected() {
        let alg = Algebra::new(&[1, 1]).unwrap();
        assert!(matches!(
            CpSemigroup::from_generator(&alg, linalg::identity(2)),
            Err(Error::NonUnitalGenerator(_))
        ));
    }

    #[test]
    fn unitary_conjugation_matches_direct() {
        let alg = Algebra::new(&[2]).unwrap();
        let h = alg
            .from_blocks(vec![CMat::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.5, -0.3), c(0.5, 0.3), c(-0.4, 0.0)])])
            .unwrap();
        let sg = CpSemigroup::unitary_conjugation(&alg, &h).unwrap();
        let t = 0.3;
        let v = h.map_blocks(|b| (b * c(0.0, t)).exp());
        let x = alg.from_blocks(vec![CMat::from_row_slice(2, 2, &[c(1.0, 2.0), c(0.0, 1.0), c(3.0, 0.0), c(-1.0, 0.5)])]).unwrap();
        let direct = &(&v.adjoint() * &x) * &v;
        assert!(sg.evaluate(t).unwrap().apply(&x).distance(&direct) < 1e-12);
    }

    #[test]
    fn amplitude_damping_is_ucp() {
        let alg = Algebra::new(&[2]).unwrap();
        let v = alg.basis(alg.index(0, 0, 1));
        let sg = CpSemigroup::lindblad(&alg, None, &[v]).unwrap();
        for &t in &[0.1, 0.5, 1.0] {
            let r = sg.evaluate(t).unwrap().verify_ucp(1e-10);
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn choi_of_identity_and_transpose() {
        let alg = Algebra::new(&[2]).unwrap();
        let id = CpMap::identity(&alg).verify_ucp(1e-10);
        assert!(id.pass && id.unital_defect == 0.0 && id.choi_min_eigenvalue.abs() < 1e-14);
        let tr = CpMap::transpose(&alg).verify_ucp(1e-10);
        assert!(!tr.pass);
        assert!((tr.choi_min_eigenvalue + 1.0).abs() < 1e-12);
    }

    #[test]
    fn stochastic_is_ucp_at_one() {
        assert!(CpSemigroup::stochastic_pair().evaluate(1.0).unwrap().verify_ucp(1e-10).pass);
    }

    #[test]
    fn grid_family_rejects_off_grid_times() {
        let sg = CpSemigroup::stochastic_pair();
        let step = Rational::new(1, 4);
        let maps = (0..3).map(|k| sg.evaluate(k as f64 * 0.25).unwrap()).collect();
        let fam = GridFamily::new(sg.algebra(), step, maps);
        assert!(fam.map_at(&Rational::new(1, 2)).is_ok());
        assert!(fam.map_at(&Rational::new(1, 3)).is_err());
        assert!(fam.map_at(&Rational::new(3, 4)).is_err());
        assert!(fam.semigroup_defect() < 1e-12);
    }
}
