//! Partitions of time intervals, the cells H^T(𝔭,t), refinement isometries,
//! cell multiplication, units, and the passage between units and CP maps.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algebra::{Algebra, Element, StandardForm};
use crate::bimodule::{self, Bimodule, BimoduleMap, GnsTensor, RelativeTensor};
use crate::cpdyn::{CpMap, GridFamily, TimeEvolution};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};
use crate::Rational;

/// Parses "3", "1/4" or a finite decimal such as "0.4" into an exact rational.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    if let Some((int, frac)) = s.split_once('.') {
        if frac.is_empty() || !frac.chars().all(|ch| ch.is_ascii_digit()) || frac.len() > 15 {
            return Err(Error::Parse(format!("bad decimal '{s}'")));
        }
        let neg = int.starts_with('-');
        let int_val: i64 = if int.is_empty() || int == "-" {
            0
        } else {
            int.parse().map_err(|_| Error::Parse(format!("bad decimal '{s}'")))?
        };
        let den = 10i64.pow(frac.len() as u32);
        let num: i64 = frac.parse().map_err(|_| Error::Parse(format!("bad decimal '{s}'")))?;
        let mag = Rational::from_integer(int_val.abs()) + Rational::new(num, den);
        return Ok(if neg { -mag } else { mag });
    }
    Rational::from_str(s).map_err(|_| Error::Parse(format!("bad rational '{s}'")))
}

pub fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// A finite tuple of positive times.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Partition {
    parts: Vec<Rational>,
}

impl Partition {
    pub fn new(parts: Vec<Rational>) -> Result<Self> {
        if let Some(p) = parts.iter().find(|p| **p <= Rational::zero()) {
            return Err(Error::Domain(format!("partition parts must be positive, got {p}")));
        }
        Ok(Self { parts })
    }

    pub fn empty() -> Self {
        Self { parts: Vec::new() }
    }

    pub fn single(t: Rational) -> Result<Self> {
        Self::new(vec![t])
    }

    /// (δ,…,δ) with k parts.
    pub fn uniform(step: Rational, k: usize) -> Self {
        Self { parts: vec![step; k] }
    }

    pub fn parts(&self) -> &[Rational] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn total(&self) -> Rational {
        self.parts.iter().copied().sum()
    }

    /// 𝔭∨𝔮: concatenation.
    pub fn join(&self, other: &Partition) -> Partition {
        let mut parts = self.parts.clone();
        parts.extend_from_slice(&other.parts);
        Partition { parts }
    }

    fn cut_points(&self) -> Vec<Rational> {
        let mut acc = Rational::zero();
        let mut out = Vec::with_capacity(self.parts.len());
        for p in &self.parts {
            acc += p;
            out.push(acc);
        }
        out
    }

    /// Number of consecutive parts of `self` grouped into each part of `coarse`.
    pub fn groups(&self, coarse: &Partition) -> Option<Vec<usize>> {
        if self.total() != coarse.total() {
            return None;
        }
        let mut out = Vec::with_capacity(coarse.len());
        let mut it = self.parts.iter();
        for target in &coarse.parts {
            let mut acc = Rational::zero();
            let mut count = 0;
            while acc < *target {
                acc += it.next()?;
                count += 1;
            }
            if acc != *target {
                return None;
            }
            out.push(count);
        }
        Some(out)
    }

    /// True iff `self` ≻ `coarse`, i.e. self's parts group consecutively into coarse's.
    pub fn refines(&self, coarse: &Partition) -> Result<bool> {
        if self.total() != coarse.total() {
            return Err(Error::Domain(format!("totals differ: {} vs {}", self.total(), coarse.total())));
        }
        Ok(self.groups(coarse).is_some())
    }

    /// Overlay of the cut points of both partitions.
    pub fn common_refinement(&self, other: &Partition) -> Result<Partition> {
        if self.total() != other.total() {
            return Err(Error::Domain(format!("totals differ: {} vs {}", self.total(), other.total())));
        }
        let mut cuts = self.cut_points();
        cuts.extend(other.cut_points());
        cuts.sort();
        cuts.dedup();
        let mut prev = Rational::zero();
        let mut parts = Vec::with_capacity(cuts.len());
        for cpt in cuts {
            parts.push(cpt - prev);
            prev = cpt;
        }
        Ok(Partition { parts })
    }

    /// Halves every part.
    pub fn dyadic_refinement(&self) -> Partition {
        let half = Rational::new(1, 2);
        Partition { parts: self.parts.iter().flat_map(|p| [p * half, p * half]).collect() }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.parts.iter().map(|p| p.to_string()).collect();
        write!(f, "({})", s.join(","))
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        if s.trim().is_empty() {
            return Ok(Partition::empty());
        }
        Partition::new(s.split(',').map(parse_rational).collect::<Result<_>>()?)
    }
}

/// (x₁⊗y₁φ^{1/2})φ^{-1/2}⋯φ^{-1/2}(x_n⊗y_nφ^{1/2}) as its list of (x_i, y_i).
#[derive(Clone, Debug)]
pub struct ElementaryTensor {
    pub factors: Vec<(Element, Element)>,
}

impl ElementaryTensor {
    pub fn random(alg: &Algebra, n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { factors: (0..n).map(|_| (alg.random_element(rng), alg.random_element(rng))).collect() }
    }

    /// (x₁⊗φ^{1/2})⋯(x_n⊗φ^{1/2}y).
    pub fn reduced(alg: &Algebra, xs: &[Element], y: &Element) -> Self {
        let n = xs.len();
        let factors = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (x.clone(), if i + 1 == n { y.clone() } else { alg.identity() }))
            .collect();
        Self { factors }
    }

    pub fn ones(alg: &Algebra, n: usize) -> Self {
        Self { factors: (0..n).map(|_| (alg.identity(), alg.identity())).collect() }
    }

    pub fn concat(&self, other: &ElementaryTensor) -> ElementaryTensor {
        let mut factors = self.factors.clone();
        factors.extend(other.factors.iter().cloned());
        Self { factors }
    }
}

#[derive(Debug)]
struct Stage {
    gns: Arc<GnsTensor>,
    product: Option<Arc<RelativeTensor>>,
}

/// H^T(𝔭,t) as the left-nested relative tensor product of M⊗_{t_i}L²(M).
#[derive(Debug)]
pub struct Cell {
    partition: Partition,
    space: Arc<Bimodule>,
    stages: Vec<Arc<Stage>>,
}

impl Cell {
    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn space(&self) -> &Arc<Bimodule> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn vector(&self, sf: &StandardForm, et: &ElementaryTensor) -> Result<CVec> {
        if et.factors.len() != self.stages.len() {
            return Err(Error::Domain(format!(
                "elementary tensor has {} factors, partition {} has {}",
                et.factors.len(),
                self.partition,
                self.stages.len()
            )));
        }
        if self.stages.is_empty() {
            return Ok(sf.cyclic_vector().clone());
        }
        let mut v = CVec::zeros(0);
        for (i, (stage, (x, y))) in self.stages.iter().zip(&et.factors).enumerate() {
            let w = stage.gns.elementary(sf, x, y);
            v = if i == 0 { w } else { stage.product.as_ref().expect("nested stage").embed(&v, &w) };
        }
        Ok(v)
    }

    /// Smallest positive Gram eigenvalue kept by each factor, for reports.
    pub fn gram_spectra(&self) -> Vec<Vec<f64>> {
        self.stages.iter().map(|s| s.gns.gram_spectrum().to_vec()).collect()
    }
}

/// U_{s,t} between two cells, with the relative tensor it is defined on.
#[derive(Debug)]
pub struct FiberProduct {
    pub domain: Arc<RelativeTensor>,
    pub map: BimoduleMap,
    pub fit_residual: f64,
}

impl FiberProduct {
    pub fn apply(&self, xi: &CVec, eta: &CVec) -> CVec {
        &self.map.matrix * self.domain.embed(xi, eta)
    }
}

/// Fits a bimodule map from sampled (source, target) pairs and reports the
/// relative residual on fresh samples.
pub fn sample_fit(
    source: &Arc<Bimodule>,
    target: &Arc<Bimodule>,
    seed: u64,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<(CVec, CVec)>,
) -> Result<(BimoduleMap, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = source.dim();
    let mut samples = Vec::new();
    for round in 0..3 {
        let want = (2 * dim + 8) << round;
        while samples.len() < want {
            samples.push(sample(&mut rng)?);
        }
        if let Ok((m, _)) = bimodule::fit_from_samples(dim, target.dim(), &samples) {
            // well-definedness on fresh elementary tensors
            let mut resid: f64 = 0.0;
            for _ in 0..4 {
                let (s, t) = sample(&mut rng)?;
                let scale = linalg::vnorm(&s).max(linalg::vnorm(&t)).max(1e-300);
                resid = resid.max(linalg::vnorm(&(&m * &s - &t)) / scale);
            }
            return Ok((BimoduleMap::new(source.clone(), target.clone(), m), resid));
        }
    }
    bimodule::fit_from_samples(dim, target.dim(), &samples).map(|_| unreachable!())
}

/// Cache of GNS factors, cells and cell products for one time evolution.
pub struct CellComplex {
    sf: Arc<StandardForm>,
    evolution: Arc<dyn TimeEvolution>,
    standard: Arc<Bimodule>,
    seed: u64,
    gns: Mutex<HashMap<Rational, Arc<GnsTensor>>>,
    cells: Mutex<HashMap<Partition, Arc<Cell>>>,
    products: Mutex<HashMap<(Partition, Partition), Arc<FiberProduct>>>,
}

impl fmt::Debug for CellComplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CellComplex").field("algebra", self.sf.algebra()).finish()
    }
}

impl CellComplex {
    pub fn new(sf: Arc<StandardForm>, evolution: Arc<dyn TimeEvolution>) -> Self {
        Self::with_seed(sf, evolution, 0x5eed)
    }

    pub fn with_seed(sf: Arc<StandardForm>, evolution: Arc<dyn TimeEvolution>, seed: u64) -> Self {
        let standard = Arc::new(Bimodule::standard(&sf));
        Self {
            sf,
            evolution,
            standard,
            seed,
            gns: Mutex::default(),
            cells: Mutex::default(),
            products: Mutex::default(),
        }
    }

    pub fn standard_form(&self) -> &Arc<StandardForm> {
        &self.sf
    }

    pub fn standard(&self) -> &Arc<Bimodule> {
        &self.standard
    }

    pub fn evolution(&self) -> &Arc<dyn TimeEvolution> {
        &self.evolution
    }

    pub fn gns(&self, t: &Rational) -> Result<Arc<GnsTensor>> {
        if let Some(g) = self.gns.lock().expect("gns cache").get(t) {
            return Ok(g.clone());
        }
        let g = Arc::new(GnsTensor::new(&self.sf, &self.evolution.map_at(t)?)?);
        self.gns.lock().expect("gns cache").insert(*t, g.clone());
        Ok(g)
    }

    /// H^T(𝔭,t); the empty partition gives L²(M).
    pub fn cell(&self, p: &Partition) -> Result<Arc<Cell>> {
        if let Some(cell) = self.cells.lock().expect("cell cache").get(p) {
            return Ok(cell.clone());
        }
        let cell = if p.is_empty() {
            Cell { partition: p.clone(), space: self.standard.clone(), stages: Vec::new() }
        } else {
            let n = p.len();
            let last = &p.parts()[n - 1];
            let gns = self.gns(last)?;
            if n == 1 {
                let stage = Arc::new(Stage { gns: gns.clone(), product: None });
                Cell { partition: p.clone(), space: gns.space().clone(), stages: vec![stage] }
            } else {
                let prefix = self.cell(&Partition { parts: p.parts()[..n - 1].to_vec() })?;
                let rel = Arc::new(RelativeTensor::new(&self.sf, prefix.space.clone(), gns.space().clone())?);
                let mut stages = prefix.stages.clone();
                stages.push(Arc::new(Stage { gns, product: Some(rel.clone()) }));
                Cell { partition: p.clone(), space: rel.space().clone(), stages }
            }
        };
        let cell = Arc::new(cell);
        self.cells.lock().expect("cell cache").insert(p.clone(), cell.clone());
        Ok(cell)
    }

    fn seed_for(&self, label: &str) -> u64 {
        linalg::seed_from(label, self.seed)
    }

    /// a_{𝔭,𝔮} for 𝔭 ≻ 𝔮, with the residual of its linear extension.
    pub fn refinement_isometry(&self, fine: &Partition, coarse: &Partition) -> Result<(BimoduleMap, f64)> {
        let groups = fine.groups(coarse).ok_or_else(|| Error::Order {
            fine: fine.to_string(),
            coarse: coarse.to_string(),
        })?;
        let src = self.cell(coarse)?;
        let tgt = self.cell(fine)?;
        if fine == coarse {
            return Ok((BimoduleMap::identity(src.space.clone()), 0.0));
        }
        let (m, r) = self.refine_matrix(fine, coarse, &groups)?;
        Ok((BimoduleMap::new(src.space.clone(), tgt.space.clone(), m), r))
    }

    /// Built factor by factor: a = U_{𝔣',𝔤}(a' ⊗ split_𝔤) on cell(𝔮')⊗H_{t_m}.
    fn refine_matrix(&self, fine: &Partition, coarse: &Partition, groups: &[usize]) -> Result<(CMat, f64)> {
        let m = coarse.len();
        if m == 1 {
            return self.split_into(fine);
        }
        let head: usize = groups[..m - 1].iter().sum();
        let fine_head = Partition { parts: fine.parts[..head].to_vec() };
        let last_group = Partition { parts: fine.parts[head..].to_vec() };
        let coarse_head = Partition { parts: coarse.parts[..m - 1].to_vec() };
        let (a, ra) = self.refine_matrix(&fine_head, &coarse_head, &groups[..m - 1])?;
        let (split, rs) = self.split_into(&last_group)?;
        let src = self.cell(coarse)?;
        let src_rel = src.stages.last().and_then(|st| st.product.clone()).expect("nested stage");
        let mul = self.multiply(&fine_head, &last_group)?;
        let (t, rt) = src_rel.tensor_maps(&mul.domain, &a, &split);
        Ok((&mul.map.matrix * t, ra.max(rs).max(rt).max(mul.fit_residual)))
    }

    /// H_t → cell(𝔤) for a partition 𝔤 of t.
    fn split_into(&self, g: &Partition) -> Result<(CMat, f64)> {
        let k = g.len();
        if k == 1 {
            return Ok((linalg::identity(self.cell(g)?.dim()), 0.0));
        }
        let head = Partition { parts: g.parts[..k - 1].to_vec() };
        let (s, u) = (head.total(), g.parts[k - 1]);
        let (gs, gu) = (self.gns(&s)?, self.gns(&u)?);
        let pair = RelativeTensor::new(&self.sf, gs.space().clone(), gu.space().clone())?;
        let (v, rv) = self.split_pair(&s, &u, &pair)?;
        let (inner, ri) = self.split_into(&head)?;
        let target = self.cell(g)?;
        let target_rel = target.stages.last().and_then(|st| st.product.clone()).expect("nested stage");
        let (t, rt) = pair.tensor_maps(&target_rel, &inner, &linalg::identity(gu.dim()));
        Ok((t * v, rv.max(ri).max(rt)))
    }

    /// H_{s+u} → H_s⊗H_u, x⊗ξ ↦ (x⊗φ^{1/2})φ^{-1/2}(1⊗ξ), fitted on the basis of M ⊗ L²(M).
    fn split_pair(&self, s: &Rational, u: &Rational, pair: &RelativeTensor) -> Result<(CMat, f64)> {
        let alg = self.sf.algebra();
        let d = alg.dim();
        let whole = self.gns(&(s + u))?;
        let (gs, gu) = (self.gns(s)?, self.gns(u)?);
        let one = alg.identity();
        let phi = self.sf.cyclic_vector();
        let mut samples = Vec::with_capacity(d * d);
        for x in &alg.basis_elements() {
            let head = gs.vector(x, phi);
            for j in 0..d {
                let e = linalg::unit_vector(d, j);
                samples.push((whole.vector(x, &e), pair.embed(&head, &gu.vector(&one, &e))));
            }
        }
        bimodule::fit_from_samples(whole.dim(), pair.dim(), &samples)
    }

    /// U_{s,t}: cell(𝔮)⊗^M cell(𝔭) → cell(𝔮∨𝔭).
    pub fn multiply(&self, q: &Partition, p: &Partition) -> Result<Arc<FiberProduct>> {
        let key = (q.clone(), p.clone());
        if let Some(fp) = self.products.lock().expect("product cache").get(&key) {
            return Ok(fp.clone());
        }
        let cq = self.cell(q)?;
        let cp = self.cell(p)?;
        let target = self.cell(&q.join(p))?;
        let fp = if q.is_empty() || p.is_empty() {
            let domain = Arc::new(RelativeTensor::new(&self.sf, cq.space.clone(), cp.space.clone())?);
            let map = if q.is_empty() {
                bimodule::left_unitor(&self.sf, &domain)
            } else {
                bimodule::right_unitor(&self.sf, &domain)
            };
            FiberProduct { domain, map, fit_residual: 0.0 }
        } else if p.len() == 1 {
            // cell(𝔮∨(t)) is built as cell(𝔮)⊗H_t
            let domain = target.stages.last().and_then(|st| st.product.clone()).expect("nested stage");
            let map = BimoduleMap::identity(target.space.clone());
            FiberProduct { domain, map, fit_residual: 0.0 }
        } else {
            // cell(𝔮)⊗(cell(𝔭')⊗H_t) → (cell(𝔮)⊗cell(𝔭'))⊗H_t → cell(𝔮∨𝔭')⊗H_t
            let n = p.len();
            let head = Partition { parts: p.parts[..n - 1].to_vec() };
            let yz = cp.stages.last().and_then(|st| st.product.clone()).expect("nested stage");
            let domain = Arc::new(RelativeTensor::new(&self.sf, cq.space.clone(), cp.space.clone())?);
            let inner = self.multiply(q, &head)?;
            let xy_z = RelativeTensor::new(&self.sf, inner.domain.space().clone(), yz.right_factor().clone())?;
            let (assoc, ra) = bimodule::associator(&domain, &yz, &xy_z, &inner.domain);
            let target_rel = target.stages.last().and_then(|st| st.product.clone()).expect("nested stage");
            let (t, rt) = xy_z.tensor_maps(&target_rel, &inner.map.matrix, &linalg::identity(yz.right_factor().dim()));
            let map = BimoduleMap::new(domain.space().clone(), target.space.clone(), t * assoc);
            FiberProduct { domain, map, fit_residual: ra.max(rt).max(inner.fit_residual) }
        };
        let fp = Arc::new(fp);
        self.products.lock().expect("product cache").insert(key, fp.clone());
        Ok(fp)
    }

    /// ‖U(𝔯∨𝔰,𝔱)(U(𝔯,𝔰)⊗id) − U(𝔯,𝔰∨𝔱)(id⊗U(𝔰,𝔱))∘assoc‖.
    pub fn associativity_defect(&self, r: &Partition, s: &Partition, t: &Partition) -> Result<f64> {
        let (cr, ct) = (self.cell(r)?, self.cell(t)?);
        let u_rs = self.multiply(r, s)?;
        let u_st = self.multiply(s, t)?;
        let u_rs_t = self.multiply(&r.join(s), t)?;
        let u_r_st = self.multiply(r, &s.join(t))?;
        let d1 = RelativeTensor::new(&self.sf, u_rs.domain.space().clone(), ct.space.clone())?;
        let d2 = RelativeTensor::new(&self.sf, cr.space.clone(), u_st.domain.space().clone())?;
        let (assoc, _) = bimodule::associator(&d2, &u_st.domain, &d1, &u_rs.domain);
        let (lhs_t, _) = d1.tensor_maps(&u_rs_t.domain, &u_rs.map.matrix, &linalg::identity(ct.dim()));
        let lhs = &u_rs_t.map.matrix * lhs_t * assoc;
        let (rhs_t, _) = d2.tensor_maps(&u_r_st.domain, &linalg::identity(cr.dim()), &u_st.map.matrix);
        let rhs = &u_r_st.map.matrix * rhs_t;
        Ok(linalg::frob(&(lhs - rhs)))
    }

    /// ξ^T(t) = 1⊗φ^{1/2} in cell((t)) for each listed time.
    pub fn canonical_unit(&self, times: &[Rational]) -> Result<CellUnit> {
        let alg = self.sf.algebra();
        let mut entries = Vec::with_capacity(times.len());
        for t in times {
            let p = if t.is_zero() { Partition::empty() } else { Partition::single(*t)? };
            let cell = self.cell(&p)?;
            let v = cell.vector(&self.sf, &ElementaryTensor::ones(alg, p.len()))?;
            entries.push((*t, cell, v));
        }
        Ok(CellUnit { entries })
    }

    /// Rank of {U(𝔭)(x₁ξ(t₁)φ^{-1/2}⋯x_nξ(t_n)y)} in cell(𝔭), together with the
    /// images a_{𝔭,𝔮} of the same family for every one-step coarsening 𝔮.
    pub fn generating_rank(&self, p: &Partition) -> Result<GeneratingReport> {
        let cell = self.cell(p)?;
        let mut vectors = self.orbit_vectors(p)?;
        let mut sampled = vec![p.clone()];
        for i in 0..p.len().saturating_sub(1) {
            let mut parts = p.parts().to_vec();
            let merged = parts[i] + parts[i + 1];
            parts.splice(i..i + 2, [merged]);
            let q = Partition::new(parts)?;
            let (a, _) = self.refinement_isometry(p, &q)?;
            vectors.extend(self.orbit_vectors(&q)?.iter().map(|v| &a.matrix * v));
            sampled.push(q);
        }
        let m = linalg::from_columns(cell.dim(), &vectors);
        Ok(GeneratingReport { rank: linalg::rank(&m, 1e-10), dim: cell.dim(), sampled })
    }

    fn orbit_vectors(&self, p: &Partition) -> Result<Vec<CVec>> {
        let alg = self.sf.algebra();
        let n = p.len();
        let d = alg.dim();
        let count = d.checked_pow(n as u32 + 1).unwrap_or(usize::MAX);
        let words: Vec<(Vec<Element>, Element)> = if count <= 4096 {
            (0..count)
                .map(|mut idx| {
                    let y = alg.basis(idx % d);
                    idx /= d;
                    let xs = (0..n)
                        .map(|_| {
                            let x = alg.basis(idx % d);
                            idx /= d;
                            x
                        })
                        .collect();
                    (xs, y)
                })
                .collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed_for(&format!("orbit{p}")));
            (0..4096)
                .map(|_| ((0..n).map(|_| alg.random_element(&mut rng)).collect(), alg.random_element(&mut rng)))
                .collect()
        };
        let units: Vec<(Arc<Cell>, CVec)> = p
            .parts()
            .iter()
            .map(|t| {
                let c1 = self.cell(&Partition::single(*t)?)?;
                let v = c1.vector(&self.sf, &ElementaryTensor::ones(alg, 1))?;
                Ok((c1, v))
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(words.len());
        for (xs, y) in words {
            if n == 0 {
                out.push(self.sf.x_phi(&y));
                continue;
            }
            let (c0, u0) = &units[0];
            let mut v = c0.space.left_action(&xs[0]) * u0;
            let mut prefix = Partition::single(p.parts()[0])?;
            for i in 1..n {
                let (ci, ui) = &units[i];
                let next = Partition::single(p.parts()[i])?;
                let w = ci.space.left_action(&xs[i]) * ui;
                v = self.multiply(&prefix, &next)?.apply(&v, &w);
                prefix = prefix.join(&next);
            }
            out.push(self.cell(p)?.space.right_action(&y) * v);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratingReport {
    pub rank: usize,
    pub dim: usize,
    pub sampled: Vec<Partition>,
}

impl GeneratingReport {
    pub fn full(&self) -> bool {
        self.rank == self.dim
    }
}

/// Values ξ(t) ∈ cell((t)) of a unit at a list of times.
#[derive(Debug)]
pub struct CellUnit {
    pub entries: Vec<(Rational, Arc<Cell>, CVec)>,
}

impl CellUnit {
    /// max_t ‖π_φ(ξ(t))*π_φ(ξ(t)) − 1‖.
    pub fn unital_defect(&self, sf: &StandardForm) -> f64 {
        self.entries
            .iter()
            .map(|(_, cell, v)| {
                let p = sf.pi_phi(cell.space(), v);
                linalg::frob(&(p.adjoint() * p - linalg::identity(sf.dim())))
            })
            .fold(0.0, f64::max)
    }

    /// max over listed s, t with s+t listed of ‖U((s),(t))(ξ(s)φ^{-1/2}ξ(t)) − a_{(s,t),(s+t)}ξ(s+t)‖.
    pub fn factorization_defect(&self, complex: &CellComplex) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (s, _, vs) in &self.entries {
            for (t, _, vt) in &self.entries {
                if s.is_zero() || t.is_zero() {
                    continue;
                }
                let Some((_, _, vst)) = self.entries.iter().find(|(u, _, _)| *u == s + t) else {
                    continue;
                };
                let (ps, pt) = (Partition::single(*s)?, Partition::single(*t)?);
                let lhs = complex.multiply(&ps, &pt)?.apply(vs, vt);
                let (a, _) = complex.refinement_isometry(&ps.join(&pt), &Partition::single(s + t)?)?;
                worst = worst.max(linalg::vnorm(&(lhs - &a.matrix * vst)));
            }
        }
        Ok(worst)
    }
}

/// A product system sampled on the grid {kδ}: fibers, multiplications and a unit.
pub trait GridSystem: Send + Sync {
    fn standard_form(&self) -> &Arc<StandardForm>;
    fn step(&self) -> Rational;
    fn fiber(&self, k: usize) -> Result<Arc<Bimodule>>;
    /// U_{jδ,kδ}: fiber(j)⊗^M fiber(k) → fiber(j+k).
    fn product(&self, j: usize, k: usize) -> Result<Arc<FiberProduct>>;
    /// The distinguished unit at kδ.
    fn unit(&self, k: usize) -> Result<CVec>;
}

/// Cells of a time evolution at the uniform partitions (δ,…,δ).
pub struct CellSystem {
    complex: Arc<CellComplex>,
    step: Rational,
}

impl CellSystem {
    pub fn new(complex: Arc<CellComplex>, step: Rational) -> Result<Self> {
        if step <= Rational::zero() {
            return Err(Error::Domain(format!("grid step must be positive, got {step}")));
        }
        Ok(Self { complex, step })
    }

    pub fn complex(&self) -> &Arc<CellComplex> {
        &self.complex
    }

    pub fn level(&self, k: usize) -> Partition {
        Partition::uniform(self.step, k)
    }
}

impl GridSystem for CellSystem {
    fn standard_form(&self) -> &Arc<StandardForm> {
        self.complex.standard_form()
    }

    fn step(&self) -> Rational {
        self.step
    }

    fn fiber(&self, k: usize) -> Result<Arc<Bimodule>> {
        Ok(self.complex.cell(&self.level(k))?.space().clone())
    }

    fn product(&self, j: usize, k: usize) -> Result<Arc<FiberProduct>> {
        self.complex.multiply(&self.level(j), &self.level(k))
    }

    fn unit(&self, k: usize) -> Result<CVec> {
        let sf = self.complex.standard_form();
        self.complex.cell(&self.level(k))?.vector(sf, &ElementaryTensor::ones(sf.algebra(), k))
    }
}

/// A unit on a grid system: ξ(kδ) for k = 0..=n with ξ(0) = φ^{1/2}.
#[derive(Clone, Debug)]
pub struct Unit {
    step: Rational,
    vectors: Vec<CVec>,
}

impl Unit {
    pub fn from_vectors(step: Rational, vectors: Vec<CVec>) -> Self {
        Self { step, vectors }
    }

    /// The system's own unit up to level n.
    pub fn distinguished(sys: &dyn GridSystem, n: usize) -> Result<Self> {
        Ok(Self { step: sys.step(), vectors: (0..=n).map(|k| sys.unit(k)).collect::<Result<_>>()? })
    }

    /// The discrete unit generated by ξ(δ) = `first`: ξ((k+1)δ) = U(ξ(kδ)φ^{-1/2}ξ(δ)).
    pub fn generated(sys: &dyn GridSystem, first: CVec, n: usize) -> Result<Self> {
        let mut vectors = vec![sys.standard_form().cyclic_vector().clone()];
        if n >= 1 {
            vectors.push(first.clone());
        }
        for k in 1..n {
            let next = sys.product(k, 1)?.apply(&vectors[k], &first);
            vectors.push(next);
        }
        Ok(Self { step: sys.step(), vectors })
    }

    /// ξ(t)·e^{-ct}.
    pub fn scaled(&self, rate: f64) -> Self {
        let dt = rational_to_f64(&self.step);
        let vectors = self
            .vectors
            .iter()
            .enumerate()
            .map(|(k, v)| v * c((-rate * dt * k as f64).exp(), 0.0))
            .collect();
        Self { step: self.step, vectors }
    }

    pub fn step(&self) -> Rational {
        self.step
    }

    pub fn levels(&self) -> usize {
        self.vectors.len() - 1
    }

    pub fn vector(&self, k: usize) -> &CVec {
        &self.vectors[k]
    }

    pub fn vectors(&self) -> &[CVec] {
        &self.vectors
    }

    /// π_φ(ξ(kδ))*π_φ(ξ(kδ)) as an operator on L²(M).
    pub fn gram_operator(&self, sys: &dyn GridSystem, k: usize) -> Result<CMat> {
        let fiber = sys.fiber(k)?;
        let p = sys.standard_form().pi_phi(&fiber, &self.vectors[k]);
        Ok(p.adjoint() * p)
    }

    pub fn unital_defect(&self, sys: &dyn GridSystem) -> Result<f64> {
        let id = linalg::identity(sys.standard_form().dim());
        let mut worst: f64 = 0.0;
        for k in 0..self.vectors.len() {
            worst = worst.max(linalg::frob(&(self.gram_operator(sys, k)? - &id)));
        }
        Ok(worst)
    }

    /// max_k ‖π_φ(ξ(kδ))*π_φ(ξ(kδ))‖.
    pub fn contraction_norm(&self, sys: &dyn GridSystem) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..self.vectors.len() {
            worst = worst.max(linalg::op_norm(&self.gram_operator(sys, k)?));
        }
        Ok(worst)
    }

    /// max ‖U(ξ(j)φ^{-1/2}ξ(k)) − ξ(j+k)‖ over j + k ≤ n.
    pub fn factorization_defect(&self, sys: &dyn GridSystem) -> Result<f64> {
        let n = self.levels();
        let mut worst: f64 = 0.0;
        for j in 0..=n {
            for k in 0..=n - j {
                let v = sys.product(j, k)?.apply(&self.vectors[j], &self.vectors[k]);
                worst = worst.max(linalg::vnorm(&(v - &self.vectors[j + k])));
            }
        }
        Ok(worst)
    }
}

/// T^Ξ_t(x) = π_φ(ξ(t))*π_φ(xξ(t)) at grid times; also returns the largest
/// residual of reading the compressions as elements of M.
pub fn cp_from_unit(sys: &dyn GridSystem, unit: &Unit) -> Result<(GridFamily, f64)> {
    let sf = sys.standard_form();
    let alg = sf.algebra();
    let mut maps = Vec::with_capacity(unit.vectors.len());
    let mut worst: f64 = 0.0;
    for (k, xi) in unit.vectors.iter().enumerate() {
        let fiber = sys.fiber(k)?;
        let p = sf.pi_phi(&fiber, xi);
        let mut cols = Vec::with_capacity(alg.dim());
        for e in alg.basis_elements() {
            let q = sf.pi_phi(&fiber, &(fiber.left_action(&e) * xi));
            let (m, r) = sf.element_of_left_operator(&(p.adjoint() * q));
            worst = worst.max(r);
            cols.push(m.coords());
        }
        maps.push(CpMap::new(alg, linalg::from_columns(alg.dim(), &cols))?);
    }
    Ok((GridFamily::new(alg, unit.step, maps), worst))
}

/// u_k: H^{T^Ξ}((δ)^k) → H_{kδ} sending (x₁⊗φ^{1/2})⋯(x_k⊗φ^{1/2}y) to
/// U(x₁ξ(δ)φ^{-1/2}⋯x_kξ(δ)y), for k = 0..=n; also returns fit residuals.
/// Built recursively as u_k = V_{k−1,1}(u_{k−1} ⊗ u_1).
pub fn roundtrip_iso(
    source: &CellSystem,
    target: &dyn GridSystem,
    unit: &Unit,
    n: usize,
) -> Result<Vec<(BimoduleMap, f64)>> {
    let sf = source.standard_form().clone();
    let alg = sf.algebra().clone();
    let d = alg.dim();
    let mut out: Vec<(BimoduleMap, f64)> = Vec::with_capacity(n + 1);
    out.push((BimoduleMap::new(source.fiber(0)?, target.fiber(0)?, linalg::identity(sf.dim())), 0.0));
    if n == 0 {
        return Ok(out);
    }
    // u_1(x⊗η) = π_φ(xξ(δ))η on the basis of M ⊗ L²(M)
    let gns = source.complex().gns(&source.step())?;
    let f1 = target.fiber(1)?;
    let pi = sf.pi_phi(&f1, unit.vector(1));
    let mut samples = Vec::with_capacity(d * d);
    for x in &alg.basis_elements() {
        let lx = f1.left_action(x) * &pi;
        for j in 0..d {
            let e = linalg::unit_vector(d, j);
            samples.push((gns.vector(x, &e), lx.column(j).into_owned()));
        }
    }
    let (u1, r1) = bimodule::fit_from_samples(gns.dim(), f1.dim(), &samples)?;
    out.push((BimoduleMap::new(source.fiber(1)?, f1, u1.clone()), r1));
    for k in 2..=n {
        let cell = source.complex().cell(&source.level(k))?;
        let src_rel = cell.stages.last().and_then(|st| st.product.clone()).expect("nested stage");
        let fp = target.product(k - 1, 1)?;
        let (t, rt) = src_rel.tensor_maps(&fp.domain, &out[k - 1].0.matrix, &u1);
        let resid = rt.max(out[k - 1].1).max(fp.fit_residual);
        out.push((BimoduleMap::new(cell.space.clone(), target.fiber(k)?, &fp.map.matrix * t), resid));
    }
    Ok(out)
}

/// max ‖V_{j,k}(u_j⊗u_k) − u_{j+k}U_{j,k}‖ over j + k ≤ n.
pub fn roundtrip_compatibility(
    source: &dyn GridSystem,
    target: &dyn GridSystem,
    maps: &[BimoduleMap],
) -> Result<f64> {
    let n = maps.len() - 1;
    let mut worst: f64 = 0.0;
    for j in 0..=n {
        for k in 0..=n - j {
            let us = source.product(j, k)?;
            let vt = target.product(j, k)?;
            let (tensor, _) = us.domain.tensor_maps(&vt.domain, &maps[j].matrix, &maps[k].matrix);
            let lhs = &vt.map.matrix * tensor;
            let rhs = &maps[j + k].matrix * &us.map.matrix;
            worst = worst.max(linalg::frob(&(lhs - rhs)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bimodule::MapFlags;
    use crate::algebra::State;
    use crate::cpdyn::CpSemigroup;

    fn r(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    fn pair_complex() -> CellComplex {
        let sg = CpSemigroup::stochastic_pair();
        let sf = StandardForm::new(sg.algebra(), &State::from_diagonal(sg.algebra(), &[0.5, 0.5]).unwrap()).unwrap();
        CellComplex::new(Arc::new(sf), Arc::new(sg))
    }

    #[test]
    fn partition_lattice() {
        let a: Partition = "1/2,1/2".parse().unwrap();
        let b: Partition = "1".parse().unwrap();
        assert_eq!(a.join(&b).to_string(), "(1/2,1/2,1)");
        let fine: Partition = "1/4,1/4,1/2".parse().unwrap();
        assert!(fine.refines(&a).unwrap());
        assert!(!a.refines(&"1/3,2/3".parse().unwrap()).unwrap());
        assert_eq!(a.common_refinement(&"1/3,2/3".parse().unwrap()).unwrap().to_string(), "(1/3,1/6,1/2)");
        assert!(a.refines(&"2".parse().unwrap()).is_err());
        assert_eq!(Partition::empty().join(&a), a);
        assert_eq!(a.join(&Partition::empty()), a);
        assert!(Partition::new(vec![r(0, 1)]).is_err());
        assert_eq!(parse_rational("0.4").unwrap(), r(2, 5));
    }

    #[test]
    fn stochastic_dimension_law() {
        let cx = pair_complex();
        for n in 1..=5 {
            assert_eq!(cx.cell(&Partition::uniform(r(1, 2), n)).unwrap().dim(), n + 2);
        }
        assert_eq!(cx.cell(&Partition::empty()).unwrap().dim(), 2);
    }

    #[test]
    fn identity_semigroup_cells_collapse() {
        let alg = Algebra::new(&[2]).unwrap();
        let sf = StandardForm::new(&alg, &State::from_diagonal(&alg, &[0.3, 0.7]).unwrap()).unwrap();
        let cx = CellComplex::new(Arc::new(sf), Arc::new(CpSemigroup::identity(&alg)));
        for p in ["1", "1/2,1/4", "1/3,1/3,1/3"] {
            assert_eq!(cx.cell(&p.parse().unwrap()).unwrap().dim(), 4);
        }
    }

    #[test]
    fn refinement_isometries() {
        let cx = pair_complex();
        let t1: Partition = "1".parse().unwrap();
        let t2 = t1.dyadic_refinement();
        let t4 = t2.dyadic_refinement();
        let (a21, r1) = cx.refinement_isometry(&t2, &t1).unwrap();
        let (a42, r2) = cx.refinement_isometry(&t4, &t2).unwrap();
        let (a41, _) = cx.refinement_isometry(&t4, &t1).unwrap();
        assert!(r1 < 1e-10 && r2 < 1e-10);
        let rep = a21.verify(MapFlags::BILINEAR_ISOMETRIC, 1e-10);
        assert!(rep.pass, "{rep:?}");
        assert!(!a21.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        assert!(linalg::frob(&(&a42.matrix * &a21.matrix - &a41.matrix)) < 1e-10);
        let (id, _) = cx.refinement_isometry(&t2, &t2).unwrap();
        assert!(linalg::frob(&(id.matrix - linalg::identity(4))) == 0.0);
        assert!(matches!(cx.refinement_isometry(&t1, &t2), Err(Error::Order { .. })));
    }

    #[test]
    fn multiplication_is_unitary_and_associative() {
        let cx = pair_complex();
        let (s, t): (Partition, Partition) = ("1/2".parse().unwrap(), "1/3".parse().unwrap());
        let u = cx.multiply(&s, &t).unwrap();
        assert_eq!(u.domain.dim(), 4);
        assert!(u.map.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        let e = Partition::empty();
        assert!(cx.multiply(&e, &t).unwrap().map.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        assert!(cx.multiply(&s, &e).unwrap().map.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        let w: Partition = "1/4".parse().unwrap();
        assert!(cx.associativity_defect(&s, &t, &w).unwrap() < 1e-10);
    }

    #[test]
    fn canonical_unit_is_unital_and_factorizes() {
        let cx = pair_complex();
        let times: Vec<Rational> = (0..=4).map(|k| r(k, 4)).collect();
        let unit = cx.canonical_unit(&times).unwrap();
        assert!(unit.unital_defect(cx.standard_form()) < 1e-10);
        assert!(unit.factorization_defect(&cx).unwrap() < 1e-10);
    }

    #[test]
    fn generating_rank_saturates() {
        let cx = pair_complex();
        for n in 1..=4 {
            let rep = cx.generating_rank(&Partition::uniform(r(1, 4), n)).unwrap();
            assert_eq!(rep.rank, n + 2);
            assert!(rep.full());
        }
    }

    #[test]
    fn grid_unit_and_cp_from_unit() {
        let cx = Arc::new(pair_complex());
        let sys = CellSystem::new(cx.clone(), r(1, 4)).unwrap();
        let unit = Unit::distinguished(&sys, 3).unwrap();
        assert!(unit.unital_defect(&sys).unwrap() < 1e-10);
        assert!(unit.factorization_defect(&sys).unwrap() < 1e-10);
        let (fam, resid) = cp_from_unit(&sys, &unit).unwrap();
        assert!(resid < 1e-10);
        let sg = CpSemigroup::stochastic_pair();
        for k in 0..=3 {
            assert!(fam.at(k).unwrap().distance(&sg.evaluate(0.25 * k as f64).unwrap()) < 1e-12);
        }
        let (scaled, _) = cp_from_unit(&sys, &unit.scaled(0.7)).unwrap();
        for k in 0..=3 {
            let want = sg.evaluate(0.25 * k as f64).unwrap().scale((-2.0 * 0.7 * 0.25 * k as f64).exp());
            assert!(scaled.at(k).unwrap().distance(&want) < 1e-10);
        }
    }

    #[test]
    fn roundtrip_on_own_unit() {
        let cx = Arc::new(pair_complex());
        let sys = CellSystem::new(cx.clone(), r(1, 4)).unwrap();
        let unit = Unit::distinguished(&sys, 3).unwrap();
        let (fam, _) = cp_from_unit(&sys, &unit).unwrap();
        let cx2 = Arc::new(CellComplex::new(cx.standard_form().clone(), Arc::new(fam)));
        let src = CellSystem::new(cx2, r(1, 4)).unwrap();
        let maps = roundtrip_iso(&src, &sys, &unit, 3).unwrap();
        for (m, resid) in &maps {
            assert!(*resid < 1e-10);
            assert!(m.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        }
        let only: Vec<_> = maps.into_iter().map(|(m, _)| m).collect();
        assert!(roundtrip_compatibility(&src, &sys, &only).unwrap() < 1e-10);
    }

    #[test]
    fn roundtrip_with_a_non_tracial_state() {
        let alg = Algebra::new(&[2]).unwrap();
        let sf = Arc::new(StandardForm::new(&alg, &State::from_diagonal(&alg, &[0.3, 0.7]).unwrap()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = alg.random_hermitian(&mut rng);
        let v = alg.random_element(&mut rng).scale(c(0.5, 0.0));
        let sg = CpSemigroup::lindblad(&alg, Some(&h), &[v]).unwrap();
        let cx = Arc::new(CellComplex::new(sf.clone(), Arc::new(sg)));
        let sys = CellSystem::new(cx, r(1, 2)).unwrap();
        let unit = Unit::distinguished(&sys, 2).unwrap();
        let (fam, _) = cp_from_unit(&sys, &unit).unwrap();
        let src = CellSystem::new(Arc::new(CellComplex::new(sf, Arc::new(fam))), r(1, 2)).unwrap();
        for (m, resid) in roundtrip_iso(&src, &sys, &unit, 2).unwrap() {
            assert!(resid < 1e-10);
            assert!(m.verify(MapFlags::BILINEAR_UNITARY, 1e-8).pass, "{:?}", m.verify(MapFlags::BILINEAR_UNITARY, 1e-8));
        }
    }
}
