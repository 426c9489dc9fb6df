//! Reversible Markov chains as finite heat semigroups: kernels, path measures,
//! □-products, the L²(ℳ_𝔭, μ_𝔭) cells and their agreement with the abstract cells.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::{ToPrimitive, Zero};
use rand::Rng;

use crate::algebra::{Algebra, Element, State, StandardForm};
use crate::bimodule::{self, Bimodule, BimoduleMap, Generator, MapFlags, Provenance, RelativeTensor};
use crate::cpdyn::{CpMap, TimeEvolution};
use crate::dilation::TruncatedLimit;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, C64};
use crate::prodsys::{CellComplex, ElementaryTensor, FiberProduct, GridSystem, Partition, Unit};
use crate::Rational;

/// Finite state space with reference measure μ and a μ-symmetric Laplacian Δ.
#[derive(Clone, Debug)]
pub struct MarkovModel {
    mu: Vec<f64>,
    laplacian: DMatrix<f64>,
    algebra: Algebra,
    sym_vals: Vec<f64>,
    sym_vecs: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KernelReport {
    pub symmetry: f64,
    pub mass: f64,
    pub chapman_kolmogorov: f64,
    pub min_entry: f64,
}

impl KernelReport {
    pub fn max(&self) -> f64 {
        self.symmetry.max(self.mass).max(self.chapman_kolmogorov).max((-self.min_entry).max(0.0))
    }
}

impl MarkovModel {
    pub fn new(mu: Vec<f64>, laplacian: DMatrix<f64>) -> Result<Self> {
        let m = mu.len();
        if m == 0 || laplacian.shape() != (m, m) {
            return Err(Error::Domain(format!("need {m} weights and an {m}x{m} Laplacian")));
        }
        if mu.iter().any(|&w| !(w > 0.0)) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("μ must be positive with total mass 1".into()));
        }
        for x in 0..m {
            if laplacian.row(x).sum().abs() > 1e-12 {
                return Err(Error::Domain(format!("row {x} of Δ does not annihilate constants")));
            }
            for y in 0..m {
                if x != y && laplacian[(x, y)] > 1e-15 {
                    return Err(Error::Domain(format!("positive off-diagonal Δ({x},{y})")));
                }
                if (mu[x] * laplacian[(x, y)] - mu[y] * laplacian[(y, x)]).abs() > 1e-12 {
                    return Err(Error::Domain(format!("Δ is not μ-symmetric at ({x},{y})")));
                }
            }
        }
        // S = D^{1/2}ΔD^{-1/2} is symmetric when Δ is μ-symmetric
        let sq: Vec<f64> = mu.iter().map(|w| w.sqrt()).collect();
        let s = DMatrix::from_fn(m, m, |x, y| sq[x] * laplacian[(x, y)] / sq[y]);
        let s = (&s + s.transpose()) * 0.5;
        let eig = SymmetricEigen::new(s);
        Ok(Self {
            algebra: Algebra::diagonal(m)?,
            sym_vals: eig.eigenvalues.iter().copied().collect(),
            sym_vecs: eig.eigenvectors,
            mu,
            laplacian,
        })
    }

    fn graph(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut lap = DMatrix::zeros(m, m);
        for (a, b) in edges {
            lap[(a, b)] -= 1.0;
            lap[(b, a)] -= 1.0;
            lap[(a, a)] += 1.0;
            lap[(b, b)] += 1.0;
        }
        Self::new(vec![1.0 / m as f64; m], lap)
    }

    pub fn cycle(m: usize) -> Result<Self> {
        if m < 3 {
            return Err(Error::Domain("cycle needs at least 3 states".into()));
        }
        Self::graph(m, (0..m).map(|i| (i, (i + 1) % m)))
    }

    pub fn path(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain("path needs at least 2 states".into()));
        }
        Self::graph(m, (0..m - 1).map(|i| (i, i + 1)))
    }

    pub fn complete(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain("complete graph needs at least 2 states".into()));
        }
        Self::graph(m, (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))))
    }

    /// μ = (½,½), Δ = [[1,−1],[−1,1]].
    pub fn two_state() -> Self {
        Self::graph(2, [(0, 1)]).expect("valid two-state chain")
    }

    pub fn states(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    pub fn state(&self) -> State {
        State::from_diagonal(&self.algebra, &self.mu).expect("μ is a probability vector")
    }

    /// e^{−tΔ} as a row-stochastic matrix.
    pub fn transition(&self, t: f64) -> DMatrix<f64> {
        let m = self.states();
        let sq: Vec<f64> = self.mu.iter().map(|w| w.sqrt()).collect();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(m, self.sym_vals.iter().map(|l| (-t * l).exp())));
        let e = &self.sym_vecs * d * self.sym_vecs.transpose();
        DMatrix::from_fn(m, m, |x, y| e[(x, y)] * sq[y] / sq[x])
    }

    /// p_t(x,y), the density of e^{−tΔ} with respect to μ.
    pub fn heat_kernel(&self, t: f64) -> Result<DMatrix<f64>> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("heat kernel needs t > 0, got {t}")));
        }
        let p = self.transition(t);
        Ok(DMatrix::from_fn(p.nrows(), p.ncols(), |x, y| p[(x, y)] / self.mu[y]))
    }

    /// Symmetry, unit mass and Chapman–Kolmogorov p_{s+t}(x,z) = Σ_y p_s(x,y)p_t(y,z)μ(y).
    pub fn kernel_report(&self, s: f64, t: f64) -> Result<KernelReport> {
        let m = self.states();
        let (ps, pt, pst) = (self.heat_kernel(s)?, self.heat_kernel(t)?, self.heat_kernel(s + t)?);
        let mut rep = KernelReport { min_entry: f64::INFINITY, ..Default::default() };
        for p in [&ps, &pt, &pst] {
            for x in 0..m {
                let mass: f64 = (0..m).map(|y| p[(x, y)] * self.mu[y]).sum();
                rep.mass = rep.mass.max((mass - 1.0).abs());
                for y in 0..m {
                    rep.symmetry = rep.symmetry.max((p[(x, y)] - p[(y, x)]).abs());
                    rep.min_entry = rep.min_entry.min(p[(x, y)]);
                }
            }
        }
        for x in 0..m {
            for z in 0..m {
                let conv: f64 = (0..m).map(|y| ps[(x, y)] * pt[(y, z)] * self.mu[y]).sum();
                rep.chapman_kolmogorov = rep.chapman_kolmogorov.max((conv - pst[(x, z)]).abs());
            }
        }
        Ok(rep)
    }

    /// T_t on functions as a map on the diagonal algebra.
    pub fn heat_map(&self, t: f64) -> CpMap {
        let p = self.transition(t);
        let mat = CMat::from_fn(p.nrows(), p.ncols(), |i, j| c(p[(i, j)], 0.0));
        CpMap::new(&self.algebra, mat).expect("square matrix of algebra size")
    }

    pub fn path_measure(&self, p: &Partition) -> Result<PathMeasure> {
        let m = self.states();
        let kernels: Vec<DMatrix<f64>> = p
            .parts()
            .iter()
            .map(|t| self.heat_kernel(t.to_f64().unwrap_or(f64::NAN)))
            .collect::<Result<_>>()?;
        let vars = p.len() + 1;
        let total = m.pow(vars as u32);
        let mut weights = vec![0.0; total];
        let mut idx = vec![0usize; vars];
        for (flat, w) in weights.iter_mut().enumerate() {
            decode(flat, m, &mut idx);
            let mut acc: f64 = idx.iter().map(|&x| self.mu[x]).product();
            for (i, k) in kernels.iter().enumerate() {
                acc *= k[(idx[i], idx[i + 1])];
            }
            *w = acc;
        }
        Ok(PathMeasure { partition: p.clone(), states: m, vars, weights })
    }

    /// (b_{t,0}*κ_𝔭 f)(y) = Σ f(x₁,…,x_n,y)p_{t_n}(x_n,y)μ_{𝔭'}(x₁,…,x_n) with 𝔭' = (t₁,…,t_{n−1}).
    pub fn b_adjoint_formula(&self, p: &Partition, f: &PathFunction) -> Result<PathFunction> {
        let n = p.len();
        if n == 0 || f.vars != n + 1 || f.states != self.states() {
            return Err(Error::Domain(format!("function on {} variables does not live on ℳ_{p}", f.vars)));
        }
        let m = self.states();
        let prefix = Partition::new(p.parts()[..n - 1].to_vec())?;
        let mu_prefix = self.path_measure(&prefix)?;
        let last = self.heat_kernel(p.parts()[n - 1].to_f64().unwrap_or(f64::NAN))?;
        let mut out = vec![C64::zero(); m];
        let mut idx = vec![0usize; n];
        for (flat, w) in mu_prefix.weights.iter().enumerate() {
            decode(flat, m, &mut idx);
            for (y, o) in out.iter_mut().enumerate() {
                *o += f.data[flat * m + y] * (last[(idx[n - 1], y)] * w);
            }
        }
        Ok(PathFunction { states: m, vars: 1, data: out })
    }
}

impl FromStr for MarkovModel {
    type Err = Error;

    /// "cycle(5)", "path(4)", "complete(3)" or "two_state".
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "two_state" {
            return Ok(Self::two_state());
        }
        let (name, rest) = s.split_once('(').ok_or_else(|| Error::Parse(format!("unknown graph '{s}'")))?;
        let m: usize = rest
            .strip_suffix(')')
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad state count in '{s}'")))?;
        match name.trim() {
            "cycle" => Self::cycle(m),
            "path" => Self::path(m),
            "complete" => Self::complete(m),
            other => Err(Error::Parse(format!("unknown graph '{other}'"))),
        }
    }
}

/// Mixed-radix decoding with the first variable most significant.
fn decode(mut flat: usize, m: usize, idx: &mut [usize]) {
    for slot in idx.iter_mut().rev() {
        *slot = flat % m;
        flat /= m;
    }
}

/// μ_𝔭 on ℳ^{#𝔭+1}.
#[derive(Clone, Debug)]
pub struct PathMeasure {
    pub partition: Partition,
    pub states: usize,
    pub vars: usize,
    pub weights: Vec<f64>,
}

impl PathMeasure {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Sums out variable `var` (0 < var < vars−1).
    pub fn marginalize(&self, var: usize) -> Result<Vec<f64>> {
        if var == 0 || var + 1 >= self.vars {
            return Err(Error::Domain(format!("variable {var} is not interior")));
        }
        let m = self.states;
        let mut out = vec![0.0; m.pow(self.vars as u32 - 1)];
        let mut idx = vec![0usize; self.vars];
        for (flat, w) in self.weights.iter().enumerate() {
            decode(flat, m, &mut idx);
            let target = idx.iter().enumerate().filter(|(i, _)| *i != var).fold(0, |acc, (_, &x)| acc * m + x);
            out[target] += w;
        }
        Ok(out)
    }
}

/// A function on ℳ^{vars}, stored row-major with the first variable most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct PathFunction {
    pub states: usize,
    pub vars: usize,
    pub data: Vec<C64>,
}

impl PathFunction {
    pub fn from_fn(states: usize, vars: usize, mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let mut idx = vec![0usize; vars];
        let data = (0..states.pow(vars as u32))
            .map(|flat| {
                decode(flat, states, &mut idx);
                f(&idx)
            })
            .collect();
        Self { states, vars, data }
    }

    pub fn constant(states: usize, vars: usize, v: f64) -> Self {
        Self::from_fn(states, vars, |_| c(v, 0.0))
    }

    pub fn random(states: usize, vars: usize, rng: &mut impl Rng) -> Self {
        Self::from_fn(states, vars, |_| linalg::random_complex(rng))
    }

    /// A function of one variable from an element of the diagonal algebra.
    pub fn from_element(x: &Element) -> Self {
        let data: Vec<C64> = x.coords().iter().copied().collect();
        Self { states: data.len(), vars: 1, data }
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[idx.iter().fold(0, |acc, &x| acc * self.states + x)]
    }

    /// f□g: the last variable of f is glued to the first variable of g.
    pub fn boxed(&self, g: &PathFunction) -> Result<PathFunction> {
        if self.states != g.states || self.vars == 0 || g.vars == 0 {
            return Err(Error::Domain("□ needs functions on the same state space".into()));
        }
        let m = self.states;
        let tail = m.pow(g.vars as u32 - 1);
        let mut data = Vec::with_capacity(self.data.len() * tail);
        for (i, fv) in self.data.iter().enumerate() {
            let shared = i % m;
            for j in 0..tail {
                data.push(fv * g.data[shared * tail + j]);
            }
        }
        Ok(PathFunction { states: m, vars: self.vars + g.vars - 1, data })
    }

    pub fn max_abs_diff(&self, other: &PathFunction) -> f64 {
        if self.vars != other.vars || self.states != other.states {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// L²(ℳ_𝔭, μ_𝔭) with g·f = g□f and f·g = f□g, in the orthonormal basis δ_x/√μ_𝔭(x)
/// over the support of μ_𝔭.
#[derive(Debug)]
pub struct L2Cell {
    pub measure: PathMeasure,
    support: Vec<usize>,
    space: Arc<Bimodule>,
}

impl L2Cell {
    pub fn new(model: &MarkovModel, p: &Partition) -> Result<Self> {
        let measure = if p.is_empty() {
            PathMeasure { partition: p.clone(), states: model.states(), vars: 1, weights: model.mu().to_vec() }
        } else {
            model.path_measure(p)?
        };
        let max = measure.weights.iter().copied().fold(0.0, f64::max);
        let support: Vec<usize> = (0..measure.weights.len()).filter(|&i| measure.weights[i] > 1e-15 * max).collect();
        let m = model.states();
        let vars = measure.vars;
        let dim = support.len();
        let mut idx = vec![0usize; vars];
        let mut first = vec![0usize; dim];
        let mut last = vec![0usize; dim];
        for (k, &flat) in support.iter().enumerate() {
            decode(flat, m, &mut idx);
            first[k] = idx[0];
            last[k] = idx[vars - 1];
        }
        let diag_indicator = |pick: &[usize], s: usize| {
            CMat::from_diagonal(&CVec::from_iterator(dim, pick.iter().map(|&v| if v == s { c(1.0, 0.0) } else { c(0.0, 0.0) })))
        };
        let left = (0..m).map(|s| diag_indicator(&first, s)).collect();
        let right = (0..m).map(|s| diag_indicator(&last, s)).collect();
        let one = CVec::from_iterator(dim, support.iter().map(|&i| c(measure.weights[i].sqrt(), 0.0)));
        let space = Arc::new(Bimodule::new(dim, left, right, vec![Generator { label: "1".into(), vector: one }], Provenance::L2Path));
        Ok(Self { measure, support, space })
    }

    pub fn space(&self) -> &Arc<Bimodule> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn coords(&self, f: &PathFunction) -> CVec {
        CVec::from_iterator(self.support.len(), self.support.iter().map(|&i| f.data[i] * self.measure.weights[i].sqrt()))
    }

    pub fn function(&self, v: &CVec) -> PathFunction {
        let mut data = vec![C64::zero(); self.measure.weights.len()];
        for (k, &i) in self.support.iter().enumerate() {
            data[i] = v[k] / self.measure.weights[i].sqrt();
        }
        PathFunction { states: self.measure.states, vars: self.measure.vars, data }
    }
}

/// f₁(x₁)g₁(x₂)f₂(x₂)⋯f_n(x_n)g_n(x_{n+1}).
pub fn elementary_function(states: usize, et: &ElementaryTensor) -> PathFunction {
    let n = et.factors.len();
    let fs: Vec<Vec<C64>> = et.factors.iter().map(|(f, _)| f.coords().iter().copied().collect()).collect();
    let gs: Vec<Vec<C64>> = et.factors.iter().map(|(_, g)| g.coords().iter().copied().collect()).collect();
    PathFunction::from_fn(states, n + 1, |idx| {
        let mut acc = c(1.0, 0.0);
        for i in 0..n {
            acc *= fs[i][idx[i]] * gs[i][idx[i + 1]];
        }
        acc
    })
}

/// a_{𝔮,𝔭} in the L² model: f ↦ f̃ with f̃(x_{1,1},…,x_{1,k₁},x_{2,1},…,y) = f(x_{1,1},x_{2,1},…,y).
pub fn l2_refinement(model: &MarkovModel, fine: &Partition, coarse: &Partition) -> Result<CMat> {
    let groups = fine
        .groups(coarse)
        .ok_or_else(|| Error::Order { fine: fine.to_string(), coarse: coarse.to_string() })?;
    let (src, tgt) = (L2Cell::new(model, coarse)?, L2Cell::new(model, fine)?);
    let m = model.states();
    let mut starts = Vec::with_capacity(groups.len());
    let mut acc = 0;
    for g in &groups {
        starts.push(acc);
        acc += g;
    }
    let cols: Vec<CVec> = (0..src.dim())
        .map(|k| {
            let f = src.function(&linalg::unit_vector(src.dim(), k));
            let lifted = PathFunction::from_fn(m, fine.len() + 1, |idx| {
                let mut coarse_idx: Vec<usize> = starts.iter().map(|&s| idx[s]).collect();
                coarse_idx.push(idx[fine.len()]);
                f.get(&coarse_idx)
            });
            tgt.coords(&lifted)
        })
        .collect();
    Ok(linalg::from_columns(tgt.dim(), &cols))
}

/// The heat semigroup of a model as a time evolution on its diagonal algebra.
#[derive(Clone, Debug)]
pub struct HeatEvolution(pub Arc<MarkovModel>);

impl TimeEvolution for HeatEvolution {
    fn algebra(&self) -> &Algebra {
        self.0.algebra()
    }

    fn map_at(&self, t: &Rational) -> Result<CpMap> {
        if *t < Rational::zero() {
            return Err(Error::Domain(format!("negative time {t}")));
        }
        if t.is_zero() {
            return Ok(CpMap::identity(self.0.algebra()));
        }
        Ok(self.0.heat_map(t.to_f64().unwrap_or(f64::NAN)))
    }
}

pub fn heat_standard_form(model: &MarkovModel) -> Result<StandardForm> {
    StandardForm::new(model.algebra(), &model.state())
}

#[derive(Clone, Debug)]
pub struct PathModelReport {
    pub cell_dim: usize,
    pub l2_dim: usize,
    pub gram_defect: f64,
    pub bilinear_defect: f64,
    pub unitary_defect: f64,
    pub fit_residual: f64,
}

/// Compares the Gram matrix of cell(𝔭) on elementary tensors of matrix units with
/// the L²(μ_𝔭) Gram matrix of their images, and checks u_𝔭 for unitarity.
pub fn check_path_model(model: &MarkovModel, complex: &CellComplex, p: &Partition) -> Result<(PathModelReport, BimoduleMap)> {
    let sf = complex.standard_form();
    let alg = sf.algebra();
    let m = model.states();
    let cell = complex.cell(p)?;
    let l2 = L2Cell::new(model, p)?;
    let n = p.len();
    let labels = m.pow(2 * n as u32);
    let basis = alg.basis_elements();
    let mut cell_vecs = Vec::with_capacity(labels);
    let mut l2_vecs = Vec::with_capacity(labels);
    let mut idx = vec![0usize; 2 * n];
    for flat in 0..labels {
        decode(flat, m, &mut idx);
        let et = ElementaryTensor {
            factors: (0..n).map(|i| (basis[idx[2 * i]].clone(), basis[idx[2 * i + 1]].clone())).collect(),
        };
        cell_vecs.push(cell.vector(sf, &et)?);
        l2_vecs.push(l2.coords(&elementary_function(m, &et)));
    }
    let cm = linalg::from_columns(cell.dim(), &cell_vecs);
    let lm = linalg::from_columns(l2.dim(), &l2_vecs);
    let gram_defect = linalg::frob(&(cm.adjoint() * &cm - lm.adjoint() * &lm));
    let samples: Vec<(CVec, CVec)> = cell_vecs.into_iter().zip(l2_vecs).collect();
    let (mat, fit_residual) = bimodule::fit_from_samples(cell.dim(), l2.dim(), &samples)?;
    let u = BimoduleMap::new(cell.space().clone(), l2.space().clone(), mat);
    let rep = u.verify(MapFlags::BILINEAR_UNITARY, 1e-10);
    Ok((
        PathModelReport {
            cell_dim: cell.dim(),
            l2_dim: l2.dim(),
            gram_defect,
            bilinear_defect: rep.bilinear_defect,
            unitary_defect: rep.unitary_defect,
            fit_residual,
        },
        u,
    ))
}

/// ‖u_𝔮 a^{cell}_{𝔮,𝔭} − a^{L²}_{𝔮,𝔭} u_𝔭‖.
pub fn refinement_compatibility(
    model: &MarkovModel,
    complex: &CellComplex,
    fine: &Partition,
    coarse: &Partition,
) -> Result<f64> {
    let (_, u_fine) = check_path_model(model, complex, fine)?;
    let (_, u_coarse) = check_path_model(model, complex, coarse)?;
    let (a_cell, _) = complex.refinement_isometry(fine, coarse)?;
    let a_l2 = l2_refinement(model, fine, coarse)?;
    Ok(linalg::frob(&(&u_fine.matrix * &a_cell.matrix - a_l2 * &u_coarse.matrix)))
}

/// max over random f on ℳ_𝔭 of |b_adjoint_formula(f) − b_{t,0}*f| with b_{t,0}g = g(last variable).
pub fn b_adjoint_check(model: &MarkovModel, p: &Partition, rng: &mut impl Rng, samples: usize) -> Result<f64> {
    let m = model.states();
    let l2 = L2Cell::new(model, p)?;
    let l0 = L2Cell::new(model, &Partition::empty())?;
    let cols: Vec<CVec> = (0..m)
        .map(|y| {
            let g = l0.function(&linalg::unit_vector(m, y));
            l2.coords(&PathFunction::from_fn(m, p.len() + 1, |idx| g.data[idx[p.len()]]))
        })
        .collect();
    let b = linalg::from_columns(l2.dim(), &cols);
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let f = if i == 0 { PathFunction::constant(m, p.len() + 1, 1.0) } else { PathFunction::random(m, p.len() + 1, rng) };
        let via_formula = model.b_adjoint_formula(p, &f)?;
        let via_matrix = l0.function(&(b.adjoint() * l2.coords(&f)));
        worst = worst.max(via_formula.max_abs_diff(&via_matrix));
    }
    Ok(worst)
}

/// The heat product system on the grid (δ,…,δ) in the L² model: U(f τ^{-1/2} g) = f□g.
pub struct HeatSystem {
    model: Arc<MarkovModel>,
    sf: Arc<StandardForm>,
    step: Rational,
    cells: Mutex<HashMap<usize, Arc<L2Cell>>>,
    products: Mutex<HashMap<(usize, usize), Arc<FiberProduct>>>,
}

impl HeatSystem {
    pub fn new(model: Arc<MarkovModel>, step: Rational) -> Result<Self> {
        if step <= Rational::zero() {
            return Err(Error::Domain(format!("grid step must be positive, got {step}")));
        }
        let sf = Arc::new(heat_standard_form(&model)?);
        Ok(Self { model, sf, step, cells: Mutex::default(), products: Mutex::default() })
    }

    pub fn model(&self) -> &Arc<MarkovModel> {
        &self.model
    }

    pub fn cell(&self, k: usize) -> Result<Arc<L2Cell>> {
        if let Some(cell) = self.cells.lock().expect("cell cache").get(&k) {
            return Ok(cell.clone());
        }
        let cell = Arc::new(L2Cell::new(&self.model, &Partition::uniform(self.step, k))?);
        self.cells.lock().expect("cell cache").insert(k, cell.clone());
        Ok(cell)
    }
}

impl GridSystem for HeatSystem {
    fn standard_form(&self) -> &Arc<StandardForm> {
        &self.sf
    }

    fn step(&self) -> Rational {
        self.step
    }

    fn fiber(&self, k: usize) -> Result<Arc<Bimodule>> {
        Ok(self.cell(k)?.space().clone())
    }

    fn product(&self, j: usize, k: usize) -> Result<Arc<FiberProduct>> {
        if let Some(p) = self.products.lock().expect("product cache").get(&(j, k)) {
            return Ok(p.clone());
        }
        let (cj, ck, target) = (self.cell(j)?, self.cell(k)?, self.cell(j + k)?);
        let domain = Arc::new(RelativeTensor::new(&self.sf, cj.space().clone(), ck.space().clone())?);
        let mut samples = Vec::with_capacity(cj.dim() * ck.dim());
        for a in 0..cj.dim() {
            let ea = linalg::unit_vector(cj.dim(), a);
            let f = cj.function(&ea);
            for b in 0..ck.dim() {
                let eb = linalg::unit_vector(ck.dim(), b);
                let g = ck.function(&eb);
                samples.push((domain.embed(&ea, &eb), target.coords(&f.boxed(&g)?)));
            }
        }
        let (m, fit_residual) = bimodule::fit_from_samples(domain.dim(), target.dim(), &samples)?;
        let fp = Arc::new(FiberProduct {
            map: BimoduleMap::new(domain.space().clone(), target.space().clone(), m),
            domain,
            fit_residual,
        });
        self.products.lock().expect("product cache").insert((j, k), fp.clone());
        Ok(fp)
    }

    fn unit(&self, k: usize) -> Result<CVec> {
        let cell = self.cell(k)?;
        Ok(cell.coords(&PathFunction::constant(self.model.states(), k + 1, 1.0)))
    }
}

#[derive(Clone, Debug)]
pub struct DilationCheck {
    /// max ‖κ₀*θ_{kδ}(f)κ₀ − mult(T_{kδ}f)‖ through the generic θ machinery.
    pub theta_route: f64,
    /// the same identity evaluated as b_{t,0}*(f□g̃) with the adjoint formula.
    pub formula_route: f64,
    pub isometry_defect: f64,
}

/// κ₀*θ_t(f)κ₀g = (T_tf)g at grid times k ≤ n for the given multiplication operators.
pub fn check_heat_dilation(
    model: &Arc<MarkovModel>,
    step: Rational,
    levels: usize,
    functions: &[Element],
) -> Result<DilationCheck> {
    let sys = Arc::new(HeatSystem::new(model.clone(), step)?);
    let unit = Unit::distinguished(sys.as_ref(), levels)?;
    let tl = TruncatedLimit::new(sys.clone(), unit, levels)?;
    let evo = HeatEvolution(model.clone());
    let iso = tl.isometry_report();
    let m = model.states();
    let l0 = L2Cell::new(model, &Partition::empty())?;
    let mut theta_route: f64 = 0.0;
    let mut formula_route: f64 = 0.0;
    for k in 0..=levels {
        for f in functions {
            theta_route = theta_route.max(tl.compression_defect(&evo, k, f)?);
            if k == 0 {
                continue;
            }
            let t = step * Rational::from_integer(k as i64);
            let want = model.heat_map(t.to_f64().unwrap_or(f64::NAN)).apply(f);
            let p = Partition::single(t)?;
            let fb = PathFunction::from_element(f);
            let mut lhs_cols = Vec::with_capacity(m);
            for y in 0..m {
                let g = l0.function(&linalg::unit_vector(m, y));
                // f□g̃ with g̃(x, y) = g(y)
                let tilde = PathFunction::from_fn(m, 2, |idx| g.data[idx[1]]);
                let out = model.b_adjoint_formula(&p, &fb.boxed(&tilde)?)?;
                lhs_cols.push(l0.coords(&out));
            }
            let lhs = linalg::from_columns(m, &lhs_cols);
            formula_route = formula_route.max(linalg::frob(&(lhs - tl.standard_form().left_action(&want))));
        }
    }
    Ok(DilationCheck {
        theta_route,
        formula_route,
        isometry_defect: iso.isometric_defect.max(iso.composition_defect),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn r(n: i64, d: i64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn two_state_kernel_closed_form() {
        let model = MarkovModel::two_state();
        for &t in &[0.1, 0.5, 2.0] {
            let p = model.heat_kernel(t).unwrap();
            let e = (-2.0 * t).exp();
            let want = DMatrix::from_row_slice(2, 2, &[1.0 + e, 1.0 - e, 1.0 - e, 1.0 + e]);
            assert!((p - want).abs().max() < 1e-13);
        }
        let big = model.heat_kernel(40.0).unwrap();
        assert!((big.add_scalar(-1.0)).abs().max() < 1e-12);
        assert!(model.heat_kernel(0.0).is_err());
    }

    #[test]
    fn kernel_properties() {
        for model in [MarkovModel::two_state(), MarkovModel::cycle(5).unwrap(), MarkovModel::path(4).unwrap()] {
            let rep = model.kernel_report(0.3, 0.7).unwrap();
            assert!(rep.max() < 1e-12, "{rep:?}");
        }
    }

    #[test]
    fn model_validation_and_parsing() {
        assert!(MarkovModel::new(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0])).is_err());
        assert!(MarkovModel::new(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).is_err());
        assert_eq!("cycle(5)".parse::<MarkovModel>().unwrap().states(), 5);
        assert_eq!("complete(3)".parse::<MarkovModel>().unwrap().states(), 3);
        assert!("torus(3)".parse::<MarkovModel>().is_err());
    }

    #[test]
    fn path_measures() {
        let model = MarkovModel::two_state();
        let t: f64 = 0.6;
        let pm = model.path_measure(&Partition::single(Rational::new(3, 5)).unwrap()).unwrap();
        assert!((pm.mass() - 1.0).abs() < 1e-12);
        assert!((pm.weights[1] - 0.25 * (1.0 - (-2.0 * t).exp())).abs() < 1e-13);
        let cyc = MarkovModel::cycle(5).unwrap();
        let fine = cyc.path_measure(&"1/4,1/2,1/4".parse().unwrap()).unwrap();
        let merged = cyc.path_measure(&"3/4,1/4".parse().unwrap()).unwrap();
        let marg = fine.marginalize(1).unwrap();
        assert!(marg.iter().zip(&merged.weights).all(|(a, b)| (a - b).abs() < 1e-13));
        assert!(fine.min_weight() >= -1e-14);
    }

    #[test]
    fn box_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = PathFunction::random(3, 2, &mut rng);
        let g = PathFunction::random(3, 3, &mut rng);
        let h = PathFunction::random(3, 2, &mut rng);
        let fg = f.boxed(&g).unwrap();
        assert_eq!(fg.vars, 4);
        assert_eq!(fg.get(&[2, 1, 0, 2]), f.get(&[2, 1]) * g.get(&[1, 0, 2]));
        let lhs = fg.boxed(&h).unwrap();
        let rhs = f.boxed(&g.boxed(&h).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-14);
        let one = PathFunction::constant(3, 1, 1.0);
        assert_eq!(f.boxed(&one).unwrap(), f);
        assert!(f.boxed(&PathFunction::constant(2, 1, 1.0)).is_err());
    }

    #[test]
    fn l2_cells_match_abstract_cells() {
        for (model, parts) in [(MarkovModel::two_state(), "1"), (MarkovModel::cycle(3).unwrap(), "1/2,1/2")] {
            let model = Arc::new(model);
            let sf = Arc::new(heat_standard_form(&model).unwrap());
            let cx = CellComplex::new(sf, Arc::new(HeatEvolution(model.clone())));
            let p: Partition = parts.parse().unwrap();
            let (rep, _) = check_path_model(&model, &cx, &p).unwrap();
            assert_eq!(rep.cell_dim, model.states().pow(p.len() as u32 + 1));
            assert_eq!(rep.cell_dim, rep.l2_dim);
            assert!(rep.gram_defect < 1e-10 && rep.unitary_defect < 1e-10 && rep.bilinear_defect < 1e-10, "{rep:?}");
        }
    }

    #[test]
    fn refinement_is_variable_duplication() {
        let model = Arc::new(MarkovModel::two_state());
        let sf = Arc::new(heat_standard_form(&model).unwrap());
        let cx = CellComplex::new(sf, Arc::new(HeatEvolution(model.clone())));
        let d = refinement_compatibility(&model, &cx, &"1/4,1/4,1/2".parse().unwrap(), &"1/2,1/2".parse().unwrap()).unwrap();
        assert!(d < 1e-10);
    }

    #[test]
    fn adjoint_formula() {
        let model = MarkovModel::two_state();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(b_adjoint_check(&model, &"2/5,3/5".parse().unwrap(), &mut rng, 6).unwrap() < 1e-12);
        let p = Partition::single(r(1, 2)).unwrap();
        let delta = PathFunction::from_fn(2, 2, |idx| if idx[0] == 1 { c(1.0, 0.0) } else { c(0.0, 0.0) });
        let out = model.b_adjoint_formula(&p, &delta).unwrap();
        let k = model.heat_kernel(0.5).unwrap();
        for y in 0..2 {
            assert!((out.data[y] - c(k[(1, y)] * 0.5, 0.0)).norm() < 1e-14);
        }
        let one = model.b_adjoint_formula(&p, &PathFunction::constant(2, 2, 1.0)).unwrap();
        assert!(one.data.iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-13));
    }

    #[test]
    fn heat_system_dilation() {
        let model = Arc::new(MarkovModel::two_state());
        let sys = HeatSystem::new(model.clone(), r(1, 4)).unwrap();
        let fp = sys.product(1, 2).unwrap();
        assert!(fp.fit_residual < 1e-10);
        assert!(fp.map.verify(MapFlags::BILINEAR_UNITARY, 1e-10).pass);
        let alg = model.algebra().clone();
        let check = check_heat_dilation(&model, r(1, 4), 2, &[alg.identity(), alg.basis(0)]).unwrap();
        assert!(check.theta_route < 1e-10 && check.formula_route < 1e-10, "{check:?}");
    }
}
