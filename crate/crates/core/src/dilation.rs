//! Truncated inductive limit of a product system with a unit, its embeddings
//! b_{t,s}, the representation π, the dilation θ, and the unit/cocycle bijection.

use std::sync::Arc;

use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algebra::{Element, StandardForm};
use crate::bimodule::Bimodule;
use crate::cpdyn::TimeEvolution;
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec};
use crate::prodsys::{GridSystem, Unit};
use crate::Rational;

/// An operator on 𝔥 built from π(M), θ-images, products, and operators
/// supported on a finite level (κ_j A κ_j*).
#[derive(Clone, Debug)]
pub enum Operator {
    Pi(Element),
    Theta(usize, Box<Operator>),
    Product(Box<Operator>, Box<Operator>),
    AtLevel(usize, CMat),
}

impl Operator {
    pub fn pi(x: &Element) -> Self {
        Operator::Pi(x.clone())
    }

    pub fn theta(k: usize, a: Operator) -> Self {
        Operator::Theta(k, Box::new(a))
    }

    pub fn product(a: Operator, b: Operator) -> Self {
        Operator::Product(Box::new(a), Box::new(b))
    }

    /// Lowest level at which the operator is supported.
    pub fn min_level(&self) -> usize {
        match self {
            Operator::Pi(_) => 0,
            Operator::Theta(k, a) => k + a.min_level(),
            Operator::Product(a, b) => a.min_level().max(b.min_level()),
            Operator::AtLevel(j, _) => *j,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IsometryReport {
    /// max ‖b_{k,j}*b_{k,j} − 1‖.
    pub isometric_defect: f64,
    /// max ‖b_{k,j}b_{j,i} − b_{k,i}‖.
    pub composition_defect: f64,
    /// max ‖b L_j(x) − L_k(x) b‖ over basis x, and the same for right actions.
    pub bilinear_defect: f64,
}

#[derive(Clone, Debug)]
pub struct MinimalityReport {
    pub span_rank: usize,
    pub dim: usize,
    pub words: usize,
    pub max_word_length: usize,
}

impl MinimalityReport {
    pub fn full(&self) -> bool {
        self.span_rank == self.dim
    }
}

#[derive(Clone, Debug)]
pub struct ProfileEntry {
    pub level: usize,
    pub basis_index: usize,
    pub value: f64,
    pub closed_form: f64,
}

/// Values w_{kδ} on the top space for k = 0..=n.
#[derive(Clone, Debug)]
pub struct Cocycle {
    pub values: Vec<CMat>,
}

#[derive(Clone, Debug)]
pub struct CocycleReport {
    pub law_defect: f64,
    pub adapted_defect: f64,
    pub contraction_norm: f64,
    /// ‖κ₀*w*wκ₀ − 1‖, zero exactly for unital units.
    pub corner_isometric_defect: f64,
}

/// The levels 0..=n of the inductive limit on the grid {kδ}, with level n
/// standing in for 𝔥 and κ_{kδ} = b_{nδ,kδ}.
pub struct TruncatedLimit {
    sys: Arc<dyn GridSystem>,
    unit: Unit,
    levels: usize,
    fibers: Vec<Arc<Bimodule>>,
    b: Vec<Vec<CMat>>,
}

impl TruncatedLimit {
    pub fn new(sys: Arc<dyn GridSystem>, unit: Unit, levels: usize) -> Result<Self> {
        if unit.levels() < levels {
            return Err(Error::Domain(format!("unit has {} levels, {levels} requested", unit.levels())));
        }
        let fibers: Vec<Arc<Bimodule>> = (0..=levels).map(|k| sys.fiber(k)).collect::<Result<_>>()?;
        let mut b = Vec::with_capacity(levels + 1);
        for k in 0..=levels {
            let mut row = Vec::with_capacity(k + 1);
            for j in 0..=k {
                if j == k {
                    row.push(linalg::identity(fibers[k].dim()));
                    continue;
                }
                let fp = sys.product(k - j, j)?;
                let dj = fibers[j].dim();
                let cols: Vec<CVec> =
                    (0..dj).map(|i| fp.apply(unit.vector(k - j), &linalg::unit_vector(dj, i))).collect();
                row.push(linalg::from_columns(fibers[k].dim(), &cols));
            }
            b.push(row);
        }
        Ok(Self { sys, unit, levels, fibers, b })
    }

    pub fn system(&self) -> &Arc<dyn GridSystem> {
        &self.sys
    }

    pub fn standard_form(&self) -> &Arc<StandardForm> {
        self.sys.standard_form()
    }

    pub fn unit(&self) -> &Unit {
        &self.unit
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn step(&self) -> Rational {
        self.sys.step()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.fibers.iter().map(|f| f.dim()).collect()
    }

    pub fn top_dim(&self) -> usize {
        self.fibers[self.levels].dim()
    }

    /// b_{kδ,jδ} for j ≤ k.
    pub fn embedding(&self, k: usize, j: usize) -> &CMat {
        &self.b[k][j]
    }

    /// κ_{kδ} into the top level.
    pub fn kappa(&self, k: usize) -> &CMat {
        &self.b[self.levels][k]
    }

    pub fn isometry_report(&self) -> IsometryReport {
        let alg = self.standard_form().algebra();
        let mut iso: f64 = 0.0;
        let mut comp: f64 = 0.0;
        let mut bil: f64 = 0.0;
        for k in 0..=self.levels {
            for j in 0..=k {
                let bkj = &self.b[k][j];
                iso = iso.max(linalg::frob(&(bkj.adjoint() * bkj - linalg::identity(bkj.ncols()))));
                for i in 0..=j {
                    comp = comp.max(linalg::frob(&(bkj * &self.b[j][i] - &self.b[k][i])));
                }
                for e in alg.basis_elements() {
                    let r = bkj * self.fibers[j].right_action(&e) - self.fibers[k].right_action(&e) * bkj;
                    bil = bil.max(linalg::frob(&r));
                }
            }
        }
        IsometryReport { isometric_defect: iso, composition_defect: comp, bilinear_defect: bil }
    }

    /// Grid index of t, or an error if t is off-grid.
    pub fn grid_index(&self, t: &Rational) -> Result<usize> {
        let q = t / self.step();
        if *t < Rational::zero() || !q.is_integer() {
            return Err(Error::Domain(format!("time {t} is not on the grid of step {}", self.step())));
        }
        usize::try_from(q.to_integer()).map_err(|_| Error::Domain(format!("time {t} out of range")))
    }

    fn horizon_check(&self, requested: usize, min_level: usize) -> Result<()> {
        if requested + min_level > self.levels {
            let max_k = self.levels.saturating_sub(min_level);
            return Err(Error::Truncation {
                requested: (self.step() * Rational::from_integer(requested as i64)).to_string(),
                max_admissible: (self.step() * Rational::from_integer(max_k as i64)).to_string(),
            });
        }
        Ok(())
    }

    /// θ_t(a) for grid t, refusing shifts that leave the truncation.
    pub fn dilate(&self, t: &Rational, a: Operator) -> Result<Operator> {
        let k = self.grid_index(t)?;
        self.horizon_check(k, a.min_level())?;
        Ok(Operator::theta(k, a))
    }

    /// Largest admissible t for θ_t applied to `a`.
    pub fn max_admissible(&self, a: &Operator) -> Rational {
        self.step() * Rational::from_integer(self.levels.saturating_sub(a.min_level()) as i64)
    }

    /// The operator on level j representing `op` (which must be supported at or below j).
    pub fn eval(&self, op: &Operator, j: usize) -> Result<CMat> {
        if op.min_level() > j {
            return Err(Error::Truncation {
                requested: (self.step() * Rational::from_integer(op.min_level() as i64)).to_string(),
                max_admissible: (self.step() * Rational::from_integer(j as i64)).to_string(),
            });
        }
        Ok(match op {
            Operator::Pi(x) => {
                let b = &self.b[j][0];
                b * self.standard_form().left_action(x) * b.adjoint()
            }
            Operator::Theta(k, a) => {
                let inner = self.eval(a, j - k)?;
                let fp = self.sys.product(j - k, *k)?;
                let (lifted, _) = fp.domain.tensor_maps(&fp.domain, &inner, &linalg::identity(self.fibers[*k].dim()));
                let u = &fp.map.matrix;
                u * lifted * u.adjoint()
            }
            Operator::Product(a, b) => self.eval(a, j)? * self.eval(b, j)?,
            Operator::AtLevel(l, m) => {
                let b = &self.b[j][*l];
                b * m * b.adjoint()
            }
        })
    }

    pub fn top(&self, op: &Operator) -> Result<CMat> {
        self.eval(op, self.levels)
    }

    /// π(x) = κ₀xκ₀* on the top level.
    pub fn represent(&self, x: &Element) -> CMat {
        self.top(&Operator::pi(x)).expect("level zero operator")
    }

    /// ‖κ₀*θ_{kδ}(π(x))κ₀ − T_{kδ}(x)‖ as operators on L²(M).
    pub fn compression_defect(&self, t: &dyn TimeEvolution, k: usize, x: &Element) -> Result<f64> {
        let theta = self.dilate(&(self.step() * Rational::from_integer(k as i64)), Operator::pi(x))?;
        let top = self.top(&theta)?;
        let kappa0 = self.kappa(0);
        let compressed = kappa0.adjoint() * top * kappa0;
        let want = self.standard_form().left_action(&t.map_at(&(self.step() * Rational::from_integer(k as i64)))?.apply(x));
        Ok(linalg::frob(&(compressed - want)))
    }

    /// ‖pθ_t(π(x))p − π(T_t(x))‖ on the top level.
    pub fn corner_defect(&self, t: &dyn TimeEvolution, k: usize, x: &Element) -> Result<f64> {
        let tk = self.step() * Rational::from_integer(k as i64);
        let theta = self.top(&self.dilate(&tk, Operator::pi(x))?)?;
        let p = self.represent(&self.standard_form().algebra().identity());
        let want = self.represent(&t.map_at(&tk)?.apply(x));
        Ok(linalg::frob(&(&p * theta * &p - want)))
    }

    /// Rank of {θ_{mδ}(π(x₁))θ_{(m−1)δ}(π(x₂))⋯θ_δ(π(x_m))κ₀φ^{1/2}y} over basis
    /// words of length m ≤ `max_word_length`, embedded in the top level.
    pub fn minimality_evidence(&self, max_word_length: usize, seed: u64) -> Result<MinimalityReport> {
        let max_len = max_word_length.min(self.levels);
        let sf = self.standard_form();
        let alg = sf.algebra();
        let d = alg.dim();
        let basis = alg.basis_elements();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::new();
        for m in 0..=max_len {
            // thetas[j][i] = θ_{jδ}(π(e_i)) at level m, for 1 ≤ j ≤ m
            let mut thetas: Vec<Vec<CMat>> = vec![Vec::new()];
            for j in 1..=m {
                let row = basis
                    .iter()
                    .map(|e| self.eval(&Operator::theta(j, Operator::pi(e)), m))
                    .collect::<Result<Vec<_>>>()?;
                thetas.push(row);
            }
            let base: Vec<CVec> = basis.iter().map(|y| &self.b[m][0] * sf.x_phi(y)).collect();
            let count = d.checked_pow(m as u32 + 1).unwrap_or(usize::MAX);
            let words: Vec<Vec<usize>> = if count <= 4096 {
                (0..count)
                    .map(|mut idx| {
                        (0..=m)
                            .map(|_| {
                                let i = idx % d;
                                idx /= d;
                                i
                            })
                            .collect()
                    })
                    .collect()
            } else {
                use rand::Rng;
                (0..4096).map(|_| (0..=m).map(|_| rng.gen_range(0..d)).collect()).collect()
            };
            for w in words {
                // w[0] picks y; w[i] picks x_i, applied as θ_{(m−i+1)δ}
                let mut v = base[w[0]].clone();
                for i in (1..=m).rev() {
                    v = &thetas[m - i + 1][w[i]] * v;
                }
                vectors.push(&self.b[self.levels][m] * v);
            }
        }
        let mat = linalg::from_columns(self.top_dim(), &vectors);
        Ok(MinimalityReport {
            // word spans decay geometrically with the level, so rank is taken at the rounding floor
            span_rank: linalg::rank(&mat, mat.nrows().max(mat.ncols()) as f64 * f64::EPSILON),
            dim: self.top_dim(),
            words: vectors.len(),
            max_word_length: max_len,
        })
    }

    /// ‖κ_{kδ}(xξ(kδ)) − κ₀(xφ^{1/2})‖ for basis x and k = 1..=n, next to
    /// √(φ(T_t(x*x)) − 2Re φ(T_t(x*)x) + φ(x*x)).
    pub fn continuity_profile(&self, t: &dyn TimeEvolution) -> Result<Vec<ProfileEntry>> {
        let sf = self.standard_form();
        let alg = sf.algebra();
        let mut out = Vec::new();
        for k in 1..=self.levels {
            let tk = t.map_at(&(self.step() * Rational::from_integer(k as i64)))?;
            for (i, x) in alg.basis_elements().iter().enumerate() {
                let lhs = self.kappa(k) * (self.fibers[k].left_action(x) * self.unit.vector(k));
                let rhs = self.kappa(0) * sf.x_phi(x);
                let xs = x.adjoint();
                let sq = sf.expect(&tk.apply(&(&xs * x))).re - 2.0 * sf.expect(&(&tk.apply(&xs) * x)).re
                    + sf.expect(&(&xs * x)).re;
                out.push(ProfileEntry {
                    level: k,
                    basis_index: i,
                    value: linalg::vnorm(&(lhs - rhs)),
                    closed_form: sq.max(0.0).sqrt(),
                });
            }
        }
        Ok(out)
    }

    /// w_{kδ} = κ_kπ_φ(λ(kδ))κ₀* for k = 0..=n.
    pub fn cocycle_from_unit(&self, lambda: &Unit) -> Result<Cocycle> {
        let sf = self.standard_form();
        let values = (0..=self.levels)
            .map(|k| {
                let p = sf.pi_phi(&self.fibers[k], lambda.vector(k));
                self.kappa(k) * p * self.kappa(0).adjoint()
            })
            .collect();
        Ok(Cocycle { values })
    }

    /// λ(kδ) = κ_k*w_{kδ}κ₀φ^{1/2}.
    pub fn unit_from_cocycle(&self, w: &Cocycle) -> Unit {
        let phi = self.standard_form().cyclic_vector();
        let vectors = w
            .values
            .iter()
            .enumerate()
            .map(|(k, wk)| self.kappa(k).adjoint() * wk * self.kappa(0) * phi)
            .collect();
        Unit::from_vectors(self.step(), vectors)
    }

    /// Cocycle law, adaptedness, contraction norm and corner isometry of w.
    pub fn cocycle_report(&self, w: &Cocycle) -> Result<CocycleReport> {
        let n = self.levels;
        let mut law: f64 = 0.0;
        let mut adapted: f64 = 0.0;
        let mut norm: f64 = 0.0;
        let mut corner: f64 = 0.0;
        let k0 = self.kappa(0);
        for (k, wk) in w.values.iter().enumerate() {
            let proj = self.kappa(k) * self.kappa(k).adjoint();
            adapted = adapted.max(linalg::frob(&(&proj * wk * &proj - wk)));
            norm = norm.max(linalg::op_norm(wk));
            corner = corner.max(linalg::frob(&(k0.adjoint() * wk.adjoint() * wk * k0 - linalg::identity(k0.ncols()))));
        }
        for s in 0..=n {
            let ws = Operator::AtLevel(s, self.kappa(s).adjoint() * &w.values[s] * self.kappa(s));
            for t in 0..=n - s {
                let shifted = self.top(&Operator::theta(t, ws.clone()))?;
                law = law.max(linalg::frob(&(&w.values[s + t] - shifted * &w.values[t])));
            }
        }
        Ok(CocycleReport {
            law_defect: law,
            adapted_defect: adapted,
            contraction_norm: norm,
            corner_isometric_defect: corner,
        })
    }
}

/// max_k ‖λ(k) − μ(k)‖ over common levels.
pub fn unit_distance(a: &Unit, b: &Unit) -> f64 {
    a.vectors()
        .iter()
        .zip(b.vectors())
        .map(|(x, y)| if x.len() == y.len() { linalg::vnorm(&(x - y)) } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

pub fn cocycle_distance(a: &Cocycle, b: &Cocycle) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| linalg::frob(&(x - y))).fold(0.0, f64::max)
}
