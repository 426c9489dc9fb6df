//! Experiment configuration, verification suites and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{Algebra, State, StandardForm};
use crate::bimodule::MapFlags;
use crate::classify::{broken_perturbation, cocycle_equivalence, seeded_perturbation, E0Semigroup};
use crate::cpdyn::{CpSemigroup, TimeEvolution};
use crate::dilation::{Operator, TruncatedLimit};
use crate::error::{Error, Result};
use crate::heatmarkov::{self, HeatEvolution, MarkovModel};
use crate::linalg::{self, c, CMat};
use crate::prodsys::{cp_from_unit, parse_rational, roundtrip_compatibility, roundtrip_iso, CellComplex, CellSystem, Partition, Unit};
use crate::Rational;

pub const DEFAULT_SEED: u64 = 0x5EED_CAFE_F00D_0001;

/// Row-major nested arrays of `[re, im]` pairs.
pub type MatrixSpec = Vec<Vec<[f64; 2]>>;

fn matrix_from_spec(spec: &MatrixSpec, field: &str) -> Result<CMat> {
    let rows = spec.len();
    let cols = spec.first().map_or(0, Vec::len);
    if rows == 0 || spec.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("{field}: matrix rows must be non-empty and of equal length")));
    }
    Ok(CMat::from_fn(rows, cols, |i, j| c(spec[i][j][0], spec[i][j][1])))
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlgebraSpec {
    pub blocks: Vec<usize>,
}

/// Either diagonal weights over all blocks or full per-block densities; the normalized
/// trace when both are absent.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub density: Option<Vec<MatrixSpec>>,
}

/// A builtin name (`stochastic_pair`, `identity`, `lindblad`) or a generator acting on
/// the coordinates of the algebra.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupSpec {
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub generator: Option<MatrixSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub step: String,
    pub levels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { step: "1/4".into(), levels: 4 }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct HeatSpec {
    pub model: String,
    pub step: String,
    pub levels: usize,
    pub partitions: Vec<String>,
}

impl Default for HeatSpec {
    fn default() -> Self {
        Self { model: "two_state".into(), step: "1/4".into(), levels: 3, partitions: vec!["1".into(), "1/2,1/2".into()] }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub cp: f64,
    pub cells: f64,
    pub refine: f64,
    pub roundtrip: f64,
    pub dilate: f64,
    pub classify: f64,
    pub kernel: f64,
    pub gram: f64,
    pub adjoint: f64,
    pub heat_dilation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            cp: 1e-10,
            cells: 1e-10,
            refine: 1e-10,
            roundtrip: 1e-10,
            dilate: 1e-9,
            classify: 1e-9,
            kernel: 1e-12,
            gram: 1e-10,
            adjoint: 1e-12,
            heat_dilation: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cp: self.cp * s,
            cells: self.cells * s,
            refine: self.refine * s,
            roundtrip: self.roundtrip * s,
            dilate: self.dilate * s,
            classify: self.classify * s,
            kernel: self.kernel * s,
            gram: self.gram * s,
            adjoint: self.adjoint * s,
            heat_dilation: self.heat_dilation * s,
        }
    }

    fn all(&self) -> [f64; 10] {
        [
            self.cp,
            self.cells,
            self.refine,
            self.roundtrip,
            self.dilate,
            self.classify,
            self.kernel,
            self.gram,
            self.adjoint,
            self.heat_dilation,
        ]
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub algebra: Option<AlgebraSpec>,
    #[serde(default)]
    pub state: StateSpec,
    #[serde(default)]
    pub semigroup: SemigroupSpec,
    #[serde(default)]
    pub partitions: Vec<String>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub suites: Vec<String>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub heat: HeatSpec,
    /// Times at which `dilate` must be able to produce θ_t(π(1)).
    #[serde(default)]
    pub dilate_times: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn builtin(name: &str) -> Self {
        Self { semigroup: SemigroupSpec { builtin: Some(name.into()), generator: None }, ..Default::default() }
    }

    /// serde_json reports the line, column and field of any parse failure.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tolerances.all().iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if parse_rational(&self.grid.step)? <= Rational::zero() {
            return Err(Error::Config(format!("grid.step must be positive, got {}", self.grid.step)));
        }
        if self.grid.levels == 0 || self.heat.levels == 0 {
            return Err(Error::Config("grid levels must be at least 1".into()));
        }
        for s in &self.suites {
            Suite::expand(s)?;
        }
        for p in self.partitions.iter().chain(&self.heat.partitions) {
            p.parse::<Partition>()?;
        }
        Ok(())
    }

    pub fn suites(&self) -> Result<Vec<Suite>> {
        let names: Vec<&str> = if self.suites.is_empty() { vec!["all"] } else { self.suites.iter().map(String::as_str).collect() };
        let mut out = Vec::new();
        for n in names {
            for s in Suite::expand(n)? {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Suite {
    CheckCp,
    Cells,
    Refine,
    Roundtrip,
    Dilate,
    Classify,
    Heat,
}

impl Suite {
    pub const ALL: [Suite; 7] =
        [Suite::CheckCp, Suite::Cells, Suite::Refine, Suite::Roundtrip, Suite::Dilate, Suite::Classify, Suite::Heat];

    pub fn name(self) -> &'static str {
        match self {
            Suite::CheckCp => "check-cp",
            Suite::Cells => "cells",
            Suite::Refine => "refine",
            Suite::Roundtrip => "roundtrip",
            Suite::Dilate => "dilate",
            Suite::Classify => "classify",
            Suite::Heat => "heat",
        }
    }

    pub fn expand(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Ok(vec![name.parse()?])
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown suite '{s}'")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Record {
    pub check_id: String,
    pub anchor: String,
    pub defect: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub suite: String,
    pub records: Vec<Record>,
}

impl Report {
    fn new(suite: Suite) -> Self {
        Self { suite: suite.name().into(), records: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, anchor: &str, defect: f64, tolerance: f64) {
        self.records.push(Record {
            check_id: id.into(),
            anchor: anchor.into(),
            defect,
            tolerance,
            pass: defect <= tolerance,
        });
    }

    /// Records a boolean outcome as defect 0 or 1 against tolerance 0.
    pub fn push_flag(&mut self, id: impl Into<String>, anchor: &str, ok: bool) {
        self.push(id, anchor, if ok { 0.0 } else { 1.0 }, 0.0);
    }

    pub fn passed(&self) -> usize {
        self.records.iter().filter(|r| r.pass).count()
    }

    pub fn failed(&self) -> usize {
        self.records.len() - self.passed()
    }
}

/// Everything the suites share, built once from a config.
pub struct Setup {
    pub sf: Arc<StandardForm>,
    pub evolution: Arc<dyn TimeEvolution>,
    pub builtin: Option<String>,
    pub step: Rational,
    pub levels: usize,
    pub seed: u64,
    pub tol: Tolerances,
    pub config: ExperimentConfig,
}

impl Setup {
    pub fn new(config: &ExperimentConfig, seed: Option<u64>, tol_scale: f64) -> Result<Self> {
        config.validate()?;
        if !(tol_scale > 0.0) {
            return Err(Error::Config(format!("tolerance scale must be positive, got {tol_scale}")));
        }
        let seed = seed.or(config.seed).unwrap_or(DEFAULT_SEED);
        // with neither a builtin nor a generator, fall back to the stochastic pair
        let builtin = match (&config.semigroup.builtin, &config.semigroup.generator) {
            (None, None) => Some("stochastic_pair".to_string()),
            (b, _) => b.clone(),
        };
        let default_blocks: Vec<usize> = match builtin.as_deref() {
            Some("stochastic_pair") => vec![1, 1],
            _ => vec![2],
        };
        let blocks = config.algebra.as_ref().map_or(default_blocks, |a| a.blocks.clone());
        let alg = Algebra::new(&blocks)?;
        let state = match (&config.state.weights, &config.state.density) {
            (Some(_), Some(_)) => return Err(Error::Config("state: give weights or density, not both".into())),
            (Some(w), None) => State::from_diagonal(&alg, w)?,
            (None, Some(d)) => State::new(
                &alg,
                d.iter().enumerate().map(|(i, m)| matrix_from_spec(m, &format!("state.density[{i}]"))).collect::<Result<_>>()?,
            )?,
            (None, None) => State::normalized_trace(&alg),
        };
        let sf = Arc::new(StandardForm::new(&alg, &state)?);
        let evolution: Arc<dyn TimeEvolution> = match (builtin.as_deref(), &config.semigroup.generator) {
            (Some(_), Some(_)) => return Err(Error::Config("semigroup: give builtin or generator, not both".into())),
            (Some("stochastic_pair"), None) => {
                if blocks != [1, 1] {
                    return Err(Error::Config("stochastic_pair lives on blocks [1, 1]".into()));
                }
                Arc::new(CpSemigroup::stochastic_pair())
            }
            (Some("identity"), None) => Arc::new(CpSemigroup::identity(&alg)),
            (Some("lindblad"), None) => Arc::new(seeded_lindblad(&alg, seed)?),
            (Some(other), None) => return Err(Error::Config(format!("unknown builtin semigroup '{other}'"))),
            (None, Some(g)) => Arc::new(CpSemigroup::from_generator(&alg, matrix_from_spec(g, "semigroup.generator")?)?),
            (None, None) => unreachable!("defaulted above"),
        };
        Ok(Self {
            sf,
            evolution,
            builtin,
            step: parse_rational(&config.grid.step)?,
            levels: config.grid.levels,
            seed,
            tol: config.tolerances.scaled(tol_scale),
            config: config.clone(),
        })
    }

    fn algebra(&self) -> &Algebra {
        self.sf.algebra()
    }

    /// Level caps keeping cell dimensions modest on non-commutative algebras.
    fn cap(&self, small: usize, large: usize) -> usize {
        self.levels.min(if self.algebra().dim() <= 2 { small } else { large })
    }

    fn complex(&self) -> Arc<CellComplex> {
        Arc::new(CellComplex::with_seed(self.sf.clone(), self.evolution.clone(), self.seed))
    }

    fn partitions(&self, small: usize, large: usize) -> Result<Vec<Partition>> {
        if self.config.partitions.is_empty() {
            return Ok((1..=self.cap(small, large)).map(|k| Partition::uniform(self.step, k)).collect());
        }
        self.config.partitions.iter().map(|p| p.parse()).collect()
    }

    fn time(&self, k: usize) -> Rational {
        self.step * Rational::from_integer(k as i64)
    }
}

/// H = ½(random Hermitian), one jump operator ½(random element), both seeded.
pub fn seeded_lindblad(alg: &Algebra, seed: u64) -> Result<CpSemigroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(linalg::seed_from("lindblad", seed));
    let h = alg.random_hermitian(&mut rng).scale(c(0.5, 0.0));
    let v = alg.random_element(&mut rng).scale(c(0.5, 0.0));
    CpSemigroup::lindblad(alg, Some(&h), &[v])
}

/// Spread of the nonzero Gram spectrum of the one-part cell (t). Maps between
/// cells built from independently rounded semigroup values agree only up to
/// this factor times machine precision.
fn gram_condition(cx: &CellComplex, t: Rational) -> Result<f64> {
    let spectra = cx.cell(&Partition::single(t)?)?.gram_spectra();
    let hi = spectra.iter().flatten().copied().fold(0.0_f64, f64::max);
    let lo = spectra.iter().flatten().copied().filter(|&v| v > 1e-10 * hi).fold(f64::INFINITY, f64::min);
    Ok((hi / lo).max(1.0))
}

/// `tol`, or the rounding floor 64·ε·cond when that is larger.
fn conditioned(tol: f64, cond: f64) -> f64 {
    tol.max(64.0 * f64::EPSILON * cond)
}

fn run_check_cp(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::CheckCp);
    let maps: Vec<_> = (0..=s.levels).map(|k| s.evolution.map_at(&s.time(k))).collect::<Result<_>>()?;
    for (k, m) in maps.iter().enumerate() {
        let u = m.verify_ucp(s.tol.cp);
        rep.push(format!("ucp/t={}", s.time(k)), "unital completely positive", u.unital_defect.max(-u.choi_min_eigenvalue).max(0.0), s.tol.cp);
    }
    let mut law: f64 = 0.0;
    for j in 0..=s.levels {
        for k in 0..=s.levels - j {
            law = law.max(maps[j].compose(&maps[k]).distance(&maps[j + k]));
        }
    }
    rep.push("semigroup-law", "semigroup property on the grid", law, s.tol.cp);
    Ok(rep)
}

fn run_cells(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::Cells);
    let cx = s.complex();
    let pair = s.builtin.as_deref() == Some("stochastic_pair");
    for p in s.partitions(4, 2)? {
        let cell = cx.cell(&p)?;
        rep.push(format!("bimodule/{p}"), "cell bimodule axioms", cell.space().check_invariants(s.algebra()).max(), s.tol.cells);
        let g = cx.generating_rank(&p)?;
        rep.push(format!("generated/{p}"), "cell generated by elementary tensors", (g.dim - g.rank) as f64, 0.0);
        if pair {
            rep.push(format!("dim/{p}={}", cell.dim()), "dimension #p+2 for the stochastic pair", (cell.dim() as f64 - (p.len() + 2) as f64).abs(), 0.0);
        }
        let unit = cx.canonical_unit(p.parts())?;
        rep.push(format!("unit/{p}"), "canonical unit is unital", unit.unital_defect(&s.sf), s.tol.cells);
    }
    let t = Partition::single(s.step)?;
    rep.push("associativity", "cell products are associative", cx.associativity_defect(&t, &t, &t)?, s.tol.cells);
    for (a, b) in [(Partition::empty(), t.clone()), (t.clone(), Partition::empty()), (t.clone(), t.clone())] {
        let m = cx.multiply(&a, &b)?;
        let v = m.map.verify(MapFlags::BILINEAR_UNITARY, s.tol.cells);
        rep.push(format!("product/{a}*{b}"), "cell product is a bilinear unitary", v.worst(MapFlags::BILINEAR_UNITARY).max(m.fit_residual), s.tol.cells);
    }
    Ok(rep)
}

fn run_refine(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::Refine);
    let cx = s.complex();
    let max_parts = if s.algebra().dim() <= 2 { 16 } else { 2 };
    let starts = if s.config.partitions.is_empty() {
        vec![Partition::single(Rational::from_integer(1))?]
    } else {
        s.partitions(4, 2)?
    };
    for start in starts {
        let mut chain = vec![start];
        while chain.last().expect("non-empty").len() * 2 <= max_parts {
            let next = chain.last().expect("non-empty").dyadic_refinement();
            chain.push(next);
        }
        let mut iso: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for i in 0..chain.len() {
            for j in i + 1..chain.len() {
                let (a, r) = cx.refinement_isometry(&chain[j], &chain[i])?;
                iso = iso.max(a.verify(MapFlags::BILINEAR_ISOMETRIC, s.tol.refine).worst(MapFlags::BILINEAR_ISOMETRIC)).max(r);
                for k in j + 1..chain.len() {
                    let (b, _) = cx.refinement_isometry(&chain[k], &chain[j])?;
                    let (ba, _) = cx.refinement_isometry(&chain[k], &chain[i])?;
                    comp = comp.max(linalg::frob(&(&b.matrix * &a.matrix - &ba.matrix)));
                }
            }
        }
        let label = format!("{}..{}", chain[0], chain.last().expect("non-empty"));
        let finest = chain.last().expect("non-empty").parts().iter().copied().min().expect("non-empty partition");
        let cond = gram_condition(&cx, finest)?;
        rep.push(format!("isometric/{label}/cond={cond:.1e}"), "refinement maps are bilinear isometries", iso, conditioned(s.tol.refine, cond));
        rep.push(format!("composition/{label}"), "refinement maps compose", comp, s.tol.refine);
        if chain.len() > 1 {
            let rejected = matches!(cx.refinement_isometry(&chain[0], &chain[1]), Err(Error::Order { .. }));
            rep.push_flag(format!("order/{label}"), "non-refinements rejected", rejected);
        }
    }
    Ok(rep)
}

fn run_roundtrip(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::Roundtrip);
    let n = s.cap(4, 3);
    let sys = CellSystem::new(s.complex(), s.step)?;
    let unit = Unit::distinguished(&sys, n)?;
    rep.push("unit/unital", "distinguished unit is unital", unit.unital_defect(&sys)?, s.tol.roundtrip);
    rep.push("unit/factorizes", "distinguished unit factorizes", unit.factorization_defect(&sys)?, s.tol.roundtrip);
    let (fam, resid) = cp_from_unit(&sys, &unit)?;
    let mut dist = resid;
    for k in 0..=n {
        let want = s.evolution.map_at(&s.time(k))?;
        dist = dist.max(fam.at(k).expect("grid level exists").distance(&want));
    }
    rep.push("semigroup-recovered", "unit recovers the semigroup", dist, s.tol.roundtrip);
    let cx2 = Arc::new(CellComplex::with_seed(s.sf.clone(), Arc::new(fam), s.seed));
    let src = CellSystem::new(cx2, s.step)?;
    let maps = roundtrip_iso(&src, &sys, &unit, n)?;
    let mut uni: f64 = 0.0;
    for (m, r) in &maps {
        uni = uni.max(m.verify(MapFlags::BILINEAR_UNITARY, s.tol.roundtrip).worst(MapFlags::BILINEAR_UNITARY)).max(*r);
    }
    let cond = gram_condition(sys.complex(), s.step)?;
    rep.push(format!("iso/unitary/cond={cond:.1e}"), "product system recovered up to isomorphism", uni, conditioned(s.tol.roundtrip, cond));
    let only: Vec<_> = maps.into_iter().map(|(m, _)| m).collect();
    rep.push("iso/products", "isomorphism respects products", roundtrip_compatibility(&src, &sys, &only)?, s.tol.roundtrip);
    Ok(rep)
}

fn run_dilate(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::Dilate);
    let n = s.cap(8, 3);
    let sys = Arc::new(CellSystem::new(s.complex(), s.step)?);
    let unit = Unit::distinguished(sys.as_ref(), n)?;
    let tl = TruncatedLimit::new(sys, unit, n)?;
    for t in &s.config.dilate_times {
        tl.dilate(&parse_rational(t)?, Operator::pi(&s.algebra().identity()))?;
    }
    let iso = tl.isometry_report();
    rep.push("limit/isometric", "inductive limit maps are isometric", iso.isometric_defect.max(iso.composition_defect), s.tol.dilate);
    rep.push("limit/bilinear", "inductive limit maps are bilinear", iso.bilinear_defect, s.tol.dilate);
    let mut comp: f64 = 0.0;
    for k in 0..n {
        for x in s.algebra().basis_elements() {
            comp = comp.max(tl.compression_defect(s.evolution.as_ref(), k, &x)?);
        }
    }
    rep.push("compression", "dilation compresses to the semigroup", comp, s.tol.dilate);
    let min = tl.minimality_evidence(n.min(4), s.seed)?;
    rep.push(format!("minimal/rank={}/{}", min.span_rank, min.dim), "dilation is minimal", (min.dim - min.span_rank) as f64, 0.0);
    Ok(rep)
}

fn run_classify(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::Classify);
    let n = s.levels.min(4);
    // inner automorphisms of an abelian algebra are trivial, so classify on M₂ instead
    let sf = if s.algebra().blocks().iter().all(|&b| b == 1) {
        let m2 = Algebra::new(&[2])?;
        Arc::new(StandardForm::new(&m2, &State::normalized_trace(&m2))?)
    } else {
        s.sf.clone()
    };
    let alg = sf.algebra();
    let mut rng = ChaCha8Rng::seed_from_u64(linalg::seed_from("classify", s.seed));
    let k = alg.random_hermitian(&mut rng);
    let alpha = Arc::new(E0Semigroup::inner(alg, &k, s.step)?);
    let (beta, _) = seeded_perturbation(&alpha, n, s.seed)?;
    let eq = cocycle_equivalence(&sf, &alpha, &Arc::new(beta), n, s.seed)?;
    rep.push_flag("perturbed/equivalent", "cocycle conjugate semigroups are equivalent", eq.equivalent);
    let conj = eq.levels.iter().map(|l| l.conjugation_defect.max(l.unitary_defect)).fold(0.0, f64::max);
    rep.push("perturbed/conjugation", "certified cocycle conjugates", conj, s.tol.classify);
    rep.push("perturbed/cocycle-law", "certified cocycle law", eq.law_defect, s.tol.classify);
    rep.push("perturbed/isomorphism", "induced product system isomorphism", eq.isomorphism_defect, s.tol.classify);
    let broken = broken_perturbation(&alpha, n, s.seed)?;
    let neq = cocycle_equivalence(&sf, &alpha, &Arc::new(broken), n, s.seed)?;
    rep.push_flag(
        format!("broken/fails-at={}", neq.failing_level.map_or("none".into(), |l| s.time(l).to_string())),
        "failure certificate for a broken semigroup",
        !neq.equivalent && neq.failing_level.is_some(),
    );
    Ok(rep)
}

fn run_heat(s: &Setup) -> Result<Report> {
    let mut rep = Report::new(Suite::Heat);
    let spec = &s.config.heat;
    let model: Arc<MarkovModel> = Arc::new(spec.model.parse()?);
    let step = parse_rational(&spec.step)?;
    let dt = crate::prodsys::rational_to_f64(&step);
    rep.push("kernel", "heat kernel symmetry, mass, Chapman-Kolmogorov", model.kernel_report(dt, 2.0 * dt)?.max(), s.tol.kernel);
    let sf = Arc::new(heatmarkov::heat_standard_form(&model)?);
    let cx = CellComplex::with_seed(sf, Arc::new(HeatEvolution(model.clone())), s.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(linalg::seed_from("heat", s.seed));
    for p in &spec.partitions {
        let p: Partition = p.parse()?;
        let (r, _) = heatmarkov::check_path_model(&model, &cx, &p)?;
        rep.push(format!("gram/{p}"), "path-space model of the cells", r.gram_defect, s.tol.gram);
        rep.push(format!("unitary/{p}"), "path-space model is a bilinear unitary", r.unitary_defect.max(r.bilinear_defect), s.tol.gram);
        if !p.is_empty() {
            rep.push(format!("adjoint/{p}"), "adjoint of the embedding of M", heatmarkov::b_adjoint_check(&model, &p, &mut rng, 4)?, s.tol.adjoint);
        }
    }
    let mut fs = model.algebra().basis_elements();
    fs.push(model.algebra().identity());
    let d = heatmarkov::check_heat_dilation(&model, step, spec.levels, &fs)?;
    rep.push("dilation/theta", "heat dilation compresses to T_t", d.theta_route, s.tol.heat_dilation);
    rep.push("dilation/formula", "heat dilation via the adjoint formula", d.formula_route, s.tol.heat_dilation);
    Ok(rep)
}

pub fn run_suite(setup: &Setup, suite: Suite) -> Result<Report> {
    match suite {
        Suite::CheckCp => run_check_cp(setup),
        Suite::Cells => run_cells(setup),
        Suite::Refine => run_refine(setup),
        Suite::Roundtrip => run_roundtrip(setup),
        Suite::Dilate => run_dilate(setup),
        Suite::Classify => run_classify(setup),
        Suite::Heat => run_heat(setup),
    }
}

/// Runs the suites in parallel; reports come back in suite order.
pub fn run(setup: &Setup, suites: &[Suite]) -> Result<Vec<Report>> {
    suites.par_iter().map(|&s| run_suite(setup, s)).collect()
}

pub fn render_table(seed: u64, reports: &[Report]) -> String {
    let mut out = format!("seed {seed}\n");
    for r in reports {
        let _ = writeln!(out, "[{}] {} passed, {} failed", r.suite, r.passed(), r.failed());
        for rec in &r.records {
            let _ = writeln!(
                out,
                "  {:<4} {:<40} {:>13} <= {:<9.1e}  {}",
                if rec.pass { "ok" } else { "FAIL" },
                rec.check_id,
                format!("{:.6e}", rec.defect),
                rec.tolerance,
                rec.anchor
            );
        }
    }
    out
}

pub fn render_csv(seed: u64, reports: &[Report]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["suite", "check_id", "paper_anchor", "defect", "tolerance", "pass"]).map_err(csv_err)?;
    for r in reports {
        for rec in &r.records {
            w.write_record([
                r.suite.as_str(),
                &rec.check_id,
                &rec.anchor,
                &format!("{:.6e}", rec.defect),
                &format!("{:.1e}", rec.tolerance),
                if rec.pass { "true" } else { "false" },
            ])
            .map_err(csv_err)?;
        }
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Consistency(e.to_string()))?)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    Ok(format!("# seed={seed}\n{body}"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Consistency(format!("csv: {e}"))
}

/// Writes `report.txt` and `report.csv` into `dir`.
pub fn write_reports(dir: &Path, seed: u64, reports: &[Report]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), render_table(seed, reports))?;
    fs::write(dir.join("report.csv"), render_csv(seed, reports)?)?;
    Ok(())
}

pub fn all_pass(reports: &[Report]) -> bool {
    reports.iter().all(|r| r.failed() == 0)
}
