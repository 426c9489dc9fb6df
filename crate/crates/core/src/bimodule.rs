//! Hilbert spaces with commuting left and right M-actions.
//!
//! Every space is stored in orthonormal coordinates together with the action
//! matrices of the algebra's matrix units. The tensor space M⊗_T L²(M) is a
//! Gram quotient of the algebraic tensor product. The relative tensor product
//! H⊗^M K is realized through the factorization of its Gram matrix over the
//! blocks of M: for each block β the vector ξφ^{-1/2}η is sent to
//! Σ_i ξ·(ρ^{-1/2}E^β_{i1}) ⊗ E^β_{1i}·η inside (H·E^β_{11}) ⊗ (E^β_{11}·K).

use std::sync::Arc;

use crate::algebra::{Algebra, Element, StandardForm};
use crate::cpdyn::CpMap;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, C64};

pub const GRAM_CUTOFF: f64 = 1e-10;
pub const GRAM_NEGATIVITY: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    StandardForm,
    GnsTensor,
    RelativeTensor,
    Twisted,
    L2Path,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub label: String,
    pub vector: CVec,
}

#[derive(Clone, Debug)]
pub struct Bimodule {
    dim: usize,
    left: Vec<CMat>,
    right: Vec<CMat>,
    generators: Vec<Generator>,
    provenance: Provenance,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InvariantReport {
    pub left_multiplicativity: f64,
    pub right_multiplicativity: f64,
    pub adjoint: f64,
    pub unital: f64,
    pub commutation: f64,
}

impl InvariantReport {
    pub fn max(&self) -> f64 {
        [self.left_multiplicativity, self.right_multiplicativity, self.adjoint, self.unital, self.commutation]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

impl Bimodule {
    pub fn new(
        dim: usize,
        left: Vec<CMat>,
        right: Vec<CMat>,
        generators: Vec<Generator>,
        provenance: Provenance,
    ) -> Self {
        debug_assert!(left.iter().chain(&right).all(|m| m.shape() == (dim, dim)));
        Self { dim, left, right, generators, provenance }
    }

    /// L²(M) with multiplication on both sides.
    pub fn standard(sf: &StandardForm) -> Self {
        let alg = sf.algebra();
        let basis = alg.basis_elements();
        let left = basis.iter().map(|e| sf.left_action(e)).collect();
        let right = basis.iter().map(|e| sf.right_action(e)).collect();
        let generators = vec![Generator { label: "φ^½".into(), vector: sf.cyclic_vector().clone() }];
        Self::new(sf.dim(), left, right, generators, Provenance::StandardForm)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn left(&self) -> &[CMat] {
        &self.left
    }

    pub fn right(&self) -> &[CMat] {
        &self.right
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    fn combine(mats: &[CMat], dim: usize, x: &Element) -> CMat {
        let mut out = CMat::zeros(dim, dim);
        for (coef, m) in x.coords().iter().zip(mats) {
            if coef.norm_sqr() > 0.0 {
                out += m * *coef;
            }
        }
        out
    }

    pub fn left_action(&self, x: &Element) -> CMat {
        Self::combine(&self.left, self.dim, x)
    }

    pub fn right_action(&self, y: &Element) -> CMat {
        Self::combine(&self.right, self.dim, y)
    }

    /// Representation defects on the matrix-unit basis.
    pub fn check_invariants(&self, alg: &Algebra) -> InvariantReport {
        let basis = alg.basis_elements();
        let mut r = InvariantReport::default();
        let id = linalg::identity(self.dim);
        r.unital = linalg::frob(&(self.left_action(&alg.identity()) - &id))
            .max(linalg::frob(&(self.right_action(&alg.identity()) - &id)));
        for (a, x) in basis.iter().enumerate() {
            let xa = alg.index_of_adjoint(a);
            r.adjoint = r
                .adjoint
                .max(linalg::frob(&(&self.left[xa] - self.left[a].adjoint())))
                .max(linalg::frob(&(&self.right[xa] - self.right[a].adjoint())));
            for (b, y) in basis.iter().enumerate() {
                let xy = x * y;
                r.left_multiplicativity = r
                    .left_multiplicativity
                    .max(linalg::frob(&(&self.left[a] * &self.left[b] - self.left_action(&xy))));
                r.right_multiplicativity = r
                    .right_multiplicativity
                    .max(linalg::frob(&(&self.right[b] * &self.right[a] - self.right_action(&xy))));
                r.commutation = r
                    .commutation
                    .max(linalg::frob(&(&self.left[a] * &self.right[b] - &self.right[b] * &self.left[a])));
            }
        }
        r
    }

    /// The same bimodule in a rotated orthonormal basis: vectors map by `u`.
    pub fn rotated(&self, u: &CMat) -> Bimodule {
        let conj = |m: &CMat| u * m * u.adjoint();
        Bimodule {
            dim: self.dim,
            left: self.left.iter().map(conj).collect(),
            right: self.right.iter().map(conj).collect(),
            generators: self
                .generators
                .iter()
                .map(|g| Generator { label: g.label.clone(), vector: u * &g.vector })
                .collect(),
            provenance: self.provenance,
        }
    }
}

impl Algebra {
    /// Coordinate index of the adjoint of the matrix unit with index `k`.
    pub fn index_of_adjoint(&self, k: usize) -> usize {
        let (b, i, j) = self.locate(k);
        self.index(b, j, i)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MapFlags {
    pub bilinear: bool,
    pub isometric: bool,
    pub unitary: bool,
}

impl MapFlags {
    pub const BILINEAR_ISOMETRIC: MapFlags = MapFlags { bilinear: true, isometric: true, unitary: false };
    pub const BILINEAR_UNITARY: MapFlags = MapFlags { bilinear: true, isometric: true, unitary: true };
}

#[derive(Clone, Copy, Debug)]
pub struct MapReport {
    pub bilinear_defect: f64,
    pub isometric_defect: f64,
    pub unitary_defect: f64,
    pub pass: bool,
}

impl MapReport {
    pub fn worst(&self, flags: MapFlags) -> f64 {
        let mut w: f64 = 0.0;
        if flags.bilinear {
            w = w.max(self.bilinear_defect);
        }
        if flags.isometric {
            w = w.max(self.isometric_defect);
        }
        if flags.unitary {
            w = w.max(self.unitary_defect);
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct BimoduleMap {
    pub source: Arc<Bimodule>,
    pub target: Arc<Bimodule>,
    pub matrix: CMat,
}

impl BimoduleMap {
    pub fn new(source: Arc<Bimodule>, target: Arc<Bimodule>, matrix: CMat) -> Self {
        assert_eq!(matrix.shape(), (target.dim(), source.dim()), "map shape");
        Self { source, target, matrix }
    }

    pub fn identity(space: Arc<Bimodule>) -> Self {
        let m = linalg::identity(space.dim());
        Self { source: space.clone(), target: space, matrix: m }
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        &self.matrix * v
    }

    /// self ∘ other.
    pub fn compose(&self, other: &BimoduleMap) -> BimoduleMap {
        Self { source: other.source.clone(), target: self.target.clone(), matrix: &self.matrix * &other.matrix }
    }

    pub fn bilinear_defect(&self) -> f64 {
        let a = &self.matrix;
        let mut worst: f64 = 0.0;
        for k in 0..self.source.left().len() {
            worst = worst
                .max(linalg::frob(&(a * &self.source.left()[k] - &self.target.left()[k] * a)))
                .max(linalg::frob(&(a * &self.source.right()[k] - &self.target.right()[k] * a)));
        }
        worst
    }

    pub fn isometric_defect(&self) -> f64 {
        linalg::frob(&(self.matrix.adjoint() * &self.matrix - linalg::identity(self.source.dim())))
    }

    pub fn unitary_defect(&self) -> f64 {
        if self.source.dim() != self.target.dim() {
            return f64::INFINITY;
        }
        self.isometric_defect()
            .max(linalg::frob(&(&self.matrix * self.matrix.adjoint() - linalg::identity(self.target.dim()))))
    }

    pub fn verify(&self, flags: MapFlags, tol: f64) -> MapReport {
        let bilinear_defect = if flags.bilinear { self.bilinear_defect() } else { 0.0 };
        let isometric_defect = if flags.isometric || flags.unitary { self.isometric_defect() } else { 0.0 };
        let unitary_defect = if flags.unitary { self.unitary_defect() } else { 0.0 };
        let mut r = MapReport { bilinear_defect, isometric_defect, unitary_defect, pass: true };
        r.pass = r.worst(flags) <= tol;
        r
    }
}

/// M⊗_T L²(M) with its quotient map from the algebraic tensor product.
#[derive(Debug)]
pub struct GnsTensor {
    space: Arc<Bimodule>,
    quotient: CMat,
    map: CpMap,
    gram_spectrum: Vec<f64>,
    quotient_residual: f64,
}

impl GnsTensor {
    /// Realized inside ⊕ M_{n_b×N} through Kraus operators of T∘E, E the block pinching:
    /// x⊗ξ ↦ (x_b K_{b,i} ξ)_{b,i}, so both actions are plain multiplications.
    pub fn new(sf: &StandardForm, t: &CpMap) -> Result<Self> {
        let alg = sf.algebra();
        let d = alg.dim();
        let big = alg.full_size();
        let basis = alg.basis_elements();
        let choi = t.choi();
        // Kraus operators K: n_b × N per source block, from each diagonal block of the Choi matrix
        let mut kraus: Vec<(usize, CMat)> = Vec::new();
        let mut offset = 0;
        for (b, &n) in alg.blocks().iter().enumerate() {
            let part = choi.view((offset, offset), (n * big, n * big)).clone_owned();
            offset += n * big;
            let (vals, vecs) = linalg::eigh(&part);
            let max = vals.last().copied().unwrap_or(0.0).max(0.0);
            let min = vals.first().copied().unwrap_or(0.0);
            if min < -GRAM_NEGATIVITY * max.max(1.0) {
                return Err(Error::NotCompletelyPositive { min, max });
            }
            for (k, &lam) in vals.iter().enumerate() {
                if lam <= 1e-15 * max {
                    continue;
                }
                let s = lam.sqrt();
                let v = vecs.column(k);
                kraus.push((b, CMat::from_fn(n, big, |i, col| v[i * big + col].conj() * s)));
            }
        }
        let comps: Vec<usize> = kraus.iter().map(|(b, _)| alg.blocks()[*b] * big).collect();
        let ambient: usize = comps.iter().sum();
        let place = |x: &Element, xi: &CMat| -> CVec {
            let mut out = CVec::zeros(ambient);
            let mut at = 0;
            for ((b, k), &len) in kraus.iter().zip(&comps) {
                let m = x.block(*b) * k * xi;
                for (idx, v) in m.transpose().iter().enumerate() {
                    out[at + idx] = *v;
                }
                at += len;
            }
            out
        };
        let fulls: Vec<CMat> = basis.iter().map(|e| alg.embed_full(e)).collect();
        let mut free = CMat::zeros(ambient, d * d);
        for (i, x) in basis.iter().enumerate() {
            for (j, xi) in fulls.iter().enumerate() {
                free.set_column(i * d + j, &place(x, xi));
            }
        }
        let sv = linalg::singular_values(&free);
        let mut gram_spectrum: Vec<f64> = (0..d * d).map(|i| sv.get(i).map_or(0.0, |s| s * s)).collect();
        gram_spectrum.sort_by(f64::total_cmp);
        let p = linalg::column_space(&free, GRAM_CUTOFF.sqrt());
        let q = p.adjoint() * &free;
        // actions on the ambient space, one matrix per basis element
        let ambient_action = |e: &Element, left: bool| -> CMat {
            let mut m = CMat::zeros(ambient, ambient);
            let mut at = 0;
            for ((b, _), &len) in kraus.iter().zip(&comps) {
                let n = alg.blocks()[*b];
                let op = if left {
                    e.block(*b).kronecker(&linalg::identity(big))
                } else {
                    linalg::identity(n).kronecker(&alg.embed_full(e).transpose())
                };
                m.view_mut((at, at), (len, len)).copy_from(&op);
                at += len;
            }
            m
        };
        let mut residual: f64 = 0.0;
        let mut left = Vec::with_capacity(d);
        let mut right = Vec::with_capacity(d);
        for e in &basis {
            for (is_left, out) in [(true, &mut left), (false, &mut right)] {
                let a = ambient_action(e, is_left);
                let ap = &a * &p;
                let compressed = p.adjoint() * &ap;
                residual = residual.max(linalg::frob(&(&ap - &p * &compressed)));
                out.push(compressed);
            }
        }
        let mut generators = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                let v = &q * linalg::kron_vec(&basis[i].coords(), &sf.x_phi(&basis[j]));
                generators.push(Generator { label: format!("e{i}⊗e{j}φ^½"), vector: v });
            }
        }
        let space = Arc::new(Bimodule::new(p.ncols(), left, right, generators, Provenance::GnsTensor));
        Ok(Self { space, quotient: q, map: t.clone(), gram_spectrum, quotient_residual: residual })
    }

    pub fn space(&self) -> &Arc<Bimodule> {
        &self.space
    }

    pub fn map(&self) -> &CpMap {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn gram_spectrum(&self) -> &[f64] {
        &self.gram_spectrum
    }

    /// How far the free actions are from preserving the null space.
    pub fn quotient_residual(&self) -> f64 {
        self.quotient_residual
    }

    /// Image of x ⊗ η for η ∈ L²(M).
    pub fn vector(&self, x: &Element, eta: &CVec) -> CVec {
        &self.quotient * linalg::kron_vec(&x.coords(), eta)
    }

    /// Image of x ⊗ yφ^{1/2}.
    pub fn elementary(&self, sf: &StandardForm, x: &Element, y: &Element) -> CVec {
        self.vector(x, &sf.x_phi(y))
    }
}

#[derive(Clone, Debug)]
struct BlockFactor {
    offset: usize,
    left_basis: CMat,
    right_basis: CMat,
}

/// H⊗^M K in orthonormal coordinates.
#[derive(Debug)]
pub struct RelativeTensor {
    left: Arc<Bimodule>,
    right: Arc<Bimodule>,
    space: Arc<Bimodule>,
    blocks: Vec<BlockFactor>,
    /// Columns are the images of e_a φ^{-1/2} e_b, indexed a·dim K + b.
    frame: CMat,
    frame_pinv: CMat,
}

impl RelativeTensor {
    pub fn new(sf: &StandardForm, h: Arc<Bimodule>, k: Arc<Bimodule>) -> Result<Self> {
        let alg = sf.algebra();
        let (d1, d2) = (h.dim(), k.dim());
        let mut blocks = Vec::with_capacity(alg.num_blocks());
        let mut ambient = 0;
        let mut pieces: Vec<CMat> = Vec::new();
        for (b, &n) in alg.blocks().iter().enumerate() {
            let e11 = alg.index(b, 0, 0);
            let left_basis = linalg::psd_range(&h.right()[e11], 0.5);
            let right_basis = linalg::psd_range(&k.left()[e11], 0.5);
            let (nu, mu) = (left_basis.ncols(), right_basis.ncols());
            let mut w = CMat::zeros(nu * mu, d1 * d2);
            for i in 0..n {
                let y = sf.rho_inv_half() * &alg.basis(alg.index(b, i, 0));
                let a = left_basis.adjoint() * h.right_action(&y);
                let bb = right_basis.adjoint() * &k.left()[alg.index(b, 0, i)];
                w += a.kronecker(&bb);
            }
            blocks.push(BlockFactor { offset: ambient, left_basis, right_basis });
            ambient += nu * mu;
            pieces.push(w);
        }
        let mut frame = CMat::zeros(ambient, d1 * d2);
        for (blk, w) in blocks.iter().zip(&pieces) {
            frame.view_mut((blk.offset, 0), w.shape()).copy_from(w);
        }
        let gram = &frame * frame.adjoint();
        let range = linalg::psd_range(&gram, GRAM_CUTOFF);
        let restrict = if range.ncols() == ambient { None } else { Some(range) };
        let frame = match &restrict {
            Some(z) => z.adjoint() * frame,
            None => frame,
        };
        let dim = frame.nrows();
        let project = |m: CMat| match &restrict {
            Some(z) => z.adjoint() * m * z,
            None => m,
        };
        let mut left = Vec::with_capacity(alg.dim());
        let mut right = Vec::with_capacity(alg.dim());
        for e in 0..alg.dim() {
            let mut l = CMat::zeros(ambient, ambient);
            let mut r = CMat::zeros(ambient, ambient);
            for blk in &blocks {
                let (nu, mu) = (blk.left_basis.ncols(), blk.right_basis.ncols());
                let lh = blk.left_basis.adjoint() * &h.left()[e] * &blk.left_basis;
                let rk = blk.right_basis.adjoint() * &k.right()[e] * &blk.right_basis;
                l.view_mut((blk.offset, blk.offset), (nu * mu, nu * mu))
                    .copy_from(&lh.kronecker(&linalg::identity(mu)));
                r.view_mut((blk.offset, blk.offset), (nu * mu, nu * mu))
                    .copy_from(&linalg::identity(nu).kronecker(&rk));
            }
            left.push(project(l));
            right.push(project(r));
        }
        let frame_pinv = linalg::pinv(&frame, 1e-13);
        let mut generators = Vec::new();
        for ga in h.generators().iter().take(64) {
            for gb in k.generators().iter().take(64) {
                let v = &frame * linalg::kron_vec(&ga.vector, &gb.vector);
                generators.push(Generator { label: format!("({})φ^-½({})", ga.label, gb.label), vector: v });
            }
        }
        let space = Arc::new(Bimodule::new(dim, left, right, generators, Provenance::RelativeTensor));
        Ok(Self { left: h, right: k, space, blocks, frame, frame_pinv })
    }

    pub fn space(&self) -> &Arc<Bimodule> {
        &self.space
    }

    pub fn left_factor(&self) -> &Arc<Bimodule> {
        &self.left
    }

    pub fn right_factor(&self) -> &Arc<Bimodule> {
        &self.right
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn frame(&self) -> &CMat {
        &self.frame
    }

    pub fn frame_pinv(&self) -> &CMat {
        &self.frame_pinv
    }

    /// ξφ^{-1/2}η.
    pub fn embed(&self, xi: &CVec, eta: &CVec) -> CVec {
        &self.frame * linalg::kron_vec(xi, eta)
    }

    /// Gram of the elementary vectors e_aφ^{-1/2}e_b in this model.
    pub fn gram(&self) -> CMat {
        self.frame.adjoint() * &self.frame
    }

    /// f ⊗ g from this space into `target`, for f right-linear and g left-linear;
    /// returns the matrix and the residual of the linear extension.
    pub fn tensor_maps(&self, target: &RelativeTensor, f: &CMat, g: &CMat) -> (CMat, f64) {
        let (d2t, d2s) = g.shape();
        let (d1t, d1s) = f.shape();
        // target.frame · (f ⊗ g) without materializing the Kronecker product
        let h: Vec<CMat> = (0..d1t).map(|i| target.frame.columns(i * d2t, d2t) * g).collect();
        let mut images = CMat::zeros(target.frame.nrows(), d1s * d2s);
        for a in 0..d1s {
            let mut block = CMat::zeros(target.frame.nrows(), d2s);
            for (i, hi) in h.iter().enumerate() {
                let w = f[(i, a)];
                if w != C64::new(0.0, 0.0) {
                    block += hi * w;
                }
            }
            images.columns_mut(a * d2s, d2s).copy_from(&block);
        }
        let m = &images * &self.frame_pinv;
        let resid = linalg::frob(&(&m * &self.frame - &images)) / linalg::frob(&images).max(1.0);
        (m, resid)
    }

    /// Number of blocks with a nonzero multiplicity pair.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// The associator X⊗(Y⊗Z) → (X⊗Y)⊗Z, read off the frames of the four relative
/// tensors; returns the matrix and the residual of the linear extension.
pub fn associator(x_yz: &RelativeTensor, yz: &RelativeTensor, xy_z: &RelativeTensor, xy: &RelativeTensor) -> (CMat, f64) {
    let (dx, dz) = (xy.left_factor().dim(), yz.right_factor().dim());
    let (dyz, dxy, dw) = (yz.frame().ncols(), xy.dim(), yz.dim());
    // images of e_a ⊙ (e_b ⊙ e_c) in (X⊗Y)⊗Z, grouped by a
    let mut g = CMat::zeros(xy_z.dim(), dx * dw);
    let gz: Vec<CMat> = (0..dz).map(|cz| CMat::from_fn(xy_z.dim(), dxy, |i, m| xy_z.frame()[(i, m * dz + cz)])).collect();
    let mut img = CMat::zeros(xy_z.dim(), dyz);
    for a in 0..dx {
        let xy_cols = xy.frame().columns(a * (dyz / dz), dyz / dz);
        for (cz, gc) in gz.iter().enumerate() {
            let block = gc * xy_cols;
            for b in 0..dyz / dz {
                img.set_column(b * dz + cz, &block.column(b));
            }
        }
        g.columns_mut(a * dw, dw).copy_from(&(&img * yz.frame_pinv()));
    }
    let m = &g * x_yz.frame_pinv();
    let resid = linalg::frob(&(&m * x_yz.frame() - &g)) / linalg::frob(&g).max(1.0);
    (m, resid)
}

/// Brute-force Gram matrix ⟨e_b, π_φ(e_a)*π_φ(e_c) e_d⟩ of H⊗^M K, indexed a·dim K + b.
pub fn relative_tensor_gram(sf: &StandardForm, h: &Bimodule, k: &Bimodule) -> Result<CMat> {
    let (d1, d2) = (h.dim(), k.dim());
    let pis: Vec<CMat> = (0..d1).map(|a| sf.pi_phi(h, &linalg::unit_vector(d1, a))).collect();
    let mut gram = CMat::zeros(d1 * d2, d1 * d2);
    for a in 0..d1 {
        for cidx in 0..d1 {
            let op = pis[a].adjoint() * &pis[cidx];
            let (m, resid) = sf.element_of_left_operator(&op);
            if resid > 1e-8 * (1.0 + linalg::frob(&op)) {
                return Err(Error::Consistency(format!(
                    "π_φ product is not a left multiplication (residual {resid:e})"
                )));
            }
            let block = k.left_action(&m);
            gram.view_mut((a * d2, cidx * d2), (d2, d2)).copy_from(&block);
        }
    }
    Ok(gram)
}

/// The canonical identification L²(M)⊗^M K ≅ K, (aφ^{1/2})φ^{-1/2}η ↦ aη.
pub fn left_unitor(sf: &StandardForm, rel: &RelativeTensor) -> BimoduleMap {
    let k = rel.right_factor();
    let (d1, d2) = (sf.dim(), k.dim());
    let mut images = CMat::zeros(d2, d1 * d2);
    for a in 0..d1 {
        let act = k.left_action(&sf.materialize_left(&linalg::unit_vector(d1, a)));
        images.view_mut((0, a * d2), (d2, d2)).copy_from(&act);
    }
    BimoduleMap::new(rel.space().clone(), k.clone(), images * &rel.frame_pinv)
}

/// The canonical identification H⊗^M L²(M) ≅ H, ξφ^{-1/2}η ↦ π_φ(ξ)η.
pub fn right_unitor(sf: &StandardForm, rel: &RelativeTensor) -> BimoduleMap {
    let h = rel.left_factor();
    let (d1, d2) = (h.dim(), sf.dim());
    let mut images = CMat::zeros(d1, d1 * d2);
    for a in 0..d1 {
        let pi = sf.pi_phi(h, &linalg::unit_vector(d1, a));
        for b in 0..d2 {
            images.set_column(a * d2 + b, &pi.column(b));
        }
    }
    BimoduleMap::new(rel.space().clone(), h.clone(), images * &rel.frame_pinv)
}

/// π_φ(x₁⊗y₁φ^{1/2})*π_φ(x₂⊗y₂φ^{1/2}) against y₁*T(x₁*x₂)y₂ on L²(M).
pub fn check_prop_formula(
    sf: &StandardForm,
    gns: &GnsTensor,
    x1: &Element,
    y1: &Element,
    x2: &Element,
    y2: &Element,
) -> f64 {
    let space = gns.space();
    let p1 = sf.pi_phi(space, &gns.elementary(sf, x1, y1));
    let p2 = sf.pi_phi(space, &gns.elementary(sf, x2, y2));
    let lhs = p1.adjoint() * p2;
    let rhs = sf.left_action(&(&(&y1.adjoint() * &gns.map().apply(&(&x1.adjoint() * x2))) * y2));
    linalg::frob(&(lhs - rhs))
}

/// Fits a linear map from sample pairs (source vector, target vector); the
/// samples must span the source. Returns the matrix and the relative residual.
pub fn fit_from_samples(src_dim: usize, tgt_dim: usize, samples: &[(CVec, CVec)]) -> Result<(CMat, f64)> {
    let mut s = CMat::zeros(src_dim, samples.len());
    let mut t = CMat::zeros(tgt_dim, samples.len());
    let norms: Vec<f64> = samples.iter().map(|(a, b)| linalg::vnorm(a).max(linalg::vnorm(b))).collect();
    let floor = 1e-3 * norms.iter().copied().fold(0.0, f64::max);
    for (j, (a, b)) in samples.iter().enumerate() {
        // pairs are scaled jointly so vanishing tensors are not amplified
        let scale = 1.0 / norms[j].max(floor).max(1e-300);
        s.set_column(j, &(a * c(scale, 0.0)));
        t.set_column(j, &(b * c(scale, 0.0)));
    }
    let rk = linalg::rank(&s, 1e-10);
    if rk < src_dim {
        return Err(Error::Consistency(format!(
            "sampled elementary tensors span {rk} of {src_dim} dimensions"
        )));
    }
    Ok(linalg::fit_linear(&s, &t))
}
