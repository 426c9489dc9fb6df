//! Finite-dimensional von Neumann algebras, faithful states and the standard form.
//!
//! An algebra is a direct sum of full matrix blocks. Elements are stored per
//! block; their coordinates are the row-major entries of the blocks laid end to
//! end, which is also the orthonormal matrix-unit basis of L²(M).

use std::ops::{Add, Mul, Sub};

use rand::Rng;

use crate::bimodule::Bimodule;
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, C64, ONE, ZERO};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Algebra {
    blocks: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
}

impl Algebra {
    pub fn new(blocks: &[usize]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("algebra needs at least one block".into()));
        }
        if blocks.contains(&0) {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for &n in blocks {
            offsets.push(dim);
            dim += n * n;
        }
        Ok(Self { blocks: blocks.to_vec(), offsets, dim })
    }

    /// The commutative algebra of functions on `m` points.
    pub fn diagonal(m: usize) -> Result<Self> {
        Self::new(&vec![1; m])
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Element dimension Σ n_i².
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_offset(&self, b: usize) -> usize {
        self.offsets[b]
    }

    pub fn index(&self, b: usize, i: usize, j: usize) -> usize {
        self.offsets[b] + i * self.blocks[b] + j
    }

    /// Block and matrix position of a basis coordinate.
    pub fn locate(&self, k: usize) -> (usize, usize, usize) {
        let b = self.offsets.iter().rposition(|&o| o <= k).expect("coordinate in range");
        let r = k - self.offsets[b];
        (b, r / self.blocks[b], r % self.blocks[b])
    }

    pub fn zero(&self) -> Element {
        Element { blocks: self.blocks.iter().map(|&n| CMat::zeros(n, n)).collect() }
    }

    pub fn identity(&self) -> Element {
        Element { blocks: self.blocks.iter().map(|&n| CMat::identity(n, n)).collect() }
    }

    /// Matrix unit with coordinate index `k`.
    pub fn basis(&self, k: usize) -> Element {
        let (b, i, j) = self.locate(k);
        let mut e = self.zero();
        e.blocks[b][(i, j)] = ONE;
        e
    }

    pub fn basis_elements(&self) -> Vec<Element> {
        (0..self.dim).map(|k| self.basis(k)).collect()
    }

    pub fn from_coords(&self, v: &CVec) -> Element {
        assert_eq!(v.len(), self.dim, "coordinate length");
        let blocks = self
            .blocks
            .iter()
            .zip(&self.offsets)
            .map(|(&n, &o)| CMat::from_fn(n, n, |i, j| v[o + i * n + j]))
            .collect();
        Element { blocks }
    }

    pub fn from_blocks(&self, blocks: Vec<CMat>) -> Result<Element> {
        if blocks.len() != self.blocks.len()
            || blocks.iter().zip(&self.blocks).any(|(m, &n)| m.shape() != (n, n))
        {
            return Err(Error::Config("element blocks do not match the algebra".into()));
        }
        Ok(Element { blocks })
    }

    /// Diagonal element of a commutative algebra from its point values.
    pub fn function(&self, values: &[C64]) -> Element {
        assert!(self.blocks.iter().all(|&n| n == 1) && values.len() == self.blocks.len());
        Element { blocks: values.iter().map(|&v| CMat::from_element(1, 1, v)).collect() }
    }

    pub fn random_element(&self, rng: &mut impl Rng) -> Element {
        Element { blocks: self.blocks.iter().map(|&n| linalg::random_matrix(n, n, rng)).collect() }
    }

    pub fn random_unitary(&self, rng: &mut impl Rng) -> Element {
        Element { blocks: self.blocks.iter().map(|&n| linalg::random_unitary(n, rng)).collect() }
    }

    pub fn random_hermitian(&self, rng: &mut impl Rng) -> Element {
        Element { blocks: self.blocks.iter().map(|&n| linalg::random_hermitian(n, rng)).collect() }
    }

    /// Matrix of y ↦ x·y on coordinates.
    pub fn left_mult_matrix(&self, x: &Element) -> CMat {
        let parts: Vec<CMat> = x
            .blocks
            .iter()
            .map(|xb| xb.kronecker(&CMat::identity(xb.nrows(), xb.nrows())))
            .collect();
        linalg::block_diag(&parts)
    }

    /// Matrix of y ↦ y·x on coordinates.
    pub fn right_mult_matrix(&self, x: &Element) -> CMat {
        let parts: Vec<CMat> = x
            .blocks
            .iter()
            .map(|xb| CMat::identity(xb.nrows(), xb.nrows()).kronecker(&xb.transpose()))
            .collect();
        linalg::block_diag(&parts)
    }

    /// The block-diagonal matrix of an element inside M_N, N = Σ n_i.
    pub fn embed_full(&self, x: &Element) -> CMat {
        linalg::block_diag(&x.blocks)
    }

    pub fn full_size(&self) -> usize {
        self.blocks.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    blocks: Vec<CMat>,
}

impl Element {
    pub fn blocks(&self) -> &[CMat] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &CMat {
        &self.blocks[b]
    }

    pub fn coords(&self) -> CVec {
        let n: usize = self.blocks.iter().map(|b| b.len()).sum();
        let mut v = CVec::zeros(n);
        let mut k = 0;
        for b in &self.blocks {
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    v[k] = b[(i, j)];
                    k += 1;
                }
            }
        }
        v
    }

    pub fn adjoint(&self) -> Element {
        Element { blocks: self.blocks.iter().map(|b| b.adjoint()).collect() }
    }

    pub fn scale(&self, s: C64) -> Element {
        Element { blocks: self.blocks.iter().map(|b| b * s).collect() }
    }

    pub fn map_blocks(&self, f: impl Fn(&CMat) -> CMat) -> Element {
        Element { blocks: self.blocks.iter().map(f).collect() }
    }

    /// Operator norm: the largest block norm.
    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(linalg::op_norm).fold(0.0, f64::max)
    }

    pub fn frob(&self) -> f64 {
        self.blocks.iter().map(|b| linalg::frob(b).powi(2)).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> C64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    pub fn distance(&self, other: &Element) -> f64 {
        (self - other).frob()
    }
}

impl Add for &Element {
    type Output = Element;
    fn add(self, rhs: &Element) -> Element {
        Element { blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &Element {
    type Output = Element;
    fn sub(self, rhs: &Element) -> Element {
        Element { blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a - b).collect() }
    }
}

impl Mul for &Element {
    type Output = Element;
    fn mul(self, rhs: &Element) -> Element {
        Element { blocks: self.blocks.iter().zip(&rhs.blocks).map(|(a, b)| a * b).collect() }
    }
}

/// A faithful normal state given by its per-block density matrices.
#[derive(Clone, Debug)]
pub struct State {
    density: Element,
}

impl State {
    pub fn new(algebra: &Algebra, blocks: Vec<CMat>) -> Result<Self> {
        let density = algebra.from_blocks(blocks)?;
        for b in density.blocks() {
            if linalg::frob(&(b - b.adjoint())) > 1e-12 {
                return Err(Error::Config("density blocks must be Hermitian".into()));
            }
        }
        let tr = density.trace();
        if (tr - ONE).norm() > 1e-12 {
            return Err(Error::Config(format!("density trace is {tr}, expected 1")));
        }
        Ok(Self { density })
    }

    /// Diagonal densities listed block after block.
    pub fn from_diagonal(algebra: &Algebra, weights: &[f64]) -> Result<Self> {
        if weights.len() != algebra.full_size() {
            return Err(Error::Config(format!(
                "expected {} diagonal weights, got {}",
                algebra.full_size(),
                weights.len()
            )));
        }
        let mut it = weights.iter();
        let blocks = algebra
            .blocks()
            .iter()
            .map(|&n| {
                let d: Vec<C64> = (0..n).map(|_| c(*it.next().unwrap(), 0.0)).collect();
                CMat::from_diagonal(&CVec::from_vec(d))
            })
            .collect();
        Self::new(algebra, blocks)
    }

    /// Normalized trace of the full matrix algebra M_N restricted to the blocks.
    pub fn normalized_trace(algebra: &Algebra) -> Self {
        let n = algebra.full_size() as f64;
        let blocks = algebra.blocks().iter().map(|&k| CMat::identity(k, k) * c(1.0 / n, 0.0)).collect();
        Self { density: algebra.from_blocks(blocks).expect("shape") }
    }

    pub fn density(&self) -> &Element {
        &self.density
    }

    /// φ(xy) = φ(yx) for all x, y: each density block is a multiple of the identity.
    pub fn is_tracial(&self) -> bool {
        self.density.blocks().iter().all(|b| {
            let n = b.nrows();
            let s = b.trace() / c(n as f64, 0.0);
            linalg::frob(&(b - CMat::identity(n, n) * s)) <= 1e-12
        })
    }
}

/// L²(M) as block Hilbert–Schmidt space with cyclic vector φ^{1/2} = ρ^{1/2}.
#[derive(Clone, Debug)]
pub struct StandardForm {
    algebra: Algebra,
    state: State,
    rho_half: Element,
    rho_inv_half: Element,
    cyclic: CVec,
    left_inv_half: CMat,
}

impl StandardForm {
    pub fn new(algebra: &Algebra, state: &State) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max: f64 = 0.0;
        for b in state.density().blocks() {
            let (vals, _) = linalg::eigh(b);
            min = min.min(vals[0]);
            max = max.max(*vals.last().unwrap());
        }
        if !(min >= 1e-10 * max) || max <= 0.0 {
            return Err(Error::NotFaithful { min, max });
        }
        let rho_half = state.density().map_blocks(|b| linalg::hermitian_fn(b, f64::sqrt));
        let rho_inv_half = state.density().map_blocks(|b| linalg::hermitian_fn(b, |v| 1.0 / v.sqrt()));
        let cyclic = rho_half.coords();
        let left_inv_half = algebra.left_mult_matrix(&rho_inv_half);
        Ok(Self {
            algebra: algebra.clone(),
            state: state.clone(),
            rho_half,
            rho_inv_half,
            cyclic,
            left_inv_half,
        })
    }

    pub fn algebra(&self) -> &Algebra {
        &self.algebra
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn dim(&self) -> usize {
        self.algebra.dim()
    }

    /// φ^{1/2}.
    pub fn cyclic_vector(&self) -> &CVec {
        &self.cyclic
    }

    pub fn rho_half(&self) -> &Element {
        &self.rho_half
    }

    pub fn rho_inv_half(&self) -> &Element {
        &self.rho_inv_half
    }

    pub fn inner(&self, a: &CVec, b: &CVec) -> C64 {
        a.dotc(b)
    }

    pub fn left_action(&self, x: &Element) -> CMat {
        self.algebra.left_mult_matrix(x)
    }

    pub fn right_action(&self, y: &Element) -> CMat {
        self.algebra.right_mult_matrix(y)
    }

    /// xφ^{1/2}.
    pub fn x_phi(&self, x: &Element) -> CVec {
        (x * &self.rho_half).coords()
    }

    /// φ^{1/2}x.
    pub fn phi_x(&self, x: &Element) -> CVec {
        (&self.rho_half * x).coords()
    }

    /// The unique x with xφ^{1/2} = η.
    pub fn materialize_left(&self, eta: &CVec) -> Element {
        &self.algebra.from_coords(eta) * &self.rho_inv_half
    }

    /// The unique x with φ^{1/2}x = η.
    pub fn materialize_right(&self, eta: &CVec) -> Element {
        &self.rho_inv_half * &self.algebra.from_coords(eta)
    }

    /// φ(x) = tr(ρx).
    pub fn expect(&self, x: &Element) -> C64 {
        (self.state.density() * x).trace()
    }

    /// π_φ(ξ): the map φ^{1/2}x ↦ ξ·x from L²(M) into `h`.
    pub fn pi_phi(&self, h: &Bimodule, xi: &CVec) -> CMat {
        let d = self.dim();
        let mut cols = CMat::zeros(h.dim(), d);
        for k in 0..d {
            cols.set_column(k, &(&h.right()[k] * xi));
        }
        cols * &self.left_inv_half
    }

    /// Reads an operator on L²(M) commuting with the right action as left
    /// multiplication by an element; returns the element and the residual.
    pub fn element_of_left_operator(&self, p: &CMat) -> (Element, f64) {
        let m = self.materialize_left(&(p * &self.cyclic));
        let resid = linalg::frob(&(self.left_action(&m) - p));
        (m, resid)
    }

    pub fn zero_vector(&self) -> CVec {
        CVec::from_element(self.dim(), ZERO)
    }
}
