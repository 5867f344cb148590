//! Numerical kernels shared by every other module: a dense complex matrix,
//! the unitary DFT pair, complex least squares, zero-forcing pseudo-inverses
//! and reproducible random streams.

use std::cell::RefCell;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Dense row-major complex matrix with explicit dimensions.
#[derive(Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| {
            if r == c {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [C64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }

    pub fn matmul(&self, rhs: &CMat) -> Result<CMat> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let rhs_row = rhs.row(k);
                for (o, &b) in out.row_mut(r).iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a vector `x`.
    pub fn matvec(&self, x: &[C64]) -> Result<Vec<C64>> {
        if self.cols != x.len() {
            return Err(Error::Dimension(format!(
                "cannot apply {}x{} to a length-{} vector",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᴴ · y`.
    pub fn adjoint_matvec(&self, y: &[C64]) -> Result<Vec<C64>> {
        if self.rows != y.len() {
            return Err(Error::Dimension(format!(
                "cannot apply adjoint of {}x{} to a length-{} vector",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a.conj() * yr;
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: C64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Largest entry-wise modulus.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<C64>) -> CMat {
        CMat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

impl fmt::Debug for CMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

// ---------------------------------------------------------------------------
// Unitary DFT
// ---------------------------------------------------------------------------

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!(
            "transform length {n} is not a power of two"
        )));
    }
    Ok(())
}

fn transform_in_place(x: &mut [C64], inverse: bool) -> Result<()> {
    let n = x.len();
    check_pow2(n)?;
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    fft.process(x);
    let s = 1.0 / (n as f64).sqrt();
    for v in x.iter_mut() {
        *v *= s;
    }
    Ok(())
}

/// Unitary forward DFT in place: `X_k = N^{-1/2} Σ_n x_n e^{-j2πkn/N}`.
pub fn dft_in_place(x: &mut [C64]) -> Result<()> {
    transform_in_place(x, false)
}

/// Unitary inverse DFT in place.
pub fn idft_in_place(x: &mut [C64]) -> Result<()> {
    transform_in_place(x, true)
}

pub fn dft(x: &[C64]) -> Result<Vec<C64>> {
    let mut out = x.to_vec();
    dft_in_place(&mut out)?;
    Ok(out)
}

pub fn idft(x: &[C64]) -> Result<Vec<C64>> {
    let mut out = x.to_vec();
    idft_in_place(&mut out)?;
    Ok(out)
}

/// Applies the unitary DFT to every row.
pub fn dft_rows(m: &mut CMat) -> Result<()> {
    for r in 0..m.rows() {
        dft_in_place(m.row_mut(r))?;
    }
    Ok(())
}

/// Applies the unitary inverse DFT to every row.
pub fn idft_rows(m: &mut CMat) -> Result<()> {
    for r in 0..m.rows() {
        idft_in_place(m.row_mut(r))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Least squares and zero forcing
// ---------------------------------------------------------------------------

/// Solution of a least-squares problem together with the numerical rank
/// that was used to form it.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub coeffs: Vec<C64>,
    pub rank: usize,
    /// Ratio of largest to smallest retained singular value.
    pub condition: f64,
}

/// Minimum-norm solution of `min ‖A c − b‖₂` for a tall or square `A`.
///
/// Thin QR reduces the problem to the `p×p` factor, whose SVD gives the
/// pseudo-inverse; singular values below `max(m, p)·ε·σ_max` are dropped.
pub fn lstsq(a: &CMat, b: &[C64]) -> Result<LstsqSolution> {
    let (m, p) = a.shape();
    if b.len() != m {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, matrix has {m}",
            b.len()
        )));
    }
    if m < p {
        return Err(Error::Dimension(format!(
            "underdetermined system: {m} rows < {p} columns"
        )));
    }
    if !a.is_finite() || b.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Input("non-finite entry in least-squares system".into()));
    }
    if p == 0 {
        return Ok(LstsqSolution {
            coeffs: Vec::new(),
            rank: 0,
            condition: 1.0,
        });
    }

    let qr = a.to_nalgebra().qr();
    let q = qr.q();
    let r = qr.r();
    let rhs = q.adjoint() * nalgebra::DVector::from_column_slice(b);

    let svd = r.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = (m.max(p) as f64) * f64::EPSILON * sigma_max;
    let kept: Vec<f64> = svd
        .singular_values
        .iter()
        .copied()
        .filter(|&s| s > tol)
        .collect();
    let rank = kept.len();
    let condition = if rank == 0 {
        f64::INFINITY
    } else {
        sigma_max / kept.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let coeffs = if rank == 0 {
        vec![C64::new(0.0, 0.0); p]
    } else {
        svd.solve(&rhs, tol)
            .map_err(|e| Error::Input(format!("SVD solve failed: {e}")))?
            .iter()
            .copied()
            .collect()
    };
    Ok(LstsqSolution {
        coeffs,
        rank,
        condition,
    })
}

/// Condition-number ceiling on the channel Gram matrix.
pub const ZF_CONDITION_LIMIT: f64 = 1e10;

/// Right pseudo-inverse `Hᴴ(HHᴴ)⁻¹` of a wide `U×B` channel matrix.
pub fn zf_matrix(h: &CMat) -> Result<CMat> {
    let (u, b) = h.shape();
    if u > b {
        return Err(Error::Dimension(format!(
            "zero forcing needs U <= B, got {u}x{b}"
        )));
    }
    if !h.is_finite() {
        return Err(Error::Input("non-finite channel entry".into()));
    }
    let hn = h.to_nalgebra();
    let gram = &hn * hn.adjoint();
    let eig = gram.clone().symmetric_eigenvalues();
    let lmax = eig.max();
    let lmin = eig.min();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(condition <= ZF_CONDITION_LIMIT) {
        return Err(Error::DegenerateChannel { condition });
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::DegenerateChannel { condition })?;
    // (HHᴴ)⁻¹H, whose adjoint is the pseudo-inverse.
    let x = chol.solve(&hn);
    Ok(CMat::from_nalgebra(&x.adjoint()))
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// What a random stream is used for. The tag occupies the top byte of the
/// stream id, so streams of different purposes never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Channel = 1,
    Noise = 2,
    Symbols = 3,
    PaPerturbation = 4,
    Init = 5,
    PaNoise = 6,
    Probe = 7,
    Fit = 8,
}

const INDEX_MASK: u64 = (1 << 56) - 1;

/// Packs a purpose tag and a 56-bit index into a stream id.
pub fn stream_id(purpose: Purpose, index: u64) -> u64 {
    ((purpose as u64) << 56) | (index & INDEX_MASK)
}

/// Combines a 24-bit major and a 32-bit minor counter into one index.
pub fn pair_index(major: u64, minor: u64) -> u64 {
    ((major & 0xFF_FFFF) << 32) | (minor & 0xFFFF_FFFF)
}

/// A ChaCha20 keystream selected by `(master_seed, stream_id)`.
///
/// The master seed keys the cipher and the stream id selects the 64-bit
/// nonce, so every `(seed, id)` pair addresses an independent keystream
/// whose content does not depend on any other stream being consumed.
#[derive(Clone, Debug)]
pub struct PrngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl PrngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn for_purpose(master_seed: u64, purpose: Purpose, index: u64) -> Self {
        Self::new(master_seed, stream_id(purpose, index))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// One standard-normal real draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * unit
    }

    /// Uniform integer on `0..n`.
    pub fn below(&mut self, n: u32) -> u32 {
        rand::Rng::random_range(self, 0..n)
    }
}

impl RngCore for PrngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `n` i.i.d. circularly-symmetric complex Gaussian draws of total variance
/// `variance` (each real component carries half).
pub fn gaussian(stream: &mut PrngStream, n: usize, variance: f64) -> Vec<C64> {
    if variance == 0.0 {
        return vec![C64::new(0.0, 0.0); n];
    }
    let s = (variance / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re = stream.normal();
            let im = stream.normal();
            C64::new(s * re, s * im)
        })
        .collect()
}
