//! Power-amplifier bank: generalized memory polynomial (GMP) dynamics,
//! hard magnitude clipping at saturation and additive measurement noise,
//! plus the ideal linear-clipping reference amplifier and the output-power
//! meter.
//!
//! The GMP maps an input `u` to
//!
//! ```text
//! y_n = Σ_{k<K} Σ_{l≤L} a_{k,l} u_{n-l}|u_{n-l}|^k
//!     + Σ_{1≤k<K} Σ_{l≤L} Σ_{1≤g≤G} b_{k,l,g} u_{n-l}|u_{n-l-g}|^k
//!                                  + c_{k,l,g} u_{n-l}|u_{n-l+g}|^k
//! ```
//!
//! with all sample indices taken modulo the block length, i.e. one OFDM
//! symbol is treated as a periodic block.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{gaussian, CMat, PrngStream, C64};

/// Shipped base coefficient set (K=7, L=3, G=1). Regenerate with
/// `cargo run -p mumimo-dpd --example fit_base_pa`.
pub const BASE_PA_TABLE: &str = include_str!("../data/pa_gmp_base.txt");

/// Saturation (clip) level of the modelled amplifiers, in volts.
pub const DEFAULT_V_SAT: f64 = 24.02;
/// Standard deviation of the amplifier measurement noise, in volts.
pub const DEFAULT_SIGMA_MEAS: f64 = 0.053;
/// Variance of the relative per-antenna coefficient spread.
pub const DEFAULT_SPREAD_VARIANCE: f64 = 0.01;

/// GMP coefficient set with nonlinear order `K`, memory `L` and cross-term
/// length `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmpSpec {
    order: usize,
    memory: usize,
    cross: usize,
    a: Vec<C64>,
    b: Vec<C64>,
    c: Vec<C64>,
}

/// Which of the three GMP term families a coefficient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    /// Aligned envelope, `u_{n-l}|u_{n-l}|^k`.
    A,
    /// Lagging envelope, `u_{n-l}|u_{n-l-g}|^k`.
    B,
    /// Leading envelope, `u_{n-l}|u_{n-l+g}|^k`.
    C,
}

impl GmpSpec {
    pub fn zeros(order: usize, memory: usize, cross: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("GMP order K must be >= 1".into()));
        }
        let cross_len = (order - 1) * (memory + 1) * cross;
        Ok(Self {
            order,
            memory,
            cross,
            a: vec![C64::new(0.0, 0.0); order * (memory + 1)],
            b: vec![C64::new(0.0, 0.0); cross_len],
            c: vec![C64::new(0.0, 0.0); cross_len],
        })
    }

    /// The passthrough model: `a_{0,0} = 1`, everything else zero.
    pub fn identity(order: usize, memory: usize, cross: usize) -> Result<Self> {
        let mut s = Self::zeros(order, memory, cross)?;
        s.a[0] = C64::new(1.0, 0.0);
        Ok(s)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn cross(&self) -> usize {
        self.cross
    }

    /// `(K, L, G)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.order, self.memory, self.cross)
    }

    /// Number of complex coefficients, `K(L+1) + 2(K-1)(L+1)G`.
    pub fn num_coeffs(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len()
    }

    fn a_index(&self, k: usize, l: usize) -> usize {
        k * (self.memory + 1) + l
    }

    fn bc_index(&self, k: usize, l: usize, g: usize) -> usize {
        ((k - 1) * (self.memory + 1) + l) * self.cross + (g - 1)
    }

    pub fn a(&self, k: usize, l: usize) -> C64 {
        self.a[self.a_index(k, l)]
    }

    pub fn b(&self, k: usize, l: usize, g: usize) -> C64 {
        self.b[self.bc_index(k, l, g)]
    }

    pub fn c(&self, k: usize, l: usize, g: usize) -> C64 {
        self.c[self.bc_index(k, l, g)]
    }

    fn check_term(&self, term: Term, k: usize, l: usize, g: usize) -> Result<usize> {
        let ok = l <= self.memory
            && match term {
                Term::A => k < self.order && g == 0,
                Term::B | Term::C => k >= 1 && k < self.order && g >= 1 && g <= self.cross,
            };
        if !ok {
            return Err(Error::Dimension(format!(
                "term {term:?} (k={k}, l={l}, g={g}) outside K={} L={} G={}",
                self.order, self.memory, self.cross
            )));
        }
        Ok(match term {
            Term::A => self.a_index(k, l),
            _ => self.bc_index(k, l, g),
        })
    }

    pub fn set(&mut self, term: Term, k: usize, l: usize, g: usize, v: C64) -> Result<()> {
        let i = self.check_term(term, k, l, g)?;
        match term {
            Term::A => self.a[i] = v,
            Term::B => self.b[i] = v,
            Term::C => self.c[i] = v,
        }
        Ok(())
    }

    /// All coefficients in basis-column order: `a`, then `b`, then `c`.
    pub fn coeffs(&self) -> Vec<C64> {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .copied()
            .collect()
    }

    pub fn from_coeffs(order: usize, memory: usize, cross: usize, coeffs: &[C64]) -> Result<Self> {
        let mut s = Self::zeros(order, memory, cross)?;
        if coeffs.len() != s.num_coeffs() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a GMP with {}",
                coeffs.len(),
                s.num_coeffs()
            )));
        }
        let (na, nb) = (s.a.len(), s.b.len());
        s.a.copy_from_slice(&coeffs[..na]);
        s.b.copy_from_slice(&coeffs[na..na + nb]);
        s.c.copy_from_slice(&coeffs[na + nb..]);
        Ok(s)
    }

    /// Iterates `(term, k, l, g, value)` in basis-column order.
    pub fn terms(&self) -> impl Iterator<Item = (Term, usize, usize, usize, C64)> + '_ {
        let (kk, ll, gg) = self.shape();
        let a = (0..kk).flat_map(move |k| (0..=ll).map(move |l| (Term::A, k, l, 0)));
        let bc = move |t: Term| {
            (1..kk).flat_map(move |k| {
                (0..=ll).flat_map(move |l| (1..=gg).map(move |g| (t, k, l, g)))
            })
        };
        a.chain(bc(Term::B))
            .chain(bc(Term::C))
            .map(move |(t, k, l, g)| {
                let v = match t {
                    Term::A => self.a(k, l),
                    Term::B => self.b(k, l, g),
                    Term::C => self.c(k, l, g),
                };
                (t, k, l, g, v)
            })
    }

    /// Multiplies every coefficient by `s`.
    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        for v in out.a.iter_mut().chain(&mut out.b).chain(&mut out.c) {
            *v *= s;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs().iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Small-signal (DC) gain `Σ_l a_{0,l}`.
    pub fn dc_gain(&self) -> C64 {
        (0..=self.memory).map(|l| self.a(0, l)).sum()
    }

    /// Text table: one `term k l g re im` line per coefficient.
    pub fn to_table(&self, comment: &str) -> String {
        let mut out = String::new();
        for line in comment.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "# term k l g re im");
        for (t, k, l, g, v) in self.terms() {
            let name = match t {
                Term::A => 'a',
                Term::B => 'b',
                Term::C => 'c',
            };
            let _ = writeln!(out, "{name} {k} {l} {g} {:e} {:e}", v.re, v.im);
        }
        out
    }

    /// Parses [`GmpSpec::to_table`] output. The orders are inferred from the
    /// largest indices present and every coefficient must appear once.
    pub fn parse_table(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(perr(format!("expected 6 fields, found {}", f.len())));
            }
            let term = match f[0] {
                "a" => Term::A,
                "b" => Term::B,
                "c" => Term::C,
                other => return Err(perr(format!("unknown term type {other:?}"))),
            };
            let int = |s: &str| s.parse::<usize>().map_err(|e| perr(format!("{s:?}: {e}")));
            let float = |s: &str| s.parse::<f64>().map_err(|e| perr(format!("{s:?}: {e}")));
            let (k, l, g) = (int(f[1])?, int(f[2])?, int(f[3])?);
            let v = C64::new(float(f[4])?, float(f[5])?);
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(perr("non-finite coefficient".into()));
            }
            rows.push((i + 1, term, k, l, g, v));
        }
        let order = rows.iter().map(|r| r.2).max().map_or(0, |k| k + 1);
        let memory = rows.iter().map(|r| r.3).max().unwrap_or(0);
        let cross = rows.iter().map(|r| r.4).max().unwrap_or(0);
        let mut spec = Self::zeros(order, memory, cross).map_err(|_| Error::Parse {
            line: 0,
            msg: "empty coefficient table".into(),
        })?;
        let mut seen = vec![false; spec.num_coeffs()];
        let na = spec.a.len();
        let nb = spec.b.len();
        for (line, term, k, l, g, v) in rows {
            let idx = spec
                .check_term(term, k, l, g)
                .map_err(|e| Error::Parse {
                    line,
                    msg: e.to_string(),
                })?;
            let flat = match term {
                Term::A => idx,
                Term::B => na + idx,
                Term::C => na + nb + idx,
            };
            if std::mem::replace(&mut seen[flat], true) {
                return Err(Error::Parse {
                    line,
                    msg: "duplicate coefficient".into(),
                });
            }
            spec.set(term, k, l, g, v)?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("coefficient #{missing} missing from table"),
            });
        }
        Ok(spec)
    }

    /// The shipped base amplifier model.
    pub fn shipped_base() -> Self {
        Self::parse_table(BASE_PA_TABLE).expect("shipped coefficient table is valid")
    }
}

/// Git-style content hash (`sha256("blob <len>\0" ‖ content)`) of a file.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// `|u_n|^k` for `k < order`, row-major `N×order`.
fn envelope_powers(u: &[C64], order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * order);
    for v in u {
        let r = v.norm();
        let mut p = 1.0;
        for _ in 0..order {
            out.push(p);
            p *= r;
        }
    }
    out
}

/// Regression matrix of the GMP: column `i` is the basis function whose
/// coefficient is `spec.coeffs()[i]`, so `gmp_basis(u)·coeffs = gmp_eval(u)`.
pub fn gmp_basis(u: &[C64], order: usize, memory: usize, cross: usize) -> Result<CMat> {
    let shape = GmpSpec::zeros(order, memory, cross)?;
    let n = u.len();
    let p = shape.num_coeffs();
    let mut m = CMat::zeros(n, p);
    if n == 0 {
        return Ok(m);
    }
    let pow = envelope_powers(u, order);
    for row in 0..n {
        let dst = m.row_mut(row);
        for (col, (t, k, l, g, _)) in shape.terms().enumerate() {
            let idx = wrap(row as isize - l as isize, n);
            let env = match t {
                Term::A => idx,
                Term::B => wrap(idx as isize - g as isize, n),
                Term::C => wrap(idx as isize + g as isize, n),
            };
            dst[col] = u[idx] * pow[env * order + k];
        }
    }
    Ok(m)
}

/// Direct GMP evaluation over one periodic block.
pub fn gmp_eval(u: &[C64], spec: &GmpSpec) -> Vec<C64> {
    let n = u.len();
    let (kk, ll, gg) = spec.shape();
    let pow = envelope_powers(u, kk);
    let env = |i: usize| &pow[i * kk..(i + 1) * kk];
    let mut out = vec![C64::new(0.0, 0.0); n];
    for (m, o) in out.iter_mut().enumerate() {
        let mut acc = C64::new(0.0, 0.0);
        for l in 0..=ll {
            let idx = wrap(m as isize - l as isize, n);
            let mut gain: C64 = (0..kk).map(|k| spec.a(k, l) * env(idx)[k]).sum();
            for g in 1..=gg {
                let lag = env(wrap(idx as isize - g as isize, n));
                let lead = env(wrap(idx as isize + g as isize, n));
                for k in 1..kk {
                    gain += spec.b(k, l, g) * lag[k] + spec.c(k, l, g) * lead[k];
                }
            }
            acc += u[idx] * gain;
        }
        *o = acc;
    }
    out
}

/// Reverse-mode adjoint of [`gmp_eval`] with respect to its input.
///
/// Gradients are carried as `∂L/∂Re + j∂L/∂Im`. For a basis term
/// `p·|q|^k` the input `p` receives `g·conj(c|q|^k)` and the envelope
/// sample `q` receives `k|q|^{k-2} q·Re(conj(g)·c·p)`; the `k = 1` envelope
/// derivative is taken as zero at `q = 0`.
pub fn gmp_backward(u: &[C64], spec: &GmpSpec, grad_out: &[C64]) -> Vec<C64> {
    let n = u.len();
    let (kk, ll, gg) = spec.shape();
    let pow = envelope_powers(u, kk);
    // k|u|^{k-2}
    let dpow: Vec<f64> = u
        .iter()
        .flat_map(|v| {
            let r = v.norm();
            (0..kk).map(move |k| match k {
                0 => 0.0,
                1 if r == 0.0 => 0.0,
                _ => k as f64 * r.powi(k as i32 - 2),
            })
        })
        .collect();
    let mut grad = vec![C64::new(0.0, 0.0); n];
    for (m, &w) in grad_out.iter().enumerate() {
        if w == C64::new(0.0, 0.0) {
            continue;
        }
        for l in 0..=ll {
            let idx = wrap(m as isize - l as isize, n);
            let p = u[idx];
            let wp = w.conj() * p;

            let mut gain = C64::new(0.0, 0.0);
            let mut dgain = C64::new(0.0, 0.0);
            for k in 0..kk {
                let a = spec.a(k, l);
                gain += a * pow[idx * kk + k];
                dgain += a * dpow[idx * kk + k];
            }
            grad[idx] += p * (wp * dgain).re;

            for g in 1..=gg {
                for (sign, is_lag) in [(-1isize, true), (1isize, false)] {
                    let e = wrap(idx as isize + sign * g as isize, n);
                    let mut eg = C64::new(0.0, 0.0);
                    let mut deg = C64::new(0.0, 0.0);
                    for k in 1..kk {
                        let coef = if is_lag {
                            spec.b(k, l, g)
                        } else {
                            spec.c(k, l, g)
                        };
                        eg += coef * pow[e * kk + k];
                        deg += coef * dpow[e * kk + k];
                    }
                    gain += eg;
                    grad[e] += u[e] * (wp * deg).re;
                }
            }
            grad[idx] += w * gain.conj();
        }
    }
    grad
}

/// Hard magnitude limit at `v_sat`, phase preserved.
#[inline]
pub fn clip(v: C64, v_sat: f64) -> C64 {
    let r = v.norm();
    if r > v_sat {
        v * (v_sat / r)
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PaMode {
    /// GMP dynamics, then clip, then measurement noise.
    Gmp,
    /// Ideal reference: `gain·u` clipped at saturation, noiseless.
    LinearClip { gain: f64 },
}

/// One amplifier of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PaUnit {
    pub gmp: GmpSpec,
    pub v_sat: f64,
    pub sigma_meas: f64,
    pub mode: PaMode,
}

impl PaUnit {
    pub fn new(gmp: GmpSpec, v_sat: f64, sigma_meas: f64) -> Result<Self> {
        if !(v_sat > 0.0) || !(sigma_meas >= 0.0) {
            return Err(Error::Config(format!(
                "need v_sat > 0 and sigma_meas >= 0, got {v_sat}, {sigma_meas}"
            )));
        }
        if !gmp.is_finite() {
            return Err(Error::Input("non-finite PA coefficient".into()));
        }
        Ok(Self {
            gmp,
            v_sat,
            sigma_meas,
            mode: PaMode::Gmp,
        })
    }

    pub fn linear_clip(gain: f64, v_sat: f64) -> Self {
        Self {
            gmp: GmpSpec::identity(1, 0, 0).expect("order 1"),
            v_sat,
            sigma_meas: 0.0,
            mode: PaMode::LinearClip { gain },
        }
    }

    /// Output before clipping and noise.
    pub fn pre_clip(&self, u: &[C64]) -> Vec<C64> {
        match self.mode {
            PaMode::Gmp => gmp_eval(u, &self.gmp),
            PaMode::LinearClip { gain } => u.iter().map(|v| v * gain).collect(),
        }
    }

    /// Noise standard deviation actually applied in this mode.
    pub fn noise_std(&self) -> f64 {
        match self.mode {
            PaMode::Gmp => self.sigma_meas,
            PaMode::LinearClip { .. } => 0.0,
        }
    }
}

/// Amplifies one block. Noise, when the unit has any, is drawn from `noise`.
pub fn pa_forward(u: &[C64], pa: &PaUnit, noise: &mut PrngStream) -> Vec<C64> {
    let mut out: Vec<C64> = pa
        .pre_clip(u)
        .into_iter()
        .map(|v| clip(v, pa.v_sat))
        .collect();
    let sigma = pa.noise_std();
    if sigma > 0.0 {
        for (o, w) in out.iter_mut().zip(gaussian(noise, u.len(), sigma * sigma)) {
            *o += w;
        }
    }
    out
}

/// Draws `count` amplifiers whose coefficients are each scaled by an
/// independent `1 + δ`, `δ ~ N(0, rel_variance)`. Draw order is antenna
/// major, then coefficient order of [`GmpSpec::coeffs`].
pub fn perturb_bank(
    base: &GmpSpec,
    count: usize,
    v_sat: f64,
    sigma_meas: f64,
    rel_variance: f64,
    stream: &mut PrngStream,
) -> Result<Vec<PaUnit>> {
    if count == 0 {
        return Err(Error::Config("PA bank needs at least one amplifier".into()));
    }
    if !(rel_variance >= 0.0) {
        return Err(Error::Config(format!(
            "perturbation variance {rel_variance} must be >= 0"
        )));
    }
    let sd = rel_variance.sqrt();
    let (k, l, g) = base.shape();
    (0..count)
        .map(|_| {
            let coeffs: Vec<C64> = base
                .coeffs()
                .into_iter()
                .map(|c| c * (1.0 + sd * stream.normal()))
                .collect();
            PaUnit::new(GmpSpec::from_coeffs(k, l, g, &coeffs)?, v_sat, sigma_meas)
        })
        .collect()
}

/// The `B` amplifiers of the base station.
#[derive(Debug, Clone, PartialEq)]
pub struct PaBank {
    pub units: Vec<PaUnit>,
    /// Small-signal gain shared by the bank, used for the ideal reference.
    pub nominal_gain: f64,
}

impl PaBank {
    pub fn new(units: Vec<PaUnit>, nominal_gain: f64) -> Self {
        Self {
            units,
            nominal_gain,
        }
    }

    /// Identical ideal linear-clipping amplifiers.
    pub fn ideal(count: usize, v_sat: f64, gain: f64) -> Self {
        Self {
            units: vec![PaUnit::linear_clip(gain, v_sat); count],
            nominal_gain: gain,
        }
    }

    /// The ideal counterpart of this bank.
    pub fn to_ideal(&self) -> Self {
        let v_sat = self.units.first().map_or(DEFAULT_V_SAT, |u| u.v_sat);
        Self::ideal(self.units.len(), v_sat, self.nominal_gain)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Amplifies a `B×N` block antenna by antenna.
    pub fn forward(&self, x: &CMat, noise: &mut PrngStream) -> Result<CMat> {
        if x.rows() != self.units.len() {
            return Err(Error::Dimension(format!(
                "{} antenna signals for {} amplifiers",
                x.rows(),
                self.units.len()
            )));
        }
        let mut out = CMat::zeros(x.rows(), x.cols());
        for (b, pa) in self.units.iter().enumerate() {
            out.row_mut(b)
                .copy_from_slice(&pa_forward(x.row(b), pa, noise));
        }
        Ok(out)
    }
}

/// Running mean of `|x|²` for the output-power meter.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PowerMeter {
    pub sum_sq: f64,
    pub count: u64,
}

impl PowerMeter {
    pub fn add(&mut self, x: &[C64]) {
        self.sum_sq += x.iter().map(|v| v.norm_sqr()).sum::<f64>();
        self.count += x.len() as u64;
    }

    pub fn merge(&mut self, other: &PowerMeter) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn mean_sq(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_sq / self.count as f64)
    }

    /// Average output power in dBm; `-inf` for a silent output.
    pub fn dbm(&self) -> Result<f64> {
        self.mean_sq()
            .map(mean_sq_to_dbm)
            .ok_or_else(|| Error::Input("no PA output samples".into()))
    }
}

/// Power of a complex envelope with mean `|x|²` (peak-volt convention)
/// into a 50 Ω load, in dBm.
pub fn mean_sq_to_dbm(mean_sq: f64) -> f64 {
    if mean_sq <= 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (mean_sq / 2.0 / 50.0 / 1e-3).log10()
}

/// Inverse of [`mean_sq_to_dbm`].
pub fn dbm_to_mean_sq(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3 * 2.0 * 50.0
}

/// Average output power over all samples of all antennas, in dBm.
pub fn measure_ppa(outputs: &CMat) -> Result<f64> {
    let mut m = PowerMeter::default();
    m.add(outputs.as_slice());
    m.dbm()
}
