//! Exact FLOP counts per UE and OFDM symbol for the three predistortion
//! schemes.
//!
//! All arithmetic is done in exact rationals: the per-UE totals divide by
//! `U`, and the FD-CNN terms use `⌈√N_d⌉/K_S`, so results need not be
//! integers. Where the published reference curve has a point for the same
//! parameters, the report carries it alongside the formula value so the
//! difference is visible rather than reconciled.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::dpd_fd::ceil_sqrt;
use crate::error::{Error, Result};

/// Exact non-negative rational FLOP count.
pub type Flops = Ratio<u128>;

fn int(v: usize) -> Flops {
    Flops::from_integer(v as u128)
}

fn log2_exact(n: usize) -> Result<u128> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("N = {n} must be a power of two")));
    }
    Ok(n.trailing_zeros() as u128)
}

/// Formats an exact count as an integer when it is one, else `p/q`.
pub fn format_flops(v: &Flops) -> String {
    if v.is_integer() {
        v.to_integer().to_string()
    } else {
        format!("{}/{}", v.numer(), v.denom())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TdGmp,
    FdNn,
    FdCnn,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::TdGmp, Scheme::FdNn, Scheme::FdCnn];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::TdGmp => "td_gmp",
            Scheme::FdNn => "fd_nn",
            Scheme::FdCnn => "fd_cnn",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of all three calculators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopParams {
    /// IDFT size `N`.
    pub n: usize,
    /// Data subcarriers `N_d`; the guards number `N − N_d`.
    pub n_data: usize,
    /// GMP nonlinearity order `K`.
    pub gmp_order: usize,
    /// GMP memory depth `L₃`.
    pub gmp_memory: usize,
    /// GMP lag/lead cross terms `G`.
    pub gmp_cross: usize,
    /// FD-NN tapped memory (the single `L_mem` knob of the NN term).
    pub nn_memory: usize,
    /// FD-NN width `D`.
    pub nn_width: usize,
    /// FD-NN hidden layers `K^NN`.
    pub nn_hidden: usize,
    /// FD-CNN streams `L_U`.
    pub cnn_streams: usize,
    /// FD-CNN kernel side `K_C`.
    pub cnn_kernel: usize,
    /// FD-CNN stride `K_S`.
    pub cnn_stride: usize,
    /// FD-CNN kernels `N^Conv`.
    pub cnn_kernels: usize,
}

impl Default for FlopParams {
    /// The 4096-subcarrier configuration of the reference comparison.
    fn default() -> Self {
        Self {
            n: 4096,
            n_data: 384,
            gmp_order: 7,
            gmp_memory: 3,
            gmp_cross: 1,
            nn_memory: 3,
            nn_width: 15,
            nn_hidden: 1,
            cnn_streams: 1,
            cnn_kernel: 3,
            cnn_stride: 1,
            cnn_kernels: 2,
        }
    }
}

impl FlopParams {
    pub fn n_guard(&self) -> usize {
        self.n - self.n_data
    }

    pub fn validate(&self) -> Result<()> {
        log2_exact(self.n)?;
        if self.n_data == 0 || self.n_data > self.n {
            return Err(Error::Config(format!(
                "n_data = {} must lie in 1..=n",
                self.n_data
            )));
        }
        if self.cnn_streams == 0 || self.cnn_kernel == 0 || self.cnn_stride == 0 || self.cnn_kernels == 0 {
            return Err(Error::Config("FD-CNN sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// One calculator evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub scheme: Scheme,
    pub bs_antennas: usize,
    pub users: usize,
    /// Per-sample count (TD-GMP only).
    pub per_sample: Option<Flops>,
    /// Named partial sums, in evaluation order.
    pub parts: Vec<(&'static str, Flops)>,
    /// FLOPs per UE per OFDM symbol.
    pub total: Flops,
    /// Value of the published reference curve at this point, if any.
    pub reference: Option<u128>,
}

impl FlopReport {
    /// `total − reference` as a signed exact value.
    pub fn delta(&self) -> Option<Ratio<i128>> {
        self.reference.map(|r| signed_delta(&self.total, r))
    }
}

fn signed_delta(total: &Flops, reference: u128) -> Ratio<i128> {
    Ratio::new(*total.numer() as i128, *total.denom() as i128) - Ratio::from_integer(reference as i128)
}

fn format_delta(d: &Ratio<i128>) -> String {
    if d.is_integer() {
        d.to_integer().to_string()
    } else {
        format!("{}/{}", d.numer(), d.denom())
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} B={} U={}: {}",
            self.scheme,
            self.bs_antennas,
            self.users,
            format_flops(&self.total)
        )?;
        if let Some(s) = &self.per_sample {
            write!(f, " ({} per sample)", format_flops(s))?;
        }
        for (name, v) in &self.parts {
            write!(f, " {name}={}", format_flops(v))?;
        }
        if let (Some(r), Some(d)) = (self.reference, self.delta()) {
            write!(f, " [reference {r}, delta {}]", format_delta(&d))?;
        }
        Ok(())
    }
}

/// GMP FLOPs per input sample:
/// `8((L+1)(K+2KG) − G(G+1)(K−1)/2) + 10 + 2K + 2(K−1)G + 2K·min(G, L)`.
pub fn gmp_flops_per_sample(order: usize, memory: usize, cross: usize) -> Flops {
    let (k, l, g) = (order as u128, memory as u128, cross as u128);
    // G(G+1) is even, so the halving is exact. For very large G the printed
    // expression can go negative; such counts are clamped to zero.
    let bracket = ((l + 1) * (k + 2 * k * g)) as i128 - (g * (g + 1) / 2 * k.saturating_sub(1)) as i128;
    let rest = 10 + 2 * k + 2 * k.saturating_sub(1) * g + 2 * k * g.min(l);
    let total = 8 * bracket + rest as i128;
    Flops::from_integer(total.max(0) as u128)
}

/// TD-GMP per UE and symbol: `C_samp·N·B/U`.
pub fn flops_td_gmp(p: &FlopParams, bs_antennas: usize, users: usize) -> Result<FlopReport> {
    p.validate()?;
    check_bu(bs_antennas, users)?;
    let samp = gmp_flops_per_sample(p.gmp_order, p.gmp_memory, p.gmp_cross);
    let total = samp * int(p.n) * int(bs_antennas) / int(users);
    Ok(FlopReport {
        scheme: Scheme::TdGmp,
        bs_antennas,
        users,
        per_sample: Some(samp),
        parts: Vec::new(),
        total,
        reference: reference_point(Scheme::TdGmp, p, bs_antennas, users),
    })
}

/// FD-NN per UE and symbol:
/// `(N(4U(L+1)D + 2(K^NN−1)D² + 4DU) + 10UN·log₂N + 8N_g·U·B)/U`.
pub fn flops_fd_nn(p: &FlopParams, bs_antennas: usize, users: usize) -> Result<FlopReport> {
    p.validate()?;
    check_bu(bs_antennas, users)?;
    let (n, u, b) = (p.n as u128, users as u128, bs_antennas as u128);
    let (l, d, knn) = (p.nn_memory as u128, p.nn_width as u128, p.nn_hidden as u128);
    let nn = n * (4 * u * (l + 1) * d + 2 * knn.saturating_sub(1) * d * d + 4 * d * u);
    let transforms = 10 * u * n * log2_exact(p.n)?;
    let precoding = 8 * p.n_guard() as u128 * u * b;
    let uu = Flops::from_integer(u);
    let parts = vec![
        ("nn", Flops::from_integer(nn) / uu),
        ("dft", Flops::from_integer(transforms) / uu),
        ("extra_precoding", Flops::from_integer(precoding) / uu),
    ];
    let total = parts.iter().map(|(_, v)| *v).sum();
    Ok(FlopReport {
        scheme: Scheme::FdNn,
        bs_antennas,
        users,
        per_sample: None,
        parts,
        total,
        reference: reference_point(Scheme::FdNn, p, bs_antennas, users),
    })
}

/// FD-CNN per UE and symbol, independent of `B` and `U`:
/// `C_conv = 2N^Conv·L_U(2K_C²−1)(⌈√N_d⌉/K_S)²`,
/// `C_FC = 8N_d·L_U(⌈√N_d⌉/K_S)²`.
pub fn flops_fd_cnn(p: &FlopParams, bs_antennas: usize, users: usize) -> Result<FlopReport> {
    p.validate()?;
    check_bu(bs_antennas, users)?;
    let side = Flops::new(ceil_sqrt(p.n_data) as u128, p.cnn_stride as u128);
    let area = side * side;
    let (nc, lu, kc) = (p.cnn_kernels as u128, p.cnn_streams as u128, p.cnn_kernel as u128);
    let conv = Flops::from_integer(2 * nc * lu * (2 * kc * kc - 1)) * area;
    let fc = Flops::from_integer(8 * p.n_data as u128 * lu) * area;
    Ok(FlopReport {
        scheme: Scheme::FdCnn,
        bs_antennas,
        users,
        per_sample: None,
        parts: vec![("conv", conv), ("fc", fc)],
        total: conv + fc,
        reference: reference_point(Scheme::FdCnn, p, bs_antennas, users),
    })
}

fn check_bu(b: usize, u: usize) -> Result<()> {
    if u == 0 {
        return Err(Error::Config("U must be >= 1".into()));
    }
    if b == 0 {
        return Err(Error::Config("B must be >= 1".into()));
    }
    Ok(())
}

pub fn flops(scheme: Scheme, p: &FlopParams, bs_antennas: usize, users: usize) -> Result<FlopReport> {
    match scheme {
        Scheme::TdGmp => flops_td_gmp(p, bs_antennas, users),
        Scheme::FdNn => flops_fd_nn(p, bs_antennas, users),
        Scheme::FdCnn => flops_fd_cnn(p, bs_antennas, users),
    }
}

/// Published reference curve: `B` values.
pub const REFERENCE_B: [usize; 11] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];
/// Published TD-GMP curve for `U = 1` (the `U = 4, 8` curves are this
/// divided by `U`).
pub const REFERENCE_TD_GMP_U1: [u128; 11] = [
    2_695_168,
    5_390_336,
    10_780_672,
    21_561_344,
    43_122_688,
    86_245_376,
    172_490_752,
    344_981_504,
    689_963_008,
    1_379_926_016,
    2_759_852_032,
];
/// Published FD-NN curve (identical for `U ∈ {1, 4, 8}`).
pub const REFERENCE_FD_NN: [u128; 11] = [
    1_750_016,
    1_779_712,
    1_839_104,
    1_957_888,
    2_195_456,
    2_670_592,
    3_620_864,
    5_521_408,
    9_322_496,
    16_924_672,
    32_129_024,
];
/// Published FD-CNN value, constant over `B` and `U`.
pub const REFERENCE_FD_CNN: u128 = 1_205_760;

/// Reference value for the default parameters at a plotted `(B, U)`.
pub fn reference_point(scheme: Scheme, p: &FlopParams, b: usize, u: usize) -> Option<u128> {
    let d = FlopParams::default();
    let idx = REFERENCE_B.iter().position(|&x| x == b)?;
    if ![1, 4, 8].contains(&u) {
        return None;
    }
    match scheme {
        Scheme::TdGmp if p.n == d.n && (p.gmp_order, p.gmp_memory, p.gmp_cross) == (7, 3, 1) => {
            Some(REFERENCE_TD_GMP_U1[idx] / u as u128)
        }
        Scheme::FdNn
            if p.n == d.n
                && p.n_data == d.n_data
                && (p.nn_memory, p.nn_width, p.nn_hidden) == (d.nn_memory, d.nn_width, d.nn_hidden) =>
        {
            Some(REFERENCE_FD_NN[idx])
        }
        Scheme::FdCnn
            if p.n_data == d.n_data
                && (p.cnn_streams, p.cnn_kernel, p.cnn_stride, p.cnn_kernels)
                    == (d.cnn_streams, d.cnn_kernel, d.cnn_stride, d.cnn_kernels) =>
        {
            Some(REFERENCE_FD_CNN)
        }
        _ => None,
    }
}

/// Smallest `B` in `grid` where `a` needs strictly fewer FLOPs than `b`.
pub fn crossover(
    a: impl Fn(usize) -> Result<Flops>,
    b: impl Fn(usize) -> Result<Flops>,
    grid: impl IntoIterator<Item = usize>,
) -> Result<Option<usize>> {
    for bs in grid {
        if a(bs)? < b(bs)? {
            return Ok(Some(bs));
        }
    }
    Ok(None)
}

/// One row of a FLOP sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scheme: Scheme,
    pub bs_antennas: usize,
    pub users: usize,
    pub total: Flops,
    pub reference: Option<u128>,
}

/// Evaluates every scheme over `users × b_values`, in that nesting order.
pub fn flops_sweep(
    p: &FlopParams,
    schemes: &[Scheme],
    users: &[usize],
    b_values: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &scheme in schemes {
        for &u in users {
            for &b in b_values {
                let r = flops(scheme, p, b, u)?;
                rows.push(SweepRow {
                    scheme,
                    bs_antennas: b,
                    users: u,
                    total: r.total,
                    reference: r.reference,
                });
            }
        }
    }
    Ok(rows)
}

/// CSV with columns `scheme,B,U,flops_per_ue_per_symbol,reference,delta`;
/// the last two are empty where no published point exists.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("scheme,B,U,flops_per_ue_per_symbol,reference,delta\n");
    for r in rows {
        let (reference, delta) = match r.reference {
            Some(v) => (v.to_string(), format_delta(&signed_delta(&r.total, v))),
            None => (String::new(), String::new()),
        };
        s.push_str(&format!(
            "{},{},{},{},{reference},{delta}\n",
            r.scheme,
            r.bs_antennas,
            r.users,
            format_flops(&r.total)
        ));
    }
    s
}
