//! Massive MU-MIMO-OFDM downlink: QAM mapping, subcarrier allocation,
//! zero-forcing precoding, the circular multipath channel with imperfect
//! CSI, and symbol detection at the UEs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dft_rows, gaussian, idft_rows, zf_matrix, CMat, PrngStream, C64,
};

/// Scalar parameters of the downlink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// Subcarriers per OFDM symbol (IDFT size).
    pub n: usize,
    /// Modulated subcarriers; the rest are guards.
    pub n_data: usize,
    pub subcarrier_spacing_hz: f64,
    pub bs_antennas: usize,
    pub users: usize,
    /// Square QAM order.
    pub qam_order: usize,
    /// Channel taps per realization.
    pub taps: usize,
    /// CSI error weight η in [0, 1].
    pub csi_error: f64,
    /// Complex AWGN variance per received time sample.
    pub noise_var: f64,
    /// Average transmit power per data subcarrier.
    pub tx_power: f64,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LinkConfig {
    /// Small profile that keeps the full test suite at desk scale.
    pub fn desk() -> Self {
        Self {
            n: 512,
            n_data: 120,
            subcarrier_spacing_hz: 120e3,
            bs_antennas: 8,
            users: 2,
            qam_order: 64,
            taps: 4,
            csi_error: 0.001,
            noise_var: 0.05,
            tx_power: 10.0,
            seed: 1,
        }
    }

    /// The 32-antenna, 8-UE, 4096-subcarrier configuration. Long running.
    pub fn full_scale() -> Self {
        Self {
            n: 4096,
            n_data: 384,
            subcarrier_spacing_hz: 120e3,
            bs_antennas: 32,
            users: 8,
            qam_order: 256,
            taps: 10,
            csi_error: 0.001,
            noise_var: 1.0,
            tx_power: 10.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n == 0 || !self.n.is_power_of_two() {
            return fail(format!("n = {} must be a power of two", self.n));
        }
        if self.n_data == 0 || self.n_data >= self.n {
            return fail(format!(
                "n_data = {} must lie in 1..n (DC is never modulated)",
                self.n_data
            ));
        }
        if self.users == 0 || self.users > self.bs_antennas {
            return fail(format!(
                "need 1 <= users <= bs_antennas, got U={} B={}",
                self.users, self.bs_antennas
            ));
        }
        QamConstellation::new(self.qam_order)?;
        if self.taps == 0 || self.taps > self.n {
            return fail(format!("taps = {} must lie in 1..=n", self.taps));
        }
        if !(0.0..=1.0).contains(&self.csi_error) {
            return fail(format!("csi_error = {} outside [0, 1]", self.csi_error));
        }
        if !(self.noise_var >= 0.0) || !self.noise_var.is_finite() {
            return fail(format!("noise_var = {} must be >= 0", self.noise_var));
        }
        if !(self.tx_power > 0.0) || !self.tx_power.is_finite() {
            return fail(format!("tx_power = {} must be > 0", self.tx_power));
        }
        if !(self.subcarrier_spacing_hz > 0.0) {
            return fail("subcarrier_spacing_hz must be > 0".into());
        }
        Ok(())
    }

    pub fn n_guard(&self) -> usize {
        self.n - self.n_data
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.n as f64 * self.subcarrier_spacing_hz
    }

    pub fn symbol_rate_hz(&self) -> f64 {
        self.n_data as f64 * self.subcarrier_spacing_hz
    }

    pub fn oversampling(&self) -> f64 {
        self.n as f64 / self.n_data as f64
    }
}

// ---------------------------------------------------------------------------
// QAM
// ---------------------------------------------------------------------------

/// Square Gray-labelled QAM with unit average energy.
#[derive(Debug, Clone)]
pub struct QamConstellation {
    order: usize,
    side: usize,
    bits_per_axis: u32,
    /// Amplitude of one level step, `1/sqrt(2(M-1)/3)`.
    step: f64,
    points: Vec<C64>,
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

fn gray_inverse(mut g: usize) -> usize {
    let mut b = g;
    while g > 1 {
        g >>= 1;
        b ^= g;
    }
    b
}

impl QamConstellation {
    pub fn new(order: usize) -> Result<Self> {
        let bits = order.trailing_zeros();
        if order < 4 || !order.is_power_of_two() || bits % 2 != 0 {
            return Err(Error::Config(format!(
                "QAM order {order} is not a power of 4"
            )));
        }
        let bits_per_axis = bits / 2;
        let side = 1usize << bits_per_axis;
        let step = 1.0 / (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
        let mut q = Self {
            order,
            side,
            bits_per_axis,
            step,
            points: Vec::with_capacity(order),
        };
        q.points = (0..order).map(|label| q.point_of(label)).collect();
        Ok(q)
    }

    fn level_amplitude(&self, level: usize) -> f64 {
        (2.0 * level as f64 - (self.side as f64 - 1.0)) * self.step
    }

    fn point_of(&self, label: usize) -> C64 {
        let mask = self.side - 1;
        let i_level = gray_inverse(label >> self.bits_per_axis);
        let q_level = gray_inverse(label & mask);
        C64::new(self.level_amplitude(i_level), self.level_amplitude(q_level))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> u32 {
        2 * self.bits_per_axis
    }

    /// Points indexed by their bit label.
    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn point(&self, label: u32) -> C64 {
        self.points[label as usize]
    }

    /// Minimum distance between distinct points.
    pub fn min_distance(&self) -> f64 {
        2.0 * self.step
    }

    fn axis_level(&self, v: f64) -> usize {
        let idx = ((v / self.step + (self.side as f64 - 1.0)) / 2.0).round();
        idx.clamp(0.0, (self.side - 1) as f64) as usize
    }

    /// Nearest-point decision, returned as a label.
    pub fn detect(&self, y: C64) -> u32 {
        let i = gray(self.axis_level(y.re));
        let q = gray(self.axis_level(y.im));
        ((i << self.bits_per_axis) | q) as u32
    }
}

// ---------------------------------------------------------------------------
// Subcarrier allocation
// ---------------------------------------------------------------------------

/// Placement of the data subcarriers within `0..N`.
///
/// Data occupies `N_d/2` bins on each side of DC (DC excluded), listed in
/// ascending baseband frequency: negative bins `N-N_d/2 .. N-1` first, then
/// positive bins `1 ..= ⌈N_d/2⌉`. Consecutive list entries are therefore
/// adjacent in frequency apart from the DC gap.
#[derive(Debug, Clone)]
pub struct SubcarrierMap {
    n: usize,
    data: Vec<usize>,
    guard: Vec<usize>,
    position: Vec<Option<usize>>,
}

impl SubcarrierMap {
    pub fn new(n: usize, n_data: usize) -> Result<Self> {
        if n_data == 0 || n_data >= n {
            return Err(Error::Config(format!(
                "cannot place {n_data} data subcarriers in {n} bins"
            )));
        }
        let positive = n_data.div_ceil(2);
        let negative = n_data / 2;
        let data: Vec<usize> = (n - negative..n).chain(1..=positive).collect();
        let mut position = vec![None; n];
        for (i, &k) in data.iter().enumerate() {
            position[k] = Some(i);
        }
        let guard = (0..n).filter(|&k| position[k].is_none()).collect();
        Ok(Self {
            n,
            data,
            guard,
            position,
        })
    }

    pub fn for_config(cfg: &LinkConfig) -> Result<Self> {
        Self::new(cfg.n, cfg.n_data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn guard(&self) -> &[usize] {
        &self.guard
    }

    pub fn n_data(&self) -> usize {
        self.data.len()
    }

    /// Position of subcarrier `k` in the data list, if it carries data.
    pub fn data_position(&self, k: usize) -> Option<usize> {
        self.position[k]
    }

    /// Spreads a `rows×N_d` data grid onto `rows×N` with zero guards.
    pub fn scatter(&self, data: &CMat) -> Result<CMat> {
        if data.cols() != self.data.len() {
            return Err(Error::Dimension(format!(
                "data grid has {} columns, map has {} data subcarriers",
                data.cols(),
                self.data.len()
            )));
        }
        let mut full = CMat::zeros(data.rows(), self.n);
        for r in 0..data.rows() {
            let src = data.row(r);
            let dst = full.row_mut(r);
            for (i, &k) in self.data.iter().enumerate() {
                dst[k] = src[i];
            }
        }
        Ok(full)
    }

    /// Extracts the data subcarriers of a `rows×N` grid.
    pub fn gather(&self, full: &CMat) -> Result<CMat> {
        if full.cols() != self.n {
            return Err(Error::Dimension(format!(
                "grid has {} columns, map expects {}",
                full.cols(),
                self.n
            )));
        }
        Ok(CMat::from_fn(full.rows(), self.data.len(), |r, i| {
            full.get(r, self.data[i])
        }))
    }
}

// ---------------------------------------------------------------------------
// Symbols
// ---------------------------------------------------------------------------

/// One OFDM symbol's worth of UE data on the data subcarriers.
#[derive(Debug, Clone)]
pub struct SymbolGrid {
    /// Bit labels, `U×N_d` row-major.
    pub labels: Vec<u32>,
    /// Constellation points, `U×N_d`.
    pub values: CMat,
}

/// Uniform i.i.d. constellation points for every UE and data subcarrier.
pub fn draw_symbols(
    stream: &mut PrngStream,
    users: usize,
    n_data: usize,
    qam: &QamConstellation,
) -> SymbolGrid {
    let order = qam.order() as u32;
    let labels: Vec<u32> = (0..users * n_data).map(|_| stream.below(order)).collect();
    let values = CMat::from_fn(users, n_data, |u, i| qam.point(labels[u * n_data + i]));
    SymbolGrid { labels, values }
}

// ---------------------------------------------------------------------------
// Channel
// ---------------------------------------------------------------------------

/// One block-constant frequency-selective channel draw.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// True taps, `T` matrices of `U×B`.
    pub taps: Vec<CMat>,
    /// Taps known to the base station.
    pub est_taps: Vec<CMat>,
    fd: Vec<CMat>,
    fd_est: Vec<CMat>,
}

/// `Σ_t taps[t] e^{-j2πkt/N}` for every `k`.
fn frequency_response(taps: &[CMat], n: usize) -> Result<Vec<CMat>> {
    let (u, b) = taps[0].shape();
    let mut out = vec![CMat::zeros(u, b); n];
    let scale = (n as f64).sqrt();
    let mut seq = vec![C64::new(0.0, 0.0); n];
    for r in 0..u {
        for c in 0..b {
            seq.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
            for (t, tap) in taps.iter().enumerate() {
                seq[t] = tap.get(r, c);
            }
            crate::numerics::dft_in_place(&mut seq)?;
            for (k, m) in out.iter_mut().enumerate() {
                m.set(r, c, seq[k] * scale);
            }
        }
    }
    Ok(out)
}

impl ChannelRealization {
    /// Rayleigh taps of variance `1/T` and the matching CSI estimate
    /// `√(1-η)·H_t + √η·H_err` with unit-variance `H_err`.
    pub fn draw(cfg: &LinkConfig, stream: &mut PrngStream) -> Result<Self> {
        let (u, b, t) = (cfg.users, cfg.bs_antennas, cfg.taps);
        let taps: Vec<CMat> = (0..t)
            .map(|_| CMat::from_vec(u, b, gaussian(stream, u * b, 1.0 / t as f64)))
            .collect::<Result<_>>()?;
        let keep = (1.0 - cfg.csi_error).sqrt();
        let err = cfg.csi_error.sqrt();
        let est_taps = taps
            .iter()
            .map(|h| {
                let e = gaussian(stream, u * b, 1.0);
                let data = h
                    .as_slice()
                    .iter()
                    .zip(e)
                    .map(|(&hv, ev)| hv * keep + ev * err)
                    .collect();
                CMat::from_vec(u, b, data)
            })
            .collect::<Result<_>>()?;
        Self::from_taps(taps, est_taps, cfg.n)
    }

    pub fn from_taps(taps: Vec<CMat>, est_taps: Vec<CMat>, n: usize) -> Result<Self> {
        if taps.is_empty() || taps.len() != est_taps.len() || taps.len() > n {
            return Err(Error::Dimension(format!(
                "{} taps and {} estimated taps for N={n}",
                taps.len(),
                est_taps.len()
            )));
        }
        let shape = taps[0].shape();
        if taps.iter().chain(&est_taps).any(|m| m.shape() != shape) {
            return Err(Error::Dimension("taps differ in shape".into()));
        }
        let fd = frequency_response(&taps, n)?;
        let fd_est = frequency_response(&est_taps, n)?;
        Ok(Self {
            taps,
            est_taps,
            fd,
            fd_est,
        })
    }

    /// Perfect CSI: the estimate equals the channel.
    pub fn perfect(taps: Vec<CMat>, n: usize) -> Result<Self> {
        let est = taps.clone();
        Self::from_taps(taps, est, n)
    }

    pub fn users(&self) -> usize {
        self.taps[0].rows()
    }

    pub fn antennas(&self) -> usize {
        self.taps[0].cols()
    }

    pub fn n(&self) -> usize {
        self.fd.len()
    }

    pub fn fd(&self, k: usize) -> &CMat {
        &self.fd[k]
    }

    pub fn fd_est(&self, k: usize) -> &CMat {
        &self.fd_est[k]
    }
}

// ---------------------------------------------------------------------------
// Precoding and modulation
// ---------------------------------------------------------------------------

/// Zero-forcing precoder scaled by a single power-normalisation factor.
#[derive(Debug, Clone)]
pub struct Precoder {
    pub alpha: f64,
    /// `P̂_k = α·zf(Ĥ_k^est)` per subcarrier; `None` means `P̂_k = 0`.
    mats: Vec<Option<CMat>>,
}

impl Precoder {
    pub fn matrix(&self, k: usize) -> Option<&CMat> {
        self.mats[k].as_ref()
    }

    pub fn n(&self) -> usize {
        self.mats.len()
    }
}

/// ZF precoder on the data subcarriers (and on the guards as well when
/// `with_guards` is set, for predistorters that fill the guard band).
///
/// `α` is chosen once per realization so that the mean over data
/// subcarriers of `E‖x̂_k‖² = α²‖zf(Ĥ_k^est)‖_F²` equals `P_T`.
pub fn build_precoder(
    ch: &ChannelRealization,
    map: &SubcarrierMap,
    tx_power: f64,
    with_guards: bool,
) -> Result<Precoder> {
    let n = ch.n();
    if map.n() != n {
        return Err(Error::Dimension(format!(
            "channel has {n} subcarriers, map has {}",
            map.n()
        )));
    }
    let mut mats: Vec<Option<CMat>> = vec![None; n];
    let mut frob = 0.0;
    for &k in map.data() {
        let z = zf_matrix(ch.fd_est(k))?;
        frob += z.frobenius_sq();
        mats[k] = Some(z);
    }
    if with_guards {
        for &k in map.guard() {
            mats[k] = Some(zf_matrix(ch.fd_est(k))?);
        }
    }
    let alpha = (tx_power * map.n_data() as f64 / frob).sqrt();
    for m in mats.iter_mut().flatten() {
        m.scale(C64::new(alpha, 0.0));
    }
    Ok(Precoder { alpha, mats })
}

/// Maximum redraws before a degenerate channel is reported.
const MAX_REDRAWS: usize = 16;

/// Draws a channel and its precoder, redrawing (from the same stream) while
/// any required subcarrier is too badly conditioned.
pub fn draw_link(
    cfg: &LinkConfig,
    map: &SubcarrierMap,
    stream: &mut PrngStream,
    with_guards: bool,
) -> Result<(ChannelRealization, Precoder)> {
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let ch = ChannelRealization::draw(cfg, stream)?;
        match build_precoder(&ch, map, cfg.tx_power, with_guards) {
            Ok(p) => return Ok((ch, p)),
            Err(e @ Error::DegenerateChannel { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::DegenerateChannel {
        condition: f64::INFINITY,
    }))
}

/// Applies `P̂_k` to a `U×N` FD grid and returns the `B×N` TD antenna
/// signals. Subcarriers without a precoding matrix transmit nothing.
pub fn precode_and_modulate(grid: &CMat, precoder: &Precoder) -> Result<CMat> {
    let xhat = precode(grid, precoder)?;
    let mut x = xhat;
    idft_rows(&mut x)?;
    Ok(x)
}

/// Frequency-domain part of [`precode_and_modulate`]: `x̂_k = P̂_k ŝ_k`.
pub fn precode(grid: &CMat, precoder: &Precoder) -> Result<CMat> {
    let (u, n) = grid.shape();
    if n != precoder.n() {
        return Err(Error::Dimension(format!(
            "grid has {n} subcarriers, precoder {}",
            precoder.n()
        )));
    }
    let b = precoder
        .mats
        .iter()
        .flatten()
        .next()
        .map(|m| m.rows())
        .unwrap_or(0);
    let mut xhat = CMat::zeros(b, n);
    let mut s = vec![C64::new(0.0, 0.0); u];
    for k in 0..n {
        let Some(p) = precoder.matrix(k) else {
            continue;
        };
        if p.cols() != u {
            return Err(Error::Dimension(format!(
                "precoder is {}x{}, grid has {u} users",
                p.rows(),
                p.cols()
            )));
        }
        for (r, v) in s.iter_mut().enumerate() {
            *v = grid.get(r, k);
        }
        for (bi, val) in p.matvec(&s)?.into_iter().enumerate() {
            xhat.set(bi, k, val);
        }
    }
    Ok(xhat)
}

/// Circular multipath `y_n = Σ_t H_t x_{(n-t) mod N}` with optional AWGN of
/// variance `noise_var` per UE and sample.
pub fn apply_channel(
    x: &CMat,
    ch: &ChannelRealization,
    noise: Option<(&mut PrngStream, f64)>,
) -> Result<CMat> {
    let (b, n) = x.shape();
    if b != ch.antennas() {
        return Err(Error::Dimension(format!(
            "{b} antenna signals for a {}-antenna channel",
            ch.antennas()
        )));
    }
    let u = ch.users();
    let mut y = CMat::zeros(u, n);
    for (t, tap) in ch.taps.iter().enumerate() {
        for r in 0..u {
            for bi in 0..b {
                let h = tap.get(r, bi);
                let xs = x.row(bi);
                let yr = y.row_mut(r);
                // y[n] += h x[n - t]
                for (m, &xv) in xs.iter().enumerate() {
                    yr[(m + t) % n] += h * xv;
                }
            }
        }
    }
    if let Some((stream, var)) = noise {
        if var > 0.0 {
            let w = gaussian(stream, u * n, var);
            for (yv, wv) in y.as_mut_slice().iter_mut().zip(w) {
                *yv += wv;
            }
        }
    }
    Ok(y)
}

/// UE-side DFT followed by extraction of the data subcarriers.
pub fn demodulate(y: &CMat, map: &SubcarrierMap) -> Result<CMat> {
    let mut yhat = y.clone();
    dft_rows(&mut yhat)?;
    map.gather(&yhat)
}

/// Nearest-point detection of `ŷ/α` against the transmitted labels.
/// Returns `(symbol errors, symbols)`.
pub fn detect_and_count(
    yhat: &CMat,
    sent: &SymbolGrid,
    alpha: f64,
    qam: &QamConstellation,
) -> Result<(u64, u64)> {
    if yhat.shape() != sent.values.shape() {
        return Err(Error::Dimension(format!(
            "received grid {:?} vs sent {:?}",
            yhat.shape(),
            sent.values.shape()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Input(format!("alpha = {alpha} must be > 0")));
    }
    let inv = 1.0 / alpha;
    let errors = yhat
        .as_slice()
        .iter()
        .zip(&sent.labels)
        .filter(|(y, &l)| qam.detect(*y * inv) != l)
        .count() as u64;
    Ok((errors, sent.labels.len() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dft, Purpose};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn qpsk_points_are_unit_energy_corners() {
        let q = QamConstellation::new(4).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for p in q.points() {
            assert!((p.re.abs() - s).abs() < 1e-15 && (p.im.abs() - s).abs() < 1e-15);
        }
    }

    #[test]
    fn constellations_have_unit_energy_and_gray_labels() {
        for m in [4usize, 16, 64, 256] {
            let q = QamConstellation::new(m).unwrap();
            let e: f64 = q.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / m as f64;
            assert!((e - 1.0).abs() < 1e-12, "M={m} energy {e}");
            let dmin = q.min_distance();
            for a in 0..m {
                assert_eq!(q.detect(q.points()[a]), a as u32);
                for b in a + 1..m {
                    let d = (q.points()[a] - q.points()[b]).norm();
                    if (d - dmin).abs() < 1e-9 {
                        assert_eq!((a ^ b).count_ones(), 1, "M={m} labels {a} {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn qam_order_must_be_power_of_four() {
        for bad in [0usize, 2, 8, 32, 100] {
            assert!(QamConstellation::new(bad).is_err());
        }
    }

    #[test]
    fn detection_clamps_outer_points() {
        let q = QamConstellation::new(16).unwrap();
        let corner = q.points()[0];
        assert_eq!(q.detect(corner * 5.0), 0);
    }

    #[test]
    fn subcarrier_map_layout() {
        let map = SubcarrierMap::new(16, 6).unwrap();
        assert_eq!(map.data(), &[13, 14, 15, 1, 2, 3]);
        assert_eq!(map.guard().len(), 10);
        assert!(map.guard().contains(&0));
        let grid = CMat::from_fn(2, 6, |r, i| c((r * 10 + i) as f64, 0.0));
        let full = map.scatter(&grid).unwrap();
        for &k in map.guard() {
            assert_eq!(full.get(0, k), c(0.0, 0.0));
        }
        assert_eq!(map.gather(&full).unwrap(), grid);
    }

    #[test]
    fn symbol_energy_and_guards() {
        let q = QamConstellation::new(64).unwrap();
        let mut s = PrngStream::for_purpose(3, Purpose::Symbols, 0);
        let g = draw_symbols(&mut s, 2, 50_000, &q);
        let e = g.values.frobenius_sq() / 100_000.0;
        assert!((0.99..=1.01).contains(&e), "energy {e}");
        let map = SubcarrierMap::new(512, 120).unwrap();
        let g = draw_symbols(&mut s, 2, 120, &q);
        let full = map.scatter(&g.values).unwrap();
        for &k in map.guard() {
            assert_eq!(full.get(1, k), c(0.0, 0.0));
        }
    }

    fn unit_scalar_channel(h: f64, n: usize) -> ChannelRealization {
        let tap = CMat::from_vec(1, 1, vec![c(h, 0.0)]).unwrap();
        ChannelRealization::perfect(vec![tap], n).unwrap()
    }

    #[test]
    fn scalar_precoder_cases() {
        let map = SubcarrierMap::new(16, 6).unwrap();
        let p = build_precoder(&unit_scalar_channel(1.0, 16), &map, 1.0, false).unwrap();
        assert!((p.alpha - 1.0).abs() < 1e-14);
        assert!((p.matrix(1).unwrap().get(0, 0) - c(1.0, 0.0)).norm() < 1e-14);

        let p = build_precoder(&unit_scalar_channel(2.0, 16), &map, 1.0, false).unwrap();
        assert!((p.alpha - 2.0).abs() < 1e-14);
        assert!((p.matrix(1).unwrap().get(0, 0) - c(1.0, 0.0)).norm() < 1e-14);
        assert!(p.matrix(0).is_none());
    }

    fn perfect_cfg() -> LinkConfig {
        LinkConfig {
            csi_error: 0.0,
            noise_var: 0.0,
            ..LinkConfig::desk()
        }
    }

    #[test]
    fn zf_precoder_diagonalises_channel() {
        let cfg = perfect_cfg();
        let map = SubcarrierMap::for_config(&cfg).unwrap();
        let mut s = PrngStream::for_purpose(5, Purpose::Channel, 0);
        let (ch, p) = draw_link(&cfg, &map, &mut s, false).unwrap();
        for &k in map.data() {
            let prod = ch.fd_est(k).matmul(p.matrix(k).unwrap()).unwrap();
            for r in 0..cfg.users {
                for col in 0..cfg.users {
                    let want = if r == col { p.alpha } else { 0.0 };
                    assert!((prod.get(r, col) - c(want, 0.0)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fd_response_matches_tap_sum() {
        let cfg = LinkConfig::desk();
        let mut s = PrngStream::for_purpose(6, Purpose::Channel, 0);
        let ch = ChannelRealization::draw(&cfg, &mut s).unwrap();
        for k in [0usize, 1, 77, 511] {
            for r in 0..cfg.users {
                for b in 0..cfg.bs_antennas {
                    let direct: C64 = ch
                        .taps
                        .iter()
                        .enumerate()
                        .map(|(t, h)| {
                            let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / cfg.n as f64;
                            h.get(r, b) * C64::from_polar(1.0, ph)
                        })
                        .sum();
                    assert!((ch.fd(k).get(r, b) - direct).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn modulation_is_unitary_and_zero_preserving() {
        let cfg = perfect_cfg();
        let map = SubcarrierMap::for_config(&cfg).unwrap();
        let mut s = PrngStream::for_purpose(7, Purpose::Channel, 0);
        let (_, p) = draw_link(&cfg, &map, &mut s, false).unwrap();

        let zero = CMat::zeros(cfg.users, cfg.n);
        assert_eq!(precode_and_modulate(&zero, &p).unwrap().max_abs(), 0.0);

        let q = QamConstellation::new(cfg.qam_order).unwrap();
        let g = draw_symbols(&mut s, cfg.users, cfg.n_data, &q);
        let full = map.scatter(&g.values).unwrap();
        let xhat = precode(&full, &p).unwrap();
        let x = precode_and_modulate(&full, &p).unwrap();
        assert!((xhat.frobenius_sq() - x.frobenius_sq()).abs() < 1e-10 * xhat.frobenius_sq());
    }

    #[test]
    fn single_tone_has_constant_envelope() {
        let map = SubcarrierMap::new(16, 6).unwrap();
        let p = build_precoder(&unit_scalar_channel(1.0, 16), &map, 1.0, false).unwrap();
        let mut grid = CMat::zeros(1, 16);
        grid.set(0, 2, c(0.3, -0.4));
        let x = precode_and_modulate(&grid, &p).unwrap();
        let m0 = x.get(0, 0).norm();
        assert!(x.row(0).iter().all(|v| (v.norm() - m0).abs() < 1e-14));
    }

    #[test]
    fn identity_channel_passes_signal() {
        let ch = ChannelRealization::perfect(vec![CMat::identity(3)], 8).unwrap();
        let x = CMat::from_fn(3, 8, |r, k| c(r as f64, k as f64));
        assert_eq!(apply_channel(&x, &ch, None).unwrap(), x);
    }

    #[test]
    fn channel_obeys_circular_convolution_theorem() {
        let cfg = LinkConfig::desk();
        let mut s = PrngStream::for_purpose(8, Purpose::Channel, 0);
        let ch = ChannelRealization::draw(&cfg, &mut s).unwrap();
        let x = CMat::from_vec(
            cfg.bs_antennas,
            cfg.n,
            gaussian(&mut s, cfg.bs_antennas * cfg.n, 1.0),
        )
        .unwrap();
        let y = apply_channel(&x, &ch, None).unwrap();
        let mut xhat = x.clone();
        dft_rows(&mut xhat).unwrap();
        let mut yhat = y.clone();
        dft_rows(&mut yhat).unwrap();
        for k in 0..cfg.n {
            let want = ch.fd(k).matvec(&xhat.column(k)).unwrap();
            for r in 0..cfg.users {
                assert!((yhat.get(r, k) - want[r]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn noise_is_calibrated() {
        let ch = ChannelRealization::perfect(vec![CMat::zeros(2, 1)], 1024).unwrap();
        let x = CMat::zeros(1, 1024);
        let mut s = PrngStream::for_purpose(9, Purpose::Noise, 0);
        let mut acc = [0.0f64; 2];
        let reps = 50;
        for _ in 0..reps {
            let y = apply_channel(&x, &ch, Some((&mut s, 4.0))).unwrap();
            for (r, a) in acc.iter_mut().enumerate() {
                *a += y.row(r).iter().map(|v| v.norm_sqr()).sum::<f64>();
            }
        }
        for a in acc {
            let var = a / (reps * 1024) as f64;
            assert!((var - 4.0).abs() < 0.08, "variance {var}");
        }
    }

    #[test]
    fn clean_chain_detects_without_error() {
        let q = QamConstellation::new(16).unwrap();
        let mut s = PrngStream::new(1, 1);
        let g = draw_symbols(&mut s, 2, 30, &q);
        let mut y = g.values.clone();
        y.scale(c(3.0, 0.0));
        assert_eq!(detect_and_count(&y, &g, 3.0, &q).unwrap(), (0, 60));
    }

    #[test]
    fn csi_error_statistics() {
        let cfg = LinkConfig {
            csi_error: 0.1,
            users: 4,
            bs_antennas: 16,
            taps: 8,
            ..LinkConfig::desk()
        };
        let mut s = PrngStream::for_purpose(10, Purpose::Channel, 0);
        let keep = (1.0 - cfg.csi_error).sqrt();
        let (mut acc, mut cnt) = (0.0, 0usize);
        for _ in 0..100 {
            let ch = ChannelRealization::draw(&cfg, &mut s).unwrap();
            for (h, e) in ch.taps.iter().zip(&ch.est_taps) {
                for (hv, ev) in h.as_slice().iter().zip(e.as_slice()) {
                    acc += (ev - hv * keep).norm_sqr();
                    cnt += 1;
                }
            }
        }
        let var = acc / cnt as f64;
        assert!((var - 0.1).abs() < 0.002, "error variance {var}");
    }

    #[test]
    fn dft_check_via_numerics() {
        // Detection helper sanity: DFT of a scattered grid is consistent.
        let map = SubcarrierMap::new(8, 2).unwrap();
        let full = map
            .scatter(&CMat::from_vec(1, 2, vec![c(1.0, 0.0), c(0.0, 1.0)]).unwrap())
            .unwrap();
        let td = crate::numerics::idft(full.row(0)).unwrap();
        let back = dft(&td).unwrap();
        assert!((back[7] - c(1.0, 0.0)).norm() < 1e-14);
        assert!((back[1] - c(0.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(LinkConfig::desk().validate().is_ok());
        assert!(LinkConfig::full_scale().validate().is_ok());
        let bad = [
            LinkConfig { n: 500, ..LinkConfig::desk() },
            LinkConfig { users: 9, ..LinkConfig::desk() },
            LinkConfig { qam_order: 32, ..LinkConfig::desk() },
            LinkConfig { csi_error: 1.5, ..LinkConfig::desk() },
            LinkConfig { n_data: 512, ..LinkConfig::desk() },
            LinkConfig { taps: 0, ..LinkConfig::desk() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
