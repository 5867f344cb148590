//! Per-antenna time-domain GMP predistortion, identified with the indirect
//! learning architecture (ILA): a post-inverse of each amplifier is fitted
//! by least squares and then copied in front of it.

use crate::error::{Error, Result};
use crate::numerics::{lstsq, CMat, PrngStream, C64};
use crate::pa::{clip, gmp_basis, gmp_eval, pa_forward, GmpSpec, PaBank, PaUnit};

/// Applies a GMP predistorter to one periodic block.
pub fn dpd_forward(u: &[C64], spec: &GmpSpec) -> Vec<C64> {
    gmp_eval(u, spec)
}

/// One GMP predistorter per antenna, each with the linear gain it was
/// identified against.
///
/// Inputs are first limited in magnitude to `input_limits[b]`, the largest
/// amplitude the identification covered (at most the one whose amplified
/// image reaches saturation). Beyond it the fitted polynomial would only be
/// extrapolating.
#[derive(Debug, Clone, PartialEq)]
pub struct TdDpdBank {
    pub specs: Vec<GmpSpec>,
    pub gains: Vec<C64>,
    pub input_limits: Vec<f64>,
}

impl TdDpdBank {
    pub fn identity(antennas: usize, order: usize, memory: usize, cross: usize) -> Result<Self> {
        Ok(Self {
            specs: vec![GmpSpec::identity(order, memory, cross)?; antennas],
            gains: vec![C64::new(1.0, 0.0); antennas],
            input_limits: vec![f64::INFINITY; antennas],
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Predistorts each antenna row of a `B×N` block with its own DPD.
pub fn apply_td_dpd(x: &CMat, bank: &TdDpdBank) -> Result<CMat> {
    if x.rows() != bank.len() {
        return Err(Error::Dimension(format!(
            "{} antenna signals for {} predistorters",
            x.rows(),
            bank.len()
        )));
    }
    let mut out = CMat::zeros(x.rows(), x.cols());
    for (b, spec) in bank.specs.iter().enumerate() {
        let limit = bank.input_limits[b];
        let row: Vec<C64> = x.row(b).iter().map(|&v| clip(v, limit)).collect();
        out.row_mut(b).copy_from_slice(&dpd_forward(&row, spec));
    }
    Ok(out)
}

/// Settings of an ILA identification run.
#[derive(Debug, Clone, PartialEq)]
pub struct IlaOptions {
    pub order: usize,
    pub memory: usize,
    pub cross: usize,
    /// Length of the periodic blocks the probe is made of.
    pub block_len: usize,
    /// ILA iterations; the first one fits on the undistorted probe.
    pub iterations: usize,
    /// Samples with `|u|` below this fraction of `v_sat` define the
    /// small-signal gain.
    pub low_amplitude_fraction: f64,
    /// Gain the cascade is linearised to; estimated from the probe when
    /// absent.
    pub target_gain: Option<C64>,
}

impl Default for IlaOptions {
    fn default() -> Self {
        Self {
            order: 7,
            memory: 3,
            cross: 1,
            block_len: 512,
            iterations: 1,
            low_amplitude_fraction: 0.25,
            target_gain: None,
        }
    }
}

/// Result of [`ila_identify`].
#[derive(Debug, Clone)]
pub struct IlaFit {
    pub spec: GmpSpec,
    /// Small-signal gain the cascade is linearised to.
    pub gain: C64,
    /// Coefficient sets after each iteration, last one equal to `spec`.
    pub history: Vec<GmpSpec>,
    /// Condition number of the column-normalised regression.
    pub condition: f64,
    /// Largest input magnitude covered by the final regression.
    pub input_limit: f64,
}

/// Least-squares complex gain `g` minimising `‖g·input − output‖` over the
/// samples whose input magnitude is below `threshold`.
pub fn small_signal_gain(input: &[C64], output: &[C64], threshold: f64) -> Result<C64> {
    let (mut num, mut den, mut used) = (C64::new(0.0, 0.0), 0.0, 0usize);
    for (x, y) in input.iter().zip(output) {
        if x.norm() < threshold {
            num += x.conj() * y;
            den += x.norm_sqr();
            used += 1;
        }
    }
    if used < 16 || den == 0.0 {
        return Err(Error::Identification(format!(
            "only {used} probe samples below {threshold:.3} to estimate the linear gain"
        )));
    }
    Ok(num / den)
}

fn for_blocks<T>(
    signal: &[C64],
    block_len: usize,
    mut f: impl FnMut(&[C64]) -> Result<T>,
) -> Result<Vec<T>> {
    signal.chunks(block_len).map(|b| f(b)).collect()
}

/// Fits `z ↦ x` by least squares over blockwise-periodic GMP regressors,
/// normalising columns first. Only rows with `keep[n]` enter the fit.
fn fit_post_inverse(
    z: &[C64],
    x: &[C64],
    keep: &[bool],
    opts: &IlaOptions,
) -> Result<(GmpSpec, f64)> {
    let blocks = for_blocks(z, opts.block_len, |b| {
        gmp_basis(b, opts.order, opts.memory, opts.cross)
    })?;
    let p = blocks[0].cols();
    let mut data = Vec::with_capacity(z.len() * p);
    let mut target = Vec::with_capacity(z.len());
    let mut n = 0;
    for b in &blocks {
        for r in 0..b.rows() {
            if keep[n] {
                data.extend_from_slice(b.row(r));
                target.push(x[n]);
            }
            n += 1;
        }
    }
    if target.len() < p {
        return Err(Error::Identification(format!(
            "only {} unsaturated probe samples for {p} coefficients",
            target.len()
        )));
    }
    let mut basis = CMat::from_vec(target.len(), p, data)?;
    let norms: Vec<f64> = (0..p)
        .map(|c| basis.column(c).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    if let Some(c) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Identification(format!(
            "regressor column {c} is identically zero"
        )));
    }
    for r in 0..basis.rows() {
        for (v, n) in basis.row_mut(r).iter_mut().zip(&norms) {
            *v /= *n;
        }
    }
    let sol = lstsq(&basis, &target)?;
    if sol.rank < p {
        return Err(Error::Identification(format!(
            "GMP regression is rank deficient ({} of {p}); probe too short or too narrow",
            sol.rank
        )));
    }
    let coeffs: Vec<C64> = sol.coeffs.iter().zip(&norms).map(|(c, n)| c / n).collect();
    Ok((
        GmpSpec::from_coeffs(opts.order, opts.memory, opts.cross, &coeffs)?,
        sol.condition,
    ))
}

/// Identifies a predistorter for `pa` by the indirect learning architecture.
///
/// `probe` is a sequence of periodic blocks of `opts.block_len` samples with
/// transmit-like statistics. Each iteration drives the amplifier with the
/// current predistorted probe, normalises the output by the small-signal
/// gain and fits the post-inverse `pa(x)/g ↦ x`, which becomes the next
/// predistorter. Samples whose output sits at the clip level are left out
/// of the regression.
pub fn ila_identify(
    pa: &PaUnit,
    probe: &[C64],
    opts: &IlaOptions,
    noise: &mut PrngStream,
) -> Result<IlaFit> {
    if opts.block_len == 0 || probe.is_empty() || probe.len() % opts.block_len != 0 {
        return Err(Error::Config(format!(
            "probe of {} samples is not a whole number of {}-sample blocks",
            probe.len(),
            opts.block_len
        )));
    }
    if opts.iterations == 0 {
        return Err(Error::Config("ILA needs at least one iteration".into()));
    }
    let amplify = |x: &[C64], noise: &mut PrngStream| -> Vec<C64> {
        x.chunks(opts.block_len)
            .flat_map(|b| pa_forward(b, pa, noise))
            .collect()
    };

    let clip_level = pa.v_sat - 4.0 * pa.noise_std();
    let mut x = probe.to_vec();
    let y = amplify(&x, noise);
    let gain = match opts.target_gain {
        Some(g) => g,
        None => small_signal_gain(&x, &y, opts.low_amplitude_fraction * pa.v_sat)?,
    };
    let mut y = y;
    let mut history = Vec::with_capacity(opts.iterations);
    let mut condition = 0.0;
    let mut input_limit = 0.0;
    for it in 0..opts.iterations {
        if it > 0 {
            let prev = history.last().expect("previous fit");
            x = probe
                .chunks(opts.block_len)
                .flat_map(|b| dpd_forward(b, prev))
                .collect();
            y = amplify(&x, noise);
        }
        let z: Vec<C64> = y.iter().map(|v| v / gain).collect();
        // Saturated outputs carry no information about the input that
        // produced them.
        let keep: Vec<bool> = y.iter().map(|v| v.norm() < clip_level).collect();
        input_limit = z
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v.norm())
            .fold(0.0, f64::max);
        let (spec, cond) = fit_post_inverse(&z, &x, &keep, opts)?;
        condition = cond;
        history.push(spec);
    }
    Ok(IlaFit {
        spec: history.last().expect("at least one iteration").clone(),
        gain,
        history,
        condition,
        input_limit,
    })
}

/// Identifies one predistorter per amplifier. `probes[b]` feeds antenna `b`.
pub fn identify_bank(
    bank: &PaBank,
    probes: &[Vec<C64>],
    opts: &IlaOptions,
    noise: &mut PrngStream,
) -> Result<TdDpdBank> {
    if probes.len() != bank.len() {
        return Err(Error::Dimension(format!(
            "{} probes for {} amplifiers",
            probes.len(),
            bank.len()
        )));
    }
    let mut specs = Vec::with_capacity(bank.len());
    let mut gains = Vec::with_capacity(bank.len());
    let mut input_limits = Vec::with_capacity(bank.len());
    for (pa, probe) in bank.units.iter().zip(probes) {
        let fit = ila_identify(pa, probe, opts, noise)?;
        specs.push(fit.spec);
        input_limits.push(fit.input_limit);
        gains.push(fit.gain);
    }
    Ok(TdDpdBank {
        specs,
        gains,
        input_limits,
    })
}

/// Normalised mean squared error `‖est − reference‖² / ‖reference‖²` in dB.
pub fn nmse_db(reference: &[C64], estimate: &[C64]) -> f64 {
    let err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (r - e).norm_sqr())
        .sum();
    let pow: f64 = reference.iter().map(|r| r.norm_sqr()).sum();
    10.0 * (err / pow).log10()
}
