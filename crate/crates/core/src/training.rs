//! Gradient-based training of the frequency-domain predistorters through the
//! whole simulated link: DPD → precoder → IDFT → PA → channel → DFT → MSE.
//!
//! The forward pass records one [`TapeNode`] per block on a [`GradTape`];
//! the backward pass walks the tape in reverse applying each node's adjoint.
//! Complex signals carry gradients in the form `∂L/∂Re + j·∂L/∂Im`, so a
//! complex-linear block `y = A x` back-propagates as `g_x = Aᴴ g_y`.

use rayon::prelude::*;

use crate::dpd_fd::{FdCache, FdModel};
use crate::error::{Error, Result};
use crate::link::{
    demodulate, draw_link, draw_symbols, precode, ChannelRealization, LinkConfig, Precoder,
    QamConstellation, SubcarrierMap,
};
use crate::numerics::{dft_rows, gaussian, idft_rows, pair_index, CMat, PrngStream, Purpose, C64};
use crate::pa::{clip, gmp_backward, PaBank, PaMode};

/// Stream major index reserved for training draws; evaluation uses small
/// indices, so the two never share random numbers.
pub const TRAIN_STREAM_MAJOR: u64 = 0xFF_FFFF;

/// Receiver MSE `mean |ŷ/α − ŝ|²` over all UEs and data subcarriers.
pub fn receiver_mse(yhat: &CMat, sent: &CMat, alpha: f64) -> Result<f64> {
    if yhat.shape() != sent.shape() {
        return Err(Error::Dimension(format!(
            "received {:?} vs sent {:?}",
            yhat.shape(),
            sent.shape()
        )));
    }
    let n = yhat.as_slice().len() as f64;
    Ok(yhat
        .as_slice()
        .iter()
        .zip(sent.as_slice())
        .map(|(y, s)| (y / alpha - s).norm_sqr())
        .sum::<f64>()
        / n)
}

/// Gradient of [`receiver_mse`] with respect to `ŷ`: `2(ŷ/α − ŝ)/(α·n)`.
pub fn receiver_mse_grad(yhat: &CMat, sent: &CMat, alpha: f64) -> CMat {
    let n = yhat.as_slice().len() as f64;
    let data = yhat
        .as_slice()
        .iter()
        .zip(sent.as_slice())
        .map(|(y, s)| (y / alpha - s) * (2.0 / (alpha * n)))
        .collect();
    CMat::from_vec(yhat.rows(), yhat.cols(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// A recorded block of the forward chain that knows its adjoint.
pub trait TapeNode: Send + Sync {
    fn name(&self) -> &'static str;
    /// Maps the gradient at the block output to the gradient at its input.
    fn backward(&self, grad_out: &CMat) -> Result<CMat>;
}

/// Reverse-mode record of a chain of signal blocks.
#[derive(Default)]
pub struct GradTape<'a> {
    nodes: Vec<Box<dyn TapeNode + 'a>>,
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn push(&mut self, node: impl TapeNode + 'a) {
        self.nodes.push(Box::new(node));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.name()).collect()
    }

    /// Gradient at the tape input for a gradient at its output.
    pub fn backward(&self, grad_out: CMat) -> Result<CMat> {
        let mut g = grad_out;
        for node in self.nodes.iter().rev() {
            g = node.backward(&g)?;
            if !g.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient behind the {} block",
                    node.name()
                )));
            }
        }
        Ok(g)
    }
}

/// `x̂_k = P̂_k ŝ_k`; adjoint `P̂_kᴴ`.
struct PrecodeNode<'a> {
    precoder: &'a Precoder,
    users: usize,
}

impl TapeNode for PrecodeNode<'_> {
    fn name(&self) -> &'static str {
        "precode"
    }

    fn backward(&self, g: &CMat) -> Result<CMat> {
        let n = g.cols();
        let mut out = CMat::zeros(self.users, n);
        let mut col = vec![C64::new(0.0, 0.0); g.rows()];
        for k in 0..n {
            let Some(p) = self.precoder.matrix(k) else {
                continue;
            };
            for (b, v) in col.iter_mut().enumerate() {
                *v = g.get(b, k);
            }
            for (u, v) in p.adjoint_matvec(&col)?.into_iter().enumerate() {
                out.set(u, k, v);
            }
        }
        Ok(out)
    }
}

/// Row-wise unitary IDFT; adjoint is the DFT.
struct IdftNode;

impl TapeNode for IdftNode {
    fn name(&self) -> &'static str {
        "idft"
    }

    fn backward(&self, g: &CMat) -> Result<CMat> {
        let mut out = g.clone();
        dft_rows(&mut out)?;
        Ok(out)
    }
}

/// Row-wise unitary DFT; adjoint is the IDFT.
struct DftNode;

impl TapeNode for DftNode {
    fn name(&self) -> &'static str {
        "dft"
    }

    fn backward(&self, g: &CMat) -> Result<CMat> {
        let mut out = g.clone();
        idft_rows(&mut out)?;
        Ok(out)
    }
}

/// Per-antenna amplifier: polynomial part, clip, additive noise. The clip
/// passes gradients where it is inactive and blocks them where it limits.
struct PaNode<'a> {
    bank: &'a PaBank,
    input: CMat,
    /// `true` where the clip was active.
    clipped: Vec<bool>,
}

impl TapeNode for PaNode<'_> {
    fn name(&self) -> &'static str {
        "pa"
    }

    fn backward(&self, g: &CMat) -> Result<CMat> {
        let (b, n) = g.shape();
        let mut out = CMat::zeros(b, n);
        for (bi, pa) in self.bank.units.iter().enumerate() {
            let masked: Vec<C64> = g
                .row(bi)
                .iter()
                .zip(&self.clipped[bi * n..(bi + 1) * n])
                .map(|(v, &c)| if c { C64::new(0.0, 0.0) } else { *v })
                .collect();
            let gi = match pa.mode {
                PaMode::Gmp => gmp_backward(self.input.row(bi), &pa.gmp, &masked),
                PaMode::LinearClip { gain } => masked.iter().map(|v| v * gain).collect(),
            };
            out.row_mut(bi).copy_from_slice(&gi);
        }
        Ok(out)
    }
}

/// Circular multipath `y_u[n] = Σ_t Σ_b H_t[u,b] x_b[n−t]`; adjoint
/// `g_x_b[m] = Σ_t Σ_u conj(H_t[u,b]) g_y_u[m+t]`.
struct ChannelNode<'a> {
    channel: &'a ChannelRealization,
}

impl TapeNode for ChannelNode<'_> {
    fn name(&self) -> &'static str {
        "channel"
    }

    fn backward(&self, g: &CMat) -> Result<CMat> {
        let (u, n) = g.shape();
        let b = self.channel.antennas();
        let mut out = CMat::zeros(b, n);
        for (t, tap) in self.channel.taps.iter().enumerate() {
            for bi in 0..b {
                for r in 0..u {
                    let h = tap.get(r, bi).conj();
                    let gr = g.row(r);
                    let orow = out.row_mut(bi);
                    for (m, o) in orow.iter_mut().enumerate() {
                        *o += h * gr[(m + t) % n];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Data-subcarrier extraction; adjoint scatters back with zero guards.
struct GatherNode<'a> {
    map: &'a SubcarrierMap,
}

impl TapeNode for GatherNode<'_> {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn backward(&self, g: &CMat) -> Result<CMat> {
        self.map.scatter(g)
    }
}

// ---------------------------------------------------------------------------
// One symbol through the chain
// ---------------------------------------------------------------------------

/// Everything about one simulated OFDM symbol except the predistorter.
#[derive(Debug, Clone)]
pub struct ChainSample<'a> {
    pub map: &'a SubcarrierMap,
    pub channel: &'a ChannelRealization,
    pub precoder: &'a Precoder,
    pub bank: &'a PaBank,
    /// `U×N_d` transmitted constellation points.
    pub symbols: CMat,
    /// AWGN variance at the UEs; zero disables receiver noise.
    pub noise_var: f64,
    /// Seeds the PA measurement noise and the receiver noise of this symbol,
    /// so repeated evaluations see identical noise.
    pub noise_stream: PrngStream,
}

/// Result of [`chain_forward`].
pub struct ChainForward<'a> {
    pub loss: f64,
    pub received: CMat,
    /// Number of PA samples that hit the clip.
    pub clipped: usize,
    cache: FdCache,
    tape: GradTape<'a>,
}

/// Runs one symbol forward, recording the tape.
pub fn chain_forward<'a>(model: &FdModel, sample: &ChainSample<'a>) -> Result<ChainForward<'a>> {
    let mut noise = sample.noise_stream.clone();
    let mut tape = GradTape::new();
    let (grid, cache) = model.forward_cached(&sample.symbols, sample.map)?;

    let xhat = precode(&grid, sample.precoder)?;
    tape.push(PrecodeNode {
        precoder: sample.precoder,
        users: grid.rows(),
    });
    let mut x = xhat;
    idft_rows(&mut x)?;
    tape.push(IdftNode);

    let (b, n) = x.shape();
    if b != sample.bank.len() {
        return Err(Error::Dimension(format!(
            "{b} antenna signals for {} amplifiers",
            sample.bank.len()
        )));
    }
    let mut out = CMat::zeros(b, n);
    let mut clipped = vec![false; b * n];
    for (bi, pa) in sample.bank.units.iter().enumerate() {
        let pre = pa.pre_clip(x.row(bi));
        let sigma = pa.noise_std();
        let w = if sigma > 0.0 {
            gaussian(&mut noise, n, sigma * sigma)
        } else {
            vec![C64::new(0.0, 0.0); n]
        };
        for (i, (v, wv)) in pre.iter().zip(w).enumerate() {
            clipped[bi * n + i] = v.norm() > pa.v_sat;
            out.set(bi, i, clip(*v, pa.v_sat) + wv);
        }
    }
    let n_clipped = clipped.iter().filter(|&&c| c).count();
    tape.push(PaNode {
        bank: sample.bank,
        input: x,
        clipped,
    });

    let y = crate::link::apply_channel(&out, sample.channel, Some((&mut noise, sample.noise_var)))?;
    tape.push(ChannelNode {
        channel: sample.channel,
    });
    tape.push(DftNode);
    tape.push(GatherNode { map: sample.map });
    let received = demodulate(&y, sample.map)?;
    let loss = receiver_mse(&received, &sample.symbols, sample.precoder.alpha)?;
    Ok(ChainForward {
        loss,
        received,
        clipped: n_clipped,
        cache,
        tape,
    })
}

/// Loss of one symbol and its gradient with respect to the model
/// parameters.
pub fn chain_loss_and_grad(model: &FdModel, sample: &ChainSample) -> Result<(f64, Vec<f64>)> {
    let fwd = chain_forward(model, sample)?;
    let g_y = receiver_mse_grad(&fwd.received, &sample.symbols, sample.precoder.alpha);
    let g_grid = fwd.tape.backward(g_y)?;
    let mut grads = vec![0.0; model.params().len()];
    model.backward(&fwd.cache, &g_grid, sample.map, &mut grads)?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite parameter gradient".into()));
    }
    Ok((fwd.loss, grads))
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Settings of a training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// OFDM symbols per mini-batch.
    pub batch_size: usize,
    /// Upper bound on mini-batches (each one draws a fresh channel).
    pub max_batches: usize,
    /// Mini-batches always run before the convergence test applies.
    pub min_batches: usize,
    /// Window of the convergence test and of loss smoothing.
    pub window: usize,
    /// Stop once the windowed loss improves by less than this fraction.
    pub tolerance: f64,
    /// Abort once a batch loss exceeds this multiple of the initial loss,
    /// taken as the mean over the first `window` batches.
    pub divergence_factor: f64,
    /// Whether PA measurement noise and receiver AWGN are simulated.
    pub noise: bool,
    /// Mini-batches over which the learning rate ramps linearly up to its
    /// configured value. Adam's first steps are sign-like and move every
    /// weight by the full rate at once; the ramp keeps that from kicking
    /// the near-identity start far away.
    pub warmup_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 10,
            max_batches: 2000,
            min_batches: 40,
            window: 20,
            tolerance: 0.005,
            divergence_factor: 10.0,
            noise: true,
            warmup_batches: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.window == 0 || self.max_batches == 0 {
            return Err(Error::Config(
                "batch_size, window and max_batches must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss of each mini-batch, measured before its update.
    pub losses: Vec<f64>,
    pub converged: bool,
}

/// Whether the mean of the last `window` losses improved on the window
/// before it by less than `tolerance` (relative).
pub fn has_converged(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if losses.len() < 2 * window {
        return false;
    }
    let n = losses.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&losses[n - 2 * window..n - window]);
    let cur = mean(&losses[n - window..]);
    (prev - cur) < tolerance * prev
}

/// Means of consecutive non-overlapping windows.
pub fn block_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// The random draws behind one training mini-batch.
pub fn batch_streams(seed: u64, batch: u64) -> (PrngStream, PrngStream) {
    let idx = pair_index(TRAIN_STREAM_MAJOR, batch);
    (
        PrngStream::for_purpose(seed, Purpose::Channel, idx),
        PrngStream::for_purpose(seed, Purpose::Symbols, idx),
    )
}

/// Noise stream of symbol `i` of training mini-batch `batch`.
pub fn symbol_noise_stream(seed: u64, batch: u64, i: u64) -> PrngStream {
    PrngStream::for_purpose(seed, Purpose::Noise, pair_index(TRAIN_STREAM_MAJOR, (batch << 16) | i))
}

/// Trains `model` in place against `bank` with a fresh channel and fresh
/// symbols every mini-batch, at the transmit power in `link`.
///
/// Per-symbol gradients are computed in parallel and summed in symbol
/// order, so the trajectory does not depend on the number of workers.
pub fn train(
    model: &mut FdModel,
    cfg: &TrainConfig,
    link: &LinkConfig,
    bank: &PaBank,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    link.validate()?;
    let map = SubcarrierMap::for_config(link)?;
    let qam = QamConstellation::new(link.qam_order)?;
    let mut state = AdamState::new(model.params().len());
    let mut losses = Vec::new();
    let noise_var = if cfg.noise { link.noise_var } else { 0.0 };
    let bank_used = if cfg.noise {
        bank.clone()
    } else {
        let mut quiet = bank.clone();
        for u in &mut quiet.units {
            u.sigma_meas = 0.0;
        }
        quiet
    };
    let mut converged = false;
    for batch in 0..cfg.max_batches as u64 {
        let (mut ch_stream, mut sym_stream) = batch_streams(seed, batch);
        let (channel, precoder) = draw_link(link, &map, &mut ch_stream, model.fills_guards())?;
        let symbols: Vec<CMat> = (0..cfg.batch_size)
            .map(|_| draw_symbols(&mut sym_stream, link.users, link.n_data, &qam).values)
            .collect();
        let frozen: &FdModel = model;
        let results: Vec<Result<(f64, Vec<f64>)>> = symbols
            .into_par_iter()
            .enumerate()
            .map(|(i, s)| {
                let sample = ChainSample {
                    map: &map,
                    channel: &channel,
                    precoder: &precoder,
                    bank: &bank_used,
                    symbols: s,
                    noise_var,
                    noise_stream: symbol_noise_stream(seed, batch, i as u64),
                };
                chain_loss_and_grad(frozen, &sample)
            })
            .collect();
        let mut grads = vec![0.0; model.params().len()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        grads.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss} at batch {batch}")));
        }
        if losses.len() >= cfg.window {
            let initial = losses[..cfg.window].iter().sum::<f64>() / cfg.window as f64;
            if loss > cfg.divergence_factor * initial {
                return Err(Error::Divergence(format!(
                    "loss {loss:.3e} at batch {batch} exceeds {}x the initial {initial:.3e}",
                    cfg.divergence_factor
                )));
            }
        }
        losses.push(loss);
        let ramp = ((batch + 1) as f64 / cfg.warmup_batches.max(1) as f64).min(1.0);
        let adam = AdamConfig {
            learning_rate: cfg.adam.learning_rate * ramp,
            ..cfg.adam.clone()
        };
        adam_step(model.params_mut(), &grads, &mut state, &adam)?;
        if losses.len() >= cfg.min_batches && has_converged(&losses, cfg.window, cfg.tolerance) {
            converged = true;
            break;
        }
    }
    Ok(TrainReport { losses, converged })
}

/// Loss history as CSV with columns `step,loss`.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpd_fd::{FdCnn, FdCnnShape, FdNn, FdNnShape};
    use crate::link::{apply_channel, precode_and_modulate};
    use crate::numerics::gaussian;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn small_link() -> LinkConfig {
        LinkConfig {
            n: 64,
            n_data: 20,
            bs_antennas: 4,
            users: 2,
            qam_order: 16,
            taps: 3,
            csi_error: 0.0,
            noise_var: 0.0,
            tx_power: 1.0,
            ..LinkConfig::desk()
        }
    }

    #[test]
    fn mse_cases() {
        let mut s = PrngStream::new(1, 0);
        let sent = CMat::from_vec(3, 7, gaussian(&mut s, 21, 1.0)).unwrap();
        let alpha = 0.7;
        let mut y = sent.clone();
        y.scale(c(alpha, 0.0));
        assert!(receiver_mse(&y, &sent, alpha).unwrap() < 1e-30);

        let eps: f64 = 0.01;
        let y2 = CMat::from_fn(3, 7, |r, k| {
            let phase = (r * 7 + k) as f64;
            y.get(r, k) + C64::from_polar(alpha * eps.sqrt(), phase)
        });
        assert!((receiver_mse(&y2, &sent, alpha).unwrap() - eps).abs() < 1e-15);

        let y3 = CMat::from_vec(3, 7, gaussian(&mut s, 21, 1.0)).unwrap();
        let mut acc = 0.0;
        for r in 0..3 {
            for k in 0..7 {
                let d = y3.get(r, k) / alpha - sent.get(r, k);
                acc += d.re * d.re + d.im * d.im;
            }
        }
        assert!((receiver_mse(&y3, &sent, alpha).unwrap() - acc / 21.0).abs() < 1e-12);
    }

    #[test]
    fn adam_behaviour() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);

        // Constant gradients: the bias-corrected step is lr·g/(|g|+ε).
        let mut q = vec![0.0; 2];
        let mut st = AdamState::new(2);
        for _ in 0..5000 {
            let before = q.clone();
            adam_step(&mut q, &[3.0, -0.5], &mut st, &cfg).unwrap();
            let d0 = before[0] - q[0];
            let d1 = before[1] - q[1];
            assert!((d0 - 1e-3).abs() < 1e-9 && (d1 + 1e-3).abs() < 1e-9);
        }

        // Minimises ‖p‖² (gradient 2p).
        let mut p = vec![0.5, -0.3, 0.2];
        let mut st = AdamState::new(3);
        let big = AdamConfig { learning_rate: 0.01, ..cfg };
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            adam_step(&mut p, &g, &mut st, &big).unwrap();
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn convergence_rule() {
        let flat = vec![1.0; 40];
        assert!(has_converged(&flat, 20, 0.005));
        let falling: Vec<f64> = (0..40).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert!(!has_converged(&falling, 20, 0.005));
        assert!(!has_converged(&flat[..39], 20, 0.005));
        assert_eq!(block_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }

    /// The recorded chain reproduces the plain link functions exactly.
    #[test]
    fn chain_matches_link_functions() {
        let link = small_link();
        let map = SubcarrierMap::for_config(&link).unwrap();
        let (ch, pc) = draw_link(&link, &map, &mut PrngStream::new(2, 0), true).unwrap();
        let bank = PaBank::ideal(4, 1e3, 1.0);
        let qam = QamConstellation::new(16).unwrap();
        let sym = draw_symbols(&mut PrngStream::new(3, 0), 2, 20, &qam).values;
        let net = FdNn::init(FdNnShape { users: 2, ..FdNnShape::default() }, &mut PrngStream::new(4, 0)).unwrap();
        let model = FdModel::Nn(net);
        let sample = ChainSample {
            map: &map,
            channel: &ch,
            precoder: &pc,
            bank: &bank,
            symbols: sym.clone(),
            noise_var: 0.0,
            noise_stream: PrngStream::new(5, 0),
        };
        let fwd = chain_forward(&model, &sample).unwrap();
        assert_eq!(fwd.tape.names(), ["precode", "idft", "pa", "channel", "dft", "gather"]);
        let grid = model.apply(&sym, &map).unwrap();
        let x = precode_and_modulate(&grid, &pc).unwrap();
        let y = apply_channel(&x, &ch, None).unwrap();
        let want = demodulate(&y, &map).unwrap();
        for (a, b) in fwd.received.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_chain_has_zero_gradient() {
        let link = small_link();
        let map = SubcarrierMap::for_config(&link).unwrap();
        let (ch, pc) = draw_link(&link, &map, &mut PrngStream::new(6, 0), true).unwrap();
        let bank = PaBank::ideal(4, 1e3, 1.0);
        let qam = QamConstellation::new(16).unwrap();
        let model = FdModel::Nn(FdNn::identity(FdNnShape { users: 2, ..FdNnShape::default() }).unwrap());
        let sample = ChainSample {
            map: &map,
            channel: &ch,
            precoder: &pc,
            bank: &bank,
            symbols: draw_symbols(&mut PrngStream::new(7, 0), 2, 20, &qam).values,
            noise_var: 0.0,
            noise_stream: PrngStream::new(8, 0),
        };
        let (loss, grads) = chain_loss_and_grad(&model, &sample).unwrap();
        assert!(loss < 1e-24, "{loss}");
        assert!(grads.iter().all(|g| g.abs() < 1e-10));
    }

    /// Each adjoint satisfies `Re⟨A x, y⟩ = Re⟨x, Aᴴ y⟩` for random x, y.
    #[test]
    fn adjoints_pass_dot_product_test() {
        let link = small_link();
        let map = SubcarrierMap::for_config(&link).unwrap();
        let (ch, pc) = draw_link(&link, &map, &mut PrngStream::new(9, 0), true).unwrap();
        let mut s = PrngStream::new(10, 0);
        let mut rnd = |r: usize, c: usize| CMat::from_vec(r, c, gaussian(&mut s, r * c, 1.0)).unwrap();
        let dot = |a: &CMat, b: &CMat| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x.conj() * y).re).sum()
        };
        // precoder
        let x = rnd(2, 64);
        let y = rnd(4, 64);
        let ax = precode(&x, &pc).unwrap();
        let aty = PrecodeNode { precoder: &pc, users: 2 }.backward(&y).unwrap();
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10);
        // channel
        let x = rnd(4, 64);
        let y = rnd(2, 64);
        let ax = apply_channel(&x, &ch, None).unwrap();
        let aty = ChannelNode { channel: &ch }.backward(&y).unwrap();
        assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-10);
        // transforms
        let x = rnd(3, 64);
        let y = rnd(3, 64);
        let mut ax = x.clone();
        idft_rows(&mut ax).unwrap();
        assert!((dot(&ax, &y) - dot(&x, &IdftNode.backward(&y).unwrap())).abs() < 1e-10);
        let mut ax = x.clone();
        dft_rows(&mut ax).unwrap();
        assert!((dot(&ax, &y) - dot(&x, &DftNode.backward(&y).unwrap())).abs() < 1e-10);
        // gather
        let x = rnd(2, 64);
        let y = rnd(2, 20);
        let ax = map.gather(&x).unwrap();
        assert!((dot(&ax, &y) - dot(&x, &GatherNode { map: &map }.backward(&y).unwrap())).abs() < 1e-10);
    }

    fn fd_check(model: &FdModel, sample: &ChainSample, indices: &[usize]) -> f64 {
        let (_, grads) = chain_loss_and_grad(model, sample).unwrap();
        let scale = grads.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let h = 1e-5;
        let mut worst = 0.0f64;
        for &i in indices {
            let mut m = model.clone();
            m.params_mut()[i] += h;
            let lp = chain_forward(&m, sample).unwrap().loss;
            m.params_mut()[i] -= 2.0 * h;
            let lm = chain_forward(&m, sample).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6 * scale);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let link = LinkConfig {
            noise_var: 0.01,
            csi_error: 0.01,
            tx_power: 30.0,
            ..small_link()
        };
        let map = SubcarrierMap::for_config(&link).unwrap();
        let (ch, pc) = draw_link(&link, &map, &mut PrngStream::new(11, 0), true).unwrap();
        let units = crate::pa::perturb_bank(
            &crate::pa::GmpSpec::shipped_base(),
            4,
            crate::pa::DEFAULT_V_SAT,
            0.05,
            0.01,
            &mut PrngStream::new(12, 0),
        )
        .unwrap();
        let bank = PaBank::new(units, 1.0);
        let qam = QamConstellation::new(16).unwrap();
        let symbols = draw_symbols(&mut PrngStream::new(13, 0), 2, 20, &qam).values;
        let cnn_shape = FdCnnShape { n_data: 20, streams: 2, kernel: 3, stride: 1, kernels: 3 };
        let models = [
            FdModel::Cnn(FdCnn::init(cnn_shape, &mut PrngStream::new(14, 0)).unwrap()),
            FdModel::Nn(FdNn::init(FdNnShape { users: 2, memory: 2, width: 6, hidden: 2 }, &mut PrngStream::new(15, 0)).unwrap()),
        ];
        for model in models {
            let (_, pc_used) = if model.fills_guards() {
                (0, pc.clone())
            } else {
                (0, crate::link::build_precoder(&ch, &map, link.tx_power, false).unwrap())
            };
            let sample = ChainSample {
                map: &map,
                channel: &ch,
                precoder: &pc_used,
                bank: &bank,
                symbols: symbols.clone(),
                noise_var: link.noise_var,
                noise_stream: PrngStream::new(16, 0),
            };
            assert_eq!(chain_forward(&model, &sample).unwrap().clipped, 0);
            let all: Vec<usize> = (0..model.params().len()).collect();
            let worst = fd_check(&model, &sample, &all);
            assert!(worst < 1e-4, "{}: {worst}", model.kind());
        }
    }

    #[test]
    fn clip_blocks_gradient() {
        let link = small_link();
        let map = SubcarrierMap::for_config(&link).unwrap();
        let (ch, pc) = draw_link(&link, &map, &mut PrngStream::new(17, 0), false).unwrap();
        let qam = QamConstellation::new(16).unwrap();
        let symbols = draw_symbols(&mut PrngStream::new(18, 0), 2, 20, &qam).values;
        let model = FdModel::Cnn(FdCnn::init(FdCnnShape { n_data: 20, ..FdCnnShape::default() }, &mut PrngStream::new(19, 0)).unwrap());
        // Saturation far below the signal level: every sample clips.
        let bank = PaBank::ideal(4, 1e-6, 1.0);
        let sample = ChainSample {
            map: &map,
            channel: &ch,
            precoder: &pc,
            bank: &bank,
            symbols,
            noise_var: 0.0,
            noise_stream: PrngStream::new(20, 0),
        };
        assert_eq!(chain_forward(&model, &sample).unwrap().clipped, 4 * 64);
        let (_, grads) = chain_loss_and_grad(&model, &sample).unwrap();
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let link = LinkConfig { tx_power: 1.0, ..small_link() };
        let bank = PaBank::ideal(4, 1e3, 1.0);
        let cfg = TrainConfig {
            max_batches: 30,
            min_batches: 30,
            batch_size: 4,
            noise: false,
            ..TrainConfig::default()
        };
        let init = FdModel::Cnn(FdCnn::init(FdCnnShape { n_data: 20, ..FdCnnShape::default() }, &mut PrngStream::new(21, 0)).unwrap());
        let mut a = init.clone();
        let ra = train(&mut a, &cfg, &link, &bank, 5).unwrap();
        let mut b = init.clone();
        let rb = train(&mut b, &cfg, &link, &bank, 5).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a, b);
        assert!(ra.losses.last().unwrap() < &ra.losses[0]);

        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let mut c3 = init.clone();
        let rc = pool.install(|| train(&mut c3, &cfg, &link, &bank, 5)).unwrap();
        assert_eq!(rc.losses, ra.losses);
    }

    #[test]
    fn loss_csv_layout() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "step,loss\n0,0.5\n1,0.25\n");
    }
}
