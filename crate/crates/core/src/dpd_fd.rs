//! Frequency-domain predistorters applied to the UE symbol grid ahead of the
//! precoder: a fully connected network over tapped time-domain UE signals
//! (FD-NN) and a small convolutional network over reshaped data-subcarrier
//! vectors (FD-CNN).
//!
//! Both keep their parameters in one flat `f64` vector so the optimizer can
//! treat them uniformly; the layouts are documented on each shape type.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::link::SubcarrierMap;
use crate::numerics::{dft_rows, idft_rows, CMat, PrngStream, C64};

/// Relative size of the random perturbation added on top of the
/// near-identity initialisation.
pub const INIT_NOISE: f64 = 0.03;
/// Bias that keeps the identity-carrying units of both networks inside the
/// linear part of their ReLU: it exceeds the largest per-axis amplitude of
/// any unit-energy square QAM (`15/√170 ≈ 1.15` for 256-QAM). Larger values
/// make the dense layer's coherent Adam steps proportionally larger.
pub const IDENTITY_OFFSET_CNN: f64 = 1.5;
pub const IDENTITY_OFFSET_NN: f64 = 1.5;

fn uniform_fill(stream: &mut PrngStream, out: &mut [f64], bound: f64) {
    for v in out {
        *v = stream.random_range(-bound..=bound);
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// FD-CNN
// ---------------------------------------------------------------------------

/// Hyperparameters of the FD-CNN.
///
/// Parameter layout, in order:
/// conv kernels `[N_conv][2·L_U][K_C][K_C]`, conv biases `[N_conv]`,
/// dense weights `[2·N_d][flat]` (row-major), dense biases `[2·N_d]`,
/// where `flat = N_conv·O²` and `O = ⌈S/K_S⌉`, `S = ⌈√N_d⌉`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FdCnnShape {
    pub n_data: usize,
    /// `L_U`: UE streams fed to each application.
    pub streams: usize,
    /// `K_C`: square kernel side.
    pub kernel: usize,
    /// `K_S`: stride.
    pub stride: usize,
    /// `N_conv`: number of kernels.
    pub kernels: usize,
}

impl Default for FdCnnShape {
    fn default() -> Self {
        Self {
            n_data: 384,
            streams: 1,
            kernel: 3,
            stride: 1,
            kernels: 2,
        }
    }
}

/// Smallest `s` with `s² ≥ n`.
pub fn ceil_sqrt(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s
}

impl FdCnnShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_data == 0 || self.streams == 0 || self.kernel == 0 || self.stride == 0 || self.kernels == 0
        {
            return Err(Error::Config(format!("FD-CNN sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Side `S` of the reshaped input image.
    pub fn side(&self) -> usize {
        ceil_sqrt(self.n_data)
    }

    /// Spatial side of the convolution output.
    pub fn out_side(&self) -> usize {
        self.side().div_ceil(self.stride)
    }

    /// Zero padding added before the first row/column ('same' padding).
    pub fn pad_before(&self) -> usize {
        let (s, o) = (self.side(), self.out_side());
        ((o - 1) * self.stride + self.kernel).saturating_sub(s) / 2
    }

    pub fn in_channels(&self) -> usize {
        2 * self.streams
    }

    pub fn flatten_len(&self) -> usize {
        self.kernels * self.out_side() * self.out_side()
    }

    fn conv_w_len(&self) -> usize {
        self.kernels * self.in_channels() * self.kernel * self.kernel
    }

    fn off_conv_b(&self) -> usize {
        self.conv_w_len()
    }

    fn off_fc_w(&self) -> usize {
        self.off_conv_b() + self.kernels
    }

    fn off_fc_b(&self) -> usize {
        self.off_fc_w() + 2 * self.n_data * self.flatten_len()
    }

    pub fn num_params(&self) -> usize {
        self.off_fc_b() + 2 * self.n_data
    }

    fn conv_index(&self, o: usize, c: usize, p: usize, q: usize) -> usize {
        ((o * self.in_channels() + c) * self.kernel + p) * self.kernel + q
    }
}

/// FD-CNN with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCnn {
    pub shape: FdCnnShape,
    pub params: Vec<f64>,
}

/// Intermediate values of one FD-CNN application kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FdCnnCache {
    /// Reshaped input channels `[2L_U][S][S]`.
    input: Vec<f64>,
    /// Convolution outputs before ReLU `[N_conv][O][O]`.
    pre: Vec<f64>,
}

impl FdCnn {
    pub fn zeros(shape: FdCnnShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            params: vec![0.0; shape.num_params()],
        })
    }

    /// Fan-in scaled uniform initialisation arranged to start near the
    /// identity map.
    ///
    /// Kernels 0 and 1 pass the real and imaginary part of the UE's own
    /// stream through a centre tap, offset by [`IDENTITY_OFFSET_CNN`] so
    /// the ReLU stays linear; the dense layer selects those activations for
    /// the matching output and its bias removes the offset. Every weight
    /// additionally carries uniform noise of relative size [`INIT_NOISE`];
    /// further kernels get plain fan-in scaling (`U(±√(3/fan_in))`, which
    /// preserves pre-activation variance). The identity part needs
    /// `N_conv ≥ 2` and `K_S = 1`; otherwise only the random part is used.
    pub fn init(shape: FdCnnShape, stream: &mut PrngStream) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let s = shape;
        let fan_conv = s.in_channels() * s.kernel * s.kernel;
        let bound_conv = (3.0 / fan_conv as f64).sqrt();
        let identity = s.kernels >= 2 && s.stride == 1;
        let (conv_w, rest) = net.params.split_at_mut(s.off_conv_b());
        let (conv_b, rest) = rest.split_at_mut(s.kernels);
        let (fc_w, _fc_b) = rest.split_at_mut(2 * s.n_data * s.flatten_len());

        let per_kernel = s.in_channels() * s.kernel * s.kernel;
        for (o, w) in conv_w.chunks_mut(per_kernel).enumerate() {
            let scale = if identity && o < 2 { INIT_NOISE } else { 1.0 };
            uniform_fill(stream, w, scale * bound_conv);
        }
        let centre = s.pad_before();
        if identity {
            for o in 0..2 {
                conv_w[s.conv_index(o, o, centre, centre)] += 1.0;
                conv_b[o] = IDENTITY_OFFSET_CNN;
            }
        }

        let flat = s.flatten_len();
        let bound_fc = (3.0 / flat as f64).sqrt();
        uniform_fill(
            stream,
            fc_w,
            if identity { INIT_NOISE * bound_fc } else { bound_fc },
        );
        if identity {
            let o2 = s.out_side() * s.out_side();
            let side = s.side();
            for k in 0..s.n_data {
                let pos = (k / side) * s.out_side() + k % side;
                fc_w[k * flat + pos] += 1.0;
                fc_w[(s.n_data + k) * flat + o2 + pos] += 1.0;
            }
            // Cancel the constant offset carried by kernels 0 and 1.
            let offsets: Vec<f64> = (0..2 * s.n_data)
                .map(|r| {
                    let row = &fc_w[r * flat..(r + 1) * flat];
                    -IDENTITY_OFFSET_CNN * row[..2 * o2].iter().sum::<f64>()
                })
                .collect();
            let off = s.off_fc_b();
            net.params[off..off + 2 * s.n_data].copy_from_slice(&offsets);
        }
        Ok(net)
    }

    fn check_grid(&self, grid: &CMat, u: usize) -> Result<()> {
        let (users, nd) = grid.shape();
        if nd != self.shape.n_data {
            return Err(Error::Dimension(format!(
                "FD-CNN built for {} data subcarriers, grid has {nd}",
                self.shape.n_data
            )));
        }
        if u >= users {
            return Err(Error::Dimension(format!("UE {u} of {users}")));
        }
        Ok(())
    }

    /// Input image: channel `2m`/`2m+1` hold the real/imaginary part of UE
    /// `(u+m) mod U`, each reshaped row-major into `S×S` with the tail
    /// zero-padded.
    fn reshape_input(&self, grid: &CMat, u: usize) -> Vec<f64> {
        let s = self.shape;
        let area = s.side() * s.side();
        let users = grid.rows();
        let mut input = vec![0.0; s.in_channels() * area];
        for m in 0..s.streams {
            let row = grid.row((u + m) % users);
            for (i, v) in row.iter().enumerate() {
                input[2 * m * area + i] = v.re;
                input[(2 * m + 1) * area + i] = v.im;
            }
        }
        input
    }

    /// Predistorted data-subcarrier vector for UE `u`.
    pub fn forward(&self, grid: &CMat, u: usize) -> Result<Vec<C64>> {
        Ok(self.forward_cached(grid, u)?.0)
    }

    pub fn forward_cached(&self, grid: &CMat, u: usize) -> Result<(Vec<C64>, FdCnnCache)> {
        self.check_grid(grid, u)?;
        let s = self.shape;
        let (side, out, kc) = (s.side(), s.out_side(), s.kernel);
        let pb = s.pad_before() as isize;
        let input = self.reshape_input(grid, u);
        let p = &self.params;
        let area = side * side;

        let mut pre = vec![0.0; s.flatten_len()];
        for o in 0..s.kernels {
            let bias = p[s.off_conv_b() + o];
            for i in 0..out {
                for j in 0..out {
                    let mut acc = bias;
                    for c in 0..s.in_channels() {
                        let chan = &input[c * area..(c + 1) * area];
                        for a in 0..kc {
                            let r = (i * s.stride + a) as isize - pb;
                            if r < 0 || r >= side as isize {
                                continue;
                            }
                            let wrow = &p[s.conv_index(o, c, a, 0)..s.conv_index(o, c, a, 0) + kc];
                            for (b, w) in wrow.iter().enumerate() {
                                let col = (j * s.stride + b) as isize - pb;
                                if col < 0 || col >= side as isize {
                                    continue;
                                }
                                acc += w * chan[r as usize * side + col as usize];
                            }
                        }
                    }
                    pre[(o * out + i) * out + j] = acc;
                }
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| relu(z)).collect();

        let flat = s.flatten_len();
        let fc_w = &p[s.off_fc_w()..s.off_fc_b()];
        let fc_b = &p[s.off_fc_b()..];
        let z: Vec<f64> = (0..2 * s.n_data)
            .map(|r| {
                fc_b[r]
                    + fc_w[r * flat..(r + 1) * flat]
                        .iter()
                        .zip(&hidden)
                        .map(|(w, h)| w * h)
                        .sum::<f64>()
            })
            .collect();
        let outv = (0..s.n_data)
            .map(|k| C64::new(z[k], z[s.n_data + k]))
            .collect();
        Ok((outv, FdCnnCache { input, pre }))
    }

    /// Accumulates into `grads` the parameter gradient for an output
    /// gradient `g_k = ∂L/∂Re s̃_k + j·∂L/∂Im s̃_k`.
    pub fn backward(&self, cache: &FdCnnCache, grad_out: &[C64], grads: &mut [f64]) {
        let s = self.shape;
        let (side, out, kc, nd) = (s.side(), s.out_side(), s.kernel, s.n_data);
        let pb = s.pad_before() as isize;
        let flat = s.flatten_len();
        let area = side * side;
        let p = &self.params;
        let dz: Vec<f64> = grad_out
            .iter()
            .map(|g| g.re)
            .chain(grad_out.iter().map(|g| g.im))
            .collect();
        debug_assert_eq!(dz.len(), 2 * nd);

        let hidden: Vec<f64> = cache.pre.iter().map(|&z| relu(z)).collect();
        let mut dh = vec![0.0; flat];
        let off_w = s.off_fc_w();
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = off_w + r * flat;
            for (idx, h) in hidden.iter().enumerate() {
                grads[row + idx] += d * h;
                dh[idx] += d * p[row + idx];
            }
            grads[s.off_fc_b() + r] += d;
        }

        for o in 0..s.kernels {
            for i in 0..out {
                for j in 0..out {
                    let idx = (o * out + i) * out + j;
                    if cache.pre[idx] <= 0.0 {
                        continue;
                    }
                    let d = dh[idx];
                    grads[s.off_conv_b() + o] += d;
                    for c in 0..s.in_channels() {
                        let chan = &cache.input[c * area..(c + 1) * area];
                        for a in 0..kc {
                            let r = (i * s.stride + a) as isize - pb;
                            if r < 0 || r >= side as isize {
                                continue;
                            }
                            for b in 0..kc {
                                let col = (j * s.stride + b) as isize - pb;
                                if col < 0 || col >= side as isize {
                                    continue;
                                }
                                grads[s.conv_index(o, c, a, b)] +=
                                    d * chan[r as usize * side + col as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// FD-NN
// ---------------------------------------------------------------------------

/// Hyperparameters of the FD-NN.
///
/// Layer `i` maps `d_i → d_{i+1}` with dims
/// `[2U(L+1), D, …, D, 2U]` (`K^NN` hidden layers). Parameters are stored
/// per layer as weights `[d_{i+1}][d_i]` followed by biases `[d_{i+1}]`.
/// Input component `(u, l, re/im)` sits at `(u·(L+1) + l)·2 + {0, 1}` and
/// holds UE `u`'s time-domain sample delayed by `l` (circularly).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FdNnShape {
    pub users: usize,
    /// `L₄`: tapped-delay memory.
    pub memory: usize,
    /// `D`: hidden width.
    pub width: usize,
    /// `K^NN`: hidden layers.
    pub hidden: usize,
}

impl Default for FdNnShape {
    fn default() -> Self {
        Self {
            users: 8,
            memory: 3,
            width: 15,
            hidden: 1,
        }
    }
}

impl FdNnShape {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("FD-NN sizes must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 * self.users * (self.memory + 1)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(std::iter::repeat_n(self.width, self.hidden));
        d.push(2 * self.users);
        d
    }

    /// `(weight offset, bias offset)` for each layer.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let d = self.dims();
        let mut off = 0;
        d.windows(2)
            .map(|w| {
                let wo = off;
                off += w[0] * w[1];
                let bo = off;
                off += w[1];
                (wo, bo)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn input_index(&self, u: usize, l: usize, im: usize) -> usize {
        (u * (self.memory + 1) + l) * 2 + im
    }
}

/// FD-NN with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FdNn {
    pub shape: FdNnShape,
    pub params: Vec<f64>,
}

/// Intermediate values of one FD-NN application.
#[derive(Debug, Clone)]
pub struct FdNnCache {
    /// Per layer, per sample pre-activations `[N][d_{i+1}]`.
    pre: Vec<Vec<f64>>,
    /// Network inputs `[N][d_0]`.
    input: Vec<f64>,
}

impl FdNn {
    pub fn zeros(shape: FdNnShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            params: vec![0.0; shape.num_params()],
        })
    }

    /// Exact passthrough: the first hidden layer carries every delay-0
    /// component `x` as the pair `relu(x)`, `relu(−x)`, later hidden layers
    /// copy those units, and the output recombines them as their
    /// difference. Needs `D ≥ 4U`.
    pub fn identity(shape: FdNnShape) -> Result<Self> {
        if shape.width < 4 * shape.users {
            return Err(Error::Config(format!(
                "an exact identity needs width >= {}, got {}",
                4 * shape.users,
                shape.width
            )));
        }
        let mut net = Self::zeros(shape)?;
        let dims = shape.dims();
        let offs = shape.layer_offsets();
        let comps = 2 * shape.users;
        for (li, &(wo, _)) in offs.iter().enumerate() {
            let (din, dout) = (dims[li], dims[li + 1]);
            let w = &mut net.params[wo..wo + din * dout];
            if li == 0 {
                for i in 0..comps {
                    let x = shape.input_index(i / 2, 0, i % 2);
                    w[2 * i * din + x] = 1.0;
                    w[(2 * i + 1) * din + x] = -1.0;
                }
            } else if li + 1 < offs.len() {
                for j in 0..2 * comps {
                    w[j * din + j] = 1.0;
                }
            } else {
                for i in 0..comps {
                    w[i * din + 2 * i] = 1.0;
                    w[i * din + 2 * i + 1] = -1.0;
                }
            }
        }
        Ok(net)
    }

    /// Fan-in scaled uniform initialisation near the identity map.
    ///
    /// With `D ≥ 4U` this is [`FdNn::identity`]; with `2U ≤ D < 4U` every
    /// delay-0 component gets one hidden unit biased by
    /// [`IDENTITY_OFFSET_NN`] (removed again at the output). With fewer
    /// units the identity cannot be represented and the first `D`
    /// components are carried. Uniform noise of relative size
    /// [`INIT_NOISE`] goes on top of every layer; the remaining hidden
    /// units are fan-in scaled.
    pub fn init(shape: FdNnShape, stream: &mut PrngStream) -> Result<Self> {
        shape.validate()?;
        let dims = shape.dims();
        let offs = shape.layer_offsets();
        let comps = 2 * shape.users;
        let mut net = if shape.width >= 4 * shape.users {
            Self::identity(shape)?
        } else {
            let mut net = Self::zeros(shape)?;
            let carried = comps.min(shape.width);
            for (li, &(wo, bo)) in offs.iter().enumerate() {
                let din = dims[li];
                let last = li + 1 == offs.len();
                for i in 0..carried {
                    if li == 0 {
                        let x = shape.input_index(i / 2, 0, i % 2);
                        net.params[wo + i * din + x] = 1.0;
                        net.params[bo + i] = IDENTITY_OFFSET_NN;
                    } else if !last {
                        net.params[wo + i * din + i] = 1.0;
                    } else {
                        net.params[wo + i * din + i] = 1.0;
                        net.params[bo + i] = -IDENTITY_OFFSET_NN;
                    }
                }
            }
            net
        };
        let carried_units = if shape.width >= 4 * shape.users {
            2 * comps
        } else {
            comps.min(shape.width)
        };
        for (li, &(wo, _)) in offs.iter().enumerate() {
            let (din, dout) = (dims[li], dims[li + 1]);
            let bound = (3.0 / din as f64).sqrt();
            let last = li + 1 == offs.len();
            for j in 0..dout {
                let free = !last && j >= carried_units;
                let scale = if free { bound } else { INIT_NOISE * bound };
                for v in &mut net.params[wo + j * din..wo + (j + 1) * din] {
                    *v += stream.random_range(-scale..=scale);
                }
            }
        }
        Ok(net)
    }

    /// Predistorts a full `U×N` FD grid; the output generally occupies the
    /// guard subcarriers too.
    pub fn forward(&self, grid: &CMat) -> Result<CMat> {
        Ok(self.forward_cached(grid)?.0)
    }

    pub fn forward_cached(&self, grid: &CMat) -> Result<(CMat, FdNnCache)> {
        let sh = self.shape;
        let (users, n) = grid.shape();
        if users != sh.users {
            return Err(Error::Dimension(format!(
                "FD-NN built for {} UEs, grid has {users}",
                sh.users
            )));
        }
        let mut td = grid.clone();
        idft_rows(&mut td)?;
        let d0 = sh.input_dim();
        let mut input = vec![0.0; n * d0];
        for t in 0..n {
            for u in 0..users {
                for l in 0..=sh.memory {
                    let v = td.get(u, (t + n * (l / n + 1) - l) % n);
                    input[t * d0 + sh.input_index(u, l, 0)] = v.re;
                    input[t * d0 + sh.input_index(u, l, 1)] = v.im;
                }
            }
        }
        let dims = sh.dims();
        let offs = sh.layer_offsets();
        let mut pre = Vec::with_capacity(offs.len());
        let mut act = input.clone();
        for (li, &(wo, bo)) in offs.iter().enumerate() {
            let (din, dout) = (dims[li], dims[li + 1]);
            let w = &self.params[wo..wo + din * dout];
            let b = &self.params[bo..bo + dout];
            let mut z = vec![0.0; n * dout];
            for t in 0..n {
                let x = &act[t * din..(t + 1) * din];
                for j in 0..dout {
                    z[t * dout + j] = b[j]
                        + w[j * din..(j + 1) * din]
                            .iter()
                            .zip(x)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
            }
            act = if li + 1 < offs.len() {
                z.iter().map(|&v| relu(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let mut out = CMat::from_fn(users, n, |u, t| {
            C64::new(act[t * 2 * users + 2 * u], act[t * 2 * users + 2 * u + 1])
        });
        dft_rows(&mut out)?;
        Ok((out, FdNnCache { pre, input }))
    }

    /// Accumulates the parameter gradient for an output-grid gradient.
    pub fn backward(&self, cache: &FdNnCache, grad_out: &CMat, grads: &mut [f64]) -> Result<()> {
        let sh = self.shape;
        let (users, n) = grad_out.shape();
        let mut g_td = grad_out.clone();
        idft_rows(&mut g_td)?;
        let dims = sh.dims();
        let offs = sh.layer_offsets();
        let nl = offs.len();
        let mut delta = vec![0.0; n * 2 * users];
        for t in 0..n {
            for u in 0..users {
                let g = g_td.get(u, t);
                delta[t * 2 * users + 2 * u] = g.re;
                delta[t * 2 * users + 2 * u + 1] = g.im;
            }
        }
        for li in (0..nl).rev() {
            let (din, dout) = (dims[li], dims[li + 1]);
            let (wo, bo) = offs[li];
            let prev_act: Vec<f64> = if li == 0 {
                cache.input.clone()
            } else {
                cache.pre[li - 1].iter().map(|&v| relu(v)).collect()
            };
            let mut prev_delta = vec![0.0; n * din];
            for t in 0..n {
                let x = &prev_act[t * din..(t + 1) * din];
                for j in 0..dout {
                    let d = delta[t * dout + j];
                    if d == 0.0 {
                        continue;
                    }
                    grads[bo + j] += d;
                    let wrow = wo + j * din;
                    for i in 0..din {
                        grads[wrow + i] += d * x[i];
                        prev_delta[t * din + i] += d * self.params[wrow + i];
                    }
                }
            }
            if li > 0 {
                for (pd, &z) in prev_delta.iter_mut().zip(&cache.pre[li - 1]) {
                    if z <= 0.0 {
                        *pd = 0.0;
                    }
                }
            }
            delta = prev_delta;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Common front end
// ---------------------------------------------------------------------------

/// Either trainable frequency-domain predistorter.
#[derive(Debug, Clone, PartialEq)]
pub enum FdModel {
    Nn(FdNn),
    Cnn(FdCnn),
}

/// Backward-pass state of [`FdModel::forward_cached`].
#[derive(Debug, Clone)]
pub enum FdCache {
    Nn(FdNnCache),
    Cnn(Vec<FdCnnCache>),
}

impl FdModel {
    pub fn params(&self) -> &[f64] {
        match self {
            FdModel::Nn(m) => &m.params,
            FdModel::Cnn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            FdModel::Nn(m) => &mut m.params,
            FdModel::Cnn(m) => &mut m.params,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FdModel::Nn(_) => "fd_nn",
            FdModel::Cnn(_) => "fd_cnn",
        }
    }

    /// Whether the output occupies guard subcarriers, which then need
    /// precoding matrices of their own.
    pub fn fills_guards(&self) -> bool {
        matches!(self, FdModel::Nn(_))
    }

    /// Maps the `U×N_d` data-symbol grid to the predistorted `U×N` grid.
    pub fn apply(&self, data: &CMat, map: &SubcarrierMap) -> Result<CMat> {
        Ok(self.forward_cached(data, map)?.0)
    }

    pub fn forward_cached(&self, data: &CMat, map: &SubcarrierMap) -> Result<(CMat, FdCache)> {
        match self {
            FdModel::Nn(m) => {
                let (out, cache) = m.forward_cached(&map.scatter(data)?)?;
                Ok((out, FdCache::Nn(cache)))
            }
            FdModel::Cnn(m) => {
                let users = data.rows();
                let mut pd = CMat::zeros(users, data.cols());
                let mut caches = Vec::with_capacity(users);
                for u in 0..users {
                    let (v, c) = m.forward_cached(data, u)?;
                    pd.row_mut(u).copy_from_slice(&v);
                    caches.push(c);
                }
                Ok((map.scatter(&pd)?, FdCache::Cnn(caches)))
            }
        }
    }

    /// Accumulates the parameter gradient for a gradient on the `U×N`
    /// output grid.
    pub fn backward(
        &self,
        cache: &FdCache,
        grad_out: &CMat,
        map: &SubcarrierMap,
        grads: &mut [f64],
    ) -> Result<()> {
        match (self, cache) {
            (FdModel::Nn(m), FdCache::Nn(c)) => m.backward(c, grad_out, grads),
            (FdModel::Cnn(m), FdCache::Cnn(cs)) => {
                let g = map.gather(grad_out)?;
                for (u, c) in cs.iter().enumerate() {
                    m.backward(c, g.row(u), grads);
                }
                Ok(())
            }
            _ => Err(Error::Input("cache does not belong to this model".into())),
        }
    }

    /// Text checkpoint: a header naming the kind and shape, then one
    /// parameter per line in Rust's shortest round-trip float form (`{:?}`).
    ///
    /// ```text
    /// mumimo-dpd checkpoint 1
    /// kind fd_cnn
    /// shape n_data=120 streams=1 kernel=3 stride=1 kernels=2
    /// params 58802
    /// 0.012…
    /// ```
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("mumimo-dpd checkpoint 1\n");
        match self {
            FdModel::Nn(m) => {
                let h = m.shape;
                let _ = writeln!(s, "kind fd_nn");
                let _ = writeln!(
                    s,
                    "shape users={} memory={} width={} hidden={}",
                    h.users, h.memory, h.width, h.hidden
                );
            }
            FdModel::Cnn(m) => {
                let h = m.shape;
                let _ = writeln!(s, "kind fd_cnn");
                let _ = writeln!(
                    s,
                    "shape n_data={} streams={} kernel={} stride={} kernels={}",
                    h.n_data, h.streams, h.kernel, h.stride, h.kernels
                );
            }
        }
        let _ = writeln!(s, "params {}", self.params().len());
        for v in self.params() {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: format!("missing {what}"),
                })
        };
        let (ln, magic) = next("header")?;
        if magic != "mumimo-dpd checkpoint 1" {
            return Err(Error::Parse {
                line: ln,
                msg: format!("unknown header {magic:?}"),
            });
        }
        let (ln, kind) = next("kind")?;
        let kind = kind.strip_prefix("kind ").ok_or_else(|| Error::Parse {
            line: ln,
            msg: "expected `kind <name>`".into(),
        })?;
        let (ln, shape_line) = next("shape")?;
        let fields = parse_fields(ln, shape_line)?;
        let field = |name: &str| -> Result<usize> {
            fields
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Parse {
                    line: ln,
                    msg: format!("shape lacks `{name}`"),
                })
        };
        let mut model = match kind {
            "fd_nn" => FdModel::Nn(FdNn::zeros(FdNnShape {
                users: field("users")?,
                memory: field("memory")?,
                width: field("width")?,
                hidden: field("hidden")?,
            })?),
            "fd_cnn" => FdModel::Cnn(FdCnn::zeros(FdCnnShape {
                n_data: field("n_data")?,
                streams: field("streams")?,
                kernel: field("kernel")?,
                stride: field("stride")?,
                kernels: field("kernels")?,
            })?),
            other => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("unknown model kind {other:?}"),
                })
            }
        };
        let (ln, count) = next("parameter count")?;
        let count: usize = count
            .strip_prefix("params ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: ln,
                msg: "expected `params <count>`".into(),
            })?;
        if count != model.params().len() {
            return Err(Error::Parse {
                line: ln,
                msg: format!(
                    "{count} parameters declared, shape needs {}",
                    model.params().len()
                ),
            });
        }
        let params = model.params_mut();
        for slot in params.iter_mut() {
            let (ln, v) = next("parameter")?;
            *slot = v.parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad number {v:?}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: ln,
                    msg: "non-finite parameter".into(),
                });
            }
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(Error::Parse {
                line: ln,
                msg: format!("trailing content {extra:?}"),
            });
        }
        Ok(model)
    }
}

fn parse_fields(ln: usize, line: &str) -> Result<Vec<(String, usize)>> {
    let body = line.strip_prefix("shape ").ok_or_else(|| Error::Parse {
        line: ln,
        msg: "expected `shape k=v ...`".into(),
    })?;
    body.split_whitespace()
        .map(|kv| {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Parse {
                line: ln,
                msg: format!("bad field {kv:?}"),
            })?;
            let v = v.parse().map_err(|_| Error::Parse {
                line: ln,
                msg: format!("bad value in {kv:?}"),
            })?;
            Ok((k.to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{draw_symbols, QamConstellation};
    use crate::numerics::{gaussian, Purpose};

    fn desk_cnn() -> FdCnnShape {
        FdCnnShape {
            n_data: 120,
            ..FdCnnShape::default()
        }
    }

    fn random_grid(seed: u64, users: usize, cols: usize) -> CMat {
        let mut s = PrngStream::new(seed, 0);
        CMat::from_vec(users, cols, gaussian(&mut s, users * cols, 1.0)).unwrap()
    }

    fn random_params(n: usize, seed: u64) -> Vec<f64> {
        let mut s = PrngStream::new(seed, 1);
        (0..n).map(|_| s.uniform(-0.5, 0.5)).collect()
    }

    /// Direct transcription of the layer definitions with explicit padded
    /// images and separately indexed weight tensors.
    fn cnn_oracle(net: &FdCnn, grid: &CMat, u: usize) -> Vec<C64> {
        let s = net.shape;
        let side = s.side();
        let out = s.out_side();
        let pad_total = ((out - 1) * s.stride + s.kernel).saturating_sub(side);
        let pb = pad_total / 2;
        let padded_side = side + pad_total;
        let users = grid.rows();
        // img[c][r][col] on the padded canvas
        let mut img = vec![vec![vec![0.0; padded_side]; padded_side]; 2 * s.streams];
        for m in 0..s.streams {
            for k in 0..s.n_data {
                let v = grid.get((u + m) % users, k);
                img[2 * m][pb + k / side][pb + k % side] = v.re;
                img[2 * m + 1][pb + k / side][pb + k % side] = v.im;
            }
        }
        let mut p = net.params.iter().copied();
        let mut w = vec![vec![vec![vec![0.0; s.kernel]; s.kernel]; 2 * s.streams]; s.kernels];
        for o in 0..s.kernels {
            for c in 0..2 * s.streams {
                for a in 0..s.kernel {
                    for b in 0..s.kernel {
                        w[o][c][a][b] = p.next().unwrap();
                    }
                }
            }
        }
        let bc: Vec<f64> = (0..s.kernels).map(|_| p.next().unwrap()).collect();
        let mut flat = Vec::new();
        for o in 0..s.kernels {
            for i in 0..out {
                for j in 0..out {
                    let mut acc = bc[o];
                    for c in 0..2 * s.streams {
                        for a in 0..s.kernel {
                            for b in 0..s.kernel {
                                let (r, col) = (i * s.stride + a, j * s.stride + b);
                                if r < padded_side && col < padded_side {
                                    acc += w[o][c][a][b] * img[c][r][col];
                                }
                            }
                        }
                    }
                    flat.push(acc.max(0.0));
                }
            }
        }
        let wfc: Vec<Vec<f64>> = (0..2 * s.n_data)
            .map(|_| (0..flat.len()).map(|_| p.next().unwrap()).collect())
            .collect();
        let bfc: Vec<f64> = (0..2 * s.n_data).map(|_| p.next().unwrap()).collect();
        assert!(p.next().is_none());
        let z: Vec<f64> = (0..2 * s.n_data)
            .map(|r| bfc[r] + (0..flat.len()).map(|i| wfc[r][i] * flat[i]).sum::<f64>())
            .collect();
        (0..s.n_data)
            .map(|k| C64::new(z[k], z[s.n_data + k]))
            .collect()
    }

    #[test]
    fn ceil_sqrt_values() {
        for (n, s) in [(1, 1), (2, 2), (4, 2), (5, 3), (120, 11), (121, 11), (384, 20), (400, 20), (401, 21)] {
            assert_eq!(ceil_sqrt(n), s, "n={n}");
        }
    }

    #[test]
    fn published_cnn_geometry() {
        let s = FdCnnShape::default();
        assert_eq!(s.side(), 20);
        assert_eq!(s.out_side(), 20);
        assert_eq!(s.flatten_len(), 800);
        assert_eq!(s.side() * s.side() - s.n_data, 16);
        assert_eq!(s.num_params(), 2 * 2 * 9 + 2 + 768 * 800 + 768);
        assert_eq!(s.pad_before(), 1);
        let strided = FdCnnShape { stride: 2, ..s };
        assert_eq!(strided.out_side(), 10);
    }

    #[test]
    fn cnn_matches_loop_oracle() {
        let shapes = [
            desk_cnn(),
            FdCnnShape { n_data: 30, streams: 2, kernel: 3, stride: 1, kernels: 3 },
            FdCnnShape { n_data: 50, streams: 2, kernel: 4, stride: 2, kernels: 2 },
            FdCnnShape { n_data: 17, streams: 1, kernel: 5, stride: 3, kernels: 4 },
        ];
        for (i, shape) in shapes.into_iter().enumerate() {
            let mut net = FdCnn::zeros(shape).unwrap();
            net.params = random_params(shape.num_params(), i as u64);
            let grid = random_grid(40 + i as u64, 3, shape.n_data);
            for u in 0..3 {
                let got = net.forward(&grid, u).unwrap();
                let want = cnn_oracle(&net, &grid, u);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).norm() < 1e-10, "shape {shape:?} u {u}");
                }
            }
        }
    }

    #[test]
    fn cnn_zero_input_zero_bias_is_zero() {
        let mut net = FdCnn::zeros(desk_cnn()).unwrap();
        net.params = random_params(net.shape.num_params(), 3);
        let s = net.shape;
        for v in &mut net.params[s.off_conv_b()..s.off_fc_w()] {
            *v = 0.0;
        }
        for v in &mut net.params[s.off_fc_b()..] {
            *v = 0.0;
        }
        let out = net.forward(&CMat::zeros(2, 120), 1).unwrap();
        assert!(out.iter().all(|v| *v == C64::new(0.0, 0.0)));
    }

    #[test]
    fn cnn_depends_only_on_selected_streams() {
        let shape = FdCnnShape { streams: 2, ..desk_cnn() };
        let net = FdCnn::init(shape, &mut PrngStream::new(1, 1)).unwrap();
        let grid = random_grid(5, 4, 120);
        let base = net.forward(&grid, 1).unwrap();
        let mut other = grid.clone();
        // UEs 1 and 2 feed UE 1; changing 0 and 3 must not matter.
        other.row_mut(0).iter_mut().for_each(|v| *v *= 3.0);
        other.row_mut(3).iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        assert_eq!(net.forward(&other, 1).unwrap(), base);
        other.row_mut(2)[7] += C64::new(0.1, 0.0);
        assert_ne!(net.forward(&other, 1).unwrap(), base);
    }

    #[test]
    fn cnn_init_is_near_identity_and_keeps_guards_empty() {
        let shape = desk_cnn();
        let net = FdCnn::init(shape, &mut PrngStream::for_purpose(7, Purpose::Init, 0)).unwrap();
        let again = FdCnn::init(shape, &mut PrngStream::for_purpose(7, Purpose::Init, 0)).unwrap();
        assert_eq!(net, again);
        let qam = QamConstellation::new(16).unwrap();
        let map = SubcarrierMap::new(512, 120).unwrap();
        let grid = draw_symbols(&mut PrngStream::new(8, 0), 2, 120, &qam).values;
        let model = FdModel::Cnn(net.clone());
        let full = model.apply(&grid, &map).unwrap();
        for &k in map.guard() {
            for u in 0..2 {
                assert_eq!(full.get(u, k), C64::new(0.0, 0.0));
            }
        }
        for u in 0..2 {
            let out = net.forward(&grid, u).unwrap();
            let err: f64 = out.iter().zip(grid.row(u)).map(|(a, b)| (a - b).norm_sqr()).sum();
            let pow: f64 = grid.row(u).iter().map(|v| v.norm_sqr()).sum();
            assert!((err / pow).sqrt() < 0.1, "relative deviation {}", (err / pow).sqrt());
        }
    }

    #[test]
    fn cnn_init_preserves_preactivation_variance() {
        // Four kernels: two identity carriers, two plain fan-in scaled.
        let shape = FdCnnShape { kernels: 4, ..desk_cnn() };
        let net = FdCnn::init(shape, &mut PrngStream::new(9, 0)).unwrap();
        let grid = random_grid(10, 2, 120);
        let input_var = grid.row(0).iter().map(|v| v.re * v.re + v.im * v.im).sum::<f64>()
            / (2.0 * 120.0);
        let (_, cache) = net.forward_cached(&grid, 0).unwrap();
        let o2 = shape.out_side() * shape.out_side();
        let side = shape.side();
        // Interior positions only, so padding does not dilute the estimate.
        let interior: Vec<usize> = (0..o2)
            .filter(|&p| {
                let (i, j) = (p / side, p % side);
                i > 0 && j > 0 && j + 1 < side && (i + 1) * side + j + 1 < 120
            })
            .collect();
        for o in 0..shape.kernels {
            let vals: Vec<f64> = interior.iter().map(|&p| cache.pre[o * o2 + p]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let ratio = var / input_var;
            assert!((0.5..=2.0).contains(&ratio), "kernel {o}: ratio {ratio}");
        }
    }

    #[test]
    fn cnn_backward_matches_finite_differences() {
        let shape = FdCnnShape { n_data: 20, streams: 2, kernel: 3, stride: 2, kernels: 3 };
        let mut net = FdCnn::zeros(shape).unwrap();
        net.params = random_params(shape.num_params(), 11);
        let grid = random_grid(12, 2, 20);
        let w = random_grid(13, 1, 20);
        // L = Re Σ conj(w_k) s̃_k has gradient g = w.
        let loss = |n: &FdCnn| -> f64 {
            n.forward(&grid, 1)
                .unwrap()
                .iter()
                .zip(w.row(0))
                .map(|(a, b)| (b.conj() * a).re)
                .sum()
        };
        let (_, cache) = net.forward_cached(&grid, 1).unwrap();
        let mut grads = vec![0.0; shape.num_params()];
        net.backward(&cache, w.row(0), &mut grads);
        let h = 1e-6;
        for i in 0..shape.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let lp = loss(&p);
            p.params[i] -= 2.0 * h;
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn nn_identity_is_exact_passthrough() {
        for hidden in [1, 3] {
            let shape = FdNnShape { users: 2, memory: 3, width: 15, hidden };
            let net = FdNn::identity(shape).unwrap();
            let grid = random_grid(20, 2, 64);
            let out = net.forward(&grid).unwrap();
            for (a, b) in out.as_slice().iter().zip(grid.as_slice()) {
                assert!((a - b).norm() < 1e-9);
            }
            assert_eq!(out.shape(), (2, 64));
        }
        assert!(FdNn::identity(FdNnShape { users: 4, ..FdNnShape::default() }).is_err());
    }

    #[test]
    fn nn_zero_input_gives_bias_output() {
        let shape = FdNnShape { users: 2, memory: 2, width: 6, hidden: 2 };
        let mut net = FdNn::zeros(shape).unwrap();
        net.params = random_params(shape.num_params(), 21);
        let out = net.forward(&CMat::zeros(2, 32)).unwrap();
        // Constant TD output appears on DC only.
        for u in 0..2 {
            for k in 1..32 {
                assert!(out.get(u, k).norm() < 1e-12);
            }
        }
        let offs = shape.layer_offsets();
        for &(_, bo) in &offs {
            let len = if bo == offs.last().unwrap().1 { 4 } else { 6 };
            net.params[bo..bo + len].iter_mut().for_each(|v| *v = 0.0);
        }
        let out = net.forward(&CMat::zeros(2, 32)).unwrap();
        assert!(out.as_slice().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn nn_fills_guard_band() {
        let shape = FdNnShape { users: 2, memory: 3, width: 15, hidden: 1 };
        let mut net = FdNn::zeros(shape).unwrap();
        net.params = random_params(shape.num_params(), 22);
        let map = SubcarrierMap::new(64, 20).unwrap();
        let data = random_grid(23, 2, 20);
        let out = FdModel::Nn(net).apply(&data, &map).unwrap();
        assert_eq!(out.shape(), (2, 64));
        assert!(map.guard().iter().all(|&k| out.get(0, k).norm() > 0.0));
    }

    #[test]
    fn nn_init_near_identity() {
        for users in [2, 3, 8] {
            let shape = FdNnShape { users, memory: 3, width: 15, hidden: 1 };
            let net = FdNn::init(shape, &mut PrngStream::new(30, users as u64)).unwrap();
            let map = SubcarrierMap::new(128, 40).unwrap();
            let data = random_grid(31, users, 40);
            let full = map.scatter(&data).unwrap();
            let out = net.forward(&full).unwrap();
            let err = out
                .as_slice()
                .iter()
                .zip(full.as_slice())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>();
            let rel = (err / full.frobenius_sq()).sqrt();
            if 2 * users <= shape.width {
                assert!(rel < 0.1, "U={users}: {rel}");
            } else {
                assert!(rel.is_finite());
            }
        }
    }

    #[test]
    fn nn_backward_matches_finite_differences() {
        let shape = FdNnShape { users: 2, memory: 2, width: 5, hidden: 2 };
        let mut net = FdNn::zeros(shape).unwrap();
        net.params = random_params(shape.num_params(), 40);
        let grid = random_grid(41, 2, 16);
        let w = random_grid(42, 2, 16);
        let loss = |n: &FdNn| -> f64 {
            n.forward(&grid)
                .unwrap()
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| (b.conj() * a).re)
                .sum()
        };
        let (_, cache) = net.forward_cached(&grid).unwrap();
        let mut grads = vec![0.0; shape.num_params()];
        net.backward(&cache, &w, &mut grads).unwrap();
        let h = 1e-6;
        for i in 0..shape.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let lp = loss(&p);
            p.params[i] -= 2.0 * h;
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cnn = FdModel::Cnn(FdCnn::init(desk_cnn(), &mut PrngStream::new(50, 0)).unwrap());
        let nn = FdModel::Nn(
            FdNn::init(FdNnShape { users: 2, ..FdNnShape::default() }, &mut PrngStream::new(51, 0))
                .unwrap(),
        );
        for m in [cnn, nn] {
            let text = m.to_checkpoint();
            let back = FdModel::from_checkpoint(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_checkpoint(), text);
        }
    }

    #[test]
    fn checkpoint_layout_is_pinned() {
        let mut net = FdCnn::zeros(FdCnnShape { n_data: 1, streams: 1, kernel: 1, stride: 1, kernels: 1 }).unwrap();
        // conv w (2), conv b (1), fc w (2x1), fc b (2)
        assert_eq!(net.params.len(), 7);
        net.params = vec![1.0, -0.5, 0.25, 3.0, 1e-300, -0.0, 2.5];
        let text = FdModel::Cnn(net).to_checkpoint();
        assert_eq!(
            text,
            "mumimo-dpd checkpoint 1\nkind fd_cnn\n\
             shape n_data=1 streams=1 kernel=1 stride=1 kernels=1\nparams 7\n\
             1.0\n-0.5\n0.25\n3.0\n1e-300\n-0.0\n2.5\n"
        );
    }

    #[test]
    fn checkpoint_rejects_malformed_files() {
        let good = FdModel::Cnn(
            FdCnn::zeros(FdCnnShape { n_data: 1, streams: 1, kernel: 1, stride: 1, kernels: 1 }).unwrap(),
        )
        .to_checkpoint();
        assert!(FdModel::from_checkpoint(&good).is_ok());
        let cases = [
            good.replace("checkpoint 1", "checkpoint 2"),
            good.replace("fd_cnn", "fd_rnn"),
            good.replace("params 7", "params 8"),
            good.replace("kernels=1", ""),
            format!("{good}0.0\n"),
            good.rsplit_once("0.0\n").unwrap().0.to_string(),
            good.replacen("\n0.0\n", "\nNaN\n", 1),
        ];
        for (i, c) in cases.iter().enumerate() {
            assert!(matches!(FdModel::from_checkpoint(c), Err(Error::Parse { .. })), "case {i}");
        }
    }
}
