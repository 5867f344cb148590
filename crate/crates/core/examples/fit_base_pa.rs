//! Regenerates `data/pa_gmp_base.txt`, the shipped base amplifier model.
//!
//! The memoryless part is a least-squares fit of the K=7 envelope
//! polynomial to a Rapp limiter (smoothness 2, unit small-signal gain,
//! saturation 24.02 V) with a quadratic AM/PM term, over 0..v_sat. Only the
//! even envelope powers |u|^0, |u|^2, |u|^4, |u|^6 are used: a full
//! monomial fit cancels large alternating coefficients, and the ±10%
//! per-coefficient spread of the amplifier bank would then break the
//! cancellation and fold the AM/AM curve well below saturation.
//! Memory and cross terms are scaled, randomly rotated copies of the
//! nonlinear part plus three short linear taps, drawn from a fixed seed.
//! The whole set is finally normalised to unit DC gain.
//!
//! Usage: cargo run -p mumimo-dpd --example fit_base_pa [-- <out-dir>]

use std::f64::consts::PI;

use mumimo_dpd::numerics::{lstsq, CMat, PrngStream, Purpose, C64};
use mumimo_dpd::pa::{content_hash, gmp_eval, GmpSpec, Term, DEFAULT_V_SAT};

const ORDER: usize = 7;
const MEMORY: usize = 3;
const CROSS: usize = 1;
const SMOOTHNESS: f64 = 2.0;
const AMPM_RAD: f64 = 0.12;
const FIT_SPAN: f64 = 1.0;
const POWERS: [usize; 4] = [0, 2, 4, 6];
const SEED: u64 = 20_230_101;

fn target_gain(r: f64) -> C64 {
    let x = r / DEFAULT_V_SAT;
    let am = (1.0 + x.powf(2.0 * SMOOTHNESS)).powf(-1.0 / (2.0 * SMOOTHNESS));
    C64::from_polar(am, AMPM_RAD * x * x)
}

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data").to_string());

    // Memoryless envelope polynomial in x = r / v_sat.
    let grid: Vec<f64> = (0..2000)
        .map(|i| FIT_SPAN * DEFAULT_V_SAT * i as f64 / 1999.0)
        .collect();
    let a = CMat::from_fn(grid.len(), POWERS.len(), |i, j| {
        C64::new((grid[i] / DEFAULT_V_SAT).powi(POWERS[j] as i32), 0.0)
    });
    let b: Vec<C64> = grid.iter().map(|&r| target_gain(r)).collect();
    let fit = lstsq(&a, &b).expect("envelope fit");
    let mut alpha = vec![C64::new(0.0, 0.0); ORDER];
    for (c, &k) in fit.coeffs.iter().zip(&POWERS) {
        alpha[k] = c / DEFAULT_V_SAT.powi(k as i32);
    }

    let mut rng = PrngStream::for_purpose(SEED, Purpose::Fit, 0);
    let mut phase = || C64::from_polar(1.0, rng.uniform(-PI, PI));
    let mut spec = GmpSpec::zeros(ORDER, MEMORY, CROSS).unwrap();
    let linear_taps = [1.0, 0.02, 0.008, 0.003];
    let nonlinear_memory = [1.0, 0.10, 0.04, 0.015];
    let lag = [0.05, 0.02, 0.01, 0.005];
    let lead = [0.03, 0.012, 0.006, 0.003];
    for l in 0..=MEMORY {
        let lin = if l == 0 { C64::new(1.0, 0.0) } else { phase() };
        spec.set(Term::A, 0, l, 0, alpha[0] * linear_taps[l] * lin).unwrap();
        let rot = if l == 0 { C64::new(1.0, 0.0) } else { phase() };
        let rb = phase();
        let rc = phase();
        for k in POWERS.iter().copied().filter(|&k| k > 0) {
            spec.set(Term::A, k, l, 0, alpha[k] * nonlinear_memory[l] * rot).unwrap();
            spec.set(Term::B, k, l, 1, alpha[k] * lag[l] * rb).unwrap();
            spec.set(Term::C, k, l, 1, alpha[k] * lead[l] * rc).unwrap();
        }
    }
    let spec = spec.scaled(spec.dc_gain().inv());

    eprintln!("memoryless fit condition {:.3e}", fit.condition);
    eprintln!(" r/vsat   |G|fit   |G|target  phase[deg]");
    for i in 0..=16 {
        let x = 0.1 * i as f64;
        let r = x * DEFAULT_V_SAT;
        let y = gmp_eval(&vec![C64::new(r, 0.0); 16], &spec)[0] / r.max(1e-12);
        eprintln!(
            " {x:5.2}  {:8.4}  {:8.4}  {:8.3}",
            y.norm(),
            target_gain(r).norm(),
            y.arg().to_degrees()
        );
    }

    let table = spec.to_table(&format!(
        "Synthetic base PA model, generated by examples/fit_base_pa.rs\n\
         Rapp limiter p={SMOOTHNESS} v_sat={DEFAULT_V_SAT} V, AM/PM {AMPM_RAD} rad at v_sat, \
         fit span {FIT_SPAN} v_sat, envelope powers {POWERS:?}, seed {SEED}\n\
         K={ORDER} L={MEMORY} G={CROSS}, unit DC gain"
    ));
    std::fs::write(format!("{out_dir}/pa_gmp_base.txt"), &table).unwrap();
    std::fs::write(
        format!("{out_dir}/pa_gmp_base.sha256"),
        format!("{}\n", content_hash(table.as_bytes())),
    )
    .unwrap();
    eprintln!("wrote {out_dir}/pa_gmp_base.txt");
}
