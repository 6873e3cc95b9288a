//! Channel-effect perturbations: Butterworth high/low-pass, gain with hard
//! clipping, and synthetic reverberation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::model::{AudioClip, ModelError, PerturbationKind, PerturbationSpec};

/// Filter order used for the high/low-pass perturbations.
pub const FILTER_ORDER: usize = 4;
/// Decay time reached at 100 % reverberance.
pub const RT60_MAX_S: f64 = 2.0;
/// Wet-mix weight reached at 100 % reverberance.
pub const WET_MAX: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("cutoff {fc} Hz is outside (0, {nyquist}) for a {fs} Hz signal", nyquist = .fs / 2.0)]
    CutoffOutOfRange { fc: f64, fs: f64 },
    #[error("Butterworth order must be a positive even number, got {0}")]
    UnsupportedOrder(usize),
    #[error("filter section {0} is unstable")]
    UnstableFilter(usize),
    #[error("reverberance {0} % is outside [0, 100]")]
    PercentOutOfRange(f64),
    #[error("gain must be finite, got {0} dB")]
    NonFiniteGain(f64),
    #[error("{kind} is not a filter kind")]
    NotAFilter { kind: PerturbationKind },
    #[error(transparent)]
    Clip(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    HighPass,
    LowPass,
}

/// Second-order section with `a0` normalized to 1:
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoeffs {
    /// Both poles strictly inside the unit circle (stability triangle).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }
}

/// Magnitude of a biquad cascade in dB at `freq` Hz.
pub fn cascade_magnitude_db(sections: &[BiquadCoeffs], freq: f64, fs: f64) -> f64 {
    let h: Complex64 = sections.iter().map(|s| s.response(freq, fs)).product();
    20.0 * h.norm().log10()
}

/// Butterworth design by the bilinear transform with cutoff prewarping, as a
/// cascade of `order / 2` biquads. The response is exactly -3.01 dB at `fc`.
pub fn design_butterworth(
    kind: FilterKind,
    fc: f64,
    fs: f64,
    order: usize,
) -> Result<Vec<BiquadCoeffs>, PerturbError> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(PerturbError::UnsupportedOrder(order));
    }
    if !(fc > 0.0 && fc < fs / 2.0) {
        return Err(PerturbError::CutoffOutOfRange { fc, fs });
    }
    let k = (PI * fc / fs).tan();
    let k2 = k * k;
    let sections = (0..order / 2)
        .map(|i| {
            // pole pair angle of the analog prototype
            let theta = PI * (2 * i + 1) as f64 / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.cos());
            let norm = 1.0 / (1.0 + k / q + k2);
            let a1 = 2.0 * (k2 - 1.0) * norm;
            let a2 = (1.0 - k / q + k2) * norm;
            match kind {
                FilterKind::LowPass => {
                    let b0 = k2 * norm;
                    BiquadCoeffs {
                        b0,
                        b1: 2.0 * b0,
                        b2: b0,
                        a1,
                        a2,
                    }
                }
                FilterKind::HighPass => BiquadCoeffs {
                    b0: norm,
                    b1: -2.0 * norm,
                    b2: norm,
                    a1,
                    a2,
                },
            }
        })
        .collect();
    Ok(sections)
}

/// Run `samples` through a cascade in transposed direct form II, zero initial
/// state.
pub fn filter_samples(samples: &[f64], sections: &[BiquadCoeffs]) -> Vec<f64> {
    let mut out = samples.to_vec();
    for s in sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for x in out.iter_mut() {
            let input = *x;
            let y = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * y + z2;
            z2 = s.b2 * input - s.a2 * y;
            *x = y;
        }
    }
    out
}

pub fn filter_clip(clip: &AudioClip, sections: &[BiquadCoeffs]) -> Result<AudioClip, PerturbError> {
    if let Some(i) = sections.iter().position(|s| !s.is_stable()) {
        return Err(PerturbError::UnstableFilter(i));
    }
    Ok(clip.with_samples(filter_samples(clip.samples(), sections))?)
}

/// Scale by `10^(gain_db / 20)` and hard-clip to `[-1, 1]`.
pub fn apply_gain(clip: &AudioClip, gain_db: f64) -> Result<AudioClip, PerturbError> {
    if !gain_db.is_finite() {
        return Err(PerturbError::NonFiniteGain(gain_db));
    }
    let g = 10f64.powf(gain_db / 20.0);
    let samples = clip
        .samples()
        .iter()
        .map(|&s| (s * g).clamp(-1.0, 1.0))
        .collect();
    Ok(clip.with_samples(samples)?)
}

/// Decay time and wet weight for a reverberance percentage.
pub fn reverb_params(pct: f64) -> (f64, f64) {
    (pct / 100.0 * RT60_MAX_S, pct / 100.0 * WET_MAX)
}

/// Synthetic room impulse response: seeded Gaussian noise under an
/// exponential envelope that falls 60 dB in RT60, normalized to unit energy.
/// Tap 0 is zero; the direct path is carried by the dry signal.
pub fn reverb_impulse_response(pct: f64, fs: u32, seed: u64) -> Result<Vec<f64>, PerturbError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(PerturbError::PercentOutOfRange(pct));
    }
    let (rt60, _) = reverb_params(pct);
    let fs = fs as f64;
    let taps = ((rt60 * fs).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rir = Vec::with_capacity(taps + 1);
    rir.push(0.0);
    // amplitude envelope 10^(-3 t / rt60) is -60 dB at t = rt60
    let decay_per_sample = if rt60 > 0.0 { -3.0 / (rt60 * fs) } else { 0.0 };
    for k in 1..=taps {
        let noise: f64 = StandardNormal.sample(&mut rng);
        rir.push(noise * 10f64.powf(decay_per_sample * k as f64));
    }
    let energy: f64 = rir.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let scale = energy.sqrt().recip();
        rir.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(rir)
}

/// `(1 - w) dry + w (dry * rir)`, truncated to the input length.
pub fn reverberate(clip: &AudioClip, pct: f64, seed: u64) -> Result<AudioClip, PerturbError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(PerturbError::PercentOutOfRange(pct));
    }
    if pct == 0.0 {
        return Ok(clip.clone());
    }
    let (_, wet) = reverb_params(pct);
    let rir = reverb_impulse_response(pct, clip.sample_rate(), seed)?;
    let convolved = fft_convolve_truncated(clip.samples(), &rir);
    let samples = clip
        .samples()
        .iter()
        .zip(&convolved)
        .map(|(&d, &c)| (1.0 - wet) * d + wet * c)
        .collect();
    Ok(clip.with_samples(samples)?)
}

/// Linear convolution of `signal` with `kernel`, keeping the first
/// `signal.len()` outputs.
pub fn fft_convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 || kernel.is_empty() {
        return vec![0.0; n];
    }
    let kernel = &kernel[..kernel.len().min(n)];
    let size = (n + kernel.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        buf.resize(size, Complex64::new(0.0, 0.0));
        buf
    };
    let mut a = pad(signal);
    let mut b = pad(kernel);
    forward.process(&mut a);
    forward.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inverse.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| c.re * scale).collect()
}

/// Apply the perturbation described by `spec`.
pub fn perturb(clip: &AudioClip, spec: &PerturbationSpec) -> Result<AudioClip, PerturbError> {
    let fs = clip.sample_rate() as f64;
    match spec.kind {
        PerturbationKind::Identity => Ok(clip.clone()),
        PerturbationKind::HighPass => {
            let sections = design_butterworth(FilterKind::HighPass, spec.value, fs, FILTER_ORDER)?;
            filter_clip(clip, &sections)
        }
        PerturbationKind::LowPass => {
            let sections = design_butterworth(FilterKind::LowPass, spec.value, fs, FILTER_ORDER)?;
            filter_clip(clip, &sections)
        }
        PerturbationKind::Gain => apply_gain(clip, spec.value),
        PerturbationKind::Reverb => reverberate(clip, spec.value, spec.seed),
    }
}
