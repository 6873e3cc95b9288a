//! Frame-level SPL, SPL-peak embedding selection, and the built-in log-mel
//! statistics embedder.
//!
//! The peak frame is chosen on the original audio and the same frame index is
//! reused for every perturbed version of that clip, so matched rows always
//! describe the same stretch of time.

use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::io::{read_wav_with_id, IoError};
use crate::model::{AudioClip, DatasetManifest, EmbeddingSet, ModelError, PerturbationSpec};
use crate::perturb::{perturb, PerturbError};

/// RMS floor for SPL; silence maps to -200 dB.
pub const SPL_FLOOR: f64 = 1e-10;
/// Added to mel energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;
pub const STFT_WINDOW_S: f64 = 0.025;
pub const STFT_HOP_S: f64 = 0.010;
pub const DEFAULT_N_MELS: usize = 64;
const MIN_FFT_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid frame grid: window {window_s} s, hop {hop_s} s")]
    InvalidGrid { window_s: f64, hop_s: f64 },
    #[error("clip `{id}` has {samples} samples, shorter than one {window}-sample STFT window")]
    ClipTooShort {
        id: String,
        samples: usize,
        window: usize,
    },
    #[error("{spl} SPL values for {frames} embedding frames")]
    LengthMismatch { spl: usize, frames: usize },
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("n_mels must be positive")]
    NoMelBands,
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{} clip(s) failed: {}", .0.len(), ClipFailure::join(.0))]
    Clips(Vec<ClipFailure>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipFailure {
    pub id: String,
    pub message: String,
}

impl ClipFailure {
    fn join(list: &[ClipFailure]) -> String {
        list.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl fmt::Display for ClipFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.id, self.message)
    }
}

/// Framing of a clip for SPL and embedding extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGrid {
    window_s: f64,
    hop_s: f64,
}

impl Default for FrameGrid {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            hop_s: 0.5,
        }
    }
}

impl FrameGrid {
    pub fn new(window_s: f64, hop_s: f64) -> Result<Self, FeatureError> {
        if !(hop_s > 0.0 && hop_s <= window_s && window_s.is_finite()) {
            return Err(FeatureError::InvalidGrid { window_s, hop_s });
        }
        Ok(Self { window_s, hop_s })
    }

    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    pub fn hop_s(&self) -> f64 {
        self.hop_s
    }

    /// `(start, len)` sample ranges of every frame. A clip no longer than one
    /// window yields a single frame covering all of it.
    pub fn frames(&self, num_samples: usize, sample_rate: u32) -> Vec<(usize, usize)> {
        let fs = sample_rate as f64;
        let window = ((self.window_s * fs).round() as usize).max(1);
        let hop = ((self.hop_s * fs).round() as usize).max(1);
        if num_samples <= window {
            return vec![(0, num_samples)];
        }
        let count = 1 + (num_samples - window) / hop;
        (0..count).map(|k| (k * hop, window)).collect()
    }
}

/// Per-frame embeddings of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub clip_id: String,
    pub frame_starts: Vec<f64>,
    vectors: Vec<f64>,
    dim: usize,
}

impl FrameEmbeddings {
    pub fn new(
        clip_id: impl Into<String>,
        frame_starts: Vec<f64>,
        vectors: Vec<f64>,
        dim: usize,
    ) -> Result<Self, ModelError> {
        let clip_id = clip_id.into();
        if dim == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if frame_starts.is_empty() || vectors.len() != frame_starts.len() * dim {
            return Err(ModelError::RowCountMismatch {
                ids: frame_starts.len(),
                rows: vectors.len() / dim,
            });
        }
        if frame_starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::InvalidManifest(format!(
                "frame starts of `{clip_id}` are not strictly increasing"
            )));
        }
        Ok(Self {
            clip_id,
            frame_starts,
            vectors,
            dim,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frame_starts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// SPL of each frame in dB re digital full scale, `20 log10(max(rms, 1e-10))`.
pub fn frame_spl(clip: &AudioClip, grid: &FrameGrid) -> Vec<f64> {
    let samples = clip.samples();
    grid.frames(samples.len(), clip.sample_rate())
        .into_iter()
        .map(|(start, len)| {
            let frame = &samples[start..start + len];
            let ms = frame.iter().map(|s| s * s).sum::<f64>() / len as f64;
            20.0 * ms.sqrt().max(SPL_FLOOR).log10()
        })
        .collect()
}

/// Index of the loudest frame; ties go to the earliest.
pub fn peak_index(spl: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in spl.iter().enumerate() {
        match best {
            Some(b) if spl[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn select_peak_embedding(
    spl: &[f64],
    fe: &FrameEmbeddings,
) -> Result<(usize, Vec<f64>), FeatureError> {
    if spl.len() != fe.num_frames() {
        return Err(FeatureError::LengthMismatch {
            spl: spl.len(),
            frames: fe.num_frames(),
        });
    }
    let index = peak_index(spl).expect("at least one frame");
    Ok((index, fe.frame(index).to_vec()))
}

/// Maps a clip to frame-level embeddings on a given grid.
pub trait Embedder: Sync {
    fn name(&self) -> &str;
    fn embed_frames(
        &self,
        clip: &AudioClip,
        grid: &FrameGrid,
    ) -> Result<FrameEmbeddings, FeatureError>;
}

/// Deterministic stand-in for a learned embedder: per frame, the mean and
/// standard deviation of log mel-band energies over 25 ms / 10 ms STFT
/// frames.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    pub n_mels: usize,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self {
            n_mels: DEFAULT_N_MELS,
        }
    }
}

impl Embedder for ReferenceEmbedder {
    fn name(&self) -> &str {
        "reference-logmel"
    }

    fn embed_frames(
        &self,
        clip: &AudioClip,
        grid: &FrameGrid,
    ) -> Result<FrameEmbeddings, FeatureError> {
        embed_logmel_stats(clip, grid, self.n_mels)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of `n_mels` triangular bands spanning 0 Hz to Nyquist.
pub fn mel_band_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_edges(n_mels, sample_rate)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// STFT geometry for a sample rate: `(window, hop, fft size)` in samples.
pub fn stft_geometry(sample_rate: u32) -> (usize, usize, usize) {
    let fs = sample_rate as f64;
    let window = ((STFT_WINDOW_S * fs).round() as usize).max(1);
    let hop = ((STFT_HOP_S * fs).round() as usize).max(1);
    (window, hop, window.next_power_of_two().max(MIN_FFT_SIZE))
}

struct MelFilterbank {
    /// per band: first bin and weights from there on
    bands: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    fn new(n_mels: usize, sample_rate: u32, fft_size: usize) -> Self {
        let edges = mel_edges(n_mels, sample_rate);
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let n_bins = fft_size / 2 + 1;
        let bands = (0..n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= c {
                            (f - lo) / (c - lo)
                        } else if f > c && f < hi {
                            (hi - f) / (hi - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match weights.first() {
                    Some(&(first, _)) => (first, weights.iter().map(|&(_, w)| w).collect()),
                    None => (0, Vec::new()),
                }
            })
            .collect();
        Self { bands }
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((first, w), o) in self.bands.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Log-mel statistics embedder; `d = 2 * n_mels` (band means, then band
/// standard deviations).
pub fn embed_logmel_stats(
    clip: &AudioClip,
    grid: &FrameGrid,
    n_mels: usize,
) -> Result<FrameEmbeddings, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::NoMelBands);
    }
    let fs = clip.sample_rate();
    let (window, hop, fft_size) = stft_geometry(fs);
    if clip.len() < window {
        return Err(FeatureError::ClipTooShort {
            id: clip.id().to_string(),
            samples: clip.len(),
            window,
        });
    }
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos())
        .collect();
    let bank = MelFilterbank::new(n_mels, fs, fft_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    let mut power = vec![0.0; fft_size / 2 + 1];
    let mut mel = vec![0.0; n_mels];

    let dim = 2 * n_mels;
    let frames = grid.frames(clip.len(), fs);
    let mut vectors = Vec::with_capacity(frames.len() * dim);
    let mut frame_starts = Vec::with_capacity(frames.len());
    let samples = clip.samples();
    for &(start, len) in &frames {
        let segment = &samples[start..start + len];
        let count = 1 + (len - window) / hop;
        let mut logs = vec![Vec::with_capacity(count); n_mels];
        for j in 0..count {
            let chunk = &segment[j * hop..j * hop + window];
            for (b, (&x, &w)) in buf.iter_mut().zip(chunk.iter().zip(&hann)) {
                *b = Complex64::new(x * w, 0.0);
            }
            buf[window..].fill(Complex64::new(0.0, 0.0));
            fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            bank.apply(&power, &mut mel);
            for (band, &e) in logs.iter_mut().zip(&mel) {
                band.push((e + LOG_FLOOR).ln());
            }
        }
        let stats: Vec<(f64, f64)> = logs.iter().map(|v| mean_std(v)).collect();
        vectors.extend(stats.iter().map(|s| s.0));
        vectors.extend(stats.iter().map(|s| s.1));
        frame_starts.push(start as f64 / fs as f64);
    }
    Ok(FrameEmbeddings::new(clip.id(), frame_starts, vectors, dim)?)
}

/// Mean and population standard deviation, shifted by the first value so a
/// constant sequence gives exactly that constant and zero.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let x0 = v[0];
    let n = v.len() as f64;
    let mean_d = v.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = v.iter().map(|x| (x - x0 - mean_d).powi(2)).sum::<f64>() / n;
    (x0 + mean_d, var.sqrt())
}

/// SPL-peak frame of each clip.
pub fn peak_frames(clips: &[AudioClip], grid: &FrameGrid) -> Vec<usize> {
    clips
        .par_iter()
        .map(|c| peak_index(&frame_spl(c, grid)).expect("at least one frame"))
        .collect()
}

/// Perturb each clip, embed it, and keep the frame at `peaks[i]` (chosen on
/// the original audio). Rows follow the order of `clips`.
pub fn embed_clips(
    clips: &[AudioClip],
    peaks: &[usize],
    embedder: &dyn Embedder,
    grid: &FrameGrid,
    spec: &PerturbationSpec,
) -> Result<EmbeddingSet, FeatureError> {
    assert_eq!(clips.len(), peaks.len(), "one peak index per clip");
    let results: Vec<Result<Vec<f64>, FeatureError>> = clips
        .par_iter()
        .zip(peaks.par_iter())
        .map(|(clip, &peak)| {
            let perturbed = perturb(clip, spec)?;
            let fe = embedder.embed_frames(&perturbed, grid)?;
            if peak >= fe.num_frames() {
                return Err(FeatureError::FrameOutOfRange {
                    index: peak,
                    frames: fe.num_frames(),
                });
            }
            Ok(fe.frame(peak).to_vec())
        })
        .collect();
    let mut rows = Vec::with_capacity(clips.len());
    let mut failures = Vec::new();
    for (clip, r) in clips.iter().zip(results) {
        match r {
            Ok(v) => rows.push(v),
            Err(e) => failures.push(ClipFailure {
                id: clip.id().to_string(),
                message: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() {
        return Err(FeatureError::Clips(failures));
    }
    let ids = clips.iter().map(|c| c.id().to_string()).collect();
    Ok(EmbeddingSet::from_rows(ids, &rows)?)
}

/// Read every clip of a manifest, in manifest order.
pub fn load_clips(manifest: &DatasetManifest) -> Result<Vec<AudioClip>, FeatureError> {
    let results: Vec<_> = manifest
        .clips()
        .par_iter()
        .map(|c| read_wav_with_id(&c.path, c.id.clone()))
        .collect();
    let mut clips = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (entry, r) in manifest.clips().iter().zip(results) {
        match r {
            Ok(c) => clips.push(c),
            Err(e) => failures.push(ClipFailure {
                id: entry.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    if failures.is_empty() {
        Ok(clips)
    } else {
        Err(FeatureError::Clips(failures))
    }
}

/// Full per-dataset path: read, pick the SPL peak on the original audio,
/// perturb, embed, select.
pub fn embed_dataset(
    manifest: &DatasetManifest,
    embedder: &dyn Embedder,
    grid: &FrameGrid,
    spec: &PerturbationSpec,
) -> Result<EmbeddingSet, FeatureError> {
    let clips = load_clips(manifest)?;
    let peaks = peak_frames(&clips, grid);
    embed_clips(&clips, &peaks, embedder, grid, spec)
}
