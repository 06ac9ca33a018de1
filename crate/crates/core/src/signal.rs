//! Framing, STFT/iSTFT, envelopes, gain and channel folding.
//!
//! Framing convention used everywhere in the workspace: periodic Hann window
//! for analysis and synthesis, frames centred on multiples of `hop` with
//! `window_size / 2` samples of reflect padding on each side, and weighted
//! overlap-add normalised by the summed squared window. With `hop <=
//! window_size / 2` this reconstructs the input exactly.

use std::sync::Arc;

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{config_err, input_err, Error, Result};

pub type Complex64 = Complex<f64>;

/// Floating point types the spectral code runs on.
pub trait Real: FftNum + Float {}
impl<T: FftNum + Float> Real for T {}

/// Mono sampled waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(input_err!("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(input_err!("audio clip must contain at least one sample"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(input_err!("sample {i} is not finite"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sample-wise map producing a clip at the same rate.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|&x| f(x)).collect(), self.sample_rate)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        self.map(|x| x * factor)
    }

    fn check_compatible(&self, other: &AudioClip) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(input_err!("sample rate mismatch: {} vs {}", self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(input_err!("length mismatch: {} vs {}", self.len(), other.len()));
        }
        Ok(())
    }

    pub fn add(&self, other: &AudioClip) -> Result<Self> {
        self.check_compatible(other)?;
        Self::new(self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(), self.sample_rate)
    }

    pub fn sub(&self, other: &AudioClip) -> Result<Self> {
        self.check_compatible(other)?;
        Self::new(self.samples.iter().zip(&other.samples).map(|(a, b)| a - b).collect(), self.sample_rate)
    }

    /// Sum of equally shaped clips.
    pub fn sum<'a>(clips: impl IntoIterator<Item = &'a AudioClip>) -> Result<Self> {
        let mut iter = clips.into_iter();
        let first = iter.next().ok_or_else(|| input_err!("cannot sum zero clips"))?;
        iter.try_fold(first.clone(), |acc, c| acc.add(c))
    }

    pub fn max_abs_diff(&self, other: &AudioClip) -> f64 {
        self.samples.iter().zip(&other.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.len() as f64).sqrt()
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    }
}

fn hann_periodic<S: Real>(n: usize) -> Vec<S> {
    (0..n)
        .map(|k| {
            let phase = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            S::from_f64(0.5 - 0.5 * phase.cos()).expect("finite window value")
        })
        .collect()
}

/// Mirror index `i` (in padded coordinates shifted by `-pad`) back into `[0, len)`.
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// A reusable STFT configuration with cached FFT plans.
///
/// Spectra are stored bin-major: element `(f, t)` lives at `f * frames + t`.
pub struct StftPlan<S: Real> {
    window_size: usize,
    hop: usize,
    window: Vec<S>,
    forward: Arc<dyn Fft<S>>,
    inverse: Arc<dyn Fft<S>>,
}

impl<S: Real> Clone for StftPlan<S> {
    fn clone(&self) -> Self {
        Self {
            window_size: self.window_size,
            hop: self.hop,
            window: self.window.clone(),
            forward: Arc::clone(&self.forward),
            inverse: Arc::clone(&self.inverse),
        }
    }
}

impl<S: Real> std::fmt::Debug for StftPlan<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("window_size", &self.window_size).field("hop", &self.hop).finish()
    }
}

impl<S: Real> StftPlan<S> {
    pub fn new(window_size: usize, hop: usize) -> Result<Self> {
        if window_size < 2 || !window_size.is_power_of_two() {
            return Err(config_err!("window size {window_size} is not a power of two"));
        }
        if hop == 0 || hop > window_size || !window_size.is_multiple_of(hop) {
            return Err(config_err!("hop {hop} must divide window size {window_size}"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window_size,
            hop,
            window: hann_periodic(window_size),
            forward: planner.plan_fft_forward(window_size),
            inverse: planner.plan_fft_inverse(window_size),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    fn pad(&self) -> usize {
        self.window_size / 2
    }

    /// Complex STFT of `x`.
    pub fn forward(&self, x: &[S]) -> Vec<Complex<S>> {
        let n = self.window_size;
        let bins = self.bins();
        let frames = self.frames(x.len());
        let pad = self.pad() as isize;
        let mut out = vec![Complex::new(S::zero(), S::zero()); bins * frames];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.hop) as isize - pad;
            for (k, slot) in buf.iter_mut().enumerate() {
                let i = start + k as isize;
                let v = if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { x[reflect_index(i, x.len())] };
                *slot = Complex::new(v * self.window[k], S::zero());
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..bins {
                out[f * frames + t] = buf[f];
            }
        }
        out
    }

    /// Magnitude STFT of `x`.
    pub fn magnitude(&self, x: &[S]) -> Vec<S> {
        self.forward(x).iter().map(|c| c.norm()).collect()
    }

    /// Adjoint of [`forward`](Self::forward): maps per-bin gradients
    /// `dL/dRe + i dL/dIm` back to a gradient over the `len` input samples.
    pub fn forward_adjoint(&self, grad: &[Complex<S>], len: usize) -> Vec<S> {
        let n = self.window_size;
        let bins = self.bins();
        let frames = self.frames(len);
        assert_eq!(grad.len(), bins * frames, "gradient shape does not match frame layout");
        let pad = self.pad() as isize;
        let mut out = vec![S::zero(); len];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            for slot in buf.iter_mut() {
                *slot = Complex::new(S::zero(), S::zero());
            }
            for f in 0..bins {
                buf[f] = grad[f * frames + t];
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = (t * self.hop) as isize - pad;
            for (k, c) in buf.iter().enumerate() {
                let i = start + k as isize;
                let j = if i >= 0 && (i as usize) < len { i as usize } else { reflect_index(i, len) };
                out[j] = out[j] + c.re * self.window[k];
            }
        }
        out
    }

    /// Summed squared synthesis window over the padded timeline.
    fn overlap_norm(&self, len: usize) -> Vec<S> {
        let frames = self.frames(len);
        let mut norm = vec![S::zero(); len + self.window_size];
        for t in 0..frames {
            let start = t * self.hop;
            for (k, w) in self.window.iter().enumerate() {
                norm[start + k] = norm[start + k] + *w * *w;
            }
        }
        norm
    }

    fn checked_norm(&self, len: usize) -> Result<Vec<S>> {
        let norm = self.overlap_norm(len);
        let pad = self.pad();
        let tiny = S::from_f64(1e-10).expect("representable");
        if let Some(i) = norm[pad..pad + len].iter().position(|&d| d <= tiny) {
            return Err(Error::Internal(format!(
                "overlap-add denominator vanishes at sample {i} (window {}, hop {})",
                self.window_size, self.hop
            )));
        }
        Ok(norm)
    }

    /// Inverse STFT producing `len` samples.
    pub fn inverse(&self, spec: &[Complex<S>], len: usize) -> Result<Vec<S>> {
        let n = self.window_size;
        let bins = self.bins();
        let frames = self.frames(len);
        if spec.len() != bins * frames {
            return Err(input_err!("spectrum has {} cells, expected {bins}x{frames}", spec.len()));
        }
        let norm = self.checked_norm(len)?;
        let pad = self.pad();
        let scale = S::one() / S::from_usize(n).expect("representable");
        let mut acc = vec![S::zero(); len + n];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = spec[f * frames + t];
            }
            buf[0].im = S::zero();
            buf[n / 2].im = S::zero();
            for f in 1..n / 2 {
                buf[n - f] = buf[f].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for k in 0..n {
                acc[start + k] = acc[start + k] + buf[k].re * scale * self.window[k];
            }
        }
        Ok((0..len).map(|i| acc[i + pad] / norm[i + pad]).collect())
    }

    /// Adjoint of [`inverse`](Self::inverse): maps a gradient over the output
    /// samples to per-bin gradients `dL/dRe + i dL/dIm` of the spectrum.
    pub fn inverse_adjoint(&self, grad: &[S], len: usize) -> Result<Vec<Complex<S>>> {
        let n = self.window_size;
        let bins = self.bins();
        let frames = self.frames(len);
        let norm = self.checked_norm(len)?;
        let pad = self.pad();
        let mut padded = vec![S::zero(); len + n];
        for i in 0..len {
            padded[i + pad] = grad[i] / norm[i + pad];
        }
        let inv_n = S::one() / S::from_usize(n).expect("representable");
        let two = S::one() + S::one();
        let mut out = vec![Complex::new(S::zero(), S::zero()); bins * frames];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop;
            for k in 0..n {
                buf[k] = Complex::new(padded[start + k] * self.window[k], S::zero());
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..bins {
                let edge = f == 0 || f == n / 2;
                let weight = if edge { inv_n } else { two * inv_n };
                let mut g = buf[f] * weight;
                if edge {
                    g.im = S::zero();
                }
                out[f * frames + t] = g;
            }
        }
        Ok(out)
    }
}

/// Complex spectrogram with the metadata needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: usize,
    pub frames: usize,
    /// Bin-major cells, `data[f * frames + t]`.
    pub data: Vec<Complex64>,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Length of the clip this spectrogram was computed from.
    pub length: usize,
}

impl ComplexSpectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            bins: self.bins,
            frames: self.frames,
            data: self.data.iter().map(|c| c.norm()).collect(),
            window_size: self.window_size,
            hop: self.hop,
            sample_rate: self.sample_rate,
            length: self.length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub length: usize,
}

impl MagnitudeSpectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { data: self.data.iter().map(|v| v * factor).collect(), ..self.clone() }
    }
}

pub fn stft(clip: &AudioClip, window_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::<f64>::new(window_size, hop)?;
    Ok(stft_with(&plan, clip))
}

pub fn stft_with(plan: &StftPlan<f64>, clip: &AudioClip) -> ComplexSpectrogram {
    ComplexSpectrogram {
        bins: plan.bins(),
        frames: plan.frames(clip.len()),
        data: plan.forward(clip.samples()),
        window_size: plan.window_size(),
        hop: plan.hop(),
        sample_rate: clip.sample_rate(),
        length: clip.len(),
    }
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip> {
    let plan = StftPlan::<f64>::new(spec.window_size, spec.hop)?;
    if spec.bins != plan.bins() || spec.frames != plan.frames(spec.length) {
        return Err(input_err!("spectrogram shape does not match its framing metadata"));
    }
    AudioClip::new(plan.inverse(&spec.data, spec.length)?, spec.sample_rate)
}

/// Resynthesises `mag` using the phase of `phase_of`.
pub fn recombine(mag: &MagnitudeSpectrogram, phase_of: &ComplexSpectrogram) -> Result<AudioClip> {
    let same = mag.bins == phase_of.bins
        && mag.frames == phase_of.frames
        && mag.window_size == phase_of.window_size
        && mag.hop == phase_of.hop
        && mag.length == phase_of.length;
    if !same {
        return Err(input_err!("magnitude and phase spectrograms differ in shape"));
    }
    let data = mag.data.iter().zip(&phase_of.data).map(|(&m, c)| Complex64::from_polar(m, c.arg())).collect();
    istft(&ComplexSpectrogram { data, sample_rate: mag.sample_rate, ..phase_of.clone() })
}

/// Rectified moving-average envelope, decimated by the smoothing length.
pub fn envelope(clip: &AudioClip, smoothing_ms: f64) -> Result<Vec<f64>> {
    if smoothing_ms <= 0.0 || !smoothing_ms.is_finite() {
        return Err(input_err!("smoothing must be positive, got {smoothing_ms} ms"));
    }
    let width = ((smoothing_ms * clip.sample_rate() as f64 / 1000.0).round() as usize).max(1);
    let x = clip.samples();
    if width > x.len() {
        return Err(input_err!("smoothing window of {width} samples exceeds clip length {}", x.len()));
    }
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v.abs();
        prefix.push(acc);
    }
    let before = width / 2;
    let after = width - before;
    Ok((0..x.len())
        .step_by(width)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(x.len());
            ((prefix[hi] - prefix[lo]) / (hi - lo) as f64).max(0.0)
        })
        .collect())
}

pub fn to_mono(left: &AudioClip, right: &AudioClip) -> Result<AudioClip> {
    left.check_compatible(right)?;
    AudioClip::new(left.samples().iter().zip(right.samples()).map(|(l, r)| 0.5 * (l + r)).collect(), left.sample_rate())
}

pub fn db_to_amplitude(gain_db: f64) -> f64 {
    10f64.powf(gain_db / 20.0)
}

pub fn apply_gain_db(clip: &AudioClip, gain_db: f64) -> Result<AudioClip> {
    if !gain_db.is_finite() {
        return Err(input_err!("gain must be finite, got {gain_db}"));
    }
    clip.scaled(db_to_amplitude(gain_db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn sine(freq: f64, sr: u32, len: usize, amp: f64) -> AudioClip {
        let w = 2.0 * std::f64::consts::PI * freq / sr as f64;
        AudioClip::new((0..len).map(|i| amp * (w * i as f64).sin()).collect(), sr).unwrap()
    }

    fn noise(seed: u64, len: usize, sr: u32) -> AudioClip {
        let mut rng = crate::seed::rng_for(seed, "noise");
        AudioClip::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), sr).unwrap()
    }

    #[test]
    fn rejects_invalid_clips() {
        assert!(AudioClip::new(vec![], 8000).is_err());
        assert!(AudioClip::new(vec![0.0, f64::NAN], 8000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn zero_clip_gives_zero_spectrogram() {
        let spec = stft(&AudioClip::silence(1000, 8000).unwrap(), 256, 64).unwrap();
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn full_scale_frame_count() {
        let plan = StftPlan::<f64>::new(4096, 1024).unwrap();
        assert_eq!(plan.bins(), 2049);
        assert_eq!(plan.frames(441_000), 431);
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(StftPlan::<f64>::new(500, 100), Err(Error::Config(_))));
        assert!(matches!(StftPlan::<f64>::new(512, 100), Err(Error::Config(_))));
        assert!(matches!(StftPlan::<f64>::new(512, 1024), Err(Error::Config(_))));
    }

    /// Direct windowed DFT of one frame, used as an independent oracle.
    fn brute_force_frame(x: &[f64], n: usize, hop: usize, t: usize) -> Vec<f64> {
        let pad = n / 2;
        (0..=n / 2)
            .map(|f| {
                let mut re = 0.0;
                let mut im = 0.0;
                for k in 0..n {
                    let i = (t * hop + k) as isize - pad as isize;
                    let v = x[reflect_index(i, x.len())];
                    let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos();
                    let th = 2.0 * std::f64::consts::PI * (f * k) as f64 / n as f64;
                    re += w * v * th.cos();
                    im -= w * v * th.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn sine_peak_bin_matches_brute_force_dft() {
        let x = sine(1000.0, 8000, 4000, 1.0);
        let spec = stft(&x, 512, 128).unwrap();
        for t in 4..spec.frames - 4 {
            let column: Vec<f64> = (0..spec.bins).map(|f| spec.at(f, t).norm()).collect();
            let argmax = column.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, 64);
        }
        let oracle = brute_force_frame(x.samples(), 512, 128, 10);
        for (f, o) in oracle.iter().enumerate().take(spec.bins) {
            assert!((o - spec.at(f, 10).norm()).abs() < 1e-8);
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        for (n, hop) in [(512, 128), (256, 128), (64, 16), (1024, 256)] {
            let x = noise(n as u64, 2 * 8000 + 37, 8000);
            let y = istft(&stft(&x, n, hop).unwrap()).unwrap();
            assert!(x.max_abs_diff(&y) < 1e-9, "window {n} hop {hop}");
        }
    }

    #[test]
    fn round_trip_short_clips() {
        for len in [1usize, 2, 3, 10, 100] {
            let x = noise(len as u64, len, 8000);
            let y = istft(&stft(&x, 64, 16).unwrap()).unwrap();
            assert!(x.max_abs_diff(&y) < 1e-9, "len {len}");
        }
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let x = noise(3, 1000, 8000);
        let mut spec = stft(&x, 128, 32).unwrap();
        spec.data.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        assert!(istft(&spec).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hop_equal_to_window_is_an_internal_error() {
        let x = noise(4, 1000, 8000);
        let spec = stft(&x, 128, 128).unwrap();
        assert!(matches!(istft(&spec), Err(Error::Internal(_))));
    }

    #[test]
    fn recombine_identity_and_scaling() {
        let x = sine(440.0, 8000, 8000, 0.5);
        let spec = stft(&x, 512, 128).unwrap();
        let mag = spec.magnitude();
        let y = recombine(&mag, &spec).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-9);

        let silent = recombine(&mag.scaled(0.0), &spec).unwrap();
        assert!(silent.samples().iter().all(|&v| v == 0.0));

        let doubled = recombine(&mag.scaled(2.0), &spec).unwrap();
        let edge = 512;
        let (mut num, mut den) = (0.0, 0.0);
        for i in edge..x.len() - edge {
            num += (doubled.samples()[i] - 2.0 * x.samples()[i]).powi(2);
            den += (2.0 * x.samples()[i]).powi(2);
        }
        assert!((num / den).sqrt() < 1e-3);
    }

    #[test]
    fn recombine_shape_mismatch() {
        let a = stft(&noise(1, 1000, 8000), 128, 32).unwrap();
        let b = stft(&noise(2, 1200, 8000), 128, 32).unwrap();
        assert!(recombine(&a.magnitude(), &b).is_err());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let plan = StftPlan::<f64>::new(64, 16).unwrap();
        let len = 300;
        let x = noise(11, len, 8000);
        let mut rng = crate::seed::rng_for(12, "adj");
        let g: Vec<Complex64> = (0..plan.bins() * plan.frames(len))
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        // <F x, g> == <x, F* g> using the real inner product Re*Re + Im*Im.
        let fx = plan.forward(x.samples());
        let lhs: f64 = fx.iter().zip(&g).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let adj = plan.forward_adjoint(&g, len);
        let rhs: f64 = x.samples().iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

        let y: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ix = plan.inverse(&g, len).unwrap();
        let lhs: f64 = ix.iter().zip(&y).map(|(a, b)| a * b).sum();
        let adj = plan.inverse_adjoint(&y, len).unwrap();
        let rhs: f64 = g.iter().zip(&adj).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn envelope_cases() {
        let silent = AudioClip::silence(800, 8000).unwrap();
        assert!(envelope(&silent, 16.0).unwrap().iter().all(|&v| v == 0.0));

        let constant = AudioClip::new(vec![0.5; 800], 8000).unwrap();
        assert!(envelope(&constant, 16.0).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let x = sine(500.0, 8000, 8000, 1.0);
        let env = envelope(&x, 16.0).unwrap();
        let expected = 2.0 / std::f64::consts::PI;
        for v in &env[1..env.len() - 1] {
            assert!((v - expected).abs() < 0.02, "{v}");
        }
        assert!(envelope(&AudioClip::silence(10, 8000).unwrap(), 16.0).is_err());
        assert!(envelope(&x, 0.0).is_err());
    }

    #[test]
    fn mono_folding() {
        let l = noise(5, 100, 8000);
        assert_eq!(to_mono(&l, &l).unwrap(), l);
        let neg = l.scaled(-1.0).unwrap();
        assert!(to_mono(&l, &neg).unwrap().samples().iter().all(|&v| v == 0.0));
        let ones = AudioClip::new(vec![1.0; 10], 8000).unwrap();
        let zeros = AudioClip::silence(10, 8000).unwrap();
        assert!(to_mono(&ones, &zeros).unwrap().samples().iter().all(|&v| v == 0.5));
        assert!(to_mono(&ones, &AudioClip::silence(11, 8000).unwrap()).is_err());
    }

    #[test]
    fn gain_cases() {
        let x = noise(6, 100, 8000);
        assert_eq!(apply_gain_db(&x, 0.0).unwrap(), x);
        let doubled = apply_gain_db(&x, 20.0 * 2f64.log10()).unwrap();
        assert!(doubled.max_abs_diff(&x.scaled(2.0).unwrap()) < 1e-9);
        let back = apply_gain_db(&apply_gain_db(&x, -12.0).unwrap(), 12.0).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert!(apply_gain_db(&x, f64::INFINITY).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn perfect_reconstruction(seed in 0u64..10_000, len in 1usize..3000, cfg in 0usize..3) {
                let (n, hop) = [(256, 64), (128, 64), (512, 128)][cfg];
                let x = noise(seed, len, 8000);
                let y = istft(&stft(&x, n, hop).unwrap()).unwrap();
                prop_assert!(x.max_abs_diff(&y) < 1e-6);
            }

            #[test]
            fn stft_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let x = noise(seed, 700, 8000);
                let y = noise(seed + 1, 700, 8000);
                let mix = AudioClip::new(
                    x.samples().iter().zip(y.samples()).map(|(p, q)| a * p + b * q).collect(),
                    8000,
                ).unwrap();
                let (sx, sy, sm) = (stft(&x, 128, 32).unwrap(), stft(&y, 128, 32).unwrap(), stft(&mix, 128, 32).unwrap());
                for i in 0..sm.data.len() {
                    prop_assert!((sm.data[i] - (sx.data[i] * a + sy.data[i] * b)).norm() < 1e-9);
                }
            }

            #[test]
            fn envelope_sign_invariant(seed in 0u64..10_000) {
                let x = noise(seed, 2000, 8000);
                prop_assert_eq!(envelope(&x, 16.0).unwrap(), envelope(&x.scaled(-1.0).unwrap(), 16.0).unwrap());
            }

            #[test]
            fn gains_compose(seed in 0u64..1000, a in -24.0f64..24.0, b in -24.0f64..24.0) {
                let x = noise(seed, 200, 8000);
                let once = apply_gain_db(&x, a + b).unwrap();
                let twice = apply_gain_db(&apply_gain_db(&x, a).unwrap(), b).unwrap();
                prop_assert!(once.max_abs_diff(&twice) < 1e-12);
            }
        }
    }
}
