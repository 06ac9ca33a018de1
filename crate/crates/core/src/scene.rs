//! Deterministic three-stem scene synthesis and schedule-driven rendering.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::context::{synthesize_context, ContextFeatureMatrix, ContextStream};
use crate::error::{input_err, Result};
use crate::seed::{rng_for, Rng};
use crate::signal::{db_to_amplitude, AudioClip};

/// Source classes, in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceClass {
    Speech,
    Music,
    Effects,
}

impl SourceClass {
    pub const ALL: [SourceClass; 3] = [SourceClass::Speech, SourceClass::Music, SourceClass::Effects];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short tag used in file names (`stem_h.wav` and friends).
    pub fn tag(self) -> &'static str {
        match self {
            SourceClass::Speech => "h",
            SourceClass::Music => "m",
            SourceClass::Effects => "e",
        }
    }
}

/// Per-second saliency weights over (speech, music, effects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightSchedule {
    weights: Vec<[f64; 3]>,
}

impl HighlightSchedule {
    pub fn from_weights(weights: Vec<[f64; 3]>) -> Result<Self> {
        if weights.is_empty() {
            return Err(input_err!("schedule needs at least one second"));
        }
        for (t, w) in weights.iter().enumerate() {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|&v| v.is_nan() || v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(input_err!("schedule row {t} is not on the simplex: {w:?}"));
            }
        }
        Ok(Self { weights })
    }

    pub fn uniform(seconds: usize) -> Result<Self> {
        Self::from_weights(vec![[1.0 / 3.0; 3]; seconds])
    }

    pub fn seconds(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[[f64; 3]] {
        &self.weights
    }

    /// Class holding the unique largest weight in `second`, if any.
    pub fn dominant(&self, second: usize) -> Option<SourceClass> {
        let w = self.weights[second];
        let max = w.iter().copied().fold(f64::MIN, f64::max);
        let mut winners = SourceClass::ALL.into_iter().filter(|c| w[c.index()] == max);
        match (winners.next(), winners.next()) {
            (Some(c), None) => Some(c),
            _ => None,
        }
    }

    /// Whether `class` sits at full level in `second` (ties all count as full).
    fn at_full_level(&self, second: usize, class: SourceClass) -> bool {
        let w = self.weights[second];
        let max = w.iter().copied().fold(f64::MIN, f64::max);
        w[class.index()] == max
    }
}

const DOMINANT_WEIGHT: f64 = 0.7;
const OTHER_WEIGHT: f64 = 0.15;

/// Piecewise-dominant schedule with one to three segments.
pub fn make_schedule(seed: u64, seconds: usize) -> Result<HighlightSchedule> {
    if seconds < 2 {
        return Err(input_err!("schedules need at least 2 seconds, got {seconds}"));
    }
    let mut rng = rng_for(seed, "schedule");
    let segments = rng.gen_range(1..=3usize).min(seconds);
    let mut cuts: Vec<usize> = (1..seconds).collect();
    cuts.shuffle(&mut rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(segments - 1).collect();
    cuts.sort_unstable();
    cuts.push(seconds);

    let mut weights = Vec::with_capacity(seconds);
    let mut previous: Option<SourceClass> = None;
    let mut start = 0;
    for end in cuts {
        let choices: Vec<SourceClass> = SourceClass::ALL.into_iter().filter(|c| Some(*c) != previous).collect();
        let dominant = *choices.choose(&mut rng).expect("at least two choices");
        let mut row = [OTHER_WEIGHT; 3];
        row[dominant.index()] = DOMINANT_WEIGHT;
        weights.extend(std::iter::repeat_n(row, end - start));
        previous = Some(dominant);
        start = end;
    }
    HighlightSchedule::from_weights(weights)
}

/// Three time-aligned class tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct StemSet {
    pub speech: AudioClip,
    pub music: AudioClip,
    pub effects: AudioClip,
}

impl StemSet {
    pub fn new(speech: AudioClip, music: AudioClip, effects: AudioClip) -> Result<Self> {
        let rate = speech.sample_rate();
        let len = speech.len();
        for clip in [&music, &effects] {
            if clip.sample_rate() != rate || clip.len() != len {
                return Err(input_err!("stems must share length and sample rate"));
            }
        }
        Ok(Self { speech, music, effects })
    }

    pub fn get(&self, class: SourceClass) -> &AudioClip {
        match class {
            SourceClass::Speech => &self.speech,
            SourceClass::Music => &self.music,
            SourceClass::Effects => &self.effects,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (SourceClass, &AudioClip)> {
        SourceClass::ALL.into_iter().map(move |c| (c, self.get(c)))
    }

    pub fn map(&self, mut f: impl FnMut(SourceClass, &AudioClip) -> Result<AudioClip>) -> Result<Self> {
        Self::new(
            f(SourceClass::Speech, &self.speech)?,
            f(SourceClass::Music, &self.music)?,
            f(SourceClass::Effects, &self.effects)?,
        )
    }

    pub fn mix(&self) -> Result<AudioClip> {
        AudioClip::sum([&self.speech, &self.music, &self.effects])
    }

    pub fn sample_rate(&self) -> u32 {
        self.speech.sample_rate()
    }

    pub fn len(&self) -> usize {
        self.speech.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speech.is_empty()
    }
}

const STEM_PEAK: f64 = 0.5;

fn peak_normalize(x: &mut [f64], peak: f64) {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        let g = peak / max;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Linear fade envelope: 1 inside `[start, end)`, ramps of `ramp` samples.
fn gate(len: usize, start: usize, end: usize, ramp: usize) -> impl Fn(usize) -> f64 {
    move |i| {
        if i < start || i >= end.min(len) {
            0.0
        } else {
            let up = (i - start) as f64 / ramp as f64;
            let down = (end - i) as f64 / ramp as f64;
            up.min(down).min(1.0)
        }
    }
}

fn speech_proxy(rng: &mut Rng, sr: u32, len: usize) -> Vec<f64> {
    let fs = sr as f64;
    let f0 = rng.gen_range(110.0..220.0);
    let syllable_rate = rng.gen_range(4.0..8.0);
    let intonation_rate = rng.gen_range(0.3..0.9);
    let intonation_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let top = (0.45 * fs).min(3800.0);
    let harmonics = ((top / (f0 * 1.1)) as usize).max(1);

    // Alternate voiced stretches and pauses.
    let mut voiced = vec![0.0; len];
    let ramp = (0.015 * fs) as usize;
    let mut pos = (rng.gen_range(0.0..0.2) * fs) as usize;
    while pos < len {
        let talk = (rng.gen_range(0.5..1.4) * fs) as usize;
        let env = gate(len, pos, pos + talk, ramp.max(1));
        for (i, v) in voiced.iter_mut().enumerate().skip(pos).take(talk) {
            *v = env(i);
        }
        pos += talk + (rng.gen_range(0.12..0.35) * fs) as usize;
    }

    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for (i, gate) in voiced.iter().enumerate() {
        let t = i as f64 / fs;
        let f = f0 * (1.0 + 0.06 * (std::f64::consts::TAU * intonation_rate * t + intonation_phase).sin());
        phase += std::f64::consts::TAU * f / fs;
        let am = 0.25 + 0.75 * (0.5 - 0.5 * (std::f64::consts::TAU * syllable_rate * t).cos());
        let tone: f64 = (1..=harmonics).map(|k| (k as f64 * phase).sin() / k as f64).sum();
        out.push(gate * am * tone);
    }
    out
}

fn music_proxy(rng: &mut Rng, sr: u32, len: usize) -> Vec<f64> {
    let fs = sr as f64;
    let root_midi = rng.gen_range(57..66) as f64;
    let third = if rng.gen_bool(0.5) { 4.0 } else { 3.0 };
    let notes = [root_midi, root_midi + third, root_midi + 7.0];
    let vibrato_rate = rng.gen_range(1.0..2.5);
    let vibrato_depth = 0.004;
    let attack = 0.2 * fs;
    let mut phases = [0.0f64; 3];
    let offsets: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            let vib = 1.0 + vibrato_depth * (std::f64::consts::TAU * vibrato_rate * t).sin();
            let mut acc = 0.0;
            for (n, note) in notes.iter().enumerate() {
                let f = 440.0 * 2f64.powf((note - 69.0) / 12.0) * vib;
                phases[n] += std::f64::consts::TAU * f / fs;
                for k in 1..=4 {
                    if f * k as f64 <= 0.45 * fs {
                        acc += (k as f64 * phases[n] + offsets[n]).sin() / (k * k) as f64;
                    }
                }
            }
            acc * (i as f64 / attack).min(1.0)
        })
        .collect()
}

fn band_limited_noise(rng: &mut Rng, len: usize, sr: u32, lo: f64, hi: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut buf: Vec<Complex64> = (0..len).map(|_| Complex64::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let df = sr as f64 / len as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * df;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|c| c.re / len as f64).collect()
}

/// Passband of the effects proxy at sample rate `sr`.
pub fn effects_band(seed: u64, sr: u32) -> (f64, f64) {
    let mut rng = rng_for(seed, "effects-band");
    let lo: f64 = rng.gen_range(1200.0..1800.0);
    let hi = (lo + rng.gen_range(1200.0..1800.0)).min(0.45 * sr as f64);
    (lo, hi)
}

fn effects_proxy(seed: u64, rng: &mut Rng, sr: u32, len: usize) -> Vec<f64> {
    let fs = sr as f64;
    let (lo, hi) = effects_band(seed, sr);
    let noise = band_limited_noise(rng, len, sr, lo, hi);
    let mut envelope = vec![0.0f64; len];
    let ramp = ((0.01 * fs) as usize).max(1);
    let seconds = (len as f64 / fs).ceil() as usize;
    for s in 0..seconds {
        for _ in 0..rng.gen_range(1..=2) {
            let start = ((s as f64 + rng.gen_range(0.0..0.8)) * fs) as usize;
            let dur = (rng.gen_range(0.2..0.5) * fs) as usize;
            let env = gate(len, start, start + dur, ramp);
            for (i, e) in envelope.iter_mut().enumerate().skip(start).take(dur) {
                *e = e.max(env(i));
            }
        }
    }
    noise.iter().zip(&envelope).map(|(n, e)| n * e).collect()
}

/// Synthesises speech, music and effects proxies; all peak-normalised to 0.5.
pub fn synth_stems(seed: u64, sr: u32, seconds: usize) -> Result<StemSet> {
    if sr < 8000 {
        return Err(input_err!("sample rate must be at least 8000 Hz, got {sr}"));
    }
    if seconds < 2 {
        return Err(input_err!("scenes need at least 2 seconds, got {seconds}"));
    }
    let len = sr as usize * seconds;
    let mut speech = speech_proxy(&mut rng_for(seed, "speech"), sr, len);
    let mut music = music_proxy(&mut rng_for(seed, "music"), sr, len);
    let mut effects = effects_proxy(seed, &mut rng_for(seed, "effects"), sr, len);
    for track in [&mut speech, &mut music, &mut effects] {
        peak_normalize(track, STEM_PEAK);
    }
    StemSet::new(AudioClip::new(speech, sr)?, AudioClip::new(music, sr)?, AudioClip::new(effects, sr)?)
}

/// Rendering parameters shared by every scene of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub salience_gap_db: f64,
    pub crossfade_ms: f64,
    pub context_dim_vid: usize,
    pub context_dim_text: usize,
    pub context_noise_std: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            salience_gap_db: 6.0,
            crossfade_ms: 100.0,
            context_dim_vid: 16,
            context_dim_text: 16,
            context_noise_std: 0.05,
        }
    }
}

impl RenderConfig {
    pub fn context_dim(&self, stream: ContextStream) -> usize {
        match stream {
            ContextStream::Vision => self.context_dim_vid,
            ContextStream::Text => self.context_dim_text,
        }
    }
}

/// Ground-truth mix with its schedule-gained stems and proxy contexts.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub gt_mix: AudioClip,
    pub gained: StemSet,
    pub context_vid: ContextFeatureMatrix,
    pub context_text: ContextFeatureMatrix,
}

impl RenderedScene {
    pub fn context(&self, stream: ContextStream) -> &ContextFeatureMatrix {
        match stream {
            ContextStream::Vision => &self.context_vid,
            ContextStream::Text => &self.context_text,
        }
    }
}

/// Per-sample linear gain applied to `class` under `schedule`.
pub fn class_gain_curve(
    schedule: &HighlightSchedule,
    class: SourceClass,
    sr: u32,
    len: usize,
    gap_db: f64,
    crossfade_ms: f64,
) -> Vec<f64> {
    let low = db_to_amplitude(-gap_db);
    let level = |s: usize| {
        let s = s.min(schedule.seconds() - 1);
        if schedule.at_full_level(s, class) {
            1.0
        } else {
            low
        }
    };
    let fs = sr as f64;
    let half = crossfade_ms / 2000.0;
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            let second = t.floor() as usize;
            let here = level(second);
            // Distance to the nearest interior boundary decides the blend.
            let nearest = t.round();
            let b = nearest as usize;
            if half > 0.0 && b >= 1 && b < schedule.seconds() && (t - nearest).abs() < half {
                let (before, after) = (level(b - 1), level(b));
                let alpha = (t - (nearest - half)) / (2.0 * half);
                before + (after - before) * alpha
            } else {
                here
            }
        })
        .collect()
}

/// Applies the schedule to `stems` and builds the ground-truth mix and contexts.
pub fn render_scene(
    stems: &StemSet,
    schedule: &HighlightSchedule,
    config: &RenderConfig,
    context_seed: u64,
) -> Result<RenderedScene> {
    if config.salience_gap_db.is_nan() || config.salience_gap_db <= 0.0 {
        return Err(input_err!("salience gap must be positive, got {}", config.salience_gap_db));
    }
    let sr = stems.sample_rate();
    if stems.len() != schedule.seconds() * sr as usize {
        return Err(input_err!(
            "stems hold {} samples but the schedule covers {} s at {sr} Hz",
            stems.len(),
            schedule.seconds()
        ));
    }
    let gained = stems.map(|class, clip| {
        let curve = class_gain_curve(schedule, class, sr, clip.len(), config.salience_gap_db, config.crossfade_ms);
        AudioClip::new(clip.samples().iter().zip(&curve).map(|(x, g)| x * g).collect(), sr)
    })?;
    let gt_mix = gained.mix()?;
    let ctx = |stream| {
        synthesize_context(schedule, stream, config.context_dim(stream), config.context_noise_std, context_seed)
    };
    Ok(RenderedScene {
        gt_mix,
        gained,
        context_vid: ctx(ContextStream::Vision)?,
        context_text: ctx(ContextStream::Text)?,
    })
}
