//! Waveform, semantic and temporal distances between a prediction and its
//! ground truth, plus the evaluation report.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{decode_weights, ContextFeatureMatrix, ContextStream};
use crate::corpus::{ClipRecord, LoadedClip, Manifest, Split};
use crate::error::{input_err, Error, Result};
use crate::scene::{SourceClass, StemSet};
use crate::seed::sha256_hex;
use crate::signal::{envelope, stft, AudioClip};
use crate::wav;

pub const MAG_WINDOW: usize = 1024;
pub const MAG_HOP: usize = 256;
pub const ENV_SMOOTHING_MS: f64 = 16.0;
pub const GAIN_FRAME_MS: f64 = 50.0;
const RIDGE: f64 = 1e-8;
const SMOOTHING: f64 = 1e-8;

fn check_pair(x: &AudioClip, y: &AudioClip) -> Result<()> {
    if x.len() != y.len() || x.sample_rate() != y.sample_rate() {
        return Err(input_err!(
            "clips differ: {} samples at {} Hz vs {} samples at {} Hz",
            x.len(),
            x.sample_rate(),
            y.len(),
            y.sample_rate()
        ));
    }
    Ok(())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Mean L1 distance between STFT magnitudes.
pub fn mag_distance(x: &AudioClip, y: &AudioClip) -> Result<f64> {
    check_pair(x, y)?;
    let a = stft(x, MAG_WINDOW, MAG_HOP)?.magnitude();
    let b = stft(y, MAG_WINDOW, MAG_HOP)?.magnitude();
    Ok(mean_abs_diff(&a.data, &b.data))
}

/// Mean L1 distance between 16 ms envelopes.
pub fn env_distance(x: &AudioClip, y: &AudioClip) -> Result<f64> {
    check_pair(x, y)?;
    Ok(mean_abs_diff(&envelope(x, ENV_SMOOTHING_MS)?, &envelope(y, ENV_SMOOTHING_MS)?))
}

/// Least-squares per-frame gains explaining `mix` as a combination of the stems.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleGains {
    pub frame_len: usize,
    pub gains: Vec<[f64; 3]>,
    /// Per-frame L2 norm of each stem.
    pub stem_norms: Vec<[f64; 3]>,
}

impl OracleGains {
    /// Energy `(g_i ‖s_i‖)²` attributed to each class per frame.
    pub fn class_energy(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.gains.iter().zip(&self.stem_norms).map(|(g, n)| [0, 1, 2].map(|i| (g[i] * n[i]).powi(2)))
    }
}

pub fn oracle_gains(mix: &AudioClip, stems: &StemSet, frame_ms: f64) -> Result<OracleGains> {
    check_pair(mix, &stems.speech)?;
    if frame_ms.is_nan() || frame_ms <= 0.0 {
        return Err(input_err!("frame length must be positive, got {frame_ms} ms"));
    }
    let frame_len = ((frame_ms * mix.sample_rate() as f64 / 1000.0).round() as usize).max(1);
    let tracks = [stems.speech.samples(), stems.music.samples(), stems.effects.samples()];
    let y = mix.samples();
    let mut gains = Vec::new();
    let mut stem_norms = Vec::new();
    for start in (0..y.len()).step_by(frame_len) {
        let end = (start + frame_len).min(y.len());
        let mut normal = Matrix3::<f64>::zeros();
        let mut rhs = Vector3::<f64>::zeros();
        for i in 0..3 {
            for j in i..3 {
                let v: f64 = (start..end).map(|n| tracks[i][n] * tracks[j][n]).sum();
                normal[(i, j)] = v;
                normal[(j, i)] = v;
            }
            rhs[i] = (start..end).map(|n| tracks[i][n] * y[n]).sum();
        }
        let norms = [0, 1, 2].map(|i| normal[(i, i)].sqrt());
        let g = if normal.trace() == 0.0 {
            [0.0; 3]
        } else {
            let solved =
                (normal + Matrix3::identity() * RIDGE).cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(Vector3::zeros);
            [0, 1, 2].map(|i| solved[i].max(0.0))
        };
        gains.push(g);
        stem_norms.push(norms);
    }
    Ok(OracleGains { frame_len, gains, stem_norms })
}

/// Class distribution of a mix under the oracle decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub p: [f64; 3],
}

impl ClassDistribution {
    fn from_energy(e: [f64; 3]) -> Self {
        let total: f64 = e.iter().sum();
        let raw = if total > 0.0 { e.map(|v| v / total) } else { [1.0 / 3.0; 3] };
        let smoothed = raw.map(|v| v + SMOOTHING);
        let norm: f64 = smoothed.iter().sum();
        Self { p: smoothed.map(|v| v / norm) }
    }
}

pub fn class_distribution(mix: &AudioClip, stems: &StemSet) -> Result<ClassDistribution> {
    let gains = oracle_gains(mix, stems, GAIN_FRAME_MS)?;
    let mut total = [0.0; 3];
    for e in gains.class_energy() {
        for i in 0..3 {
            total[i] += e[i];
        }
    }
    Ok(ClassDistribution::from_energy(total))
}

/// `KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

pub fn kld_proxy(pred: &AudioClip, gt: &AudioClip, stems: &StemSet) -> Result<f64> {
    check_pair(pred, gt)?;
    let p_gt = class_distribution(gt, stems)?;
    let p_pred = class_distribution(pred, stems)?;
    Ok(kl_divergence(&p_gt.p, &p_pred.p).max(0.0))
}

/// Per-second class energies under the oracle decomposition.
pub fn class_energy_per_second(mix: &AudioClip, stems: &StemSet) -> Result<Vec<[f64; 3]>> {
    let gains = oracle_gains(mix, stems, GAIN_FRAME_MS)?;
    let sr = mix.sample_rate() as usize;
    let seconds = mix.len().div_ceil(sr);
    let mut out = vec![[0.0; 3]; seconds];
    for (k, e) in gains.class_energy().enumerate() {
        let s = (k * gains.frame_len / sr).min(seconds - 1);
        for i in 0..3 {
            out[s][i] += e[i];
        }
    }
    Ok(out)
}

fn cosine(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between decoded schedule weights and per-second class shares.
pub fn schedule_alignment(
    context: &ContextFeatureMatrix,
    stream: ContextStream,
    mix: &AudioClip,
    stems: &StemSet,
) -> Result<f64> {
    let energy = class_energy_per_second(mix, stems)?;
    if context.frames() != energy.len() {
        return Err(input_err!("context has {} frames but the clip spans {} seconds", context.frames(), energy.len()));
    }
    let weights = decode_weights(context, stream)?;
    let total: f64 = weights
        .iter()
        .zip(&energy)
        .map(|(w, e)| {
            let sum: f64 = e.iter().sum();
            let share = if sum > 0.0 { e.map(|v| v / sum) } else { [0.0; 3] };
            cosine(w, &share)
        })
        .sum();
    Ok(total / energy.len() as f64)
}

/// Alignment of `gt` minus alignment of `pred`.
pub fn delta_ib_proxy(
    context: &ContextFeatureMatrix,
    stream: ContextStream,
    gt: &AudioClip,
    pred: &AudioClip,
    stems: &StemSet,
) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(schedule_alignment(context, stream, gt, stems)? - schedule_alignment(context, stream, pred, stems)?)
}

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(input_err!("{name} has negative or non-finite mass"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(input_err!("{name} sums to {sum}, not 1"));
    }
    Ok(())
}

/// Exact 1-D optimal transport cost between histograms on a uniform grid.
pub fn wasserstein_1d(p: &[f64], q: &[f64], bin_width: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(input_err!("supports differ: {} vs {} bins", p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q).take(p.len() - 1) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total * bin_width)
}

/// Per-second share of one class in a mix, normalised into a distribution
/// over seconds; `None` when the class never appears.
fn share_distribution(energy: &[[f64; 3]], class: usize) -> Option<Vec<f64>> {
    let share: Vec<f64> = energy
        .iter()
        .map(|e| {
            let sum: f64 = e.iter().sum();
            if sum > 0.0 {
                e[class] / sum
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = share.iter().sum();
    (total > 0.0).then(|| share.iter().map(|v| v / total).collect())
}

/// Temporal Wasserstein distance of per-class presence, averaged over classes.
pub fn w_dis_audio(pred: &AudioClip, gt: &AudioClip, stems: &StemSet) -> Result<f64> {
    check_pair(pred, gt)?;
    let ep = class_energy_per_second(pred, stems)?;
    let eg = class_energy_per_second(gt, stems)?;
    let uniform = vec![1.0 / ep.len() as f64; ep.len()];
    let mut total = 0.0;
    for class in SourceClass::ALL {
        let k = class.index();
        total += match (share_distribution(&ep, k), share_distribution(&eg, k)) {
            (None, None) => 0.0,
            (Some(a), Some(b)) => wasserstein_1d(&a, &b, 1.0)?,
            (Some(a), None) | (None, Some(a)) => wasserstein_1d(&a, &uniform, 1.0)?,
        };
    }
    Ok(total / 3.0)
}

/// Every metric for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(rename = "MAG")]
    pub mag: f64,
    #[serde(rename = "ENV")]
    pub env: f64,
    #[serde(rename = "KLD_proxy")]
    pub kld_proxy: f64,
    #[serde(rename = "dIB_proxy")]
    pub delta_ib_proxy: f64,
    #[serde(rename = "W_dis")]
    pub w_dis: f64,
}

impl MetricValues {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mag: self.mag * k,
            env: self.env * k,
            kld_proxy: self.kld_proxy * k,
            delta_ib_proxy: self.delta_ib_proxy * k,
            w_dis: self.w_dis * k,
        }
    }

    pub fn mean<'a>(values: impl IntoIterator<Item = &'a MetricValues>) -> Option<Self> {
        let mut acc = [0.0; 5];
        let mut n = 0usize;
        for v in values {
            for (a, x) in acc.iter_mut().zip(v.as_array()) {
                *a += x;
            }
            n += 1;
        }
        (n > 0).then(|| {
            let m = acc.map(|a| a / n as f64);
            Self { mag: m[0], env: m[1], kld_proxy: m[2], delta_ib_proxy: m[3], w_dis: m[4] }
        })
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.mag, self.env, self.kld_proxy, self.delta_ib_proxy, self.w_dis]
    }
}

/// Context stream used for the alignment metric.
pub const EVAL_STREAM: ContextStream = ContextStream::Vision;

pub fn clip_metrics(pred: &AudioClip, clip: &LoadedClip) -> Result<MetricValues> {
    let gt = &clip.gt;
    let stems = &clip.sources;
    Ok(MetricValues {
        mag: mag_distance(pred, gt)?,
        env: env_distance(pred, gt)?,
        kld_proxy: kld_proxy(pred, gt, stems)?,
        delta_ib_proxy: delta_ib_proxy(clip.context(EVAL_STREAM), EVAL_STREAM, gt, pred, stems)?,
        w_dis: w_dis_audio(pred, gt, stems)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    pub status: ClipStatus,
    pub metrics: Option<MetricValues>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub split: Split,
    pub config_hash: String,
    pub clip_count: usize,
    pub failed_count: usize,
    pub mean: Option<MetricValues>,
    pub mean_x100: Option<MetricValues>,
    pub clips: Vec<ClipResult>,
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    split: Split,
    mag_window: usize,
    mag_hop: usize,
    env_smoothing_ms: f64,
    gain_frame_ms: f64,
    context_stream: &'a str,
    manifest_sha256: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One header row and one row of x100 means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,MAG,ENV,KLD_proxy,dIB_proxy,W_dis\n");
        let cells: Vec<String> = match &self.mean_x100 {
            Some(m) => m.as_array().iter().map(|v| format!("{v:.4}")).collect(),
            None => vec!["nan".into(); 5],
        };
        out.push_str(&format!("{},{}\n", self.system, cells.join(",")));
        out
    }
}

/// Scores `{outputs_dir}/{clip_id}.wav` against every clip of `split`.
pub fn evaluate(manifest: &Manifest, split: Split, outputs_dir: &Path, system: &str) -> Result<EvalReport> {
    let records: Vec<&ClipRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(input_err!("manifest has no {split:?} clips"));
    }
    let clips: Vec<ClipResult> = records
        .par_iter()
        .map(|record| {
            let scored = (|| {
                let pred = wav::read_mono(outputs_dir.join(format!("{}.wav", record.clip_id)))?;
                let clip = record.load(&manifest.root)?;
                clip_metrics(&pred, &clip)
            })();
            match scored {
                Ok(m) => ClipResult {
                    clip_id: record.clip_id.clone(),
                    status: ClipStatus::Ok,
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{}: {e}", record.clip_id);
                    ClipResult {
                        clip_id: record.clip_id.clone(),
                        status: ClipStatus::Failed,
                        metrics: None,
                        error: Some(describe(&e, outputs_dir, &manifest.root)),
                    }
                }
            }
        })
        .collect();
    let mean = MetricValues::mean(clips.iter().filter_map(|c| c.metrics.as_ref()));
    let settings = EvalSettings {
        split,
        mag_window: MAG_WINDOW,
        mag_hop: MAG_HOP,
        env_smoothing_ms: ENV_SMOOTHING_MS,
        gain_frame_ms: GAIN_FRAME_MS,
        context_stream: EVAL_STREAM.label(),
        manifest_sha256: sha256_hex(manifest.to_jsonl().as_bytes()),
    };
    let config_hash = sha256_hex(serde_json::to_string(&settings).expect("settings serialize").as_bytes());
    Ok(EvalReport {
        system: system.to_string(),
        split,
        config_hash,
        clip_count: clips.len(),
        failed_count: clips.iter().filter(|c| c.status == ClipStatus::Failed).count(),
        mean,
        mean_x100: mean.map(|m| m.scaled(100.0)),
        clips,
    })
}

/// Error text with run-specific directories stripped, so reports stay comparable.
fn describe(e: &Error, outputs_dir: &Path, root: &Path) -> String {
    let text = e.to_string();
    let text = text.replace(&outputs_dir.display().to_string(), "<outputs>");
    text.replace(&root.display().to_string(), "<corpus>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusConfig, SceneConfig};
    use crate::scene::synth_stems;
    use crate::seed::rng_for;
    use rand::Rng as _;

    fn stems() -> StemSet {
        synth_stems(21, 8000, 4).unwrap()
    }

    fn weighted(stems: &StemSet, g: [f64; 3]) -> AudioClip {
        AudioClip::sum([
            &stems.speech.scaled(g[0]).unwrap(),
            &stems.music.scaled(g[1]).unwrap(),
            &stems.effects.scaled(g[2]).unwrap(),
        ])
        .unwrap()
    }

    /// Exact transport cost by linear programming over the full coupling.
    fn lp_transport(p: &[f64], q: &[f64]) -> f64 {
        use minilp::{ComparisonOp, OptimizationDirection, Problem};
        let n = p.len();
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<Vec<_>> = (0..n)
            .map(|i| (0..n).map(|j| problem.add_var((i as f64 - j as f64).abs(), (0.0, f64::INFINITY))).collect())
            .collect();
        for i in 0..n {
            problem.add_constraint(vars[i].iter().map(|&v| (v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, p[i]);
        }
        for j in 0..n {
            problem.add_constraint((0..n).map(|i| (vars[i][j], 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, q[j]);
        }
        problem.solve().unwrap().objective()
    }

    fn random_histogram(rng: &mut crate::seed::Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect();
        let sum: f64 = raw.iter().sum();
        if sum == 0.0 {
            let mut v = vec![0.0; n];
            v[0] = 1.0;
            return v;
        }
        raw.iter().map(|v| v / sum).collect()
    }

    #[test]
    fn distances_vanish_on_identical_inputs() {
        let s = stems();
        let x = s.mix().unwrap();
        assert_eq!(mag_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(env_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(kld_proxy(&x, &x, &s).unwrap(), 0.0);
        assert_eq!(w_dis_audio(&x, &x, &s).unwrap(), 0.0);
    }

    #[test]
    fn mag_is_symmetric_and_checks_shapes() {
        let s = stems();
        let (x, y) = (s.speech.clone(), s.music.clone());
        assert_eq!(mag_distance(&x, &y).unwrap(), mag_distance(&y, &x).unwrap());
        let short = AudioClip::silence(100, 8000).unwrap();
        assert!(matches!(mag_distance(&x, &short), Err(Error::Input(_))));
        assert!(matches!(env_distance(&x, &short), Err(Error::Input(_))));
    }

    #[test]
    fn env_sign_and_homogeneity() {
        let x = stems().mix().unwrap();
        let neg = x.scaled(-1.0).unwrap();
        assert!(env_distance(&x, &neg).unwrap() < 1e-15);
        let doubled = x.scaled(2.0).unwrap();
        let env = envelope(&x, ENV_SMOOTHING_MS).unwrap();
        let mean_env = env.iter().sum::<f64>() / env.len() as f64;
        assert!((env_distance(&doubled, &x).unwrap() - mean_env).abs() < 1e-12);
    }

    #[test]
    fn oracle_gains_recover_known_weights() {
        let s = stems();
        let mix = weighted(&s, [2.0, 1.0, 0.5]);
        let g = oracle_gains(&mix, &s, GAIN_FRAME_MS).unwrap();
        let mut checked = 0;
        for (gain, norms) in g.gains.iter().zip(&g.stem_norms) {
            if norms.iter().all(|n| *n > 1e-3) {
                for (got, want) in gain.iter().zip([2.0, 1.0, 0.5]) {
                    assert!((got - want).abs() < 1e-3, "{gain:?}");
                }
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn oracle_gains_match_grid_search_on_one_frame() {
        let s = stems();
        let mix = weighted(&s, [0.8, 0.3, 1.1]).add(&s.speech.scaled(0.05).unwrap().map(|v| v.sin()).unwrap()).unwrap();
        let g = oracle_gains(&mix, &s, GAIN_FRAME_MS).unwrap();
        let k = (0..g.gains.len()).find(|&k| g.stem_norms[k].iter().all(|n| *n > 1e-2)).unwrap();
        let (lo, hi) = (k * g.frame_len, (k + 1) * g.frame_len);
        let resid = |c: [f64; 3]| -> f64 {
            (lo..hi)
                .map(|n| {
                    let fit =
                        c[0] * s.speech.samples()[n] + c[1] * s.music.samples()[n] + c[2] * s.effects.samples()[n];
                    (mix.samples()[n] - fit).powi(2)
                })
                .sum()
        };
        let best = resid(g.gains[k]);
        let step = 0.01;
        for a in -3..=3 {
            for b in -3..=3 {
                for c in -3..=3 {
                    let probe = [
                        (g.gains[k][0] + a as f64 * step).max(0.0),
                        (g.gains[k][1] + b as f64 * step).max(0.0),
                        (g.gains[k][2] + c as f64 * step).max(0.0),
                    ];
                    assert!(resid(probe) >= best - 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_stem_and_silence() {
        let s = stems();
        let g = oracle_gains(&s.music, &s, GAIN_FRAME_MS).unwrap();
        for (gain, norms) in g.gains.iter().zip(&g.stem_norms) {
            if norms.iter().all(|n| *n > 1e-3) {
                assert!((gain[1] - 1.0).abs() < 0.05 && gain[0] < 0.05 && gain[2] < 0.05, "{gain:?}");
            }
        }
        let silent = AudioClip::silence(s.len(), 8000).unwrap();
        let zeros = StemSet::new(silent.clone(), silent.clone(), silent.clone()).unwrap();
        assert!(oracle_gains(&silent, &zeros, GAIN_FRAME_MS).unwrap().gains.iter().all(|g| *g == [0.0; 3]));
        assert!(oracle_gains(&silent, &s, GAIN_FRAME_MS).unwrap().gains.iter().all(|g| *g == [0.0; 3]));
    }

    #[test]
    fn class_distribution_cases() {
        let s = stems();
        let energy = |c: &AudioClip| c.samples().iter().map(|v| v * v).sum::<f64>();
        let level = |c: &AudioClip| c.scaled((1.0 / energy(c)).sqrt()).unwrap();
        let equal = StemSet::new(level(&s.speech), level(&s.music), level(&s.effects)).unwrap();
        let p = class_distribution(&equal.mix().unwrap(), &equal).unwrap();
        for v in p.p {
            assert!((v - 1.0 / 3.0).abs() < 0.05, "{p:?}");
        }
        assert!((p.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let speech = class_distribution(&s.speech, &s).unwrap();
        assert!(speech.p[0] > 0.9);
    }

    #[test]
    fn kl_matches_direct_formula() {
        let q: [f64; 3] = [1.0 / 3.0; 3];
        let p: [f64; 3] = [0.98, 0.01, 0.01];
        let direct = q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        assert!((kl_divergence(&q, &p) - direct).abs() < 1e-15);
        assert!((direct - 1.0 / 3.0 * ((1.0 / 3.0 / 0.98f64).ln() + 2.0 * (1.0 / 3.0 / 0.01f64).ln())).abs() < 1e-12);
        let s = stems();
        for g in [[1.0, 0.2, 0.2], [0.1, 2.0, 0.5]] {
            assert!(kld_proxy(&weighted(&s, g), &s.mix().unwrap(), &s).unwrap() >= 0.0);
        }
    }

    fn schedule_context(seed: u64) -> (crate::scene::HighlightSchedule, ContextFeatureMatrix) {
        let schedule = crate::scene::make_schedule(seed, 4).unwrap();
        let ctx = crate::context::synthesize_context(&schedule, EVAL_STREAM, 16, 0.05, seed).unwrap();
        (schedule, ctx)
    }

    #[test]
    fn delta_ib_cases() {
        let s = stems();
        for seed in 0..8 {
            let (schedule, ctx) = schedule_context(seed);
            let gt = crate::scene::render_scene(&s, &schedule, &Default::default(), 0).unwrap();
            let g = &gt.gained;
            // Swap the speech and effects gain curves.
            let ratio = |num: &AudioClip, den: &AudioClip| -> Vec<f64> {
                num.samples().iter().zip(den.samples()).map(|(a, b)| if *b == 0.0 { 0.0 } else { a / b }).collect()
            };
            let gs = ratio(&g.speech, &s.speech);
            let ge = ratio(&g.effects, &s.effects);
            let apply = |c: &AudioClip, gain: &[f64]| {
                AudioClip::new(c.samples().iter().zip(gain).map(|(x, k)| x * k).collect(), 8000).unwrap()
            };
            let shuffled = AudioClip::sum([&apply(&s.speech, &ge), &g.music, &apply(&s.effects, &gs)]).unwrap();
            let gt_mix = &gt.gt_mix;
            assert_eq!(delta_ib_proxy(&ctx, EVAL_STREAM, gt_mix, gt_mix, &s).unwrap(), 0.0);
            let d = delta_ib_proxy(&ctx, EVAL_STREAM, gt_mix, &shuffled, &s).unwrap();
            let back = delta_ib_proxy(&ctx, EVAL_STREAM, &shuffled, gt_mix, &s).unwrap();
            assert!((d + back).abs() < 1e-12);
            if (0..4).any(|t| matches!(schedule.dominant(t), Some(SourceClass::Speech | SourceClass::Effects))) {
                assert!(d > 0.0, "seed {seed}: {d}");
            }
        }
        let (_, ctx) = schedule_context(0);
        let short = AudioClip::silence(3 * 8000, 8000).unwrap();
        let three = StemSet::new(short.clone(), short.clone(), short.clone()).unwrap();
        assert!(delta_ib_proxy(&ctx, EVAL_STREAM, &short, &short, &three).is_err());
    }

    #[test]
    fn wasserstein_basics() {
        assert_eq!(wasserstein_1d(&[0.5, 0.5], &[0.5, 0.5], 1.0).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], 0.5).unwrap(), 1.0);
        assert!(wasserstein_1d(&[0.6, 0.6], &[0.5, 0.5], 1.0).is_err());
        assert!(wasserstein_1d(&[1.0], &[0.5, 0.5], 1.0).is_err());
        assert!(wasserstein_1d(&[1.5, -0.5], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn wasserstein_matches_linear_program() {
        let mut rng = rng_for(99, "w1");
        for n in 1..=8 {
            for _ in 0..25 {
                let p = random_histogram(&mut rng, n);
                let q = random_histogram(&mut rng, n);
                let fast = wasserstein_1d(&p, &q, 1.0).unwrap();
                let exact = lp_transport(&p, &q);
                assert!((fast - exact).abs() < 1e-9, "{p:?} {q:?}: {fast} vs {exact}");
            }
        }
    }

    #[test]
    fn w_dis_circular_shift_toy() {
        // A single class active for the first three of ten seconds, delayed by one second.
        let sr = 8000;
        let seconds = 10;
        let source = synth_stems(4, sr, seconds).unwrap().music;
        let gt = AudioClip::new(
            source.samples().iter().enumerate().map(|(i, v)| if i < 3 * sr as usize { *v } else { 0.0 }).collect(),
            sr,
        )
        .unwrap();
        let mut shifted = gt.samples().to_vec();
        shifted.rotate_right(sr as usize);
        let pred = AudioClip::new(shifted, sr).unwrap();
        let silent = AudioClip::silence(gt.len(), sr).unwrap();
        let stems = StemSet::new(gt.add(&pred).unwrap(), silent.clone(), silent).unwrap();
        let w = w_dis_audio(&pred, &gt, &stems).unwrap();
        let mut p = vec![0.0; seconds];
        let mut q = vec![0.0; seconds];
        for t in 0..3 {
            q[t] = 1.0 / 3.0;
            p[t + 1] = 1.0 / 3.0;
        }
        let expected = lp_transport(&p, &q) / 3.0;
        assert!((w - expected).abs() < 1e-9, "{w} vs {expected}");
        assert!((w - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_gt_copies_scores_zero_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let outs = tempfile::tempdir().unwrap();
        let config = CorpusConfig { scene: SceneConfig { seconds: 2, ..Default::default() }, ..Default::default() };
        let manifest = build_corpus(24, &config, dir.path()).unwrap();
        let test: Vec<_> = manifest.split(Split::Train).collect();
        for r in &test[..test.len() - 1] {
            std::fs::copy(dir.path().join(&r.paths.gt), outs.path().join(format!("{}.wav", r.clip_id))).unwrap();
        }
        let report = evaluate(&manifest, Split::Train, outs.path(), "gt").unwrap();
        assert_eq!(report.failed_count, 1);
        assert_eq!(report.clip_count, test.len());
        for v in report.mean.unwrap().as_array() {
            assert_eq!(v, 0.0);
        }
        let again = evaluate(&manifest, Split::Train, outs.path(), "gt").unwrap();
        assert_eq!(report.to_json(), again.to_json());
        assert!(report.to_csv().starts_with("system,MAG"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn distances_are_nonnegative(g in prop::array::uniform3(0.0f64..3.0), h in prop::array::uniform3(0.0f64..3.0)) {
                let s = synth_stems(8, 8000, 2).unwrap();
                let (x, y) = (weighted(&s, g), weighted(&s, h));
                prop_assert!(mag_distance(&x, &y).unwrap() >= 0.0);
                prop_assert!(env_distance(&x, &y).unwrap() >= 0.0);
                prop_assert!(kld_proxy(&x, &y, &s).unwrap() >= 0.0);
                prop_assert!(w_dis_audio(&x, &y, &s).unwrap() >= 0.0);
            }
        }
    }
}
