//! Non-learned reference systems.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{AdjustmentRecord, SeparatedStems};
use crate::error::{config_err, input_err, Result};
use crate::loudness::{gain_to_target, integrated_loudness};
use crate::scene::SourceClass;
use crate::seed::rng_for;
use crate::signal::{apply_gain_db, db_to_amplitude, AudioClip};

/// Returns the input unchanged.
pub fn identity_baseline(input: &AudioClip) -> AudioClip {
    input.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoudnessTarget {
    pub mean_lufs: f64,
    pub std_lu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatRemixConfig {
    pub speech: LoudnessTarget,
    pub music: LoudnessTarget,
    pub effects: LoudnessTarget,
    pub seed: u64,
}

impl Default for StatRemixConfig {
    fn default() -> Self {
        Self {
            speech: LoudnessTarget { mean_lufs: -20.0, std_lu: 2.0 },
            music: LoudnessTarget { mean_lufs: -26.0, std_lu: 2.0 },
            effects: LoudnessTarget { mean_lufs: -26.0, std_lu: 2.0 },
            seed: 0,
        }
    }
}

impl StatRemixConfig {
    pub fn target(&self, class: SourceClass) -> LoudnessTarget {
        match class {
            SourceClass::Speech => self.speech,
            SourceClass::Music => self.music,
            SourceClass::Effects => self.effects,
        }
    }

    fn validate(&self) -> Result<()> {
        for class in SourceClass::ALL {
            let t = self.target(class);
            if t.std_lu.is_nan() || t.std_lu < 0.0 || !t.mean_lufs.is_finite() {
                return Err(config_err!("invalid loudness target for {class:?}: {t:?}"));
            }
        }
        Ok(())
    }
}

/// Separated stems of an adjusted input: each clean estimate carries its
/// class gain and the residual rides with effects, so the stems sum to the input.
pub fn input_stems(separated: &SeparatedStems, record: &AdjustmentRecord) -> Result<SeparatedStems> {
    let gain = |class| db_to_amplitude(record.get(class).strength_db);
    Ok(SeparatedStems {
        speech: separated.speech.scaled(gain(SourceClass::Speech))?,
        music: separated.music.scaled(gain(SourceClass::Music))?,
        effects: separated.effects.scaled(gain(SourceClass::Effects))?,
        residual: separated.residual.scaled(gain(SourceClass::Effects))?,
    })
}

/// Output of the statistical remix with the targets it drew.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRemix {
    pub output: AudioClip,
    /// Sampled target per class; `None` where the stem was silent and kept.
    pub targets: [Option<f64>; 3],
}

/// Moves every non-silent stem to a loudness drawn from its class
/// distribution and sums them with the residual untouched.
pub fn stat_remix_baseline(
    input: &AudioClip,
    stems: &SeparatedStems,
    config: &StatRemixConfig,
    clip_key: &str,
) -> Result<StatRemix> {
    config.validate()?;
    let sum = stems.sum()?;
    if sum.len() != input.len() || sum.max_abs_diff(input) > 1e-4 {
        return Err(input_err!("separated stems do not sum to the input"));
    }
    let mut rng = rng_for(config.seed, &format!("stat-remix/{clip_key}"));
    let mut tracks = Vec::with_capacity(4);
    let mut targets = [None; 3];
    for class in SourceClass::ALL {
        let t = config.target(class);
        let draw = Normal::new(t.mean_lufs, t.std_lu).expect("validated").sample(&mut rng);
        let stem = stems.get(class);
        let reading = integrated_loudness(stem)?;
        if reading.is_silent() {
            tracks.push(stem.clone());
            continue;
        }
        targets[class.index()] = Some(draw);
        tracks.push(apply_gain_db(stem, gain_to_target(&reading, draw)?)?);
    }
    tracks.push(stems.residual.clone());
    Ok(StatRemix { output: AudioClip::sum(&tracks)?, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{adjust, oracle_separate, remix, synth_scene, Difficulty, SceneConfig};

    fn clip(seed: u64) -> (AudioClip, SeparatedStems) {
        let s = synth_scene(seed, &SceneConfig::default()).unwrap();
        let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
        let (adjusted, record) = adjust(&sep, Difficulty::Random, seed).unwrap();
        let input = remix(&adjusted).unwrap();
        (input, input_stems(&sep, &record).unwrap())
    }

    #[test]
    fn identity_is_a_copy() {
        let (input, _) = clip(1);
        assert_eq!(identity_baseline(&input), input);
        assert_eq!(identity_baseline(&identity_baseline(&input)), input);
    }

    #[test]
    fn input_stems_sum_to_input() {
        let (input, stems) = clip(2);
        assert!(stems.sum().unwrap().max_abs_diff(&input) < 1e-9);
    }

    #[test]
    fn degenerate_targets_keep_input() {
        let (input, stems) = clip(3);
        let measured = |c: SourceClass| integrated_loudness(stems.get(c)).unwrap().lufs().unwrap();
        let pin = |c| LoudnessTarget { mean_lufs: measured(c), std_lu: 0.0 };
        let config = StatRemixConfig {
            speech: pin(SourceClass::Speech),
            music: pin(SourceClass::Music),
            effects: pin(SourceClass::Effects),
            seed: 0,
        };
        let out = stat_remix_baseline(&input, &stems, &config, "x").unwrap();
        assert!(out.output.max_abs_diff(&input) < 1e-9);
    }

    #[test]
    fn stems_hit_sampled_targets() {
        let (input, stems) = clip(4);
        let config = StatRemixConfig::default();
        let out = stat_remix_baseline(&input, &stems, &config, "clip").unwrap();
        for class in SourceClass::ALL {
            let target = out.targets[class.index()].unwrap();
            let reading = integrated_loudness(stems.get(class)).unwrap();
            let moved = apply_gain_db(stems.get(class), gain_to_target(&reading, target).unwrap()).unwrap();
            let after = integrated_loudness(&moved).unwrap().lufs().unwrap();
            assert!((after - target).abs() < 0.05);
        }
        let again = stat_remix_baseline(&input, &stems, &config, "clip").unwrap();
        assert_eq!(out, again);
        let other = stat_remix_baseline(&input, &stems, &config, "other").unwrap();
        assert_ne!(out.targets, other.targets);
    }

    #[test]
    fn silent_stem_is_kept_and_bad_config_rejected() {
        let (_, mut stems) = clip(5);
        stems.music = AudioClip::silence(stems.speech.len(), 8000).unwrap();
        let input = stems.sum().unwrap();
        let out = stat_remix_baseline(&input, &stems, &StatRemixConfig::default(), "k").unwrap();
        assert_eq!(out.targets[1], None);
        let bad = StatRemixConfig { speech: LoudnessTarget { mean_lufs: -20.0, std_lu: -1.0 }, ..Default::default() };
        assert!(stat_remix_baseline(&input, &stems, &bad, "k").is_err());
    }
}
