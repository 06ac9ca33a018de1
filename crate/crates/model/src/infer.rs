//! Running a trained model on audio files.

use std::fs;
use std::path::Path;

use vah_core::context::{read_cfm, ContextFeatureMatrix, ContextStream};
use vah_core::corpus::{Manifest, Split};
use vah_core::wav;
use vah_core::AudioClip;

use crate::error::{Error, Result};
use crate::net::Model;
use crate::train::Example;

pub fn infer(model: &Model<f32>, input: &AudioClip, contexts: &[&ContextFeatureMatrix]) -> Result<AudioClip> {
    if input.sample_rate() != model.config.sample_rate {
        return Err(Error::Input(format!(
            "input is at {} Hz, model expects {} Hz",
            input.sample_rate(),
            model.config.sample_rate
        )));
    }
    let x: Vec<f32> = input.samples().iter().map(|v| *v as f32).collect();
    let y = model.forward(&x, contexts)?;
    Ok(AudioClip::new(y.into_iter().map(f64::from).collect(), input.sample_rate())?)
}

/// Reads `input`, runs the model with the context files it needs and writes `output`.
pub fn infer_file(model: &Model<f32>, input: &Path, contexts: &[(ContextStream, &Path)], output: &Path) -> Result<()> {
    let clip = wav::read_mono(input)?;
    let mut loaded = Vec::new();
    for spec in &model.config.contexts {
        let path = contexts
            .iter()
            .find(|(s, _)| *s == spec.stream)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::Input(format!("model needs a {:?} context file", spec.stream)))?;
        loaded.push(read_cfm(path)?);
    }
    let refs: Vec<&ContextFeatureMatrix> = loaded.iter().collect();
    let out = infer(model, &clip, &refs)?;
    wav::write_f32(output, &out)?;
    Ok(())
}

/// Writes `{out_dir}/{clip_id}.wav` for every clip of `split`.
pub fn infer_split(model: &Model<f32>, manifest: &Manifest, split: Split, out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut n = 0;
    for record in manifest.split(split) {
        let ex = Example::load(record, &manifest.root, &model.config)?;
        let y = model.forward(&ex.input, &ex.context_refs())?;
        let clip = AudioClip::new(y.into_iter().map(f64::from).collect(), model.config.sample_rate)?;
        wav::write_f32(out_dir.join(format!("{}.wav", record.clip_id)), &clip)?;
        n += 1;
    }
    Ok(n)
}
