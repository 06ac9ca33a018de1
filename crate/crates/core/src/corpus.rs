//! Separation, adjustment and remixing of rendered scenes, plus the on-disk
//! corpus layout and manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{read_cfm, write_cfm, ContextFeatureMatrix, ContextStream};
use crate::error::{config_err, input_err, Error, Result};
use crate::loudness::integrated_loudness;
use crate::scene::{
    make_schedule, render_scene, synth_stems, HighlightSchedule, RenderConfig, RenderedScene, SourceClass, StemSet,
};
use crate::seed::{derive_seed, rng_for, sha256_hex};
use crate::signal::{apply_gain_db, AudioClip};
use crate::wav;

/// Leaky per-class estimates plus the residual that restores the source mix.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedStems {
    pub speech: AudioClip,
    pub music: AudioClip,
    pub effects: AudioClip,
    pub residual: AudioClip,
}

impl SeparatedStems {
    pub fn sum(&self) -> Result<AudioClip> {
        AudioClip::sum([&self.speech, &self.music, &self.effects, &self.residual])
    }

    /// The effects estimate with the residual folded in.
    pub fn effects_with_residual(&self) -> Result<AudioClip> {
        self.effects.add(&self.residual)
    }

    pub fn get(&self, class: SourceClass) -> &AudioClip {
        match class {
            SourceClass::Speech => &self.speech,
            SourceClass::Music => &self.music,
            SourceClass::Effects => &self.effects,
        }
    }
}

/// Oracle separation of `gt_mix` from its gained stems with symmetric leakage.
pub fn oracle_separate(gt_mix: &AudioClip, gained: &StemSet, leakage: f64) -> Result<SeparatedStems> {
    if !(0.0..0.5).contains(&leakage) {
        return Err(config_err!("leakage must lie in [0, 0.5), got {leakage}"));
    }
    if gt_mix.len() != gained.len() || gt_mix.sample_rate() != gained.sample_rate() {
        return Err(input_err!("mix and stems differ in length or sample rate"));
    }
    let sr = gt_mix.sample_rate();
    let [h, m, e] = [&gained.speech, &gained.music, &gained.effects].map(|c| c.samples());
    let keep = 1.0 - leakage;
    let spill = leakage / 2.0;
    let mut est = [Vec::with_capacity(h.len()), Vec::with_capacity(h.len()), Vec::with_capacity(h.len())];
    for i in 0..h.len() {
        est[0].push(keep * h[i] + spill * (m[i] + e[i]));
        est[1].push(keep * m[i] + spill * (h[i] + e[i]));
        est[2].push(keep * e[i] + spill * (h[i] + m[i]));
    }
    let [speech, music, effects] = est.map(|v| AudioClip::new(v, sr));
    let (speech, music, effects) = (speech?, music?, effects?);
    let residual = gt_mix.sub(&AudioClip::sum([&speech, &music, &effects])?)?;
    Ok(SeparatedStems { speech, music, effects, residual })
}

/// How hard the adjustment step perturbs a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    High,
    Moderate,
    Low,
    Random,
}

impl Difficulty {
    pub const LADDER_DB: [f64; 3] = [12.0, 9.0, 6.0];

    pub fn pinned_db(self) -> Option<f64> {
        match self {
            Difficulty::High => Some(12.0),
            Difficulty::Moderate => Some(9.0),
            Difficulty::Low => Some(6.0),
            Difficulty::Random => None,
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Difficulty::High),
            "moderate" => Ok(Difficulty::Moderate),
            "low" => Ok(Difficulty::Low),
            "random" => Ok(Difficulty::Random),
            other => Err(config_err!("unknown difficulty {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Suppress,
    Highlight,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAdjustment {
    pub action: Action,
    pub strength_db: f64,
    pub loudness_before: Option<f64>,
    pub loudness_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRecord {
    pub difficulty: Difficulty,
    pub seed: u64,
    pub speech: ClassAdjustment,
    pub music: ClassAdjustment,
    pub effects: ClassAdjustment,
}

impl AdjustmentRecord {
    pub fn get(&self, class: SourceClass) -> &ClassAdjustment {
        match class {
            SourceClass::Speech => &self.speech,
            SourceClass::Music => &self.music,
            SourceClass::Effects => &self.effects,
        }
    }
}

/// Gained separated tracks; the effects track carries the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedStems {
    pub speech: AudioClip,
    pub music: AudioClip,
    pub effects: AudioClip,
}

/// Readings closer than this to the loudest count as ties.
const TIE_LU: f64 = 0.1;

/// Suppresses the loudest class and highlights the rest.
///
/// Fails with an input error when fewer than two tracks clear the loudness gate.
pub fn adjust(stems: &SeparatedStems, difficulty: Difficulty, seed: u64) -> Result<(AdjustedStems, AdjustmentRecord)> {
    let tracks = [stems.speech.clone(), stems.music.clone(), stems.effects_with_residual()?];
    let mut readings = [None; 3];
    for (slot, track) in readings.iter_mut().zip(&tracks) {
        *slot = integrated_loudness(track)?.lufs();
    }
    let active = readings.iter().filter(|r| r.is_some()).count();
    if active < 2 {
        return Err(input_err!("only {active} non-silent stem(s); need at least two"));
    }
    let loudest_lufs = readings.iter().flatten().copied().fold(f64::MIN, f64::max);
    let loudest = readings
        .iter()
        .position(|r| r.is_some_and(|l| l >= loudest_lufs - TIE_LU))
        .expect("some reading reaches the maximum");

    let mut rng = rng_for(seed, "adjust");
    let mut out = Vec::with_capacity(3);
    let mut records = Vec::with_capacity(3);
    for (k, (track, reading)) in tracks.iter().zip(readings).enumerate() {
        let Some(before) = reading else {
            out.push(track.clone());
            records.push(ClassAdjustment {
                action: Action::Skip,
                strength_db: 0.0,
                loudness_before: None,
                loudness_after: None,
            });
            continue;
        };
        let level = match difficulty.pinned_db() {
            Some(db) => db,
            None => *Difficulty::LADDER_DB.choose(&mut rng).expect("ladder is nonempty"),
        };
        let (action, strength_db) = if k == loudest { (Action::Suppress, -level) } else { (Action::Highlight, level) };
        let gained = apply_gain_db(track, strength_db)?;
        let after = integrated_loudness(&gained)?.lufs();
        out.push(gained);
        records.push(ClassAdjustment { action, strength_db, loudness_before: Some(before), loudness_after: after });
    }
    let [speech, music, effects]: [AudioClip; 3] = out.try_into().expect("three tracks");
    let [rs, rm, re]: [ClassAdjustment; 3] = records.try_into().expect("three records");
    Ok((
        AdjustedStems { speech, music, effects },
        AdjustmentRecord { difficulty, seed, speech: rs, music: rm, effects: re },
    ))
}

pub fn remix(adjusted: &AdjustedStems) -> Result<AudioClip> {
    AudioClip::sum([&adjusted.speech, &adjusted.music, &adjusted.effects])
}

/// Rounds every sample through `f32`, matching what the WAV writer stores.
pub fn quantize_f32(clip: &AudioClip) -> Result<AudioClip> {
    clip.map(|v| v as f32 as f64)
}

/// Separation with every track already representable in `f32`, so the sum
/// identity survives a round trip through float WAV files.
fn separate_for_storage(gt_mix: &AudioClip, gained: &StemSet, leakage: f64) -> Result<SeparatedStems> {
    let raw = oracle_separate(gt_mix, gained, leakage)?;
    let speech = quantize_f32(&raw.speech)?;
    let music = quantize_f32(&raw.music)?;
    let effects = quantize_f32(&raw.effects)?;
    let residual = quantize_f32(&gt_mix.sub(&AudioClip::sum([&speech, &music, &effects])?)?)?;
    Ok(SeparatedStems { speech, music, effects, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of(clip_id: &str) -> Split {
        let digest = sha256_hex(clip_id.as_bytes());
        let bucket = u64::from_str_radix(&digest[..16], 16).expect("hex digest") % 100;
        match bucket {
            0..=79 => Split::Train,
            80..=89 => Split::Val,
            _ => Split::Test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split {other:?}")),
        }
    }
}

/// Shape of a synthesized scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub sample_rate: u32,
    pub seconds: usize,
    pub render: RenderConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { sample_rate: 8000, seconds: 4, render: RenderConfig::default() }
    }
}

/// A rendered scene with the raw sources it was built from.
#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub schedule: HighlightSchedule,
    pub sources: StemSet,
    pub render: RenderConfig,
    pub rendered: RenderedScene,
}

/// Synthesizes and renders one scene; sources are stored at `f32` precision.
pub fn synth_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    let sources = synth_stems(seed, config.sample_rate, config.seconds)?.map(|_, c| quantize_f32(c))?;
    let schedule = make_schedule(seed, config.seconds)?;
    let rendered = render_scene(&sources, &schedule, &config.render, derive_seed(seed, "context"))?;
    let gt_mix = quantize_f32(&rendered.gt_mix)?;
    Ok(Scene { seed, schedule, sources, render: config.render.clone(), rendered: RenderedScene { gt_mix, ..rendered } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    seed: u64,
    sample_rate: u32,
    seconds: usize,
    render: RenderConfig,
    schedule: HighlightSchedule,
}

const SCHEDULE_FILE: &str = "schedule.json";
const GT_FILE: &str = "gt.wav";

fn source_file(class: SourceClass) -> String {
    format!("src_{}.wav", class.tag())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes sources, ground truth, contexts and schedule into `dir`.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    create_dir(dir)?;
    for (class, clip) in scene.sources.iter() {
        wav::write_f32(dir.join(source_file(class)), clip)?;
    }
    wav::write_f32(dir.join(GT_FILE), &scene.rendered.gt_mix)?;
    for stream in ContextStream::ALL {
        write_cfm(dir.join(stream.file_name()), scene.rendered.context(stream))?;
    }
    let meta = SceneMeta {
        seed: scene.seed,
        sample_rate: scene.sources.sample_rate(),
        seconds: scene.schedule.seconds(),
        render: scene.render.clone(),
        schedule: scene.schedule.clone(),
    };
    write_json(&dir.join(SCHEDULE_FILE), &meta)
}

/// Reads a scene directory and re-renders its gained stems from the sources.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let meta: SceneMeta = read_json(&dir.join(SCHEDULE_FILE))?;
    let load = |class| wav::read_mono(dir.join(source_file(class)));
    let sources = StemSet::new(load(SourceClass::Speech)?, load(SourceClass::Music)?, load(SourceClass::Effects)?)?;
    if sources.sample_rate() != meta.sample_rate || sources.len() != meta.seconds * meta.sample_rate as usize {
        return Err(Error::format(dir, "sources do not match the recorded scene shape"));
    }
    let rendered = render_scene(&sources, &meta.schedule, &meta.render, derive_seed(meta.seed, "context"))?;
    let gt_mix = wav::read_mono(dir.join(GT_FILE))?;
    if gt_mix.len() != rendered.gt_mix.len() || gt_mix.max_abs_diff(&rendered.gt_mix) > 1e-6 {
        return Err(Error::format(dir, "gt.wav does not match the sources rendered under the schedule"));
    }
    let context_vid = read_cfm(dir.join(ContextStream::Vision.file_name()))?;
    let context_text = read_cfm(dir.join(ContextStream::Text.file_name()))?;
    for ctx in [&context_vid, &context_text] {
        if ctx.frames() != meta.seconds {
            return Err(Error::format(dir, "context frames do not match scene seconds"));
        }
    }
    Ok(Scene {
        seed: meta.seed,
        schedule: meta.schedule,
        sources,
        render: meta.render,
        rendered: RenderedScene { gt_mix, gained: rendered.gained, context_vid, context_text },
    })
}

/// Lists scene directories (those holding a schedule file) in name order.
pub fn list_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(SCHEDULE_FILE).is_file() {
            scenes.push(path);
        }
    }
    scenes.sort();
    Ok(scenes)
}

/// Settings for turning scenes into (input, gt) training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub leakage: f64,
    pub scene: SceneConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seed: 0, difficulty: Difficulty::Random, leakage: 0.1, scene: SceneConfig::default() }
    }
}

/// File locations of one clip, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPaths {
    pub gt: String,
    pub input: String,
    pub stem_h: String,
    pub stem_m: String,
    pub stem_e: String,
    pub stem_r: String,
    pub context_vid: String,
    pub context_text: String,
    pub source_h: String,
    pub source_m: String,
    pub source_e: String,
    pub schedule: String,
}

impl ClipPaths {
    fn for_clip(clip_id: &str) -> Self {
        let p = |name: &str| format!("{clip_id}/{name}");
        Self {
            gt: p(GT_FILE),
            input: p("input.wav"),
            stem_h: p("stem_h.wav"),
            stem_m: p("stem_m.wav"),
            stem_e: p("stem_e.wav"),
            stem_r: p("stem_r.wav"),
            context_vid: p(ContextStream::Vision.file_name()),
            context_text: p(ContextStream::Text.file_name()),
            source_h: p(&source_file(SourceClass::Speech)),
            source_m: p(&source_file(SourceClass::Music)),
            source_e: p(&source_file(SourceClass::Effects)),
            schedule: p(SCHEDULE_FILE),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: Split,
    pub sample_rate: u32,
    pub seconds: usize,
    pub scene_seed: u64,
    pub leakage: f64,
    pub paths: ClipPaths,
    pub adjustment: AdjustmentRecord,
}

/// Everything stored for one clip, loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub input: AudioClip,
    pub gt: AudioClip,
    pub separated: SeparatedStems,
    pub sources: StemSet,
    pub context_vid: ContextFeatureMatrix,
    pub context_text: ContextFeatureMatrix,
    pub schedule: HighlightSchedule,
}

impl LoadedClip {
    pub fn context(&self, stream: ContextStream) -> &ContextFeatureMatrix {
        match stream {
            ContextStream::Vision => &self.context_vid,
            ContextStream::Text => &self.context_text,
        }
    }
}

impl ClipRecord {
    pub fn load(&self, root: &Path) -> Result<LoadedClip> {
        let p = &self.paths;
        let wav = |rel: &str| wav::read_mono(root.join(rel));
        let meta: SceneMeta = read_json(&root.join(&p.schedule))?;
        Ok(LoadedClip {
            input: wav(&p.input)?,
            gt: wav(&p.gt)?,
            separated: SeparatedStems {
                speech: wav(&p.stem_h)?,
                music: wav(&p.stem_m)?,
                effects: wav(&p.stem_e)?,
                residual: wav(&p.stem_r)?,
            },
            sources: StemSet::new(wav(&p.source_h)?, wav(&p.source_m)?, wav(&p.source_e)?)?,
            context_vid: read_cfm(root.join(&p.context_vid))?,
            context_text: read_cfm(root.join(&p.context_text))?,
            schedule: meta.schedule,
        })
    }

    pub fn load_input(&self, root: &Path) -> Result<AudioClip> {
        wav::read_mono(root.join(&self.paths.input))
    }

    pub fn load_gt(&self, root: &Path) -> Result<AudioClip> {
        wav::read_mono(root.join(&self.paths.gt))
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REJECTED_FILE: &str = "rejected.jsonl";

/// Manifest rows together with the directory their paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    /// Reads `path`, or `path/manifest.jsonl` when `path` is a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| Error::format(&file, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ClipRecord>>>()?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        jsonl(&self.records)
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("manifest rows serialize") + "\n").collect()
}

/// A scene that the adjustment step refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub clip_id: String,
    pub reason: String,
}

enum ClipOutcome {
    Built(Box<ClipRecord>),
    Rejected(Rejection),
}

fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

fn build_clip(
    out_dir: &Path,
    clip_id: &str,
    scene: &Scene,
    config: &CorpusConfig,
    adjust_seed: u64,
) -> Result<ClipOutcome> {
    let gt = &scene.rendered.gt_mix;
    let separated = separate_for_storage(gt, &scene.rendered.gained, config.leakage)?;
    let err = separated.sum()?.max_abs_diff(gt);
    if err > 1e-9 {
        return Err(Error::Internal(format!("{clip_id}: separation sum identity off by {err:e}")));
    }
    let (adjusted, record) = match adjust(&separated, config.difficulty, adjust_seed) {
        Ok(done) => done,
        Err(Error::Input(reason)) => {
            log::info!("rejecting {clip_id}: {reason}");
            return Ok(ClipOutcome::Rejected(Rejection { clip_id: clip_id.to_string(), reason }));
        }
        Err(other) => return Err(other),
    };
    let input = quantize_f32(&remix(&adjusted)?)?;

    let dir = out_dir.join(clip_id);
    write_scene(&dir, scene)?;
    let paths = ClipPaths::for_clip(clip_id);
    wav::write_f32(out_dir.join(&paths.input), &input)?;
    wav::write_f32(out_dir.join(&paths.stem_h), &separated.speech)?;
    wav::write_f32(out_dir.join(&paths.stem_m), &separated.music)?;
    wav::write_f32(out_dir.join(&paths.stem_e), &separated.effects)?;
    wav::write_f32(out_dir.join(&paths.stem_r), &separated.residual)?;
    Ok(ClipOutcome::Built(Box::new(ClipRecord {
        clip_id: clip_id.to_string(),
        split: Split::of(clip_id),
        sample_rate: gt.sample_rate(),
        seconds: scene.schedule.seconds(),
        scene_seed: scene.seed,
        leakage: config.leakage,
        paths,
        adjustment: record,
    })))
}

fn write_manifest(out_dir: &Path, records: Vec<ClipRecord>, rejected: &[Rejection]) -> Result<Manifest> {
    let manifest = Manifest { root: out_dir.to_path_buf(), records };
    let final_path = out_dir.join(MANIFEST_FILE);
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.partial"));
    let result = (|| {
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(manifest.to_jsonl().as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result?;
    let rejected_path = out_dir.join(REJECTED_FILE);
    if rejected.is_empty() {
        if rejected_path.exists() {
            fs::remove_file(&rejected_path).map_err(|e| Error::io(&rejected_path, e))?;
        }
    } else {
        fs::write(&rejected_path, jsonl(rejected)).map_err(|e| Error::io(&rejected_path, e))?;
    }
    Ok(manifest)
}

fn collect(out_dir: &Path, outcomes: Vec<Result<ClipOutcome>>) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for outcome in outcomes {
        match outcome? {
            ClipOutcome::Built(r) => records.push(*r),
            ClipOutcome::Rejected(r) => rejected.push(r),
        }
    }
    write_manifest(out_dir, records, &rejected)
}

fn adjust_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &format!("adjust/{index}"))
}

pub fn scene_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &format!("scene/{index}"))
}

/// Synthesizes scenes and builds `n_clips` accepted clips under `out_dir`.
pub fn build_corpus(n_clips: usize, config: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if !(0.0..0.5).contains(&config.leakage) {
        return Err(config_err!("leakage must lie in [0, 0.5), got {}", config.leakage));
    }
    create_dir(out_dir)?;
    let mut outcomes = Vec::new();
    let mut built = 0;
    let mut next = 0;
    while built < n_clips {
        let batch: Vec<usize> = (next..next + (n_clips - built)).collect();
        next += batch.len();
        let results: Vec<Result<ClipOutcome>> = batch
            .par_iter()
            .map(|&i| {
                let scene = synth_scene(scene_seed(config.seed, i), &config.scene)?;
                build_clip(out_dir, &clip_id(i), &scene, config, adjust_seed(config.seed, i))
            })
            .collect();
        for r in results {
            if let Ok(ClipOutcome::Built(_)) | Err(_) = &r {
                built += 1;
            }
            outcomes.push(r);
        }
        if next > n_clips.saturating_mul(4) + 16 && built < n_clips {
            return Err(input_err!("too many rejected scenes; built {built} of {n_clips}"));
        }
    }
    collect(out_dir, outcomes)
}

/// Builds clips from previously written scene directories.
pub fn build_corpus_from_scenes(scene_dirs: &[PathBuf], config: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if scene_dirs.is_empty() {
        return Err(input_err!("no scenes to build from"));
    }
    if !(0.0..0.5).contains(&config.leakage) {
        return Err(config_err!("leakage must lie in [0, 0.5), got {}", config.leakage));
    }
    create_dir(out_dir)?;
    let outcomes = scene_dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let scene = read_scene(dir)?;
            build_clip(out_dir, &clip_id(i), &scene, config, adjust_seed(config.seed, i))
        })
        .collect();
    collect(out_dir, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::stft;

    fn scene(seed: u64) -> Scene {
        synth_scene(seed, &SceneConfig::default()).unwrap()
    }

    fn equal_loudness_stems() -> SeparatedStems {
        let base = synth_stems(3, 8000, 3).unwrap();
        let target = -24.0;
        let level = |c: &AudioClip| {
            let l = integrated_loudness(c).unwrap().lufs().unwrap();
            apply_gain_db(c, target - l).unwrap()
        };
        SeparatedStems {
            speech: level(&base.speech),
            music: level(&base.music),
            effects: level(&base.effects),
            residual: AudioClip::silence(base.len(), 8000).unwrap(),
        }
    }

    #[test]
    fn zero_leakage_is_identity() {
        let s = scene(1);
        let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.0).unwrap();
        for class in SourceClass::ALL {
            assert_eq!(sep.get(class), s.rendered.gained.get(class));
        }
        assert!(sep.residual.samples().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn leakage_preserves_mass() {
        let stems = synth_stems(2, 8000, 3).unwrap();
        let mix = stems.mix().unwrap();
        for leakage in [0.0, 0.1, 0.2, 0.45] {
            let sep = oracle_separate(&mix, &stems, leakage).unwrap();
            assert!(sep.residual.samples().iter().all(|v| v.abs() < 1e-9));
            assert!(sep.sum().unwrap().max_abs_diff(&mix) < 1e-9);
        }
        assert!(matches!(oracle_separate(&mix, &stems, 0.5), Err(Error::Config(_))));
        assert!(matches!(oracle_separate(&mix, &stems, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn stored_separation_keeps_sum_identity() {
        let s = scene(4);
        let sep = separate_for_storage(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
        let refloat = |c: &AudioClip| quantize_f32(c).unwrap();
        let stored = SeparatedStems {
            speech: refloat(&sep.speech),
            music: refloat(&sep.music),
            effects: refloat(&sep.effects),
            residual: refloat(&sep.residual),
        };
        assert!(stored.sum().unwrap().max_abs_diff(&s.rendered.gt_mix) < 1e-9);
    }

    #[test]
    fn equal_loudness_tie_suppresses_speech() {
        let (_, record) = adjust(&equal_loudness_stems(), Difficulty::High, 0).unwrap();
        assert_eq!(record.speech.action, Action::Suppress);
        assert_eq!(record.speech.strength_db, -12.0);
        for c in [record.music, record.effects] {
            assert_eq!(c.action, Action::Highlight);
            assert_eq!(c.strength_db, 12.0);
        }
    }

    #[test]
    fn adjusted_loudness_moves_by_strength() {
        for seed in 0..6 {
            let s = scene(seed);
            let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
            let (_, record) = adjust(&sep, Difficulty::Random, seed).unwrap();
            let mut suppressed = 0;
            for class in SourceClass::ALL {
                let c = record.get(class);
                let delta = c.loudness_after.unwrap() - c.loudness_before.unwrap();
                assert!((delta - c.strength_db).abs() < 0.05);
                assert!(Difficulty::LADDER_DB.contains(&c.strength_db.abs()));
                match c.action {
                    Action::Suppress => {
                        suppressed += 1;
                        assert!(c.strength_db < 0.0);
                    }
                    Action::Highlight => assert!(c.strength_db > 0.0),
                    Action::Skip => panic!("synthetic stems are never silent"),
                }
            }
            assert_eq!(suppressed, 1);
        }
    }

    #[test]
    fn low_tier_pins_six_db() {
        let s = scene(7);
        let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
        let (_, record) = adjust(&sep, Difficulty::Low, 1).unwrap();
        for class in SourceClass::ALL {
            assert_eq!(record.get(class).strength_db.abs(), 6.0);
        }
    }

    #[test]
    fn silent_stems_are_skipped_or_rejected() {
        let mut stems = equal_loudness_stems();
        stems.music = AudioClip::silence(stems.speech.len(), 8000).unwrap();
        let (adjusted, record) = adjust(&stems, Difficulty::Moderate, 0).unwrap();
        assert_eq!(record.music.action, Action::Skip);
        assert_eq!(adjusted.music, stems.music);
        stems.effects = stems.music.clone();
        assert!(matches!(adjust(&stems, Difficulty::Moderate, 0), Err(Error::Input(_))));
    }

    #[test]
    fn remix_with_zero_gain_restores_mix_and_ignores_order() {
        let s = scene(8);
        let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
        let unchanged = AdjustedStems {
            speech: sep.speech.clone(),
            music: sep.music.clone(),
            effects: sep.effects_with_residual().unwrap(),
        };
        assert!(remix(&unchanged).unwrap().max_abs_diff(&s.rendered.gt_mix) < 1e-9);
        let swapped = AdjustedStems {
            speech: unchanged.effects.clone(),
            music: unchanged.speech.clone(),
            effects: unchanged.music.clone(),
        };
        assert!(remix(&swapped).unwrap().max_abs_diff(&remix(&unchanged).unwrap()) < 1e-12);
    }

    #[test]
    fn input_differs_from_gt() {
        let s = scene(9);
        let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
        let (adjusted, _) = adjust(&sep, Difficulty::Low, 0).unwrap();
        let input = remix(&adjusted).unwrap();
        let a = stft(&input, 1024, 256).unwrap().magnitude();
        let b = stft(&s.rendered.gt_mix, 1024, 256).unwrap().magnitude();
        let l1: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 > 0.0);
    }

    #[test]
    fn split_is_pure_and_roughly_balanced() {
        let mut counts = [0usize; 3];
        for i in 0..2000 {
            let id = clip_id(i);
            assert_eq!(Split::of(&id), Split::of(&id));
            counts[Split::of(&id) as usize] += 1;
        }
        assert!((1500..1700).contains(&counts[0]), "{counts:?}");
        assert!((140..260).contains(&counts[1]), "{counts:?}");
        assert!((140..260).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn scene_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene(11);
        write_scene(dir.path(), &s).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.sources, s.sources);
        assert_eq!(back.schedule, s.schedule);
        assert_eq!(back.rendered.gt_mix, s.rendered.gt_mix);
        assert_eq!(back.rendered.gained, s.rendered.gained);
        assert_eq!(back.rendered.context_vid, s.rendered.context_vid);
    }

    #[test]
    fn build_corpus_contract() {
        let dir = tempfile::tempdir().unwrap();
        let config = CorpusConfig { scene: SceneConfig { seconds: 2, ..Default::default() }, ..Default::default() };
        let manifest = build_corpus(10, &config, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 10);
        let reread = Manifest::read(dir.path()).unwrap();
        assert_eq!(reread.records, manifest.records);
        for record in &manifest.records {
            let clip = record.load(dir.path()).unwrap();
            assert!(clip.separated.sum().unwrap().max_abs_diff(&clip.gt) < 1e-9);
            assert_eq!(clip.context_vid.frames(), record.seconds);
        }
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let input = fs::read(dir.path().join("clip_00003/input.wav")).unwrap();
        build_corpus(10, &config, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first);
        assert_eq!(fs::read(dir.path().join("clip_00003/input.wav")).unwrap(), input);
    }

    #[test]
    fn scene_route_matches_in_memory_route() {
        let scenes = tempfile::tempdir().unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let config =
            CorpusConfig { seed: 5, scene: SceneConfig { seconds: 2, ..Default::default() }, ..Default::default() };
        let mut dirs = Vec::new();
        for i in 0..3 {
            let d = scenes.path().join(format!("scene_{i:05}"));
            write_scene(&d, &synth_scene(scene_seed(config.seed, i), &config.scene).unwrap()).unwrap();
            dirs.push(d);
        }
        assert_eq!(list_scenes(scenes.path()).unwrap(), dirs);
        build_corpus(3, &config, a.path()).unwrap();
        build_corpus_from_scenes(&dirs, &config, b.path()).unwrap();
        assert_eq!(fs::read(a.path().join(MANIFEST_FILE)).unwrap(), fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        assert!(build_corpus_from_scenes(&[], &config, b.path()).is_err());
    }

    #[test]
    fn every_class_gets_suppressed() {
        let config = SceneConfig::default();
        let mut counts = [0usize; 3];
        let n = 200;
        let results: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = synth_scene(scene_seed(0, i), &config).unwrap();
                let sep = oracle_separate(&s.rendered.gt_mix, &s.rendered.gained, 0.1).unwrap();
                let (_, record) = adjust(&sep, Difficulty::Random, 0).unwrap();
                SourceClass::ALL.into_iter().position(|c| record.get(c).action == Action::Suppress).unwrap()
            })
            .collect();
        for k in results {
            counts[k] += 1;
        }
        for c in counts {
            assert!(c as f64 / n as f64 >= 0.15, "{counts:?}");
        }
    }
}
