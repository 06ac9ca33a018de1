use std::fs;
use std::path::Path;

use vah_core::baselines::{identity_baseline, input_stems, stat_remix_baseline, StatRemixConfig};
use vah_core::context::ContextStream;
use vah_core::corpus::{
    build_corpus, build_corpus_from_scenes, read_scene, scene_seed, synth_scene, write_scene, CorpusConfig, Manifest,
    SceneConfig, Split,
};
use vah_core::metrics::{clip_metrics, evaluate};
use vah_core::wav;

fn small() -> CorpusConfig {
    CorpusConfig { scene: SceneConfig { seconds: 2, ..SceneConfig::default() }, ..CorpusConfig::default() }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn corpus_builds_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_corpus(6, &small(), a.path()).unwrap();
    build_corpus(6, &small(), b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn scenes_on_disk_rebuild_the_same_corpus() {
    let cfg = small();
    let scenes = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for i in 0..6 {
        let dir = scenes.path().join(format!("scene_{i:05}"));
        let scene = synth_scene(scene_seed(cfg.seed, i), &cfg.scene).unwrap();
        write_scene(&dir, &scene).unwrap();
        let back = read_scene(&dir).unwrap();
        assert_eq!(back.rendered.gt_mix, scene.rendered.gt_mix);
        assert_eq!(back.sources, scene.sources);
        for s in ContextStream::ALL {
            assert_eq!(back.rendered.context(s), scene.rendered.context(s));
        }
        dirs.push(dir);
    }
    let direct = tempfile::tempdir().unwrap();
    let from_disk = tempfile::tempdir().unwrap();
    let m1 = build_corpus(6, &cfg, direct.path()).unwrap();
    let m2 = build_corpus_from_scenes(&dirs, &cfg, from_disk.path()).unwrap();
    assert_eq!(m1.records, m2.records);
    for r in &m1.records {
        assert_eq!(
            fs::read(direct.path().join(&r.paths.input)).unwrap(),
            fs::read(from_disk.path().join(&r.paths.input)).unwrap()
        );
    }
}

#[test]
fn manifest_round_trips_and_baselines_score() {
    let dir = tempfile::tempdir().unwrap();
    let built = build_corpus(12, &small(), dir.path()).unwrap();
    let manifest = Manifest::read(dir.path()).unwrap();
    assert_eq!(manifest.records, built.records);
    assert!(manifest.split(Split::Test).count() > 0);

    let outs = dir.path().join("identity");
    fs::create_dir_all(&outs).unwrap();
    let cfg = StatRemixConfig::default();
    for r in manifest.split(Split::Test) {
        let clip = r.load(&manifest.root).unwrap();
        let y = identity_baseline(&clip.input);
        assert_eq!(y, clip.input);
        wav::write_f32(outs.join(format!("{}.wav", r.clip_id)), &y).unwrap();
        let stems = input_stems(&clip.separated, &r.adjustment).unwrap();
        let remix = stat_remix_baseline(&clip.input, &stems, &cfg, &r.clip_id).unwrap();
        assert_eq!(remix.output.len(), clip.input.len());
        assert!(remix.output.samples().iter().all(|v| v.is_finite()));
    }
    let report = evaluate(&manifest, Split::Test, &outs, "identity").unwrap();
    assert_eq!(report.failed_count, 0);
    let direct: Vec<_> = manifest
        .split(Split::Test)
        .map(|r| {
            let clip = r.load(&manifest.root).unwrap();
            clip_metrics(&clip.input, &clip).unwrap()
        })
        .collect();
    for (res, m) in report.clips.iter().zip(&direct) {
        assert_eq!(res.metrics.as_ref().unwrap(), m);
    }
    assert_eq!(report.to_json(), evaluate(&manifest, Split::Test, &outs, "identity").unwrap().to_json());
}

#[test]
fn missing_output_is_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_corpus(12, &small(), dir.path()).unwrap();
    let outs = dir.path().join("empty");
    fs::create_dir_all(&outs).unwrap();
    let report = evaluate(&manifest, Split::Test, &outs, "none").unwrap();
    assert_eq!(report.failed_count, manifest.split(Split::Test).count());
    assert!(report.mean.is_none());
}
