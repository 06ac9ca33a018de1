//! WAV reading and writing.
//!
//! Reads 16-bit PCM (and other integer widths) or 32-bit float, mono or
//! stereo; stereo input is folded to mono. Writes mono 32-bit float.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{to_mono, AudioClip};

pub fn read_mono(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| hound_err(path, e))?
        }
    };
    let rate = spec.sample_rate;
    let wrap = |r: Result<AudioClip>| r.map_err(|e| Error::format(path, e.to_string()));
    match spec.channels {
        1 => wrap(AudioClip::new(interleaved, rate)),
        2 => {
            let left = interleaved.iter().step_by(2).copied().collect();
            let right = interleaved.iter().skip(1).step_by(2).copied().collect();
            wrap(to_mono(&AudioClip::new(left, rate)?, &AudioClip::new(right, rate)?))
        }
        n => Err(Error::format(path, format!("{n} channels are not supported"))),
    }
}

pub fn write_f32(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in clip.samples() {
        writer.write_sample(s as f32).map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}

fn hound_err(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::format(path, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.25, -0.5, 0.125, 1.5], 8000).unwrap();
        write_f32(&path, &clip).unwrap();
        assert_eq!(read_mono(&path).unwrap(), clip);
    }

    #[test]
    fn stereo_pcm16_is_folded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-16384, -16384)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_mono(&path).unwrap();
        assert_eq!(clip.sample_rate(), 16000);
        assert_eq!(clip.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_mono("/nonexistent/x.wav"), Err(Error::Io { .. })));
    }
}
