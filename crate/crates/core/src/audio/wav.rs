use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, AudioSignal, SAMPLE_RATE};
use crate::error::{MelleError, Result};

/// Read a PCM or float WAV, downmix to mono and resample to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let wav_err = |reason: String| MelleError::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => MelleError::io(path, io),
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(wav_err("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?
        }
        (fmt, bits) => return Err(wav_err(format!("unsupported encoding {fmt:?} {bits}-bit"))),
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    let samples = resample(&mono, spec.sample_rate, SAMPLE_RATE)
        .into_iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    Ok(AudioSignal::new(samples, SAMPLE_RATE))
}

/// 16-bit PCM mono WAV bytes.
pub fn encode_wav(signal: &AudioSignal) -> Vec<u8> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut cursor, spec).expect("in-memory writer");
        for &s in &signal.samples {
            let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
            w.write_sample(v).expect("in-memory write");
        }
        w.finalize().expect("in-memory finalize");
    }
    cursor.into_inner()
}

pub fn save_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav(signal)).map_err(|e| MelleError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, rate: u32, channels: u16, frames: &[Vec<i16>]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for f in frames {
            for &s in f {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_at_16k_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write(&p, 16_000, 1, &vec![vec![0]; 16_000]);
        let s = load_wav(&p).unwrap();
        assert_eq!(s.sample_rate, 16_000);
        assert_eq!(s.samples, vec![0.0; 16_000]);
    }

    #[test]
    fn one_second_at_48k_resamples_to_16000() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let frames: Vec<Vec<i16>> = (0..48_000)
            .map(|i| vec![((i as f64 * 0.05).sin() * 8000.0) as i16])
            .collect();
        write(&p, 48_000, 1, &frames);
        assert_eq!(load_wav(&p).unwrap().len(), 16_000);
    }

    #[test]
    fn stereo_identical_channels_downmix_to_either() {
        let dir = tempfile::tempdir().unwrap();
        let (ps, pm) = (dir.path().join("st.wav"), dir.path().join("mo.wav"));
        let vals: Vec<i16> = (0..4000).map(|i| ((i * 37) % 2001 - 1000) as i16).collect();
        write(&ps, 16_000, 2, &vals.iter().map(|&v| vec![v, v]).collect::<Vec<_>>());
        write(&pm, 16_000, 1, &vals.iter().map(|&v| vec![v]).collect::<Vec<_>>());
        assert_eq!(load_wav(&ps).unwrap(), load_wav(&pm).unwrap());
    }

    #[test]
    fn garbage_file_is_a_wav_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"definitely not RIFF").unwrap();
        assert!(matches!(load_wav(&p), Err(MelleError::Wav { .. })));
        assert!(matches!(
            load_wav(dir.path().join("missing.wav")),
            Err(MelleError::Io { .. })
        ));
    }

    #[test]
    fn encode_then_load_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let sig = AudioSignal::new((0..2000).map(|i| (i as f32 * 0.01).sin() * 0.5).collect(), 16_000);
        save_wav(&p, &sig).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in sig.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
    }
}
