//! Mono PCM ingest and energy-based voice-activity detection.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SAMPLE_RATE: u32 = 8000;
pub const DEFAULT_THRESHOLD_DB: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate < MIN_SAMPLE_RATE {
            return Err(Error::SampleRateTooLow(sample_rate));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sample value {bad} outside [-1, 1]"
            )));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frame length and shift in milliseconds, shared by VAD and feature extraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Framing {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for Framing {
    fn default() -> Self {
        Framing {
            frame_length_ms: 20.0,
            frame_shift_ms: 10.0,
        }
    }
}

impl Framing {
    pub fn length_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// `floor((n - L) / S) + 1`, or zero when the buffer is shorter than a frame.
    pub fn frame_count(&self, num_samples: usize, sample_rate: u32) -> usize {
        let len = self.length_samples(sample_rate);
        let shift = self.shift_samples(sample_rate).max(1);
        if num_samples < len || len == 0 {
            0
        } else {
            (num_samples - len) / shift + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.length_samples(sample_rate) < 2 {
            return Err(Error::InvalidConfig("frame shorter than two samples".into()));
        }
        if self.shift_samples(sample_rate) < 1 {
            return Err(Error::InvalidConfig("frame shift below one sample".into()));
        }
        Ok(())
    }
}

/// One speech/non-speech flag per analysis frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VadMask {
    pub frame_flags: Vec<bool>,
    pub framing: Framing,
}

impl VadMask {
    pub fn all_speech(frames: usize, framing: Framing) -> Self {
        VadMask {
            frame_flags: vec![true; frames],
            framing,
        }
    }

    pub fn len(&self) -> usize {
        self.frame_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_flags.is_empty()
    }

    pub fn speech_frames(&self) -> usize {
        self.frame_flags.iter().filter(|&&f| f).count()
    }
}

/// Reads a single-channel 8/16/24-bit linear PCM WAV file.
///
/// Samples are divided by `2^(bits-1)`, so full-scale positive values land
/// just below +1.0 and the most negative code maps to exactly -1.0.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::MultiChannel(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedEncoding("IEEE float samples".into()));
    }
    if !matches!(spec.bits_per_sample, 8 | 16 | 24) {
        return Err(Error::UnsupportedEncoding(format!(
            "{}-bit PCM",
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate < MIN_SAMPLE_RATE {
        return Err(Error::SampleRateTooLow(spec.sample_rate));
    }
    let declared = reader.len() as usize;
    let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
    let samples = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| v as f64 / scale))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| map_hound(path, e))?;
    if samples.len() < declared {
        return Err(Error::TruncatedAudio(format!(
            "{}: {} of {} samples present",
            path.display(),
            samples.len(),
            declared
        )));
    }
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AudioBuffer::new(samples, spec.sample_rate, source_id)
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // hound reports a short final sample as a custom "not enough bytes" error.
        hound::Error::IoError(io)
            if io.kind() == ErrorKind::UnexpectedEof || io.to_string().contains("enough bytes") =>
        {
            Error::TruncatedAudio(path.display().to_string())
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::UnsupportedEncoding("non-PCM WAV format".into()),
        hound::Error::FormatError(msg) => Error::format(path, msg),
        other => Error::format(path, other.to_string()),
    }
}

/// Per-frame RMS amplitude.
pub fn frame_rms(buffer: &AudioBuffer, framing: Framing) -> Result<Vec<f64>> {
    framing.validate(buffer.sample_rate)?;
    let len = framing.length_samples(buffer.sample_rate);
    let shift = framing.shift_samples(buffer.sample_rate);
    let frames = framing.frame_count(buffer.samples.len(), buffer.sample_rate);
    if frames == 0 {
        return Err(Error::BufferShorterThanFrame {
            samples: buffer.samples.len(),
            frame: len,
        });
    }
    Ok((0..frames)
        .map(|i| {
            let frame = &buffer.samples[i * shift..i * shift + len];
            (frame.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt()
        })
        .collect())
}

/// Flags a frame as speech when its RMS level is within `threshold_db_below_peak`
/// of the loudest frame. Each frame is judged on its own RMS; an all-zero
/// recording yields an all-false mask.
pub fn energy_vad(
    buffer: &AudioBuffer,
    framing: Framing,
    threshold_db_below_peak: f64,
) -> Result<VadMask> {
    if !(threshold_db_below_peak >= 0.0) {
        return Err(Error::InvalidConfig(
            "VAD threshold must be a non-negative number of dB".into(),
        ));
    }
    let rms = frame_rms(buffer, framing)?;
    let peak = rms.iter().copied().fold(0.0f64, f64::max);
    if peak == 0.0 {
        log::warn!("{}: silent recording, no speech frames", buffer.source_id);
        return Ok(VadMask {
            frame_flags: vec![false; rms.len()],
            framing,
        });
    }
    let peak_db = 20.0 * peak.log10();
    let frame_flags = rms
        .iter()
        .map(|&r| r > 0.0 && 20.0 * r.log10() >= peak_db - threshold_db_below_peak)
        .collect();
    Ok(VadMask {
        frame_flags,
        framing,
    })
}

/// Parses a manual VAD sidecar: one `start end` pair (seconds) per line.
/// Blank lines and `#` comments are ignored.
pub fn read_vad_segments(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vad_segments(&text).map_err(|reason| Error::InvalidVadSegments {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn parse_vad_segments(text: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 2 {
            return Err(format!("line {}: expected two times", lineno + 1));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| format!("line {}: bad number {s:?}", lineno + 1))
        };
        let (start, end) = (parse(fields[0])?, parse(fields[1])?);
        if !(start >= 0.0 && end > start) {
            return Err(format!("line {}: need 0 <= start < end", lineno + 1));
        }
        out.push((start, end));
    }
    Ok(out)
}

/// Builds a mask from manual segments: a frame is speech when its centre
/// time falls inside any `[start, end)` segment.
pub fn mask_from_segments(
    segments: &[(f64, f64)],
    num_samples: usize,
    sample_rate: u32,
    framing: Framing,
) -> VadMask {
    let len = framing.length_samples(sample_rate);
    let shift = framing.shift_samples(sample_rate);
    let frames = framing.frame_count(num_samples, sample_rate);
    let frame_flags = (0..frames)
        .map(|i| {
            let centre = (i * shift) as f64 / sample_rate as f64 + len as f64 / (2.0 * sample_rate as f64);
            segments.iter().any(|&(s, e)| centre >= s && centre < e)
        })
        .collect();
    VadMask {
        frame_flags,
        framing,
    }
}

/// Writes a mono 16-bit PCM WAV; used by tooling and tests.
pub fn write_wav_i16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    w.finalize().map_err(|e| map_hound(path, e))
}
