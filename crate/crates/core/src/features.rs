//! MFCC extraction with deltas and double deltas, plus the feature file format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, Framing, VadMask};
use crate::error::{Error, Result};
use crate::persist::{BinReader, BinWriter, ConfigHash};

pub const ENERGY_FLOOR: f64 = 1e-10;
const FEATURE_MAGIC: &[u8; 4] = b"FVCF";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_filters: usize,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub num_ceps: usize,
    pub delta_span_frames: usize,
    pub include_deltas: bool,
    pub include_double_deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_length_ms: 20.0,
            frame_shift_ms: 10.0,
            num_filters: 26,
            band_low_hz: 300.0,
            band_high_hz: 3400.0,
            num_ceps: 14,
            delta_span_frames: 2,
            include_deltas: true,
            include_double_deltas: true,
        }
    }
}

impl MfccConfig {
    pub fn framing(&self) -> Framing {
        Framing {
            frame_length_ms: self.frame_length_ms,
            frame_shift_ms: self.frame_shift_ms,
        }
    }

    pub fn dims(&self) -> usize {
        self.num_ceps * (1 + self.include_deltas as usize + self.include_double_deltas as usize)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.band_low_hz < 0.0 || self.band_low_hz >= self.band_high_hz {
            return Err(Error::InvalidConfig(format!(
                "degenerate band {}..{} Hz",
                self.band_low_hz, self.band_high_hz
            )));
        }
        if self.band_high_hz > sample_rate as f64 / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "band edge {} Hz above Nyquist for {} Hz audio",
                self.band_high_hz, sample_rate
            )));
        }
        if self.num_ceps == 0 || self.num_ceps >= self.num_filters {
            // c0 is computed and dropped, so at most num_filters - 1 remain.
            return Err(Error::InvalidConfig(format!(
                "num_ceps {} must be in 1..{}",
                self.num_ceps, self.num_filters
            )));
        }
        if self.delta_span_frames == 0 {
            return Err(Error::InvalidConfig("delta span must be at least 1".into()));
        }
        self.framing().validate(sample_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Compensated,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Raw => "raw",
            Stage::Compensated => "compensated",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "raw" => Ok(Stage::Raw),
            "compensated" => Ok(Stage::Compensated),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Frames x dims matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dims: usize,
    pub framing: Framing,
    pub stage: Stage,
    /// Frames produced before VAD masking.
    pub source_frames: usize,
}

impl FeatureMatrix {
    pub fn from_flat(data: Vec<f64>, dims: usize, framing: Framing, stage: Stage) -> Result<Self> {
        if dims == 0 || data.len() % dims != 0 {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        let frames = data.len() / dims;
        Ok(FeatureMatrix {
            data,
            frames,
            dims,
            framing,
            stage,
            source_frames: frames,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, |r| r.len());
        if dims == 0 {
            return Err(Error::InsufficientData("no feature rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            if r.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(data, dims, Framing::default(), Stage::Raw)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dims)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.rows().map(|r| r[d]).collect()
    }

    /// Same metadata, new values (same shape).
    pub(crate) fn with_data(&self, data: Vec<f64>, stage: Stage) -> FeatureMatrix {
        debug_assert_eq!(data.len(), self.data.len());
        FeatureMatrix {
            data,
            stage,
            ..self.clone()
        }
    }

    /// Builds a matrix from per-dimension columns of equal length.
    pub(crate) fn with_columns(&self, columns: &[Vec<f64>], stage: Stage) -> FeatureMatrix {
        let mut data = vec![0.0; self.frames * self.dims];
        for (d, col) in columns.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                data[t * self.dims + d] = v;
            }
        }
        self.with_data(data, stage)
    }

    pub fn concat(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InsufficientData("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::DimensionMismatch {
                    expected: first.dims,
                    got: p.dims,
                });
            }
            if p.stage != first.stage {
                return Err(Error::StageMix(format!("{} and {}", first.stage, p.stage)));
            }
            data.extend_from_slice(&p.data);
        }
        let frames = data.len() / first.dims;
        Ok(FeatureMatrix {
            data,
            frames,
            dims: first.dims,
            framing: first.framing,
            stage: first.stage,
            source_frames: frames,
        })
    }
}

/// `w[n] = 0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming_window(len: usize) -> Vec<f64> {
    assert!(len >= 2, "window needs at least two samples");
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

pub fn window_frame(frame: &[f64]) -> Vec<f64> {
    hamming_window(frame.len())
        .iter()
        .zip(frame)
        .map(|(w, x)| w * x)
        .collect()
}

/// Squared DFT magnitudes for bins `0..=N/2`, `N` the next power of two.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    let n = frame.len().next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(n);
    power_spectrum_with(&fft, frame, n)
}

fn power_spectrum_with(fft: &Arc<dyn Fft<f64>>, frame: &[f64], n: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft.process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm_sqr()).collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Unit-height triangular filters with centres equally spaced in mel.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `num_filters + 2` edge frequencies in Hz; filter `j` spans `edges[j]..edges[j+2]`.
    pub edges_hz: Vec<f64>,
    /// Dense weights per filter over spectrum bins.
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(
        num_filters: usize,
        low_hz: f64,
        high_hz: f64,
        fft_len: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        if !(low_hz >= 0.0 && low_hz < high_hz) || num_filters == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate filterbank band {low_hz}..{high_hz} Hz"
            )));
        }
        if high_hz > sample_rate as f64 / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "band edge {high_hz} Hz above Nyquist"
            )));
        }
        let (ml, mh) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let step = (mh - ml) / (num_filters + 1) as f64;
        let edges_hz: Vec<f64> = (0..num_filters + 2)
            .map(|i| mel_to_hz(ml + step * i as f64))
            .collect();
        let bins = fft_len / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_len as f64;
        let mut bank = MelFilterbank {
            edges_hz,
            weights: Vec::new(),
        };
        bank.weights = (0..num_filters)
            .map(|j| (0..bins).map(|k| bank.weight(j, k as f64 * bin_hz)).collect())
            .collect();
        Ok(bank)
    }

    pub fn num_filters(&self) -> usize {
        self.edges_hz.len() - 2
    }

    pub fn centre_hz(&self, j: usize) -> f64 {
        self.edges_hz[j + 1]
    }

    /// Triangle `j` evaluated at frequency `f`.
    pub fn weight(&self, j: usize, f: f64) -> f64 {
        let (lo, mid, hi) = (self.edges_hz[j], self.edges_hz[j + 1], self.edges_hz[j + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    }

    pub fn bin_weights(&self, j: usize) -> &[f64] {
        &self.weights[j]
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(spectrum).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn log_compress(energies: &[f64]) -> Vec<f64> {
    energies.iter().map(|&e| e.max(ENERGY_FLOOR).ln()).collect()
}

/// Orthonormal DCT-II.
pub fn dct_ii(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Inverse of [`dct_ii`] (orthonormal DCT-III).
pub fn dct_iii(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let nf = n as f64;
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                    scale
                        * v
                        * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos()
                })
                .sum()
        })
        .collect()
}

/// Coefficients 1..=num_ceps of the orthonormal DCT-II; c0 is dropped.
pub fn dct_cepstra(log_energies: &[f64], num_ceps: usize) -> Vec<f64> {
    assert!(num_ceps < log_energies.len());
    dct_ii(log_energies)[1..=num_ceps].to_vec()
}

/// Regression slope over `t-span..=t+span`, edges replicated.
pub fn deltas(track: &[f64], span: usize) -> Result<Vec<f64>> {
    let need = 2 * span + 1;
    if span == 0 {
        return Err(Error::InvalidConfig("delta span must be at least 1".into()));
    }
    if track.len() < need {
        return Err(Error::TrackTooShort {
            len: track.len(),
            span,
            need,
        });
    }
    let last = track.len() as isize - 1;
    let at = |i: isize| track[i.clamp(0, last) as usize];
    let denom = 2.0 * (1..=span).map(|d| (d * d) as f64).sum::<f64>();
    Ok((0..track.len() as isize)
        .map(|t| {
            (1..=span as isize)
                .map(|d| d as f64 * (at(t + d) - at(t - d)))
                .sum::<f64>()
                / denom
        })
        .collect())
}

/// Reusable per-sample-rate extraction plan.
pub struct MfccExtractor {
    config: MfccConfig,
    sample_rate: u32,
    frame_len: usize,
    shift: usize,
    fft_len: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl MfccExtractor {
    pub fn new(config: &MfccConfig, sample_rate: u32) -> Result<Self> {
        config.validate(sample_rate)?;
        let framing = config.framing();
        let frame_len = framing.length_samples(sample_rate);
        let fft_len = frame_len.next_power_of_two();
        Ok(MfccExtractor {
            config: config.clone(),
            sample_rate,
            frame_len,
            shift: framing.shift_samples(sample_rate),
            fft_len,
            window: hamming_window(frame_len),
            fft: FftPlanner::new().plan_fft_forward(fft_len),
            bank: MelFilterbank::new(
                config.num_filters,
                config.band_low_hz,
                config.band_high_hz,
                fft_len,
                sample_rate,
            )?,
        })
    }

    pub fn frame_mfcc(&self, frame: &[f64]) -> Vec<f64> {
        let windowed: Vec<f64> = frame.iter().zip(&self.window).map(|(x, w)| x * w).collect();
        let spectrum = power_spectrum_with(&self.fft, &windowed, self.fft_len);
        let log_e = log_compress(&self.bank.apply(&spectrum));
        dct_cepstra(&log_e, self.config.num_ceps)
    }

    /// Static MFCCs for every frame, before masking.
    pub fn static_track(&self, buffer: &AudioBuffer) -> Result<Vec<Vec<f64>>> {
        if buffer.sample_rate != self.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "extractor built for {} Hz, buffer is {} Hz",
                self.sample_rate, buffer.sample_rate
            )));
        }
        let frames = self
            .config
            .framing()
            .frame_count(buffer.samples.len(), buffer.sample_rate);
        if frames == 0 {
            return Err(Error::BufferShorterThanFrame {
                samples: buffer.samples.len(),
                frame: self.frame_len,
            });
        }
        Ok((0..frames)
            .into_par_iter()
            .map(|i| self.frame_mfcc(&buffer.samples[i * self.shift..i * self.shift + self.frame_len]))
            .collect())
    }

    /// Static MFCCs, deltas and double deltas over the full track, then
    /// non-speech frames removed.
    pub fn extract(&self, buffer: &AudioBuffer, mask: &VadMask) -> Result<FeatureMatrix> {
        let cfg = &self.config;
        if mask.framing != cfg.framing() {
            return Err(Error::InvalidConfig(
                "VAD framing differs from feature framing".into(),
            ));
        }
        let statics = self.static_track(buffer)?;
        if mask.len() != statics.len() {
            return Err(Error::MaskMismatch {
                mask: mask.len(),
                frames: statics.len(),
            });
        }
        let n = statics.len();
        let columns: Vec<Vec<f64>> = (0..cfg.num_ceps)
            .map(|d| statics.iter().map(|r| r[d]).collect())
            .collect();
        let mut blocks = vec![columns];
        if cfg.include_deltas || cfg.include_double_deltas {
            let d1 = blocks[0]
                .iter()
                .map(|c| deltas(c, cfg.delta_span_frames))
                .collect::<Result<Vec<_>>>()?;
            if cfg.include_double_deltas {
                let d2 = d1
                    .iter()
                    .map(|c| deltas(c, cfg.delta_span_frames))
                    .collect::<Result<Vec<_>>>()?;
                if cfg.include_deltas {
                    blocks.push(d1);
                }
                blocks.push(d2);
            } else {
                blocks.push(d1);
            }
        }
        let dims = cfg.dims();
        let mut data = Vec::with_capacity(mask.speech_frames() * dims);
        for t in (0..n).filter(|&t| mask.frame_flags[t]) {
            for block in &blocks {
                data.extend(block.iter().map(|col| col[t]));
            }
        }
        if data.is_empty() {
            return Err(Error::NoSpeechFrames);
        }
        let mut fm = FeatureMatrix::from_flat(data, dims, cfg.framing(), Stage::Raw)?;
        fm.source_frames = n;
        Ok(fm)
    }
}

pub fn extract_features(
    buffer: &AudioBuffer,
    mask: &VadMask,
    config: &MfccConfig,
) -> Result<FeatureMatrix> {
    MfccExtractor::new(config, buffer.sample_rate)?.extract(buffer, mask)
}

/// Descriptive header stored next to a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHeader {
    pub stage: Stage,
    pub frames: usize,
    pub dims: usize,
    pub source_frames: usize,
    pub framing: Framing,
    pub vad: String,
    pub seed: u64,
    pub config_hash: ConfigHash,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Writes the f32 binary and its `.hdr` sidecar.
pub fn write_features(
    path: &Path,
    fm: &FeatureMatrix,
    vad: &str,
    seed: u64,
    config_hash: ConfigHash,
) -> Result<()> {
    let mut w = BinWriter::new(FEATURE_MAGIC);
    w.u64(fm.dims as u64)
        .u64(fm.frames as u64)
        .f32s(fm.data.iter().map(|&v| v as f32));
    w.write_to(path)?;
    let header = format!(
        "stage={}\nframes={}\ndims={}\nsource_frames={}\nframe_length_ms={}\nframe_shift_ms={}\nvad={}\nseed={}\nconfig_hash={}\n",
        fm.stage,
        fm.frames,
        fm.dims,
        fm.source_frames,
        fm.framing.frame_length_ms,
        fm.framing.frame_shift_ms,
        vad,
        seed,
        config_hash
    );
    let hp = header_path(path);
    fs::write(&hp, header).map_err(|e| Error::io(hp, e))
}

pub fn read_feature_header(path: &Path) -> Result<FeatureHeader> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let get = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::format(&hp, format!("missing {key}")))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(&hp, format!("bad {key}")))
    };
    Ok(FeatureHeader {
        stage: get("stage")?.parse().map_err(|e: String| Error::format(&hp, e))?,
        frames: num("frames")? as usize,
        dims: num("dims")? as usize,
        source_frames: num("source_frames")? as usize,
        framing: Framing {
            frame_length_ms: num("frame_length_ms")?,
            frame_shift_ms: num("frame_shift_ms")?,
        },
        vad: get("vad")?.to_string(),
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::format(&hp, "bad seed"))?,
        config_hash: ConfigHash::from_hex(get("config_hash")?)
            .ok_or_else(|| Error::format(&hp, "bad config_hash"))?,
    })
}

pub fn read_features(path: &Path) -> Result<(FeatureMatrix, FeatureHeader)> {
    let header = read_feature_header(path)?;
    let mut r = BinReader::open(path, FEATURE_MAGIC)?;
    let dims = r.dim()?;
    let frames = r.dim()?;
    if dims != header.dims || frames != header.frames {
        return Err(Error::format(path, "header sidecar disagrees with binary"));
    }
    let values = r.f32s(dims.checked_mul(frames).ok_or_else(|| Error::format(path, "size overflow"))?)?;
    r.finish()?;
    let data: Vec<f64> = values.into_iter().map(f64::from).collect();
    let mut fm = FeatureMatrix::from_flat(data, dims, header.framing, header.stage)?;
    fm.source_frames = header.source_frames;
    Ok((fm, header))
}
