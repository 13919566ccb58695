//! WAV decoding/encoding and the canonical mono buffer used everywhere else.

use std::io;
use std::path::Path;

use hound::{SampleFormat, WavSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("sample {index} out of range: {value}")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("empty audio buffer")]
    Empty,
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Mono signal in `[-1, 1]` with its native sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    /// Checks the invariants required before handing the buffer downstream.
    pub fn validate(&self) -> Result<(), AudioError> {
        if self.sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate(self.sample_rate));
        }
        if self.samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some((index, &value)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.abs() <= 1.0))
        {
            return Err(AudioError::SampleOutOfRange { index, value });
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }
}

fn map_hound(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == io::ErrorKind::NotFound => {
            AudioError::NotFound(path.display().to_string())
        }
        hound::Error::IoError(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            AudioError::CorruptHeader(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(e) => AudioError::Io(e),
        hound::Error::FormatError(msg) => {
            AudioError::CorruptHeader(format!("{}: {msg}", path.display()))
        }
        hound::Error::Unsupported => {
            AudioError::UnsupportedFormat(format!("{}: non-PCM encoding", path.display()))
        }
        other => AudioError::UnsupportedFormat(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit integer or 32-bit float PCM WAV, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::NotFound(path.display().to_string()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| match map_hound(path, e) {
        AudioError::Io(io) => AudioError::CorruptHeader(format!("{}: {io}", path.display())),
        other => other,
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };

    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioBuffer::new(samples, spec.sample_rate, source_id))
}

fn quantize(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes the buffer as 16-bit mono PCM.
pub fn write_wav(path: impl AsRef<Path>, buffer: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    buffer.validate()?;
    let spec = WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &buffer.samples {
        writer
            .write_sample(quantize(s))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))?;
    Ok(())
}

/// Result of [`peak_normalize`]; `silent` is set when the input had no energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub buffer: AudioBuffer,
    pub silent: bool,
}

/// Scales the buffer so its largest absolute sample is exactly 1.
pub fn peak_normalize(buffer: &AudioBuffer) -> Normalized {
    let peak = buffer.peak();
    if peak == 0.0 {
        log::warn!("peak_normalize: '{}' is silent", buffer.source_id);
        return Normalized {
            buffer: buffer.clone(),
            silent: true,
        };
    }
    let samples = buffer.samples.iter().map(|s| s / peak).collect();
    Normalized {
        buffer: AudioBuffer::new(samples, buffer.sample_rate, buffer.source_id.clone()),
        silent: false,
    }
}
