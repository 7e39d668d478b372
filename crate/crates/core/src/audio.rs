//! Time-domain multichannel buffers and float WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Time-domain samples stored as `channels × samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWaveform {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl MultichannelWaveform {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Shape("waveform needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("all channels must have equal length".into()));
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn zeros(sample_rate: u32, n_channels: usize, len: usize) -> Self {
        Self {
            sample_rate,
            channels: vec![vec![0.0; len]; n_channels],
        }
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            channels: vec![samples],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Reads a WAV file (any integer or float encoding) into `f64` samples in [-1, 1].
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        let n_ch = spec.channels as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            SampleFormat::Int => {
                let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
        };
        let len = interleaved.len() / n_ch;
        let mut channels = vec![Vec::with_capacity(len); n_ch];
        for frame in interleaved.chunks_exact(n_ch) {
            for (ch, &s) in channels.iter_mut().zip(frame) {
                ch.push(s);
            }
        }
        Self::new(spec.sample_rate, channels)
    }

    /// Writes 32-bit float WAV, channel-interleaved.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = WavSpec {
            channels: self.n_channels() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
        for i in 0..self.len() {
            for ch in &self.channels {
                writer.write_sample(ch[i] as f32).map_err(wav_err)?;
            }
        }
        writer.finalize().map_err(wav_err)
    }
}
