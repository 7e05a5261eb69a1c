//! PCM16 mono 16 kHz WAV reader/writer.
//!
//! Anything else (float PCM, stereo, other rates or bit depths) is rejected
//! with an error naming the offending field. Truncation errors carry the
//! byte offset at which the file ended early.

use crate::spectral::AudioClip;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file: bad {field} tag")]
    BadTag { field: &'static str },
    #[error("unsupported {field}: got {got}, expected {expected}")]
    Unsupported {
        field: &'static str,
        got: u32,
        expected: u32,
    },
    #[error("truncated file: unexpected end at byte offset {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WavError> {
        if self.pos + n > self.buf.len() {
            return Err(WavError::Truncated { offset: self.buf.len(), what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &'static str) -> Result<u32, WavError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16_le(&mut self, what: &'static str) -> Result<u16, WavError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Read a PCM16 mono 16 kHz WAV file into a normalized [-1, 1) clip.
pub fn read_wav(path: &Path) -> Result<AudioClip, WavError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| WavError::Io { path: path.display().to_string(), source })?;
    read_wav_bytes(&bytes)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioClip, WavError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "RIFF header")? != b"RIFF" {
        return Err(WavError::BadTag { field: "RIFF" });
    }
    let _file_size = cur.u32_le("RIFF size")?;
    if cur.take(4, "WAVE header")? != b"WAVE" {
        return Err(WavError::BadTag { field: "WAVE" });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while cur.pos < bytes.len() {
        let id = cur.take(4, "chunk id")?;
        let size = cur.u32_le("chunk size")? as usize;
        match id {
            b"fmt " => {
                let mut f = Cursor { buf: cur.take(size, "fmt chunk body")?, pos: 0 };
                let audio_format = f.u16_le("audio_format")?;
                let channels = f.u16_le("channels")?;
                let sample_rate = f.u32_le("sample_rate")?;
                let _byte_rate = f.u32_le("byte_rate")?;
                let _block_align = f.u16_le("block_align")?;
                let bits = f.u16_le("bits_per_sample")?;
                fmt = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                data = Some(cur.take(size, "data chunk body")?);
            }
            _ => {
                // Skip unknown chunks (LIST, fact, ...), honoring padding.
                cur.take(size + (size & 1), "unknown chunk body")?;
            }
        }
    }

    let (audio_format, channels, sample_rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    if audio_format != 1 {
        return Err(WavError::Unsupported { field: "audio_format", got: audio_format as u32, expected: 1 });
    }
    if channels != 1 {
        return Err(WavError::Unsupported { field: "channels", got: channels as u32, expected: 1 });
    }
    if sample_rate != SAMPLE_RATE {
        return Err(WavError::Unsupported { field: "sample_rate", got: sample_rate, expected: SAMPLE_RATE });
    }
    if bits != 16 {
        return Err(WavError::Unsupported { field: "bits_per_sample", got: bits as u32, expected: 16 });
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    if data.len() % 2 != 0 {
        return Err(WavError::Truncated { offset: bytes.len(), what: "final sample" });
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioClip { samples, sample_rate: SAMPLE_RATE })
}

/// Write a clip as PCM16 mono 16 kHz, clamping to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), WavError> {
    let bytes = wav_bytes(clip);
    let mut f = File::create(path)
        .map_err(|source| WavError::Io { path: path.display().to_string(), source })?;
    f.write_all(&bytes)
        .map_err(|source| WavError::Io { path: path.display().to_string(), source })
}

pub fn wav_bytes(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
