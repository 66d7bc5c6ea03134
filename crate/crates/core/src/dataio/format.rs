//! VAGF: per-frame feature sequences with label and onset metadata.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field      | type        |
//! |------------|-------------|
//! | magic      | `b"VAGF"`   |
//! | version    | u16 (= 1)   |
//! | frames T   | u32         |
//! | dim D      | u32         |
//! | fps        | f32         |
//! | label      | u8 (0 / 1)  |
//! | tau        | i32 (-1 = absent) |
//! | group len  | u32         |
//! | group id   | UTF-8 bytes |
//! | features   | T*D f32, row-major |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"VAGF";
pub const FEATURE_VERSION: u16 = 1;
/// Fixed header bytes before the group id.
pub const FEATURE_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 1 + 4 + 4;

/// One clip (or source stream) of per-frame backbone features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub fps: f32,
    /// 1 for clips that end in an accident.
    pub label: u8,
    /// Frame index of accident onset, positives only.
    pub tau: Option<usize>,
    /// Source video; every clip cut from one video shares it.
    pub group_id: String,
    /// `T x D` features.
    pub features: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(
        features: Tensor<f32>,
        fps: f32,
        label: u8,
        tau: Option<usize>,
        group_id: impl Into<String>,
    ) -> Result<Self> {
        let seq = Self {
            fps,
            label,
            tau,
            group_id: group_id.into(),
            features,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.features.shape().first().copied().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    /// Clip duration in seconds.
    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.fps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 || self.frames() == 0 || self.dim() == 0 {
            return Err(Error::input(format!(
                "features must be a non-empty T x D matrix, got {:?}",
                self.features.shape()
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::input(format!("fps must be positive, got {}", self.fps)));
        }
        match (self.label, self.tau) {
            (0, None) => {}
            (0, Some(t)) => {
                return Err(Error::input(format!("negative clip carries onset {t}")));
            }
            (1, None) => return Err(Error::input("positive clip without onset")),
            (1, Some(t)) if t >= self.frames() => {
                return Err(Error::input(format!(
                    "onset {t} outside clip of {} frames",
                    self.frames()
                )));
            }
            (1, Some(_)) => {}
            (l, _) => return Err(Error::input(format!("label must be 0 or 1, got {l}"))),
        }
        self.features.check_finite("features")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, d) = (self.frames(), self.dim());
        let group = self.group_id.as_bytes();
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + group.len() + 4 * t * d);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.push(self.label);
        let tau = self.tau.map_or(-1, |t| t as i32);
        out.extend_from_slice(&tau.to_le_bytes());
        out.extend_from_slice(&(group.len() as u32).to_le_bytes());
        out.extend_from_slice(group);
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != FEATURE_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}, expected \"VAGF\"")));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != FEATURE_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let frames = u32::from_le_bytes(r.array("frame count")?) as usize;
        let dim = u32::from_le_bytes(r.array("feature dim")?) as usize;
        let fps = f32::from_le_bytes(r.array("fps")?);
        let label = r.take(1, "label")?[0];
        let tau_pos = r.pos;
        let tau = i32::from_le_bytes(r.array("tau")?);
        let glen = u32::from_le_bytes(r.array("group id length")?) as usize;
        let gpos = r.pos;
        let group_id = std::str::from_utf8(r.take(glen, "group id")?)
            .map_err(|_| r.error_at(gpos as u64, "group id is not UTF-8"))?
            .to_string();

        let data_pos = r.pos;
        let count = frames
            .checked_mul(dim)
            .ok_or_else(|| r.error_at(6, "frame count times dim overflows"))?;
        let raw = r.take(count * 4, "feature data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(r.error_at((data_pos + 4 * i) as u64, "non-finite feature value"));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        let tau = match tau {
            -1 => None,
            t if t >= 0 => Some(t as usize),
            t => return Err(r.error_at(tau_pos as u64, format!("invalid onset {t}"))),
        };
        let features = Tensor::new(vec![frames, dim], data)?;
        let seq = FeatureSequence {
            fps,
            label,
            tau,
            group_id,
            features,
        };
        seq.validate().map_err(|e| r.error_at(6, e.to_string()))?;
        Ok(seq)
    }
}

pub(super) struct Reader<'a> {
    pub(super) bytes: &'a [u8],
    pub(super) pos: usize,
}

impl<'a> Reader<'a> {
    pub(super) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(super) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.bytes.len() as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    pub(super) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    pub(super) fn error_at(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes)
}
