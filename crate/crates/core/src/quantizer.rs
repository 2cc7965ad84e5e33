//! Bounded-domain vector quantizers, per-iteration scaling and bit-exact index coding.
//!
//! A [`QuantizerSpec`] fixes the geometry (dimension `n`, rate `R` bits per
//! dimension). A [`ScaledQuantizer`] applies that geometry at dynamic range `r`,
//! i.e. `q_r(u) = r * q(u / r)`, so every iteration uses the same cells at a
//! different resolution.
//!
//! The only implemented geometry is the scalar uniform quantizer on the cube
//! `[-r, r]^n`: each coordinate is split into `2^R` equal cells with
//! reconstruction points at the cell centres `-r + (i + 1/2) * 2r / 2^R`.
//! Its covering radius is `r * sqrt(n) * 2^-R` and its covering efficiency is
//! `sqrt(n)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

/// Largest supported rate; indices are carried as `u32`.
pub const MAX_RATE: u32 = 32;

/// Relative tolerance on the domain boundary. Inputs with
/// `|u_i| <= r * (1 + DOMAIN_SLACK)` are accepted and land in the edge cell.
pub const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("quantizer dimension must be positive")]
    ZeroDimension,
    #[error("rate {0} exceeds the supported maximum of {MAX_RATE} bits per dimension")]
    RateTooLarge(u32),
    #[error("dynamic range must be finite and nonnegative, got {0}")]
    InvalidRange(f64),
    #[error("input has {got} coordinates, quantizer expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coordinate {coordinate} = {value:e} lies outside the domain [-{range:e}, {range:e}]")]
    RangeViolation { coordinate: usize, value: f64, range: f64 },
    #[error("index {index} at coordinate {coordinate} does not fit in {rate} bits")]
    IndexOverflow { coordinate: usize, index: u32, rate: u32 },
    #[error("bit string carries {got} bits, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid bit character {0:?}")]
    InvalidBit(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    ScalarUniform,
}

/// Geometry of a dimension-`n`, rate-`R` quantizer with unit dynamic range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    dim: usize,
    rate: u32,
    kind: QuantizerKind,
}

impl QuantizerSpec {
    /// Scalar uniform quantizer. A rate of zero is accepted: it has a single
    /// reconstruction point at the origin and sends no bits.
    pub fn scalar_uniform(dim: usize, rate: u32) -> Result<Self, QuantizerError> {
        if dim == 0 {
            return Err(QuantizerError::ZeroDimension);
        }
        if rate > MAX_RATE {
            return Err(QuantizerError::RateTooLarge(rate));
        }
        Ok(Self {
            dim,
            rate,
            kind: QuantizerKind::ScalarUniform,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    /// Number of levels per coordinate, `2^R`.
    pub fn levels(&self) -> u64 {
        1u64 << self.rate
    }

    /// `log2 |Im(q)| = n R`, the payload size in bits.
    pub fn payload_bits(&self) -> usize {
        self.dim * self.rate as usize
    }

    /// Worst-case reconstruction error over the domain at dynamic range `r`.
    pub fn covering_radius<T: Scalar>(&self, r: T) -> T {
        match self.kind {
            QuantizerKind::ScalarUniform => {
                r * lit::<T>(self.dim as f64).sqrt() * lit::<T>(2f64.powi(-(self.rate as i32)))
            }
        }
    }

    /// `|Im(q)|^(1/n) * d(q) / r(q)`; always at least one.
    pub fn covering_efficiency<T: Scalar>(&self) -> T {
        let per_dim_cardinality = lit::<T>(2f64.powi(self.rate as i32));
        per_dim_cardinality * self.covering_radius(T::one())
    }

    /// `rho_n * 2^-R`, the ratio of covering radius to dynamic range.
    pub fn relative_resolution<T: Scalar>(&self) -> T {
        self.covering_radius(T::one())
    }

    pub fn at_range<T: Scalar>(self, range: T) -> Result<ScaledQuantizer<T>, QuantizerError> {
        ScaledQuantizer::new(self, range)
    }

    /// Reconstruction point of cell `index` at unit dynamic range.
    fn unit_level<T: Scalar>(&self, index: u32) -> T {
        let levels = lit::<T>(self.levels() as f64);
        (lit::<T>(2.0 * index as f64 + 1.0) - levels) / levels
    }

    /// Cell index of a unit-range coordinate `v`; boundaries go to the upper cell.
    fn unit_index<T: Scalar>(&self, v: T) -> u32 {
        let top = self.levels() - 1;
        let half = lit::<T>((self.levels() as f64) / 2.0);
        let s = ((v + T::one()) * half).floor();
        if s <= T::zero() {
            0
        } else {
            s.to_u64().map_or(top, |i| i.min(top)) as u32
        }
    }
}

/// Output of a single quantization: cell indices plus the reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized<T> {
    pub indices: Vec<u32>,
    pub reconstruction: Vec<T>,
}

/// `q_r(u) = r q(u / r)`: the base geometry at dynamic range `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledQuantizer<T> {
    base: QuantizerSpec,
    range: T,
}

impl<T: Scalar> ScaledQuantizer<T> {
    pub fn new(base: QuantizerSpec, range: T) -> Result<Self, QuantizerError> {
        if !(range >= T::zero()) || !range.is_finite() {
            return Err(QuantizerError::InvalidRange(range.to_wire()));
        }
        Ok(Self { base, range })
    }

    pub fn base(&self) -> &QuantizerSpec {
        &self.base
    }

    pub fn range(&self) -> T {
        self.range
    }

    pub fn covering_radius(&self) -> T {
        self.base.covering_radius(self.range)
    }

    pub fn quantize(&self, u: &[T]) -> Result<Quantized<T>, QuantizerError> {
        let n = self.base.dim;
        if u.len() != n {
            return Err(QuantizerError::DimensionMismatch {
                expected: n,
                got: u.len(),
            });
        }
        let r = self.range;
        let limit = r * (T::one() + lit(DOMAIN_SLACK));
        for (i, &x) in u.iter().enumerate() {
            if !(x.abs() <= limit) {
                return Err(QuantizerError::RangeViolation {
                    coordinate: i,
                    value: x.to_wire(),
                    range: r.to_wire(),
                });
            }
        }
        let indices: Vec<u32> = if r == T::zero() {
            vec![self.base.unit_index(T::zero()); n]
        } else {
            u.iter().map(|&x| self.base.unit_index(x / r)).collect()
        };
        let reconstruction = self.reconstruct_unchecked(&indices);
        Ok(Quantized {
            indices,
            reconstruction,
        })
    }

    /// Maps received cell indices back to the reconstruction points.
    pub fn reconstruct(&self, indices: &[u32]) -> Result<Vec<T>, QuantizerError> {
        if indices.len() != self.base.dim {
            return Err(QuantizerError::DimensionMismatch {
                expected: self.base.dim,
                got: indices.len(),
            });
        }
        let top = self.base.levels();
        if let Some((coordinate, &index)) = indices.iter().enumerate().find(|(_, &i)| u64::from(i) >= top) {
            return Err(QuantizerError::IndexOverflow {
                coordinate,
                index,
                rate: self.base.rate,
            });
        }
        Ok(self.reconstruct_unchecked(indices))
    }

    fn reconstruct_unchecked(&self, indices: &[u32]) -> Vec<T> {
        indices
            .iter()
            .map(|&i| self.range * self.base.unit_level::<T>(i))
            .collect()
    }
}

/// One uplink message: the cell indices produced at `iteration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub iteration: u64,
    pub rate: u32,
    pub indices: Vec<u32>,
}

impl Payload {
    pub fn encode(&self) -> Result<BitString, QuantizerError> {
        encode_indices(&self.indices, self.rate)
    }

    pub fn decode(iteration: u64, bits: &BitString, dim: usize, rate: u32) -> Result<Self, QuantizerError> {
        Ok(Self {
            iteration,
            rate,
            indices: decode_indices(bits, dim, rate)?,
        })
    }
}

/// Packed bit string, most significant bit of each byte first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_packed(bytes: Vec<u8>, len: usize) -> Result<Self, QuantizerError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(QuantizerError::LengthMismatch {
                expected: bytes.len() * 8,
                got: len,
            });
        }
        Ok(Self { bytes, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.len() - 1;
            self.bytes[last] |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        (i < self.len).then(|| self.bytes[i / 8] & (0x80 >> (i % 8)) != 0)
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) == Some(true) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitString {
    type Err = QuantizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bits = BitString::new();
        for c in s.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => return Err(QuantizerError::InvalidBit(other)),
            }
        }
        Ok(bits)
    }
}

/// Packs `indices` coordinate-major, `rate` bits each, MSB first.
pub fn encode_indices(indices: &[u32], rate: u32) -> Result<BitString, QuantizerError> {
    if rate > MAX_RATE {
        return Err(QuantizerError::RateTooLarge(rate));
    }
    let mut bits = BitString::new();
    for (coordinate, &index) in indices.iter().enumerate() {
        if u64::from(index) >= 1u64 << rate {
            return Err(QuantizerError::IndexOverflow {
                coordinate,
                index,
                rate,
            });
        }
        for b in (0..rate).rev() {
            bits.push((index >> b) & 1 == 1);
        }
    }
    Ok(bits)
}

pub fn decode_indices(bits: &BitString, dim: usize, rate: u32) -> Result<Vec<u32>, QuantizerError> {
    if rate > MAX_RATE {
        return Err(QuantizerError::RateTooLarge(rate));
    }
    let expected = dim * rate as usize;
    if bits.len() != expected {
        return Err(QuantizerError::LengthMismatch {
            expected,
            got: bits.len(),
        });
    }
    let mut out = Vec::with_capacity(dim);
    let mut pos = 0;
    for _ in 0..dim {
        let mut index = 0u64;
        for _ in 0..rate {
            index = (index << 1) | u64::from(bits.get(pos) == Some(true));
            pos += 1;
        }
        out.push(index as u32);
    }
    Ok(out)
}
