//! Action codec: continuous action chunks <-> discrete token sequences.
//!
//! Encoding is two-staged. Every value is clamped to its dimension bounds,
//! mapped to `[0, 1)` and quantized into one of `q` bins; the bins are
//! flattened time-major (row `t`, then dimension `j`) into `h * d` base
//! tokens. With run-length compression enabled, maximal runs of identical
//! base tokens are then emitted as `(value, count)` pairs where the count
//! token id is `q + run_length - 1`.
//!
//! A token stream is *valid* iff it decodes to exactly `h * d` values. This
//! is the only validity criterion; it is what the format reward measures.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id type shared by the codec, rewards and the policy.
pub type Token = u32;

/// Margin added around observed extrema by [`fit_normalizer`].
pub const FIT_MARGIN: f64 = 1e-6;

/// Threshold on the normalized gripper channel separating open from closed.
pub const GRIP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("no demonstrations")]
    NoDemonstrations,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected_h}x{expected_d}, found {found_h}x{found_d}")]
    ShapeMismatch {
        expected_h: usize,
        expected_d: usize,
        found_h: usize,
        found_d: usize,
    },
    #[error("invalid action chunk: {0}")]
    InvalidChunk(String),
    #[error("invalid codec spec: {0}")]
    InvalidSpec(String),
    #[error("invalid token sequence: {0}")]
    Format(#[from] FormatViolation),
}

/// Why a token sequence fails to decode.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FormatViolation {
    #[error("length {found} does not match the expected layout (expected {expected})")]
    Length { expected: usize, found: usize },
    #[error("token {token} at position {position} is outside the allowed vocabulary")]
    Vocabulary { position: usize, token: Token },
    #[error("run-length stream expands to {found} values, expected {expected}")]
    ExpansionCount { expected: usize, found: usize },
}

impl FormatViolation {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatViolation::Length { .. } => "length",
            FormatViolation::Vocabulary { .. } => "vocabulary",
            FormatViolation::ExpansionCount { .. } => "expansion-count",
        }
    }
}

/// A sequence of token ids. Ids are unbounded above: a policy may emit ids
/// the codec does not accept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn as_slice(&self) -> &[Token] {
        &self.0
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [Token];
    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

/// `h x d` action matrix, row-major. Columns `0..d-1` are pose dimensions,
/// column `d-1` is the gripper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    h: usize,
    d: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(h: usize, d: usize, values: Vec<f64>) -> Result<Self, CodecError> {
        if h < 1 || d < 2 {
            return Err(CodecError::InvalidChunk(format!(
                "need h >= 1 and d >= 2, got {h}x{d}"
            )));
        }
        if values.len() != h * d {
            return Err(CodecError::InvalidChunk(format!(
                "{} values for a {h}x{d} chunk",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::InvalidChunk(format!(
                "non-finite entry at ({}, {})",
                i / d,
                i % d
            )));
        }
        Ok(Self { h, d, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CodecError> {
        let h = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(CodecError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        Self::new(h, d, rows.concat())
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn pose_dims(&self) -> usize {
        self.d - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.d + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    pub fn pose(&self, t: usize) -> &[f64] {
        &self.row(t)[..self.d - 1]
    }

    pub fn grip(&self, t: usize) -> f64 {
        self.get(t, self.d - 1)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.d)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Per-dimension value range used for quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, CodecError> {
        let stats = Self { lower, upper };
        stats.validate()?;
        Ok(stats)
    }

    /// Same `[lower, upper]` for every pose dimension, `[0, 1]` for the gripper.
    pub fn uniform(d: usize, lower: f64, upper: f64) -> Result<Self, CodecError> {
        let mut lo = vec![lower; d];
        let mut hi = vec![upper; d];
        if d > 0 {
            lo[d - 1] = 0.0;
            hi[d - 1] = 1.0;
        }
        Self::new(lo, hi)
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.lower.len() != self.upper.len() {
            return Err(CodecError::DimensionMismatch {
                expected: self.lower.len(),
                found: self.upper.len(),
            });
        }
        for (j, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(CodecError::InvalidSpec(format!(
                    "dimension {j}: bounds [{lo}, {hi}] are not an increasing finite pair"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Compression {
    None,
    RunLength,
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compression::None => "none",
            Compression::RunLength => "run-length",
        })
    }
}

/// Codec layout. Serializes flat as `{h, d, q, compression, lower, upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodecSpec", into = "RawCodecSpec")]
pub struct CodecSpec {
    pub h: usize,
    pub d: usize,
    pub q: u32,
    pub compression: Compression,
    pub stats: NormalizationStats,
}

#[derive(Serialize, Deserialize)]
struct RawCodecSpec {
    h: usize,
    d: usize,
    q: u32,
    compression: Compression,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawCodecSpec> for CodecSpec {
    type Error = CodecError;
    fn try_from(raw: RawCodecSpec) -> Result<Self, CodecError> {
        CodecSpec::new(
            raw.h,
            raw.d,
            raw.q,
            raw.compression,
            NormalizationStats {
                lower: raw.lower,
                upper: raw.upper,
            },
        )
    }
}

impl From<CodecSpec> for RawCodecSpec {
    fn from(spec: CodecSpec) -> Self {
        RawCodecSpec {
            h: spec.h,
            d: spec.d,
            q: spec.q,
            compression: spec.compression,
            lower: spec.stats.lower,
            upper: spec.stats.upper,
        }
    }
}

impl CodecSpec {
    pub fn new(
        h: usize,
        d: usize,
        q: u32,
        compression: Compression,
        stats: NormalizationStats,
    ) -> Result<Self, CodecError> {
        if h < 1 || d < 2 {
            return Err(CodecError::InvalidSpec(format!(
                "need h >= 1 and d >= 2, got {h}x{d}"
            )));
        }
        if q < 2 {
            return Err(CodecError::InvalidSpec(format!("q must be >= 2, got {q}")));
        }
        stats.validate()?;
        if stats.dims() != d {
            return Err(CodecError::DimensionMismatch {
                expected: d,
                found: stats.dims(),
            });
        }
        Ok(Self {
            h,
            d,
            q,
            compression,
            stats,
        })
    }

    /// Number of base values a valid stream must expand to.
    pub fn values_per_chunk(&self) -> usize {
        self.h * self.d
    }

    /// Largest run a count token can express.
    pub fn max_run(&self) -> usize {
        self.values_per_chunk()
    }

    /// Bin tokens `0..q` plus count tokens `q..q + h*d`.
    pub fn vocab_size(&self) -> usize {
        self.q as usize + self.max_run()
    }

    pub fn bin_width(&self, j: usize) -> f64 {
        self.stats.width(j) / f64::from(self.q)
    }

    pub fn count_token(&self, run: usize) -> Token {
        self.q + (run - 1) as Token
    }

    fn check_shape(&self, chunk: &ActionChunk) -> Result<(), CodecError> {
        if chunk.h != self.h || chunk.d != self.d {
            return Err(CodecError::ShapeMismatch {
                expected_h: self.h,
                expected_d: self.d,
                found_h: chunk.h,
                found_d: chunk.d,
            });
        }
        Ok(())
    }

    fn quantize(&self, j: usize, v: f64) -> Token {
        let lo = self.stats.lower[j];
        let hi = self.stats.upper[j];
        let u = (v.clamp(lo, hi) - lo) / (hi - lo);
        let bin = (u * f64::from(self.q)).floor() as i64;
        bin.clamp(0, i64::from(self.q) - 1) as Token
    }

    fn normalized_center(&self, bin: Token) -> f64 {
        (f64::from(bin) + 0.5) / f64::from(self.q)
    }

    fn bin_center(&self, j: usize, bin: Token) -> f64 {
        self.stats.lower[j] + self.normalized_center(bin) * self.stats.width(j)
    }
}

/// Per-dimension `[min - m, max + m]` over all demonstration entries; the
/// gripper dimension is always `[0, 1]`.
pub fn fit_normalizer<'a, I>(demos: I) -> Result<NormalizationStats, CodecError>
where
    I: IntoIterator<Item = &'a ActionChunk>,
{
    let mut iter = demos.into_iter();
    let first = iter.next().ok_or(CodecError::NoDemonstrations)?;
    let d = first.d;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for chunk in std::iter::once(first).chain(iter) {
        if chunk.d != d {
            return Err(CodecError::DimensionMismatch {
                expected: d,
                found: chunk.d,
            });
        }
        for row in chunk.rows() {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
    }
    for j in 0..d - 1 {
        lo[j] -= FIT_MARGIN;
        hi[j] += FIT_MARGIN;
    }
    lo[d - 1] = 0.0;
    hi[d - 1] = 1.0;
    NormalizationStats::new(lo, hi)
}

/// Quantized, flattened bins before any compression.
pub fn encode_base(chunk: &ActionChunk, spec: &CodecSpec) -> Result<Vec<Token>, CodecError> {
    spec.check_shape(chunk)?;
    Ok(chunk
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| spec.quantize(i % spec.d, v))
        .collect())
}

/// Collapses maximal runs into `(value, count)` pairs.
pub fn run_length_pairs(base: &[Token], q: u32) -> Vec<Token> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < base.len() {
        let value = base[i];
        let mut run = 1;
        while i + run < base.len() && base[i + run] == value {
            run += 1;
        }
        out.push(value);
        out.push(q + (run - 1) as Token);
        i += run;
    }
    out
}

pub fn encode(chunk: &ActionChunk, spec: &CodecSpec) -> Result<TokenSequence, CodecError> {
    let base = encode_base(chunk, spec)?;
    Ok(TokenSequence(match spec.compression {
        Compression::None => base,
        Compression::RunLength => run_length_pairs(&base, spec.q),
    }))
}

/// Validates `tokens` and returns the expanded base stream.
pub fn expand(tokens: &[Token], spec: &CodecSpec) -> Result<Vec<Token>, FormatViolation> {
    let n = spec.values_per_chunk();
    match spec.compression {
        Compression::None => {
            if tokens.len() != n {
                return Err(FormatViolation::Length {
                    expected: n,
                    found: tokens.len(),
                });
            }
            if let Some(position) = tokens.iter().position(|&t| t >= spec.q) {
                return Err(FormatViolation::Vocabulary {
                    position,
                    token: tokens[position],
                });
            }
            Ok(tokens.to_vec())
        }
        Compression::RunLength => {
            if tokens.len() % 2 != 0 || tokens.is_empty() {
                // the nearest admissible even length is the best hint we can give
                return Err(FormatViolation::Length {
                    expected: (tokens.len() + 1).max(2) & !1,
                    found: tokens.len(),
                });
            }
            let count_end = spec.q as u64 + spec.max_run() as u64;
            let mut total = 0usize;
            for (pair, chunk) in tokens.chunks(2).enumerate() {
                let (value, count) = (chunk[0], chunk[1]);
                if value >= spec.q {
                    return Err(FormatViolation::Vocabulary {
                        position: 2 * pair,
                        token: value,
                    });
                }
                if count < spec.q || u64::from(count) >= count_end {
                    return Err(FormatViolation::Vocabulary {
                        position: 2 * pair + 1,
                        token: count,
                    });
                }
                total += (count - spec.q) as usize + 1;
            }
            if total != n {
                return Err(FormatViolation::ExpansionCount {
                    expected: n,
                    found: total,
                });
            }
            let mut base = Vec::with_capacity(n);
            for chunk in tokens.chunks(2) {
                let run = (chunk[1] - spec.q) as usize + 1;
                base.extend(std::iter::repeat_n(chunk[0], run));
            }
            Ok(base)
        }
    }
}

/// True iff `tokens` decode to exactly `h * d` values.
pub fn format_check(tokens: &[Token], spec: &CodecSpec) -> bool {
    expand(tokens, spec).is_ok()
}

/// Maps tokens back to bin centers. The gripper column is binarized on its
/// normalized value.
pub fn decode(tokens: &[Token], spec: &CodecSpec) -> Result<ActionChunk, CodecError> {
    let base = expand(tokens, spec)?;
    let grip = spec.d - 1;
    let values = base
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let j = i % spec.d;
            if j == grip {
                if spec.normalized_center(b) >= GRIP_THRESHOLD {
                    1.0
                } else {
                    0.0
                }
            } else {
                spec.bin_center(j, b)
            }
        })
        .collect();
    ActionChunk::new(spec.h, spec.d, values)
}
