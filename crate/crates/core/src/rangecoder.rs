//! Byte-oriented range coder with adaptive binary and static multi-symbol models.
//!
//! The encoder keeps a 33-bit `low` in a `u64` and a 32-bit `range`. When the
//! range drops below 2^24 the top byte of `low` is shifted out; carries are
//! resolved with a one-byte cache plus a run counter of pending `0xff` bytes.
//! All probabilities reach the coding loop as 16-bit integers.

use thiserror::Error;

const TOP: u32 = 1 << 24;
/// Probability precision used inside the coder.
pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: u32 = 1 << PROB_BITS;

/// Count total above which an adaptive model halves its counts.
pub const HALVING_THRESHOLD: u32 = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoderError {
    #[error("range decoder ran past the end of the stream (read {0} bytes)")]
    Truncated(usize),
    #[error("symbol {symbol} is outside the alphabet of size {size}")]
    SymbolOutOfRange { symbol: usize, size: usize },
    #[error("invalid frequency table: {0}")]
    InvalidTable(String),
}

/// Adaptive probability estimate for a binary symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveBinaryModel {
    c0: u32,
    c1: u32,
}

impl Default for AdaptiveBinaryModel {
    fn default() -> Self {
        Self::new()
    }
}

impl AdaptiveBinaryModel {
    pub fn new() -> Self {
        AdaptiveBinaryModel { c0: 1, c1: 1 }
    }

    pub fn counts(&self) -> (u32, u32) {
        (self.c0, self.c1)
    }

    /// Probability of a one.
    pub fn p1(&self) -> f64 {
        self.c1 as f64 / (self.c0 + self.c1) as f64
    }

    /// Probability of a zero, quantized to `PROB_BITS`, kept strictly inside (0, 1).
    fn p0_quantized(&self) -> u32 {
        let p = ((self.c0 as u64) << PROB_BITS) / (self.c0 + self.c1) as u64;
        (p as u32).clamp(1, PROB_ONE - 1)
    }

    fn update(&mut self, bit: bool) {
        if bit {
            self.c1 += 1;
        } else {
            self.c0 += 1;
        }
        if self.c0 + self.c1 > HALVING_THRESHOLD {
            self.c0 = self.c0.div_ceil(2);
            self.c1 = self.c1.div_ceil(2);
        }
    }
}

/// Static cumulative frequency table with total at most `2^16`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    cumulative: Vec<u32>,
}

impl FrequencyTable {
    /// Builds a table from per-symbol frequencies; each must be at least one.
    pub fn new(freqs: &[u32]) -> Result<Self, CoderError> {
        if freqs.is_empty() {
            return Err(CoderError::InvalidTable("empty alphabet".into()));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        cumulative.push(0u32);
        let mut total = 0u64;
        for (i, &f) in freqs.iter().enumerate() {
            if f == 0 {
                return Err(CoderError::InvalidTable(format!(
                    "symbol {i} has zero frequency"
                )));
            }
            total += f as u64;
            if total > PROB_ONE as u64 {
                return Err(CoderError::InvalidTable(format!(
                    "total frequency exceeds {PROB_ONE}"
                )));
            }
            cumulative.push(total as u32);
        }
        Ok(FrequencyTable { cumulative })
    }

    /// Quantizes a probability vector to frequencies summing to exactly `2^16`,
    /// each at least one.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self, CoderError> {
        let m = probs.len();
        if m == 0 || m > PROB_ONE as usize {
            return Err(CoderError::InvalidTable(format!("alphabet size {m}")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CoderError::InvalidTable(
                "negative or non-finite probability".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if sum <= 0.0 {
            return Err(CoderError::InvalidTable("probabilities sum to zero".into()));
        }
        let spare = (PROB_ONE as usize - m) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|p| 1 + (p / sum * spare).floor() as u32)
            .collect();
        let assigned: u64 = freqs.iter().map(|&f| f as u64).sum();
        let mut remainder = PROB_ONE as u64 - assigned;
        if remainder > 0 {
            // Hand out the leftover units by largest fractional part, ties by index.
            let mut order: Vec<(f64, usize)> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let x = p / sum * spare;
                    (x - x.floor(), i)
                })
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut k = 0;
            while remainder > 0 {
                freqs[order[k % m].1] += 1;
                remainder -= 1;
                k += 1;
            }
        }
        Self::new(&freqs)
    }

    pub fn len(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> u32 {
        *self.cumulative.last().unwrap()
    }

    pub fn frequency(&self, sym: usize) -> u32 {
        self.cumulative[sym + 1] - self.cumulative[sym]
    }

    pub fn probability(&self, sym: usize) -> f64 {
        self.frequency(sym) as f64 / self.total() as f64
    }

    fn find(&self, target: u32) -> usize {
        // Largest s with cumulative[s] <= target.
        self.cumulative.partition_point(|&c| c <= target) - 1
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xff00_0000 || self.low > 0xffff_ffff {
            let carry = (self.low >> 32) as u8;
            let mut c = self.cache;
            loop {
                self.out.push(c.wrapping_add(carry));
                c = 0xff;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xff) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00ff_ffff) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `bit` with the model's current estimate, then updates the model.
    pub fn encode_bit(&mut self, model: &mut AdaptiveBinaryModel, bit: bool) {
        let bound = (self.range >> PROB_BITS) * model.p0_quantized();
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        model.update(bit);
        self.normalize();
    }

    pub fn encode_symbol(&mut self, table: &FrequencyTable, sym: usize) -> Result<(), CoderError> {
        if sym >= table.len() {
            return Err(CoderError::SymbolOutOfRange {
                symbol: sym,
                size: table.len(),
            });
        }
        let r = self.range / table.total();
        self.low += r as u64 * table.cumulative[sym] as u64;
        self.range = r * table.frequency(sym);
        self.normalize();
        Ok(())
    }

    /// Bytes emitted so far, excluding the pending tail.
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    /// Flushes the final state (five bytes) and returns the stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = RangeDecoder {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
        };
        for _ in 0..5 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | b as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or(CoderError::Truncated(self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<(), CoderError> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self, model: &mut AdaptiveBinaryModel) -> Result<bool, CoderError> {
        let bound = (self.range >> PROB_BITS) * model.p0_quantized();
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        model.update(bit);
        self.normalize()?;
        Ok(bit)
    }

    pub fn decode_symbol(&mut self, table: &FrequencyTable) -> Result<usize, CoderError> {
        let r = self.range / table.total();
        let target = (self.code / r).min(table.total() - 1);
        let sym = table.find(target);
        self.code -= r * table.cumulative[sym];
        self.range = r * table.frequency(sym);
        self.normalize()?;
        Ok(sym)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
