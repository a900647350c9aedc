//! Bit-exact entropy coding: a carry-correct range coder, fixed-point CDFs
//! (lazy quantized-Laplace and explicit tables), causal-order grid coding
//! driven by the implicit entropy model, and MLP parameter coding.

use alloc::vec;
use alloc::vec::Vec;

use crate::entropy::{
    discretize_params, gather_context, laplace_cdf, predict_params, rate_bits,
    ImplicitEntropyModel, LaplaceParams, Tensor3, ALPHABET_MAX, ALPHABET_MIN,
};
use crate::error::{CoreError, Result};
use crate::math::flt;

/// Probability precision: all CDFs are fixed-point with this total mass.
/// High enough that table quantization (at most ~2 units per symbol) stays
/// well below the 1e-9 estimate floor, so a grid always codes at or above
/// its estimated bits.
pub const PRECISION: u32 = 40;
pub const CDF_TOTAL: u64 = 1 << PRECISION;
pub const ALPHABET_SIZE: u64 = 65536;
/// Mass distributed proportionally to the continuous CDF; the remaining
/// [`ALPHABET_SIZE`] units guarantee one unit per symbol.
const LEAK_SPAN: u64 = CDF_TOTAL - ALPHABET_SIZE;

/// Encoder renormalizes when the range drops below this, keeping
/// `range >> PRECISION >= 2^16` so division waste is negligible.
const RENORM_BOUND: u64 = 1 << 56;

/// Per-symbol fixed-point CDF access, total mass [`CDF_TOTAL`].
pub trait SymbolCdf {
    /// `(cumulative, frequency)` of a symbol. Frequency is always >= 1 for
    /// symbols inside the alphabet.
    fn span(&self, symbol: i32) -> Result<(u64, u64)>;

    /// The symbol whose span contains `target`, with that span.
    fn locate(&self, target: u64) -> (i32, u64, u64);
}

/// Range encoder: 64-bit low/range registers, byte-wise renormalization.
/// Carries are propagated in place through the emitted bytes; a leading
/// guard byte bounds the propagation (the conceptual code value fits the
/// emitted bytes plus one bit, so the guard never exceeds 1).
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u64::MAX, out: vec![0u8] }
    }

    pub fn encode(&mut self, cum: u64, freq: u64) {
        debug_assert!(freq >= 1);
        debug_assert!(cum + freq <= CDF_TOTAL);
        let r = self.range >> PRECISION;
        let (low, carry) = self.low.overflowing_add(r * cum);
        self.low = low;
        if carry {
            propagate_carry(&mut self.out);
        }
        self.range = r * freq;
        while self.range < RENORM_BOUND {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn encode_symbol(&mut self, symbol: i32, model: &impl SymbolCdf) -> Result<()> {
        let (cum, freq) = model.span(symbol)?;
        self.encode(cum, freq);
        Ok(())
    }

    /// Flush the remaining low bits. Total overhead over the information
    /// content is the guard byte plus these 8 bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..8 {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

fn propagate_carry(out: &mut [u8]) {
    for b in out.iter_mut().rev() {
        if *b == 0xFF {
            *b = 0;
        } else {
            *b += 1;
            return;
        }
    }
    // Unreachable for streams produced by RangeEncoder: the guard byte
    // never reaches 0xFF.
    debug_assert!(false, "carry out of range coder stream");
}

/// Mirror of [`RangeEncoder`]. The subtractive `code` register makes carry
/// handling a no-op on the decode side.
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 9 {
            return Err(CoreError::CorruptStream("range coder stream too short"));
        }
        let mut code = 0u64;
        // Skip the guard byte, preload eight.
        for &b in &buf[1..9] {
            code = code << 8 | b as u64;
        }
        Ok(RangeDecoder { code, range: u64::MAX, buf, pos: 9 })
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .buf
            .get(self.pos)
            .copied()
            .ok_or(CoreError::CorruptStream("range coder stream truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, model: &impl SymbolCdf) -> Result<i32> {
        let r = self.range >> PRECISION;
        let target = (self.code / r).min(CDF_TOTAL - 1);
        let (symbol, cum, freq) = model.locate(target);
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        while self.range < RENORM_BOUND {
            let b = self.next_byte()?;
            self.code = self.code << 8 | b as u64;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Lazily evaluated fixed-point CDF of a discretized Laplace over the full
/// alphabet: the proportional part rounds the continuous CDF (tails folded
/// into the end symbols) onto [`LEAK_SPAN`] units, plus one guaranteed unit
/// per symbol. Strictly increasing, total [`CDF_TOTAL`], a pure function of
/// the discretized parameters.
#[derive(Debug, Clone, Copy)]
pub struct QuantizedLaplace {
    mu: f64,
    scale: f64,
}

impl QuantizedLaplace {
    /// `params` must already be discretized (see
    /// [`crate::entropy::discretize_params`]); encoder and decoder construct
    /// identical tables from the transmitted model only.
    pub fn new(params: &LaplaceParams) -> Self {
        QuantizedLaplace { mu: params.mu, scale: params.scale }
    }

    /// Cumulative mass below `symbol`, defined for `ALPHABET_MIN ..=
    /// ALPHABET_MAX + 1`.
    pub fn cum(&self, symbol: i64) -> u64 {
        if symbol <= ALPHABET_MIN as i64 {
            return 0;
        }
        if symbol > ALPHABET_MAX as i64 {
            return CDF_TOTAL;
        }
        let f = laplace_cdf(symbol as f64 - 0.5, self.mu, self.scale);
        let prop = flt::round(f * LEAK_SPAN as f64) as u64;
        prop + (symbol - ALPHABET_MIN as i64) as u64
    }

    /// Materialize the table (tests and diagnostics; coding never needs it).
    pub fn materialize(&self) -> CdfTable {
        let n = ALPHABET_SIZE as usize;
        let mut cum = Vec::with_capacity(n + 1);
        for s in 0..=n {
            cum.push(self.cum(ALPHABET_MIN as i64 + s as i64));
        }
        CdfTable { offset: ALPHABET_MIN, cum }
    }
}

impl SymbolCdf for QuantizedLaplace {
    fn span(&self, symbol: i32) -> Result<(u64, u64)> {
        if !(ALPHABET_MIN..=ALPHABET_MAX).contains(&symbol) {
            return Err(CoreError::SymbolOutOfAlphabet(symbol as i64));
        }
        let lo = self.cum(symbol as i64);
        let hi = self.cum(symbol as i64 + 1);
        Ok((lo, hi - lo))
    }

    fn locate(&self, target: u64) -> (i32, u64, u64) {
        let target = target.min(CDF_TOTAL - 1);
        let mut lo = ALPHABET_MIN as i64;
        let mut hi = ALPHABET_MAX as i64;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.cum(mid + 1) <= target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let c = self.cum(lo);
        let f = self.cum(lo + 1) - c;
        (lo as i32, c, f)
    }
}

/// Explicit cumulative-frequency table over a contiguous alphabet starting
/// at `offset`. Strictly increasing with total [`CDF_TOTAL`]; every symbol
/// has frequency >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    offset: i32,
    cum: Vec<u64>,
}

impl CdfTable {
    /// Largest-remainder allocation of [`CDF_TOTAL`] proportional to
    /// `weights`, with a floor of one unit per symbol.
    pub fn from_weights(offset: i32, weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 || n as u64 > CDF_TOTAL {
            return Err(CoreError::InvalidConfig("bad table alphabet size".into()));
        }
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(CoreError::InvalidConfig("table weights must be non-negative".into()));
        }
        let budget = CDF_TOTAL - n as u64;
        let mut freqs = vec![1u64; n];
        if sum > 0.0 && budget > 0 {
            let mut floors = 0u64;
            let mut rema: Vec<(f64, usize)> = Vec::with_capacity(n);
            for (i, &w) in weights.iter().enumerate() {
                let share = w / sum * budget as f64;
                let fl = flt::floor(share);
                floors += fl as u64;
                freqs[i] += fl as u64;
                rema.push((share - fl, i));
            }
            let mut left = budget - floors;
            rema.sort_unstable_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
            });
            for &(_, i) in rema.iter() {
                if left == 0 {
                    break;
                }
                freqs[i] += 1;
                left -= 1;
            }
        } else {
            // Degenerate weights: spread the budget evenly.
            let each = budget / n as u64;
            let extra = (budget % n as u64) as usize;
            for (i, f) in freqs.iter_mut().enumerate() {
                *f += each + u64::from(i < extra);
            }
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u64;
        cum.push(0);
        for f in freqs {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, CDF_TOTAL);
        Ok(CdfTable { offset, cum })
    }

    /// Equal frequencies; `n` must divide [`CDF_TOTAL`].
    pub fn uniform(offset: i32, n: usize) -> Result<Self> {
        if n == 0 || CDF_TOTAL % n as u64 != 0 {
            return Err(CoreError::InvalidConfig(
                "uniform table size must divide the CDF total".into(),
            ));
        }
        let freq = CDF_TOTAL / n as u64;
        let cum = (0..=n as u64).map(|i| i * freq).collect();
        Ok(CdfTable { offset, cum })
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, symbol: i32) -> Option<u64> {
        let i = usize::try_from(symbol as i64 - self.offset as i64).ok()?;
        if i + 1 >= self.cum.len() {
            return None;
        }
        Some(self.cum[i + 1] - self.cum[i])
    }
}

impl SymbolCdf for CdfTable {
    fn span(&self, symbol: i32) -> Result<(u64, u64)> {
        let i = usize::try_from(symbol as i64 - self.offset as i64)
            .map_err(|_| CoreError::SymbolOutOfAlphabet(symbol as i64))?;
        if i + 1 >= self.cum.len() {
            return Err(CoreError::SymbolOutOfAlphabet(symbol as i64));
        }
        Ok((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    fn locate(&self, target: u64) -> (i32, u64, u64) {
        let target = target.min(CDF_TOTAL - 1);
        // First index with cum > target, minus one.
        let i = self.cum.partition_point(|&c| c <= target) - 1;
        (
            self.offset + i as i32,
            self.cum[i],
            self.cum[i + 1] - self.cum[i],
        )
    }
}

/// Quantized integer planes of one grid: `planes[c]` is channel `c` in
/// raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridInts {
    pub dims: [usize; 3],
    pub planes: Vec<Vec<i32>>,
}

impl GridInts {
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    fn check(&self) -> Result<()> {
        if self.planes.is_empty() || self.planes.iter().any(|p| p.len() != self.voxels()) {
            return Err(CoreError::InvalidConfig("grid plane sizes mismatch".into()));
        }
        Ok(())
    }
}

fn check_prev<'a>(grid: &GridInts, prev: Option<&'a GridInts>) -> Result<Option<&'a GridInts>> {
    if let Some(p) = prev {
        if p.dims != grid.dims || p.channels() != grid.channels() {
            return Err(CoreError::InvalidConfig(
                "previous tensor shape mismatches current grid".into(),
            ));
        }
        p.check()?;
    }
    Ok(prev)
}

pub fn encode_grid(
    grid: &GridInts,
    model: &ImplicitEntropyModel,
    prev: Option<&GridInts>,
) -> Result<Vec<u8>> {
    grid.check()?;
    let prev = check_prev(grid, prev)?;
    let [nx, ny, nz] = grid.dims;
    let mut enc = RangeEncoder::new();
    for c in 0..grid.channels() {
        let cur = Tensor3::new(grid.dims, &grid.planes[c]);
        let prev_t = prev.map(|p| Tensor3::new(p.dims, &p.planes[c]));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = grid.planes[c][(z * ny + y) * nx + x];
                    let ctx = gather_context(&cur, prev_t.as_ref(), [x, y, z]);
                    let params = discretize_params(&predict_params(model, &ctx)?);
                    let lap = QuantizedLaplace::new(&params);
                    enc.encode_symbol(v, &lap)?;
                }
            }
        }
    }
    Ok(enc.finish())
}

pub fn decode_grid(
    bytes: &[u8],
    dims: [usize; 3],
    channels: usize,
    model: &ImplicitEntropyModel,
    prev: Option<&GridInts>,
) -> Result<GridInts> {
    let voxels = dims[0] * dims[1] * dims[2];
    let mut out = GridInts { dims, planes: vec![vec![0i32; voxels]; channels] };
    let prev = check_prev(&out, prev)?;
    let [nx, ny, nz] = dims;
    let mut dec = RangeDecoder::new(bytes)?;
    for c in 0..channels {
        let prev_t = prev.map(|p| Tensor3::new(p.dims, &p.planes[c]));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let ctx = {
                        let cur = Tensor3::new(dims, &out.planes[c]);
                        gather_context(&cur, prev_t.as_ref(), [x, y, z])
                    };
                    let params = discretize_params(&predict_params(model, &ctx)?);
                    let lap = QuantizedLaplace::new(&params);
                    let s = dec.decode(&lap)?;
                    out.planes[c][(z * ny + y) * nx + x] = s;
                }
            }
        }
    }
    Ok(out)
}

/// Estimated code length of the grid in bits: the rate formula with hard
/// integers, discretized parameters and integer contexts, exactly mirroring
/// what [`encode_grid`] codes against.
pub fn estimate_grid_bits(
    grid: &GridInts,
    model: &ImplicitEntropyModel,
    prev: Option<&GridInts>,
) -> Result<f64> {
    grid.check()?;
    let prev = check_prev(grid, prev)?;
    let [nx, ny, nz] = grid.dims;
    let mut bits = 0.0;
    for c in 0..grid.channels() {
        let cur = Tensor3::new(grid.dims, &grid.planes[c]);
        let prev_t = prev.map(|p| Tensor3::new(p.dims, &p.planes[c]));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = grid.planes[c][(z * ny + y) * nx + x];
                    let ctx = gather_context(&cur, prev_t.as_ref(), [x, y, z]);
                    let params = discretize_params(&predict_params(model, &ctx)?);
                    bits += rate_bits(v as f64, &params);
                }
            }
        }
    }
    Ok(bits)
}

/// One MLP tensor after symmetric 16-bit quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub ints: Vec<i16>,
    pub scale: f32,
}

/// Symmetric quantization: `scale = max|w| / 32767` stored in single
/// precision, integers rounded half away from zero. A zero tensor uses
/// scale 1.
pub fn quantize_tensor(vals: &[f64]) -> QuantizedTensor {
    let m = vals.iter().fold(0.0f64, |a, &v| a.max(flt::abs(v)));
    let scale: f32 = if m == 0.0 { 1.0 } else { (m / 32767.0) as f32 };
    let s = scale as f64;
    let ints = vals
        .iter()
        .map(|&v| flt::round(v / s).clamp(-32767.0, 32767.0) as i16)
        .collect();
    QuantizedTensor { ints, scale }
}

pub fn dequantize_tensor(qt: &QuantizedTensor) -> Vec<f64> {
    let s = qt.scale as f64;
    qt.ints.iter().map(|&i| i as f64 * s).collect()
}

/// Serialize quantized tensors: little-endian scales up front, then one
/// range-coded stream of all integers under a fixed uniform table.
pub fn encode_param_tensors(tensors: &[QuantizedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(&t.scale.to_le_bytes());
    }
    let table = UniformCdf;
    let mut enc = RangeEncoder::new();
    for t in tensors {
        for &i in &t.ints {
            let (cum, freq) = table.span(i as i32).expect("i16 fits the alphabet");
            enc.encode(cum, freq);
        }
    }
    out.extend_from_slice(&enc.finish());
    out
}

pub fn decode_param_tensors(bytes: &[u8], shapes: &[usize]) -> Result<Vec<QuantizedTensor>> {
    let head = shapes.len() * 4;
    if bytes.len() < head {
        return Err(CoreError::CorruptStream("parameter section too short"));
    }
    let mut scales = Vec::with_capacity(shapes.len());
    for i in 0..shapes.len() {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[i * 4..i * 4 + 4]);
        scales.push(f32::from_le_bytes(b));
    }
    let table = UniformCdf;
    let mut dec = RangeDecoder::new(&bytes[head..])?;
    let mut out = Vec::with_capacity(shapes.len());
    for (&len, &scale) in shapes.iter().zip(scales.iter()) {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(CoreError::CorruptStream("bad parameter scale"));
        }
        let mut ints = Vec::with_capacity(len);
        for _ in 0..len {
            let s = dec.decode(&table)?;
            if !(-32767..=32767).contains(&s) {
                return Err(CoreError::CorruptStream("parameter integer out of range"));
            }
            ints.push(s as i16);
        }
        out.push(QuantizedTensor { ints, scale });
    }
    Ok(out)
}

/// Fixed uniform distribution over the full alphabet (16 bits/symbol), used
/// as the fallback table for MLP parameters.
pub struct UniformCdf;

const UNIFORM_FREQ: u64 = CDF_TOTAL / ALPHABET_SIZE;

impl SymbolCdf for UniformCdf {
    fn span(&self, symbol: i32) -> Result<(u64, u64)> {
        if !(ALPHABET_MIN..=ALPHABET_MAX).contains(&symbol) {
            return Err(CoreError::SymbolOutOfAlphabet(symbol as i64));
        }
        Ok(((symbol as i64 - ALPHABET_MIN as i64) as u64 * UNIFORM_FREQ, UNIFORM_FREQ))
    }

    fn locate(&self, target: u64) -> (i32, u64, u64) {
        let target = target.min(CDF_TOTAL - 1);
        let i = target / UNIFORM_FREQ;
        (
            (ALPHABET_MIN as i64 + i as i64) as i32,
            i * UNIFORM_FREQ,
            UNIFORM_FREQ,
        )
    }
}
