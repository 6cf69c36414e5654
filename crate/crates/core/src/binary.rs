//! Binarization and the bit-packed XNOR-popcount convolution.
//!
//! Bit layout: a [`BitTensor`] stores element `i` (row-major over its shape)
//! in bit `i % 64` of word `i / 64`, least significant bit first. A set bit
//! means `+1`, a clear bit `-1`. Bits past `valid_len` in the last word are
//! always zero.

use crate::error::{Error, Result};
use crate::nn::{for_each_chunk_with, ConvSpec};
use crate::tensor::Tensor;

/// `+1` for `x >= 0` (so `sign(0) = +1`), `-1` otherwise.
#[inline]
pub fn sign_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign(x: &Tensor) -> Tensor {
    x.map(sign_value)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
    valid_len: usize,
}

fn word_count(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BitTensor {
    /// Builds from raw words, checking the word count and zero padding.
    pub fn from_words(shape: &[usize], words: Vec<u64>) -> Result<Self> {
        let valid_len: usize = shape.iter().product();
        if words.len() != word_count(valid_len) {
            return Err(Error::shape(format!(
                "{} bits need {} words, got {}",
                valid_len,
                word_count(valid_len),
                words.len()
            )));
        }
        let tail = valid_len % 64;
        if tail != 0 && words[words.len() - 1] >> tail != 0 {
            return Err(Error::Domain(
                "padding bits past valid_len must be zero".into(),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            words,
            valid_len,
        })
    }

    /// Packs the signs of arbitrary reals (`x >= 0` maps to a set bit).
    pub fn from_signs(x: &Tensor) -> Self {
        let words = x
            .data()
            .chunks(64)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |w, (j, &v)| w | (u64::from(v >= 0.0) << j))
            })
            .collect();
        Self {
            shape: x.shape().to_vec(),
            words,
            valid_len: x.len(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    /// Number of `+1` entries.
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Packs a tensor whose entries are exactly `+1` or `-1`.
pub fn pack(x: &Tensor) -> Result<BitTensor> {
    if let Some(bad) = x.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::Domain(format!("cannot pack non-binary value {bad}")));
    }
    Ok(BitTensor::from_signs(x))
}

pub fn unpack(b: &BitTensor) -> Tensor {
    Tensor::from_fn(&b.shape, |i| if b.bit(i) { 1.0 } else { -1.0 })
}

/// `sum_i a_i * b_i` over the ±1 interpretation: `n - 2 * popcount(a ^ b)`.
pub fn xnor_dot(a: &BitTensor, b: &BitTensor) -> Result<i64> {
    if a.valid_len != b.valid_len {
        return Err(Error::shape(format!(
            "xnor_dot length mismatch: {} vs {}",
            a.valid_len, b.valid_len
        )));
    }
    let differing: u64 = a
        .words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones() as u64)
        .sum();
    Ok(a.valid_len as i64 - 2 * differing as i64)
}

/// Re-lays `[outer, channels, inner]` bits so each `(outer, inner)` position
/// owns `words_per` consecutive words holding its channel bits.
fn channel_interleave(
    bits: &BitTensor,
    outer: usize,
    channels: usize,
    inner: usize,
) -> (Vec<u64>, usize) {
    let words_per = word_count(channels);
    let mut out = vec![0u64; outer * inner * words_per];
    for (o, dst) in out.chunks_exact_mut(inner * words_per).enumerate() {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            let (word, shift) = (c >> 6, c & 63);
            for (i, slot) in dst.iter_mut().skip(word).step_by(words_per).enumerate() {
                *slot |= ((bits.words[(base + i) >> 6] >> ((base + i) & 63)) & 1) << shift;
            }
        }
    }
    (out, words_per)
}

/// Number of differing bits between two equal-length word slices.
#[inline(always)]
fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(p, q)| (p ^ q).count_ones()).sum()
}

/// Which kernel taps land inside the input for one output position. Positions
/// sharing a pattern share the padded-tap correction.
struct TapLayout {
    /// Per position and tap: source pixel index; padded taps point one past
    /// the last pixel, where the sample buffer holds a zero word.
    sources: Vec<usize>,
    /// Per position: index into `patterns`.
    pattern_of: Vec<usize>,
    /// Per pattern: tap validity flags.
    patterns: Vec<Vec<bool>>,
}

fn tap_layout(spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize) -> TapLayout {
    let taps = spec.k_h * spec.k_w;
    let mut sources = Vec::with_capacity(oh * ow * taps);
    let mut pattern_of = Vec::with_capacity(oh * ow);
    let mut patterns: Vec<Vec<bool>> = Vec::new();
    let mut valid = Vec::with_capacity(taps);
    for y in 0..oh {
        for xo in 0..ow {
            valid.clear();
            for a in 0..spec.k_h {
                for b in 0..spec.k_w {
                    let iy = (y * spec.stride_h + a) as isize - spec.pad_h as isize;
                    let ix = (xo * spec.stride_w + b) as isize - spec.pad_w as isize;
                    let inside = (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix);
                    sources.push(if inside {
                        iy as usize * w + ix as usize
                    } else {
                        h * w
                    });
                    valid.push(inside);
                }
            }
            let id = match patterns.iter().position(|p| *p == valid) {
                Some(id) => id,
                None => {
                    patterns.push(valid.clone());
                    patterns.len() - 1
                }
            };
            pattern_of.push(id);
        }
    }
    TapLayout {
        sources,
        pattern_of,
        patterns,
    }
}

/// ORs `src` (whose bits past the payload are zero) into `dst` starting at
/// bit `cursor`.
#[inline(always)]
fn or_bits_at(dst: &mut [u64], cursor: usize, src: &[u64]) {
    for (j, &word) in src.iter().enumerate() {
        let at = cursor + 64 * j;
        let (idx, sh) = (at >> 6, at & 63);
        dst[idx] |= word << sh;
        if sh != 0 && idx + 1 < dst.len() {
            dst[idx + 1] |= word >> (64 - sh);
        }
    }
}

/// Everything a per-sample kernel needs besides the sample's own bits.
///
/// A patch is the `taps * c_in` bits of one output position packed back to
/// back (tap-major), so narrow layers share words across taps.
struct PackedKernel<'a> {
    /// `[c_out, row]` weight patches.
    k_rows: &'a [u64],
    layout: &'a TapLayout,
    /// Per pattern: `valid taps * c_in`, the dot product of identical patches.
    valid_dots: &'a [i64],
    /// Per pattern and output channel: bits counted on padded taps.
    correction: &'a [u32],
    /// Words per pixel in the sample buffer.
    wpp: usize,
    c_in: usize,
    /// Words per patch.
    row: usize,
    c_out: usize,
}

impl PackedKernel<'_> {
    /// Gathers each position's bit patch (zero bits for padded taps), then
    /// XOR-popcounts it against every output channel. `xs` is the sample's
    /// words followed by `wpp` zero words.
    #[inline(always)]
    fn sample(&self, xs: &[u64], patch: &mut Vec<u64>, dst: &mut [f64]) {
        let (wpp, c_in, row, c_out) = (self.wpp, self.c_in, self.row, self.c_out);
        let positions = self.layout.pattern_of.len();
        let taps = self.layout.sources.len() / positions.max(1);
        patch.resize(row, 0);
        for pos in 0..positions {
            let sources = &self.layout.sources[pos * taps..(pos + 1) * taps];
            let pid = self.layout.pattern_of[pos];
            let corr = &self.correction[pid * c_out..(pid + 1) * c_out];
            let out = |co: usize, differing: u32| {
                (self.valid_dots[pid] - 2 * (differing - corr[co]) as i64) as f64
            };
            if row == 1 {
                let p = sources
                    .iter()
                    .enumerate()
                    .fold(0u64, |p, (t, &i)| p | xs[i] << (t * c_in));
                for (co, &k) in self.k_rows.iter().enumerate() {
                    dst[co * positions + pos] = out(co, (p ^ k).count_ones());
                }
                continue;
            }
            patch.fill(0);
            for (t, &i) in sources.iter().enumerate() {
                or_bits_at(patch, t * c_in, &xs[i * wpp..(i + 1) * wpp]);
            }
            for (co, kk) in self.k_rows.chunks_exact(row).enumerate() {
                dst[co * positions + pos] = out(co, xor_popcount(patch, kk));
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "popcnt")]
    unsafe fn sample_popcnt(&self, xs: &[u64], patch: &mut Vec<u64>, dst: &mut [f64]) {
        self.sample(xs, patch, dst)
    }
}

/// Convolution of ±1 operands via XNOR and popcount.
///
/// Zero-padded taps contribute nothing, so the result equals the dense
/// zero-padded convolution of the unpacked operands exactly.
pub fn binary_conv2d(input: &BitTensor, weights: &BitTensor, spec: &ConvSpec) -> Result<Tensor> {
    let (n, h, w) = match *input.shape() {
        [n, c, h, w] if c == spec.c_in => (n, h, w),
        ref s => {
            return Err(Error::shape(format!(
                "binary conv input {s:?} does not match {} input channels",
                spec.c_in
            )))
        }
    };
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "binary conv weights {:?} do not match spec {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    if spec.has_bias {
        return Err(Error::config("binary convolution is bias-free"));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let taps = spec.k_h * spec.k_w;
    let (x_words, wpp) = channel_interleave(input, n, spec.c_in, h * w);
    let (k_words, _) = channel_interleave(weights, spec.c_out, spec.c_in, taps);
    let layout = tap_layout(spec, h, w, oh, ow);

    let tap_pop = |co: usize, t: usize| -> u32 {
        let at = (co * taps + t) * wpp;
        k_words[at..at + wpp].iter().map(|w| w.count_ones()).sum()
    };
    let mut valid_dots = Vec::with_capacity(layout.patterns.len());
    let mut correction = Vec::with_capacity(layout.patterns.len() * spec.c_out);
    for pattern in &layout.patterns {
        let valid = pattern.iter().filter(|&&v| v).count();
        valid_dots.push((valid * spec.c_in) as i64);
        for co in 0..spec.c_out {
            correction.push(
                (0..taps)
                    .filter(|&t| !pattern[t])
                    .map(|t| tap_pop(co, t))
                    .sum(),
            );
        }
    }

    let row = word_count(taps * spec.c_in);
    let mut k_rows = vec![0u64; spec.c_out * row];
    for (co, dst) in k_rows.chunks_exact_mut(row).enumerate() {
        for t in 0..taps {
            let at = (co * taps + t) * wpp;
            or_bits_at(dst, t * spec.c_in, &k_words[at..at + wpp]);
        }
    }
    let kernel = PackedKernel {
        k_rows: &k_rows,
        layout: &layout,
        valid_dots: &valid_dots,
        correction: &correction,
        wpp,
        c_in: spec.c_in,
        row,
        c_out: spec.c_out,
    };
    #[cfg(target_arch = "x86_64")]
    let popcnt = std::arch::is_x86_feature_detected!("popcnt");
    let per_sample = spec.c_out * oh * ow;
    let mut out = vec![0.0; n * per_sample];
    let in_words = h * w * wpp;
    let scratch = || (vec![0u64; in_words + wpp], Vec::new());
    for_each_chunk_with(&mut out, per_sample, scratch, |(xs, patch), s, dst| {
        xs[..in_words].copy_from_slice(&x_words[s * in_words..(s + 1) * in_words]);
        #[cfg(target_arch = "x86_64")]
        if popcnt {
            // SAFETY: the CPU supports POPCNT, checked above.
            unsafe { kernel.sample_popcnt(xs, patch, dst) };
            return;
        }
        kernel.sample(xs, patch, dst);
    });
    Tensor::new(&[n, spec.c_out, oh, ow], out)
}

/// Straight-through estimator: passes `upstream` where `|latent| <= 1`.
pub fn ste_backward(upstream: &Tensor, latent: &Tensor) -> Result<Tensor> {
    upstream.zip_map(latent, |g, r| if r.abs() <= 1.0 { g } else { 0.0 })
}

pub fn clip_latent(latent: &Tensor) -> Tensor {
    latent.map(|x| x.clamp(-1.0, 1.0))
}

pub(crate) fn clip_latent_in_place(values: &mut [f64]) {
    values.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
}
