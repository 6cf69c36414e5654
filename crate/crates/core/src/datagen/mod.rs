//! Synthetic I/Q modulation frames.
//!
//! Pipeline per frame: random symbols, upsampling and root-raised-cosine pulse
//! shaping, normalization to unit average power, a random carrier phase and a
//! small frequency offset, then complex white Gaussian noise at the requested
//! SNR. Each frame draws from its own stream keyed by
//! `(seed, class, snr, index)`, so any frame can be regenerated alone.

mod amcd;

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::map_indices;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub use amcd::{read_dataset, write_dataset, AmcdWriter, FORMAT_VERSION, MAGIC};

/// Complex samples per frame.
pub const FRAME_LEN: usize = 1024;
/// Stored in place of an SNR when noise is disabled.
pub const NO_NOISE: i16 = i16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModClass {
    Ook,
    Ask4,
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
}

impl ModClass {
    pub const ALL: [ModClass; 6] = [
        Self::Ook,
        Self::Ask4,
        Self::Bpsk,
        Self::Qpsk,
        Self::Psk8,
        Self::Qam16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ook => "OOK",
            Self::Ask4 => "4ASK",
            Self::Bpsk => "BPSK",
            Self::Qpsk => "QPSK",
            Self::Psk8 => "8PSK",
            Self::Qam16 => "16QAM",
        }
    }

    /// Stable identifier used to key random streams.
    pub fn id(self) -> u64 {
        Self::ALL.iter().position(|&c| c == self).expect("listed") as u64
    }
}

impl fmt::Display for ModClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unsupported modulation class {s:?}")))
    }
}

fn gray_inverse(g: usize) -> usize {
    let mut b = g;
    let mut shift = g >> 1;
    while shift != 0 {
        b ^= shift;
        shift >>= 1;
    }
    b
}

/// Gray-coded 4-level amplitudes, indexed by the 2-bit symbol.
const PAM4_GRAY: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

/// Constellation points `(re, im)` indexed by symbol value, with unit average
/// energy and Gray labelling for the PSK and QAM classes.
pub fn constellation(m: ModClass) -> Vec<(f64, f64)> {
    let psk = |order: usize, offset: f64| -> Vec<(f64, f64)> {
        (0..order)
            .map(|b| {
                let t = offset + TAU * gray_inverse(b) as f64 / order as f64;
                (t.cos(), t.sin())
            })
            .collect()
    };
    match m {
        ModClass::Ook => vec![(0.0, 0.0), (2f64.sqrt(), 0.0)],
        ModClass::Ask4 => PAM4_GRAY.iter().map(|a| (a / 5f64.sqrt(), 0.0)).collect(),
        ModClass::Bpsk => vec![(1.0, 0.0), (-1.0, 0.0)],
        ModClass::Qpsk => psk(4, FRAC_PI_4),
        ModClass::Psk8 => psk(8, 0.0),
        ModClass::Qam16 => {
            let s = 10f64.sqrt();
            (0..16)
                .map(|b| (PAM4_GRAY[b >> 2] / s, PAM4_GRAY[b & 3] / s))
                .collect()
        }
    }
}

/// Root-raised-cosine taps spanning `span` symbols at `sps` samples per
/// symbol, scaled to unit energy.
pub fn rrc_taps(rolloff: f64, span: usize, sps: usize) -> Vec<f64> {
    let b = rolloff;
    let half = (span * sps / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let t = n as f64 / sps as f64;
            if n == 0 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && ((4.0 * b * t).abs() - 1.0).abs() < 1e-12 {
                let a = PI / (4.0 * b);
                b * FRAC_1_SQRT_2 * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                num / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let energy: f64 = taps.iter().map(|x| x * x).sum();
    let k = 1.0 / energy.sqrt();
    taps.iter_mut().for_each(|x| *x *= k);
    taps
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub classes: Vec<ModClass>,
    pub snrs: Vec<i16>,
    pub frames_per_cell: usize,
    pub samples_per_symbol: usize,
    pub rolloff: f64,
    /// Pulse length in symbols.
    pub span: usize,
    /// Carrier phase drawn uniformly from this range (radians).
    pub phase_range: (f64, f64),
    /// Frequency offset drawn uniformly from `[-cfo_max, cfo_max]` cycles/sample.
    pub cfo_max: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: ModClass::ALL.to_vec(),
            snrs: (-20..=30).step_by(2).collect(),
            frames_per_cell: 100,
            samples_per_symbol: 8,
            rolloff: 0.35,
            span: 8,
            phase_range: (0.0, TAU),
            cfo_max: 1e-4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("at least one modulation class is required"));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::config("modulation classes must be distinct"));
        }
        if self.snrs.is_empty() {
            return Err(Error::config("the SNR grid is empty"));
        }
        if self.frames_per_cell == 0 {
            return Err(Error::config("frames per (class, SNR) must be at least 1"));
        }
        if self.samples_per_symbol == 0 || self.span == 0 {
            return Err(Error::config(
                "samples per symbol and pulse span must be positive",
            ));
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return Err(Error::config(format!(
                "roll-off {} outside (0, 1]",
                self.rolloff
            )));
        }
        if !(self.cfo_max >= 0.0 && self.cfo_max.is_finite())
            || self.phase_range.0.is_nan()
            || self.phase_range.1.is_nan()
            || self.phase_range.0 > self.phase_range.1
        {
            return Err(Error::config("impairment ranges are malformed"));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.classes.len() * self.snrs.len() * self.frames_per_cell
    }

    /// Random stream of frame `index` in cell `(class, snr)`.
    pub fn frame_stream(&self, class: ModClass, snr_db: i16, index: usize) -> Stream {
        stream(self.seed, &[class.id(), snr_db as i64 as u64, index as u64])
    }
}

/// Complex baseband samples before and after noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Synth {
    pub clean: Vec<(f64, f64)>,
    pub noisy: Vec<(f64, f64)>,
}

/// Noise variance (both components together) for a unit-power signal.
pub fn noise_power(snr_db: i16) -> f64 {
    if snr_db == NO_NOISE {
        0.0
    } else {
        10f64.powf(-f64::from(snr_db) / 10.0)
    }
}

/// Full-precision synthesis of one frame.
pub fn synthesize(m: ModClass, snr_db: i16, cfg: &GenConfig, rng: &mut impl Rng) -> Synth {
    let points = constellation(m);
    let sps = cfg.samples_per_symbol;
    let taps = rrc_taps(cfg.rolloff, cfg.span, sps);
    let delay = taps.len() - 1;
    let n_symbols = (FRAME_LEN + delay).div_ceil(sps) + 1;
    let symbols: Vec<(f64, f64)> = (0..n_symbols)
        .map(|_| points[rng.random_range(0..points.len())])
        .collect();

    // Shaped sample n (after the filter transient) sums symbol k at tap n - k*sps.
    let mut clean: Vec<(f64, f64)> = (delay..delay + FRAME_LEN)
        .map(|n| {
            let mut acc = (0.0, 0.0);
            let k_lo = n.saturating_sub(delay).div_ceil(sps);
            for k in k_lo..=n / sps {
                let t = taps[n - k * sps];
                acc.0 += symbols[k].0 * t;
                acc.1 += symbols[k].1 * t;
            }
            acc
        })
        .collect();
    let power = clean.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / FRAME_LEN as f64;
    if power > 0.0 {
        let k = 1.0 / power.sqrt();
        clean.iter_mut().for_each(|s| *s = (s.0 * k, s.1 * k));
    }

    let (lo, hi) = cfg.phase_range;
    let phase = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let cfo = if cfg.cfo_max > 0.0 {
        rng.random_range(-cfg.cfo_max..=cfg.cfo_max)
    } else {
        0.0
    };
    for (n, s) in clean.iter_mut().enumerate() {
        let (sn, cs) = (phase + TAU * cfo * n as f64).sin_cos();
        *s = (s.0 * cs - s.1 * sn, s.0 * sn + s.1 * cs);
    }

    let sigma = (noise_power(snr_db) / 2.0).sqrt();
    let noisy = if sigma > 0.0 {
        clean
            .iter()
            .map(|&(a, b)| {
                let na: f64 = rng.sample(StandardNormal);
                let nb: f64 = rng.sample(StandardNormal);
                (a + sigma * na, b + sigma * nb)
            })
            .collect()
    } else {
        clean.clone()
    };
    Synth { clean, noisy }
}

/// One labelled frame: `iq` holds the in-phase row followed by the quadrature
/// row, `FRAME_LEN` samples each.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub label: u16,
    pub snr_db: i16,
    pub iq: Vec<f32>,
}

impl Frame {
    pub fn from_samples(label: u16, snr_db: i16, samples: &[(f64, f64)]) -> Self {
        let mut iq = vec![0f32; 2 * samples.len()];
        for (n, &(a, b)) in samples.iter().enumerate() {
            iq[n] = a as f32;
            iq[samples.len() + n] = b as f32;
        }
        Self { label, snr_db, iq }
    }
}

/// Frame `index` of cell `(class, snr)`, labelled with `label`.
pub fn gen_frame(cfg: &GenConfig, label: u16, snr_db: i16, index: usize) -> Frame {
    let class = cfg.classes[label as usize];
    let mut rng = cfg.frame_stream(class, snr_db, index);
    Frame::from_samples(
        label,
        snr_db,
        &synthesize(class, snr_db, cfg, &mut rng).noisy,
    )
}

/// An in-memory labelled dataset with its class table and SNR grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub snrs: Vec<i16>,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Stacks the selected frames into a `[n, 1, 2, FRAME_LEN]` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * 2 * FRAME_LEN);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let f = &self.frames[i];
            data.extend(f.iq.iter().map(|&v| f64::from(v)));
            labels.push(f.label as usize);
        }
        let n = indices.len();
        let t = Tensor::new(&[n, 1, 2, data.len() / (2 * n.max(1))], data)
            .expect("frames have a consistent length");
        (t, labels)
    }

    /// Stratified split: within every `(label, snr)` cell a seeded
    /// permutation sends `round(train_fraction * n)` frames to the first part.
    pub fn split(self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::config(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut cells: std::collections::BTreeMap<(u16, i16), Vec<usize>> = Default::default();
        for (i, f) in self.frames.iter().enumerate() {
            cells.entry((f.label, f.snr_db)).or_default().push(i);
        }
        let mut to_train = vec![false; self.frames.len()];
        for ((label, snr), mut idx) in cells {
            let mut rng = stream(seed, &[u64::from(label), snr as i64 as u64]);
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let k = (train_fraction * idx.len() as f64).round() as usize;
            for &i in &idx[..k] {
                to_train[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (f, t) in self.frames.into_iter().zip(to_train) {
            if t {
                train.push(f);
            } else {
                test.push(f);
            }
        }
        let part = |frames| Dataset {
            classes: self.classes.clone(),
            snrs: self.snrs.clone(),
            frames,
        };
        Ok((part(train), part(test)))
    }

    /// Frames at the given positions, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            snrs: self.snrs.clone(),
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

/// Frames in cell-major order: class, then SNR, then index.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let per_class = cfg.snrs.len() * cfg.frames_per_cell;
    let frames = map_indices(cfg.total_frames(), |i| {
        let label = (i / per_class) as u16;
        let snr = cfg.snrs[(i % per_class) / cfg.frames_per_cell];
        gen_frame(cfg, label, snr, i % cfg.frames_per_cell)
    });
    Ok(Dataset {
        classes: cfg.classes.iter().map(|c| c.name().to_string()).collect(),
        snrs: cfg.snrs.clone(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(points: &[(f64, f64)]) -> f64 {
        points.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / points.len() as f64
    }

    #[test]
    fn constellations_have_unit_energy() {
        for m in ModClass::ALL {
            assert!((energy(&constellation(m)) - 1.0).abs() < 1e-12, "{m}");
        }
        assert_eq!(constellation(ModClass::Bpsk), vec![(1.0, 0.0), (-1.0, 0.0)]);
    }

    #[test]
    fn qpsk_points() {
        let pts = constellation(ModClass::Qpsk);
        for k in 0..4 {
            let t = FRAC_PI_4 + k as f64 * PI / 2.0;
            assert!(pts
                .iter()
                .any(|p| (p.0 - t.cos()).abs() < 1e-15 && (p.1 - t.sin()).abs() < 1e-15));
        }
    }

    /// Neighbouring points on the circle / grid differ in exactly one bit.
    #[test]
    fn gray_labelling() {
        for (m, order) in [(ModClass::Qpsk, 4), (ModClass::Psk8, 8)] {
            let pts = constellation(m);
            let angle = |b: usize| pts[b].1.atan2(pts[b].0);
            for a in 0..order {
                for b in 0..order {
                    let mut d = (angle(a) - angle(b)).abs();
                    d = d.min(TAU - d);
                    if (d - TAU / order as f64).abs() < 1e-9 {
                        assert_eq!((a ^ b).count_ones(), 1);
                    }
                }
            }
        }
        let pts = constellation(ModClass::Qam16);
        for a in 0..16 {
            for b in 0..16 {
                let d = ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
                if (d - 2.0 / 10f64.sqrt()).abs() < 1e-9 {
                    assert_eq!((a ^ b).count_ones(), 1);
                }
            }
        }
    }

    /// Two RRC filters in cascade give a Nyquist pulse: zero at nonzero
    /// multiples of the symbol period.
    #[test]
    fn rrc_cascade_is_nyquist() {
        let sps = 8;
        let h = rrc_taps(0.35, 8, sps);
        assert_eq!(h.len(), 65);
        let n = h.len();
        let full: Vec<f64> = (0..2 * n - 1)
            .map(|k| {
                (0..n)
                    .filter(|&i| k >= i && k - i < n)
                    .map(|i| h[i] * h[k - i])
                    .sum()
            })
            .collect();
        let centre = n - 1;
        assert!((full[centre] - 1.0).abs() < 1e-12);
        // Truncating the pulse to 8 symbols leaves about 1% residual ISI at
        // the edge of the span; interior lags are much cleaner.
        for m in 1..=7 {
            let tol = if m <= 3 { 3e-3 } else { 1.5e-2 };
            let v = full[centre + m * sps];
            assert!(v.abs() < tol, "lag {m}: {v}");
        }
        assert!(h
            .iter()
            .zip(h.iter().rev())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn noiseless_frame_has_unit_power() {
        let cfg = GenConfig::default();
        for m in ModClass::ALL {
            let s = synthesize(m, NO_NOISE, &cfg, &mut stream(1, &[m.id()]));
            let p = s.noisy.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / FRAME_LEN as f64;
            assert!((p - 1.0).abs() < 1e-9, "{m}: {p}");
        }
    }

    #[test]
    fn frames_are_reproducible() {
        let cfg = GenConfig {
            classes: vec![ModClass::Qpsk, ModClass::Qam16],
            ..GenConfig::default()
        };
        assert_eq!(gen_frame(&cfg, 1, 4, 7), gen_frame(&cfg, 1, 4, 7));
        assert_ne!(gen_frame(&cfg, 1, 4, 7), gen_frame(&cfg, 1, 4, 8));
        let f = gen_frame(&cfg, 0, -20, 0);
        assert_eq!(f.iq.len(), 2 * FRAME_LEN);
        assert!(f.iq.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_validation() {
        let ok = GenConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            GenConfig {
                frames_per_cell: 0,
                ..ok.clone()
            },
            GenConfig {
                snrs: vec![],
                ..ok.clone()
            },
            GenConfig {
                rolloff: 0.0,
                ..ok.clone()
            },
            GenConfig {
                rolloff: 1.5,
                ..ok.clone()
            },
            GenConfig {
                classes: vec![ModClass::Bpsk, ModClass::Bpsk],
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(ok.snrs.len(), 26);
    }

    #[test]
    fn split_is_stratified() {
        let cfg = GenConfig {
            classes: vec![ModClass::Bpsk, ModClass::Qpsk],
            snrs: vec![0, 10],
            frames_per_cell: 100,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let (train, test) = ds.clone().split(0.75, 3).unwrap();
        for label in 0..2u16 {
            for snr in [0i16, 10] {
                let count = |d: &Dataset| {
                    d.frames
                        .iter()
                        .filter(|f| f.label == label && f.snr_db == snr)
                        .count()
                };
                assert_eq!((count(&train), count(&test)), (75, 25));
            }
        }
        let (again, _) = ds.split(0.75, 3).unwrap();
        assert_eq!(again, train);
    }

    #[test]
    fn class_names_parse() {
        for m in ModClass::ALL {
            assert_eq!(m.name().parse::<ModClass>().unwrap(), m);
        }
        assert!("64QAM".parse::<ModClass>().is_err());
    }
}
