//! Modulation, the fading/noise channel and zero-forcing reception.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    #[default]
    Bpsk,
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    #[default]
    Noiseless,
    Awgn,
    Rayleigh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coder {
    #[default]
    Passthrough,
    #[serde(rename = "repetition-3")]
    Repetition3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub modulation: Modulation,
    pub seed: u64,
    pub coder: Coder,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            kind: ChannelKind::Noiseless,
            snr_db: 20.0,
            modulation: Modulation::Bpsk,
            seed: 0,
            coder: Coder::Passthrough,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Config(format!("snr_db must be finite, got {}", self.snr_db)));
        }
        Ok(())
    }

    /// `σ² = P / 10^(snr/10)` with unit signal power.
    pub fn noise_variance(&self) -> f64 {
        match self.kind {
            ChannelKind::Noiseless => 0.0,
            _ => 1.0 / 10f64.powf(self.snr_db / 10.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modulated {
    pub symbols: Vec<Complex64>,
    /// Zero bits appended to fill the last symbol.
    pub pad_bits: usize,
}

pub fn modulate(bits: &[bool], modulation: Modulation) -> Modulated {
    let sign = |b: bool| if b { -1.0 } else { 1.0 };
    match modulation {
        Modulation::Bpsk => Modulated { symbols: bits.iter().map(|&b| Complex64::new(sign(b), 0.0)).collect(), pad_bits: 0 },
        Modulation::Qpsk => {
            let a = std::f64::consts::FRAC_1_SQRT_2;
            let symbols = bits
                .chunks(2)
                .map(|c| Complex64::new(a * sign(c[0]), a * sign(c.get(1).copied().unwrap_or(false))))
                .collect();
            Modulated { symbols, pad_bits: bits.len() % 2 }
        }
    }
}

/// Hard decisions, with the modulation padding removed.
pub fn demodulate(symbols: &[Complex64], modulation: Modulation, pad_bits: usize) -> Vec<bool> {
    let mut bits: Vec<bool> = match modulation {
        Modulation::Bpsk => symbols.iter().map(|s| s.re < 0.0).collect(),
        Modulation::Qpsk => symbols.iter().flat_map(|s| [s.re < 0.0, s.im < 0.0]).collect(),
    };
    bits.truncate(bits.len().saturating_sub(pad_bits));
    bits
}

fn complex_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let sd = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(sd * re, sd * im)
}

/// `r̂ = h ⊙ s + n`. Returns the received symbols and the channel state.
pub fn apply_channel(s: &[Complex64], cfg: &ChannelConfig) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma2 = cfg.noise_variance();
    let one = Complex64::new(1.0, 0.0);
    s.iter()
        .map(|&x| match cfg.kind {
            ChannelKind::Noiseless => (x, one),
            ChannelKind::Awgn => (x + complex_gaussian(&mut rng, sigma2), one),
            ChannelKind::Rayleigh => {
                let h = complex_gaussian(&mut rng, 1.0);
                (h * x + complex_gaussian(&mut rng, sigma2), h)
            }
        })
        .unzip()
}

/// Zero-forcing `ŝ = r̂ / h`. Where `|h| < 1e-12` the received sample is passed
/// through, so the decision falls to the noise.
pub fn equalize(received: &[Complex64], csi: &[Complex64]) -> Result<Vec<Complex64>> {
    if received.len() != csi.len() {
        return Err(Error::shape("equalize", format!("{} samples vs {} channel coefficients", received.len(), csi.len())));
    }
    Ok(received.iter().zip(csi).map(|(&r, &h)| if h.norm() < 1e-12 { r } else { r / h }).collect())
}

pub fn encode_bits(bits: &[bool], coder: Coder) -> Vec<bool> {
    match coder {
        Coder::Passthrough => bits.to_vec(),
        Coder::Repetition3 => bits.iter().flat_map(|&b| [b; 3]).collect(),
    }
}

pub fn decode_bits(bits: &[bool], coder: Coder) -> Vec<bool> {
    match coder {
        Coder::Passthrough => bits.to_vec(),
        Coder::Repetition3 => bits.chunks(3).map(|c| c.iter().filter(|&&b| b).count() * 2 > c.len()).collect(),
    }
}

/// Equalization, demodulation and channel decoding.
pub fn equalize_demodulate(
    received: &[Complex64],
    csi: &[Complex64],
    cfg: &ChannelConfig,
    pad_bits: usize,
) -> Result<Vec<bool>> {
    let eq = equalize(received, csi)?;
    Ok(decode_bits(&demodulate(&eq, cfg.modulation, pad_bits), cfg.coder))
}

/// Sends a bit vector end to end.
pub fn transmit_bits(bits: &[bool], cfg: &ChannelConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let coded = encode_bits(bits, cfg.coder);
    let m = modulate(&coded, cfg.modulation);
    let (r, h) = apply_channel(&m.symbols, cfg);
    equalize_demodulate(&r, &h, cfg, m.pad_bits)
}
