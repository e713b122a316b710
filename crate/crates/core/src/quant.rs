//! Sign-magnitude weight quantization and bit-slicing onto K-bit devices.
//!
//! Device values are expressed in integer conductance units (`0..2^K - 1`
//! per device). A weight's magnitude code `W_des` is split into base-`2^K`
//! digits, least significant device first, and read back as
//! `sign · s · Σ_i g_i · 2^{iK}` with `s = w_max / (2^M - 1)`.

use crate::error::{Error, Result};
use crate::nn::{Network, QuantMeta};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    weight_bits: u32,
    device_bits: u32,
    w_max: f64,
}

impl QuantConfig {
    pub fn new(weight_bits: u32, device_bits: u32, w_max: f64) -> Result<Self> {
        if !(2..=16).contains(&weight_bits) {
            return Err(Error::QuantConfig(format!(
                "weight bits must be in 2..=16, got {weight_bits}"
            )));
        }
        if device_bits == 0 || weight_bits % device_bits != 0 {
            return Err(Error::QuantConfig(format!(
                "device bits {device_bits} must divide weight bits {weight_bits}"
            )));
        }
        if !(w_max > 0.0 && w_max.is_finite()) {
            return Err(Error::QuantConfig(format!("w_max must be positive, got {w_max}")));
        }
        Ok(Self {
            weight_bits,
            device_bits,
            w_max,
        })
    }

    /// Scale taken from the largest weight magnitude in `net`.
    pub fn for_network(net: &Network, weight_bits: u32, device_bits: u32) -> Result<Self> {
        let w_max = net.weights().iter().fold(0.0f64, |m, w| m.max(w.abs()));
        Self::new(weight_bits, device_bits, w_max)
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn device_bits(&self) -> u32 {
        self.device_bits
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    /// Weight units per device unit of the least significant device.
    pub fn scale(&self) -> f64 {
        self.w_max / self.max_code() as f64
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.weight_bits) - 1
    }

    pub fn max_device_level(&self) -> u32 {
        (1u32 << self.device_bits) - 1
    }

    pub fn devices_per_weight(&self) -> usize {
        (self.weight_bits / self.device_bits) as usize
    }

    /// Place value of device `i` (`2^{iK}`).
    pub fn place(&self, i: usize) -> f64 {
        (1u64 << (i as u32 * self.device_bits)) as f64
    }

    /// `Σ_i 4^{iK}`: composed-noise variance per unit of device variance.
    pub fn noise_gain(&self) -> f64 {
        (0..self.devices_per_weight()).map(|i| self.place(i).powi(2)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizedWeight {
    /// +1 or -1.
    pub sign: i8,
    pub code: u32,
}

impl QuantizedWeight {
    pub fn dequantize(&self, cfg: &QuantConfig) -> f64 {
        self.sign as f64 * self.code as f64 * cfg.scale()
    }
}

/// Round-to-nearest code; magnitudes beyond `w_max` saturate. Use
/// [`quantize_weights`] when the number of clipped values matters.
pub fn quantize(w: f64, cfg: &QuantConfig) -> Result<QuantizedWeight> {
    if !w.is_finite() {
        return Err(Error::NonFinite("weight"));
    }
    let code = (w.abs() / cfg.scale()).round().min(cfg.max_code() as f64) as u32;
    let sign = if w < 0.0 && code > 0 { -1 } else { 1 };
    Ok(QuantizedWeight { sign, code })
}

/// Base-`2^K` digits of the magnitude code, least significant first.
pub fn slice(q: QuantizedWeight, cfg: &QuantConfig) -> Vec<u32> {
    let mask = cfg.max_device_level();
    (0..cfg.devices_per_weight())
        .map(|i| (q.code >> (i as u32 * cfg.device_bits)) & mask)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub codes: Vec<QuantizedWeight>,
    pub clipped: u64,
}

pub fn quantize_weights(weights: &[f64], cfg: &QuantConfig) -> Result<QuantizedWeights> {
    let mut clipped = 0;
    let mut codes = Vec::with_capacity(weights.len());
    for &w in weights {
        if w.abs() > cfg.w_max() {
            clipped += 1;
        }
        codes.push(quantize(w, cfg)?);
    }
    Ok(QuantizedWeights { codes, clipped })
}

/// Replaces every weight with its dequantized code and records the
/// quantization metadata on the network.
pub fn quantize_network(net: &mut Network, cfg: &QuantConfig) -> Result<QuantizedWeights> {
    let q = quantize_weights(net.weights(), cfg)?;
    for (w, c) in net.weights_mut().iter_mut().zip(&q.codes) {
        *w = c.dequantize(cfg);
    }
    net.set_quant(Some(QuantMeta {
        weight_bits: cfg.weight_bits(),
        device_bits: cfg.device_bits(),
        w_max: cfg.w_max(),
        clipped: q.clipped,
    }));
    Ok(q)
}

/// The devices holding one weight. Targets are normally integer levels
/// produced by [`slice`]; in-situ updates may leave fractional targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceStack {
    pub weight_index: usize,
    pub sign: i8,
    pub targets: Vec<f64>,
    pub actuals: Vec<f64>,
    programmed: bool,
}

impl DeviceStack {
    pub fn new(weight_index: usize, q: QuantizedWeight, cfg: &QuantConfig) -> Self {
        let targets: Vec<f64> = slice(q, cfg).into_iter().map(f64::from).collect();
        Self {
            weight_index,
            sign: q.sign,
            actuals: vec![0.0; targets.len()],
            targets,
            programmed: false,
        }
    }

    /// A stack whose actuals already equal its targets.
    pub fn ideal(weight_index: usize, q: QuantizedWeight, cfg: &QuantConfig) -> Self {
        let mut s = Self::new(weight_index, q, cfg);
        s.actuals.clone_from(&s.targets);
        s.programmed = true;
        s
    }

    pub fn is_programmed(&self) -> bool {
        self.programmed
    }

    pub(crate) fn mark_programmed(&mut self) {
        self.programmed = true;
    }

    /// Magnitude the targets encode, in device units of the LSB device.
    pub fn target_magnitude(&self, cfg: &QuantConfig) -> f64 {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| t * cfg.place(i))
            .sum()
    }
}

/// Weight value encoded by the current actuals.
pub fn compose(stack: &DeviceStack, cfg: &QuantConfig) -> f64 {
    let mag: f64 = stack
        .actuals
        .iter()
        .enumerate()
        .map(|(i, a)| a * cfg.place(i))
        .sum();
    stack.sign as f64 * cfg.scale() * mag
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(m: u32, k: u32, w_max: f64) -> QuantConfig {
        QuantConfig::new(m, k, w_max).unwrap()
    }

    #[test]
    fn endpoint_and_zero_codes() {
        let c = cfg(4, 4, 1.0);
        assert_eq!(quantize(0.0, &c).unwrap(), QuantizedWeight { sign: 1, code: 0 });
        assert_eq!(quantize(-0.0, &c).unwrap(), QuantizedWeight { sign: 1, code: 0 });
        assert_eq!(quantize(-0.01, &c).unwrap(), QuantizedWeight { sign: 1, code: 0 });
        assert_eq!(quantize(1.0, &c).unwrap(), QuantizedWeight { sign: 1, code: 15 });
        // 0.52 * 15 = 7.8
        assert_eq!(quantize(-0.52, &c).unwrap(), QuantizedWeight { sign: -1, code: 8 });
        assert!(matches!(quantize(f64::NAN, &c), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(8, 3, 1.0).is_err());
        assert!(QuantConfig::new(1, 1, 1.0).is_err());
        assert!(QuantConfig::new(17, 1, 1.0).is_err());
        assert!(QuantConfig::new(8, 4, 0.0).is_err());
        assert_eq!(cfg(8, 4, 1.0).noise_gain(), 1.0 + 256.0);
    }

    #[test]
    fn slicing_examples() {
        let c8 = cfg(8, 4, 1.0);
        assert_eq!(slice(QuantizedWeight { sign: 1, code: 200 }, &c8), vec![8, 12]);
        assert_eq!(slice(QuantizedWeight { sign: -1, code: 0 }, &c8), vec![0, 0]);
        let c4 = cfg(4, 4, 1.0);
        assert_eq!(slice(QuantizedWeight { sign: 1, code: 13 }, &c4), vec![13]);
    }

    #[test]
    fn clipping_counted() {
        let c = cfg(4, 2, 0.5);
        let q = quantize_weights(&[0.6, -0.7, 0.1, 0.5], &c).unwrap();
        assert_eq!(q.clipped, 2);
        assert_eq!(q.codes[0].code, 15);
        assert_eq!(q.codes[1], QuantizedWeight { sign: -1, code: 15 });
    }

    #[test]
    fn compose_is_linear_in_actuals() {
        let c = cfg(8, 4, 2.0);
        let q = QuantizedWeight { sign: 1, code: 200 };
        let mut s = DeviceStack::ideal(0, q, &c);
        assert_eq!(compose(&s, &c), q.dequantize(&c));
        s.actuals[0] += 0.5;
        assert!((compose(&s, &c) - (q.dequantize(&c) + 0.5 * c.scale())).abs() < 1e-12);
    }

    #[test]
    fn digit_identity_exhaustive() {
        for m in 2..=12u32 {
            for k in (1..=m).filter(|k| m % k == 0) {
                let c = cfg(m, k, 1.0);
                for code in 0..=c.max_code() {
                    let d = slice(QuantizedWeight { sign: 1, code }, &c);
                    assert!(d.iter().all(|&g| g <= c.max_device_level()));
                    let back: u64 = d
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| (g as u64) << (i as u32 * k))
                        .sum();
                    assert_eq!(back, code as u64, "M={m} K={k}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(w in -3.0f64..3.0, wmax in 0.1f64..4.0, mk in 0usize..4) {
            let (m, k) = [(4, 4), (8, 4), (8, 2), (6, 3)][mk];
            let c = cfg(m, k, wmax);
            let q = quantize(w, &c).unwrap();
            let back = compose(&DeviceStack::ideal(0, q, &c), &c);
            prop_assert!((back - q.dequantize(&c)).abs() <= 1e-12 * wmax);
            if w.abs() <= wmax {
                prop_assert!((back - w).abs() <= c.scale() / 2.0 + 1e-12);
            }
        }

        #[test]
        fn quantize_is_monotone(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let c = cfg(8, 4, 1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ql, qh) = (quantize(lo, &c).unwrap(), quantize(hi, &c).unwrap());
            prop_assert!(ql.dequantize(&c) <= qh.dequantize(&c));
        }
    }
}
