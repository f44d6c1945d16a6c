//! Secret keys, carriers, the dual-hypercone detector, sign decoding and the
//! latent-space watermark losses.

mod special;

pub use special::{ln_gamma, regularized_incomplete_beta};

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, param_err, Error, Result};
use crate::features::{orthonormalize_rows, LatentVector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SecretKey {
    pub seed: u64,
}

impl SecretKey {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

/// Payload bits, each `-1` or `+1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    bits: Vec<i8>,
}

impl Message {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return param_err("message needs at least one bit");
        }
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return param_err("message bits must be -1 or +1");
        }
        Ok(Self { bits })
    }

    pub fn random<R: Rng>(len: usize, r: &mut R) -> Result<Self> {
        Self::new(
            (0..len)
                .map(|_| if r.random::<bool>() { 1 } else { -1 })
                .collect(),
        )
    }

    /// Parses a `0`/`1` string (`1` is `+1`).
    pub fn parse(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|c| match c {
                '1' => Ok(1),
                '0' => Ok(-1),
                _ => param_err(format!(
                    "message string may only contain 0 and 1, got {c:?}"
                )),
            })
            .collect::<Result<Vec<_>>>()
            .and_then(Self::new)
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn negated(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| -b).collect(),
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b > 0 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Orthonormal carriers derived from a key.
#[derive(Clone, Debug, PartialEq)]
pub struct CarrierSet {
    key: SecretKey,
    carriers: Vec<LatentVector>,
}

impl CarrierSet {
    pub fn key(&self) -> SecretKey {
        self.key
    }

    pub fn carriers(&self) -> &[LatentVector] {
        &self.carriers
    }

    pub fn len(&self) -> usize {
        self.carriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.carriers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.carriers[0].dim()
    }
}

/// Seeded Gaussian vectors orthonormalized by modified Gram-Schmidt.
pub fn generate_carriers(key: SecretKey, count: usize, d: usize) -> Result<CarrierSet> {
    if count == 0 || count > d {
        return param_err(format!("carrier count {count} must lie in [1, {d}]"));
    }
    let mut r = rng::stream(key.seed);
    let mut rows: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    orthonormalize_rows(&mut rows)?;
    Ok(CarrierSet {
        key,
        carriers: rows
            .into_iter()
            .map(LatentVector::new)
            .collect::<Result<_>>()?,
    })
}

/// False-acceptance probability of a dual hypercone of half-angle `gamma` for
/// directions uniform on the `d`-sphere:
/// `1 - I_{cos^2 gamma}(1/2, (d-1)/2)`, evaluated as the equivalent
/// `I_{sin^2 gamma}((d-1)/2, 1/2)` to keep small tails accurate.
pub fn pfa_from_angle(gamma: f64, d: usize) -> Result<f64> {
    if !(0.0..=FRAC_PI_2).contains(&gamma) {
        return param_err(format!("cone angle {gamma} outside [0, pi/2]"));
    }
    if d < 2 {
        return param_err("latent dimension must be >= 2");
    }
    let s = gamma.sin();
    regularized_incomplete_beta((s * s).min(1.0), (d as f64 - 1.0) / 2.0, 0.5)
}

/// Inverts [`pfa_from_angle`] by bisection.
pub fn angle_from_pfa(target_pfa: f64, d: usize) -> Result<f64> {
    if !(target_pfa > 0.0 && target_pfa < 1.0) {
        return param_err(format!("target P_fa {target_pfa} outside (0, 1)"));
    }
    let (mut lo, mut hi) = (0.0, FRAC_PI_2);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let p = pfa_from_angle(mid, d)?;
        if (p - target_pfa).abs() <= 1e-12 * target_pfa.min(1.0) || hi - lo < 1e-16 {
            break;
        }
        if p < target_pfa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Dual-hypercone zero-bit detector `|z.w| > |z| cos(gamma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeDetector {
    carrier: LatentVector,
    angle: f64,
    target_pfa: f64,
}

impl ConeDetector {
    pub fn new(carrier: LatentVector, target_pfa: f64) -> Result<Self> {
        let n = carrier.norm();
        if (n - 1.0).abs() > 1e-9 {
            return param_err(format!("carrier must be a unit vector, norm is {n}"));
        }
        let angle = angle_from_pfa(target_pfa, carrier.dim())?;
        Ok(Self {
            carrier,
            angle,
            target_pfa,
        })
    }

    /// Detector whose carrier is `generate_carriers(key, 1, d)`.
    pub fn from_key(key: SecretKey, d: usize, target_pfa: f64) -> Result<Self> {
        let c = generate_carriers(key, 1, d)?;
        Self::new(c.carriers[0].clone(), target_pfa)
    }

    pub fn carrier(&self) -> &LatentVector {
        &self.carrier
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn cos_angle(&self) -> f64 {
        self.angle.cos()
    }

    pub fn target_pfa(&self) -> f64 {
        self.target_pfa
    }

    pub fn dim(&self) -> usize {
        self.carrier.dim()
    }

    /// `|z.w| / |z|`, the statistic compared against `cos(gamma)`.
    pub fn score(&self, z: &LatentVector) -> Result<f64> {
        z.check_dim(self.dim())?;
        let n = z.norm();
        if n == 0.0 {
            return Err(Error::UndefinedDirection(
                "zero latent has no direction".into(),
            ));
        }
        Ok(z.dot(&self.carrier).abs() / n)
    }
}

pub fn detect_zero_bit(z: &LatentVector, det: &ConeDetector) -> Result<bool> {
    z.check_dim(det.dim())?;
    if z.norm() == 0.0 {
        return Err(Error::UndefinedDirection(
            "zero latent has no direction".into(),
        ));
    }
    Ok(z.dot(&det.carrier).abs() > z.norm() * det.cos_angle())
}

/// `|z|^2 cos^2(gamma) - (z.w)^2`; negative exactly inside the cone.
pub fn loss_zero_bit(z: &LatentVector, det: &ConeDetector) -> Result<f64> {
    loss_zero_bit_with_grad(z, det).map(|(v, _)| v)
}

pub fn loss_zero_bit_with_grad(
    z: &LatentVector,
    det: &ConeDetector,
) -> Result<(f64, LatentVector)> {
    z.check_dim(det.dim())?;
    let c2 = det.cos_angle().powi(2);
    let p = z.dot(&det.carrier);
    let value = z.dot(z) * c2 - p * p;
    let grad = z
        .values()
        .iter()
        .zip(det.carrier.values())
        .map(|(zi, wi)| 2.0 * c2 * zi - 2.0 * p * wi)
        .collect();
    Ok((value, LatentVector::new(grad)?))
}

/// Sign of each carrier projection; a zero projection decodes as `+1`.
pub fn decode_multibit(z: &LatentVector, carriers: &CarrierSet) -> Result<Message> {
    z.check_dim(carriers.dim())?;
    Message::new(
        carriers
            .carriers
            .iter()
            .map(|w| if z.dot(w) >= 0.0 { 1 } else { -1 })
            .collect(),
    )
}

/// Hinge loss `(1/l) sum max(0, mu - (z.w_i) m_i)`.
pub fn loss_multibit(
    z: &LatentVector,
    m: &Message,
    carriers: &CarrierSet,
    margin: f64,
) -> Result<f64> {
    loss_multibit_with_grad(z, m, carriers, margin).map(|(v, _)| v)
}

pub fn loss_multibit_with_grad(
    z: &LatentVector,
    m: &Message,
    carriers: &CarrierSet,
    margin: f64,
) -> Result<(f64, LatentVector)> {
    z.check_dim(carriers.dim())?;
    if m.len() != carriers.len() {
        return dim_err(format!(
            "message of {} bits for {} carriers",
            m.len(),
            carriers.len()
        ));
    }
    if !(margin >= 0.0) {
        return param_err(format!("margin must be >= 0, got {margin}"));
    }
    let l = m.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; z.dim()];
    for (w, &bit) in carriers.carriers.iter().zip(m.bits()) {
        let slack = margin - z.dot(w) * bit as f64;
        if slack > 0.0 {
            value += slack;
            grad.iter_mut()
                .zip(w.values())
                .for_each(|(g, wi)| *g -= bit as f64 * wi / l);
        }
    }
    Ok((value / l, LatentVector::new(grad)?))
}

pub fn bit_error_rate(m: &Message, m_hat: &Message) -> Result<f64> {
    if m.len() != m_hat.len() {
        return dim_err(format!("BER over {} vs {} bits", m.len(), m_hat.len()));
    }
    let errors = m
        .bits()
        .iter()
        .zip(m_hat.bits())
        .filter(|(a, b)| a != b)
        .count();
    Ok(errors as f64 / m.len() as f64)
}
