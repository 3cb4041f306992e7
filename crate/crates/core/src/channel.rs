//! Binary symmetric channel acting on encoded payloads, with keyed and
//! replayable randomness.
//!
//! # Stream keying
//!
//! Every random stream is a SplitMix64 generator whose 64-bit starting state is
//! derived from `(master_seed, round, client, tag)` with the SplitMix64
//! finalizer
//!
//! ```text
//! mix(z) = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!          z ^= z >> 27; z *= 0x94d049bb133111eb;
//!          z ^ (z >> 31)
//! ```
//!
//! applied as `h = mix(seed + G)`, then `h = mix((h + G) ^ word)` for each of
//! `round`, `client` and the tag id, where `G = 0x9e3779b97f4a7c15`.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Geometric};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, EncodedPayload, QuantSpec};
use crate::error::{Error, Result};
use crate::nn::ParamVector;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Transmission direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// Server to client broadcast of the global model.
    Downlink,
    /// Client to server upload of the local payload.
    Uplink,
}

/// Purpose of a derived random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    Link(Link),
    /// Mini-batch sampling during local training.
    Sampling,
    /// Model initialization.
    Init,
    /// Client partitioning.
    Partition,
    /// Monte Carlo trial draws.
    Trial,
}

impl StreamTag {
    fn id(self) -> u64 {
        match self {
            StreamTag::Link(Link::Downlink) => 1,
            StreamTag::Link(Link::Uplink) => 2,
            StreamTag::Sampling => 3,
            StreamTag::Init => 4,
            StreamTag::Partition => 5,
            StreamTag::Trial => 6,
        }
    }
}

impl From<Link> for StreamTag {
    fn from(link: Link) -> Self {
        StreamTag::Link(link)
    }
}

/// Client id used for streams that belong to the server (e.g. a shared
/// downlink realization).
pub const SERVER: u64 = u64::MAX;

/// Deterministic random stream; a value that can be moved between threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngHandle(SplitMix64);

impl RngHandle {
    pub fn from_key(key: u64) -> Self {
        Self(SplitMix64::seed_from_u64(key))
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Stream key for `(master_seed, round, client, tag)`.
pub fn stream_key(master_seed: u64, round: u64, client: u64, tag: impl Into<StreamTag>) -> u64 {
    let mut h = mix64(master_seed.wrapping_add(GOLDEN_GAMMA));
    for word in [round, client, tag.into().id()] {
        h = mix64(h.wrapping_add(GOLDEN_GAMMA) ^ word);
    }
    h
}

pub fn derive_rng(master_seed: u64, round: u64, client: u64, tag: impl Into<StreamTag>) -> RngHandle {
    RngHandle::from_key(stream_key(master_seed, round, client, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// Each bit flips independently with probability `ber`.
    #[default]
    Iid,
    /// Exactly `round(ber * bits)` distinct positions flip.
    ExactCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub ber: f64,
    pub flip_mode: FlipMode,
    pub link: Link,
}

impl ChannelConfig {
    pub fn new(ber: f64, flip_mode: FlipMode, link: Link) -> Result<Self> {
        validate_ber(ber)?;
        Ok(Self {
            ber,
            flip_mode,
            link,
        })
    }
}

pub fn validate_ber(ber: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ber) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "BER must lie in the valid range [0, 1], got {ber}"
        )))
    }
}

/// Flips payload bits in place according to `ber` and `mode`.
pub fn inject_in_place<R: RngCore + ?Sized>(p: &mut EncodedPayload, ber: f64, mode: FlipMode, rng: &mut R) {
    let n = p.bit_len();
    if n == 0 || ber <= 0.0 {
        return;
    }
    match mode {
        FlipMode::Iid => {
            if ber >= 1.0 {
                p.complement();
                return;
            }
            // Gaps between flipped positions are geometric.
            let gap = Geometric::new(ber).expect("0 < ber < 1");
            let mut pos = gap.sample(rng);
            while pos < n as u64 {
                p.flip(pos as usize);
                pos = pos.saturating_add(1).saturating_add(gap.sample(rng));
            }
        }
        FlipMode::ExactCount => {
            let k = ((ber * n as f64).round() as usize).min(n);
            for pos in rand::seq::index::sample(rng, n, k) {
                p.flip(pos);
            }
        }
    }
}

/// Returns a copy of `p` with channel errors applied. Metadata is untouched.
pub fn inject_errors(p: &EncodedPayload, cfg: &ChannelConfig, rng: &mut RngHandle) -> EncodedPayload {
    let mut out = p.clone();
    inject_in_place(&mut out, cfg.ber, cfg.flip_mode, rng);
    out
}

/// Fraction of differing payload bits.
pub fn empirical_flip_rate(before: &EncodedPayload, after: &EncodedPayload) -> Result<f64> {
    let dist = before.hamming_distance(after)?;
    if before.bit_len() == 0 {
        return Err(Error::Contract("flip rate of an empty payload".into()));
    }
    Ok(dist as f64 / before.bit_len() as f64)
}

/// `decode(inject_errors(encode(v)))`.
pub fn perturb_vector(v: &[f64], quant: QuantSpec, cfg: &ChannelConfig, rng: &mut RngHandle) -> Result<ParamVector> {
    transmit(v, quant, cfg.ber, cfg.flip_mode, rng)
}

/// Encode, flip, decode. A zero BER still quantizes.
pub fn transmit<R: RngCore + ?Sized>(
    v: &[f64],
    quant: QuantSpec,
    ber: f64,
    mode: FlipMode,
    rng: &mut R,
) -> Result<ParamVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("cannot transmit non-finite values".into()));
    }
    let mut p = encode(v, quant)?;
    inject_in_place(&mut p, ber, mode, rng);
    Ok(decode(&p))
}

/// Uniform draw in `[0, 1)`.
pub fn uniform01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
