//! Convergence bounds, BER-tolerance predictions and the bit-error lemmas,
//! plus Monte Carlo and estimation routines used to check them.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::channel::{derive_rng, inject_in_place, uniform01, FlipMode, StreamTag};
use crate::codec::{decode, encode_with_range, QuantSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{backward, full_gradient, init_model, MlpSpec, ParamVector};
use crate::sim::{PayloadMode, RoundRecord};

/// Constants and per-round error terms entering the convergence bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Smoothness constant `L`.
    #[serde(rename = "L", alias = "l")]
    pub l: f64,
    pub sigma_sq: f64,
    pub eta: f64,
    pub tau: usize,
    /// Rounds `K`.
    #[serde(rename = "K", alias = "k")]
    pub rounds: usize,
    pub n: usize,
    pub d: usize,
    pub f0: f64,
    pub f_star: f64,
    /// `BER_m * range(w_m)^2` per round. Empty means error-free.
    #[serde(default)]
    pub downlink_terms: Vec<f64>,
    /// `BER_m^i * range(dw_m^i)^2` per round and client. Empty means
    /// error-free.
    #[serde(default)]
    pub uplink_terms: Vec<Vec<f64>>,
    /// Aggregation weights; the bounds assume `1/n` and refuse anything else.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.eta == 0.0 || self.rounds == 0 || self.tau == 0 {
            return Err(Error::Contract("bounds need eta > 0 and K * tau > 0".into()));
        }
        let scalars = [
            ("L", self.l),
            ("sigma_sq", self.sigma_sq),
            ("eta", self.eta),
            ("f0", self.f0),
            ("f_star", self.f_star),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Contract(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.l == 0.0 || self.n == 0 {
            return Err(Error::Contract("L and n must be positive".into()));
        }
        if self.f0 < self.f_star {
            return Err(Error::Contract(format!(
                "f0 = {} is below f_star = {}",
                self.f0, self.f_star
            )));
        }
        if !self.downlink_terms.is_empty() && self.downlink_terms.len() != self.rounds {
            return Err(Error::Contract(format!(
                "{} downlink terms for K = {}",
                self.downlink_terms.len(),
                self.rounds
            )));
        }
        if !self.uplink_terms.is_empty() {
            if self.uplink_terms.len() != self.rounds {
                return Err(Error::Contract(format!(
                    "{} rounds of uplink terms for K = {}",
                    self.uplink_terms.len(),
                    self.rounds
                )));
            }
            if let Some(row) = self.uplink_terms.iter().find(|r| r.len() != self.n) {
                return Err(Error::Contract(format!(
                    "uplink round has {} client terms for n = {}",
                    row.len(),
                    self.n
                )));
            }
        }
        let all_terms = self.downlink_terms.iter().chain(self.uplink_terms.iter().flatten());
        if let Some(t) = all_terms.into_iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(Error::Contract(format!("BER-range term {t} is negative or non-finite")));
        }
        if let Some(p) = &self.weights {
            let uniform = 1.0 / self.n as f64;
            if p.len() != self.n || p.iter().any(|x| (x - uniform).abs() > 1e-9) {
                log::warn!("bounds assume uniform 1/n aggregation; got weights {p:?}");
                return Err(Error::Domain(
                    "bounds are only defined for uniform aggregation weights".into(),
                ));
            }
        }
        Ok(())
    }

    fn k_tau_eta(&self) -> f64 {
        self.rounds as f64 * self.tau as f64 * self.eta
    }

    /// The three error-free terms shared by both bounds.
    pub fn trailing_terms(&self) -> Result<f64> {
        self.validate()?;
        let n = self.n as f64;
        let (l, eta, s2) = (self.l, self.eta, self.sigma_sq);
        let optimality = 2.0 * (self.f0 - self.f_star) / self.k_tau_eta();
        let drift = l * l * (n + 1.0) * (self.tau as f64 - 1.0) * eta * eta * s2 / n;
        let noise = l * eta * s2 / n;
        Ok(optimality + drift + noise)
    }

    /// Fills the error terms from simulation records.
    pub fn with_terms_from(mut self, records: &[RoundRecord]) -> Self {
        self.downlink_terms = records.iter().map(|r| r.ber_down * r.range_w * r.range_w).collect();
        self.uplink_terms = records
            .iter()
            .map(|r| r.ber_up.iter().zip(&r.range_dw).map(|(b, g)| b * g * g).collect())
            .collect();
        self
    }
}

/// Right-hand side of the convergence bound with downlink errors only.
pub fn downlink_bound(inp: &BoundInputs) -> Result<f64> {
    let trailing = inp.trailing_terms()?;
    let sum: f64 = inp.downlink_terms.iter().sum();
    Ok(2.0 * inp.l * inp.d as f64 / (3.0 * inp.k_tau_eta()) * sum + trailing)
}

/// Right-hand side of the convergence bound with uplink errors only.
pub fn uplink_bound(inp: &BoundInputs) -> Result<f64> {
    let trailing = inp.trailing_terms()?;
    let sum: f64 = inp.uplink_terms.iter().flatten().sum();
    let n = inp.n as f64;
    Ok(inp.l * inp.d as f64 / (3.0 * n * n * inp.k_tau_eta()) * sum + trailing)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TolerancePrediction {
    pub ber_down: f64,
    pub ber_up: f64,
    pub n: usize,
    pub range_ratio: f64,
    pub mode: PayloadMode,
}

/// Downlink BER giving the same first bound term as uplink BER `ber_up`:
/// `ber_up / (2n) * (range_num / range_den)^2`.
///
/// `range_num` is the payload range (updates or local weights), `range_den`
/// the global model range. The result is not clamped to `ber_up`.
pub fn predict_tolerance(
    ber_up: f64,
    n: usize,
    range_num: f64,
    range_den: f64,
    mode: PayloadMode,
) -> Result<TolerancePrediction> {
    if n == 0 {
        return Err(Error::Contract("n must be at least 1".into()));
    }
    if !(range_den > 0.0) {
        return Err(Error::Domain(format!("model range must be positive, got {range_den}")));
    }
    if !(ber_up >= 0.0 && range_num >= 0.0) {
        return Err(Error::Contract("ber_up and range_num must be nonnegative".into()));
    }
    let range_ratio = range_num / range_den;
    Ok(TolerancePrediction {
        ber_down: ber_up / (2.0 * n as f64) * range_ratio * range_ratio,
        ber_up,
        n,
        range_ratio,
        mode,
    })
}

/// `d * ber * range^2 / 3`.
pub fn lemma3_bound(d: usize, ber: f64, range: f64) -> f64 {
    d as f64 * ber * range * range / 3.0
}

/// Exact expected squared payload error of the affine codec under iid flips:
/// bit `k` moves a code by `2^k` steps, so the error is
/// `d * ber * step^2 * (4^b - 1) / 3`.
pub fn lemma3_oracle(d: usize, quant: QuantSpec, ber: f64, range: f64) -> f64 {
    let step = quant.step(0.0, range);
    d as f64 * ber * step * step * (4f64.powi(quant.bits() as i32) - 1.0) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Estimate {
    pub mean_sq_err: f64,
    /// Standard error of `mean_sq_err`.
    pub std_err: f64,
    pub oracle: f64,
    pub bound: f64,
    pub trials: usize,
}

impl Lemma3Estimate {
    /// `|mean - oracle| / oracle`.
    pub fn rel_dev(&self) -> f64 {
        (self.mean_sq_err - self.oracle).abs() / self.oracle
    }
}

/// Monte Carlo estimate of `E||v' - w_q||^2` for vectors drawn uniformly on a
/// centred interval of width `range`, with iid flips at `ber`.
///
/// Trial `t` uses its own derived stream, so the result depends only on
/// `seed`, not on scheduling.
pub fn montecarlo_lemma3(
    d: usize,
    quant: QuantSpec,
    ber: f64,
    range: f64,
    trials: usize,
    seed: u64,
) -> Result<Lemma3Estimate> {
    if trials == 0 || d == 0 {
        return Err(Error::Contract("need at least one trial of a nonempty vector".into()));
    }
    crate::channel::validate_ber(ber)?;
    if !(range >= 0.0 && range.is_finite()) {
        return Err(Error::Contract(format!("invalid range {range}")));
    }
    let (v_min, v_max) = (-range / 2.0, range / 2.0);
    let errs: Vec<Result<f64>> = crate::par::map_indexed(trials, |t| {
        let mut rng = derive_rng(seed, 0, t as u64, StreamTag::Trial);
        let v: Vec<f64> = (0..d).map(|_| v_min + range * uniform01(&mut rng)).collect();
        let mut payload = encode_with_range(&v, v_min, v_max, quant)?;
        let clean = decode(&payload);
        inject_in_place(&mut payload, ber, FlipMode::Iid, &mut rng);
        let noisy = decode(&payload);
        Ok(noisy.sub(&clean).norm_sq())
    });
    let errs: Vec<f64> = errs.into_iter().collect::<Result<_>>()?;
    let (mean, std_err) = mean_and_std_err(&errs);
    Ok(Lemma3Estimate {
        mean_sq_err: mean,
        std_err,
        oracle: lemma3_oracle(d, quant, ber, range),
        bound: lemma3_bound(d, ber, range),
        trials,
    })
}

fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Expected decoded value of one parameter after iid flips:
/// `w_q + ber * (v_max + v_min - 2 w_q)`.
pub fn bias_model(w: f64, v_min: f64, v_max: f64, ber: f64, quant: QuantSpec) -> Result<f64> {
    let w_q = decode(&encode_with_range(&[w], v_min, v_max, quant)?)[0];
    Ok(w_q + ber * (v_max + v_min - 2.0 * w_q))
}

/// Empirical mean decoded value of `w` over `trials` channel uses, with its
/// standard error.
pub fn bias_montecarlo(
    w: f64,
    v_min: f64,
    v_max: f64,
    ber: f64,
    quant: QuantSpec,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::Contract("need at least one trial".into()));
    }
    crate::channel::validate_ber(ber)?;
    let clean = encode_with_range(&[w], v_min, v_max, quant)?;
    let mut rng = derive_rng(seed, 0, 0, StreamTag::Trial);
    let values: Vec<f64> = (0..trials)
        .map(|_| {
            let mut p = clean.clone();
            inject_in_place(&mut p, ber, FlipMode::Iid, &mut rng);
            decode(&p)[0]
        })
        .collect();
    Ok(mean_and_std_err(&values))
}

/// `1 - L eta - 2 tau (tau - 1) L^2 eta^2`.
pub fn eta_slack(l: f64, eta: f64, tau: usize) -> f64 {
    let t = tau as f64;
    1.0 - l * eta - 2.0 * t * (t - 1.0) * l * l * eta * eta
}

/// Learning-rate condition under which the bounds hold.
pub fn check_eta_condition(l: f64, eta: f64, tau: usize) -> bool {
    eta_slack(l, eta, tau) >= 0.0
}

/// A differentiable objective over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, w: &ParamVector) -> Result<ParamVector>;
}

/// Mean cross-entropy of an MLP over a dataset.
pub struct MlpObjective<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
}

impl Objective for MlpObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        Ok(full_gradient(w, self.spec, self.data)?.1)
    }
}

fn jitter<R: RngCore + ?Sized>(center: &[f64], radius: f64, rng: &mut R) -> ParamVector {
    center
        .iter()
        .map(|c| c + radius * (2.0 * uniform01(rng) - 1.0))
        .collect()
}

/// Largest gradient-difference ratio `||g(w) - g(w')|| / ||w - w'||` over
/// `samples` random pairs in a box of half-width `radius` around `center`.
///
/// This can only under-estimate the true smoothness constant.
pub fn estimate_smoothness<O: Objective + ?Sized, R: RngCore + ?Sized>(
    obj: &O,
    center: &ParamVector,
    radius: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("need at least one sample pair".into()));
    }
    if center.len() != obj.dim() {
        return Err(Error::Contract(format!(
            "center has {} entries, objective has {}",
            center.len(),
            obj.dim()
        )));
    }
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let a = jitter(center, radius, rng);
        let b = jitter(center, radius, rng);
        let dist = a.sub(&b).norm_sq().sqrt();
        if dist == 0.0 {
            continue;
        }
        let diff = obj.gradient(&a)?.sub(&obj.gradient(&b)?).norm_sq().sqrt();
        best = best.max(diff / dist);
    }
    Ok(best)
}

/// Smoothness estimate for an MLP: each sample pair lies in a small box around
/// a freshly initialized model.
pub fn estimate_l<R: RngCore + ?Sized>(spec: &MlpSpec, data: &Dataset, samples: usize, rng: &mut R) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("need at least one sample pair".into()));
    }
    let obj = MlpObjective { spec, data };
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let center = init_model(spec, rng.next_u64());
        best = best.max(estimate_smoothness(&obj, &center, 0.01, 1, rng)?);
    }
    Ok(best)
}

/// Mean `||g_B(w) - g(w)||^2` over `samples` mini-batches drawn without
/// replacement, against the full-data gradient.
pub fn estimate_sigma_sq<R: RngCore + ?Sized>(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch_size: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::Contract("need at least two sampled batches".into()));
    }
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} does not fit a dataset of {}",
            data.len()
        )));
    }
    // Same summation order as a sorted full-size batch, so that case is exact.
    let (_, full) = backward(params, spec, &data.full_batch())?;
    let mut total = 0.0;
    for _ in 0..samples {
        let mut idx = rand::seq::index::sample(rng, data.len(), batch_size).into_vec();
        idx.sort_unstable();
        let (_, g) = backward(params, spec, &data.batch(&idx))?;
        total += g.sub(&full).norm_sq();
    }
    Ok(total / samples as f64)
}
