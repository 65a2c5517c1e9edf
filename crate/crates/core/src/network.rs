//! Message-size and latency accounting for the vehicle-to-store channel.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Standard normal quantile at 0.9.
const Z90: f64 = 1.281_551_565_544_600_4;

/// Latency of propagating a committed store change to a subscriber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LatencySpec {
    Zero,
    Fixed { seconds: f64 },
    /// Log-normal with the given 90th percentile and log-space sigma.
    LogNormal { p90: f64, sigma: f64 },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Fixed { seconds: 0.0086 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetParams {
    /// Bytes per state update.
    pub msg_size: f64,
    /// Seconds between state updates of one vehicle.
    pub update_period: f64,
    pub sync_latency: LatencySpec,
    /// Link capacity, bytes per second.
    pub capacity: f64,
    pub loss_prob: f64,
    /// Extra traffic as a fraction of the base update rate.
    pub overhead_fraction: f64,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            msg_size: 4_000.0,
            update_period: 0.1,
            sync_latency: LatencySpec::default(),
            capacity: 30_000_000.0,
            loss_prob: 0.0,
            overhead_fraction: 0.0,
        }
    }
}

impl NetParams {
    pub fn per_vehicle_rate(&self) -> f64 {
        self.msg_size / self.update_period * (1.0 + self.overhead_fraction)
    }
}

/// Total bytes per second for `n_vehicles` periodic updaters.
pub fn aggregate_bandwidth(n_vehicles: usize, params: &NetParams) -> f64 {
    n_vehicles as f64 * params.per_vehicle_rate()
}

/// Largest fleet whose aggregate rate fits in the link capacity.
pub fn max_supported_vehicles(params: &NetParams) -> usize {
    let rate = params.per_vehicle_rate();
    if !(rate > 0.0) {
        return usize::MAX;
    }
    // guard against 2.4e6 / 4e4 landing a hair under 60
    let n = (params.capacity / rate * (1.0 + 1e-12)).floor() as usize;
    if aggregate_bandwidth(n, params) > params.capacity * (1.0 + 1e-12) {
        n.saturating_sub(1)
    } else {
        n
    }
}

pub fn sample_latency<R: Rng + ?Sized>(params: &NetParams, rng: &mut R) -> f64 {
    match params.sync_latency {
        LatencySpec::Zero => 0.0,
        LatencySpec::Fixed { seconds } => seconds,
        LatencySpec::LogNormal { p90, sigma } => {
            let mu = p90.ln() - Z90 * sigma;
            LogNormal::new(mu, sigma).expect("sigma must be finite and non-negative").sample(rng)
        }
    }
}

/// Propagation delay of one update: latency plus one update period per
/// consecutive lost transmission.
pub fn sample_delivery_delay<R: Rng + ?Sized>(params: &NetParams, rng: &mut R) -> f64 {
    let mut delay = sample_latency(params, rng);
    if params.loss_prob > 0.0 {
        let p = params.loss_prob.min(0.99);
        while rng.random::<f64>() < p {
            delay += params.update_period;
        }
    }
    delay
}
