use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A homogeneous pool of GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub gpu_count: usize,
    /// Bytes of device memory per GPU.
    pub memory_capacity: f64,
    /// FLOP/s of one full GPU.
    pub peak_compute: f64,
    /// Bytes/s of one GPU's memory system.
    pub peak_bandwidth: f64,
    /// Per-hop latency of the gradient all-reduce, seconds.
    pub interconnect_alpha: f64,
    /// Inverse all-reduce bandwidth, seconds per byte.
    pub interconnect_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("gpu_count must be positive")]
    NoGpus,
    #[error("cluster field `{0}` must be positive and finite")]
    NonPositive(&'static str),
}

impl ClusterSpec {
    /// Eight H100-class GPUs, derated to sustained training throughput.
    pub fn h100(gpu_count: usize) -> Self {
        ClusterSpec {
            gpu_count,
            memory_capacity: 80e9,
            peak_compute: 200e12,
            peak_bandwidth: 3.35e12,
            interconnect_alpha: 20e-6,
            interconnect_beta: 1.0 / 100e9,
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.gpu_count == 0 {
            return Err(ClusterError::NoGpus);
        }
        let fields = [
            ("memory_capacity", self.memory_capacity),
            ("peak_compute", self.peak_compute),
            ("peak_bandwidth", self.peak_bandwidth),
            ("interconnect_alpha", self.interconnect_alpha),
            ("interconnect_beta", self.interconnect_beta),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(ClusterError::NonPositive(name));
            }
        }
        Ok(())
    }

    /// Data-parallel degrees profiled by default: powers of two below
    /// `gpu_count`, plus `gpu_count` itself.
    pub fn default_dp_degrees(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut d = 1usize;
        while d < self.gpu_count {
            out.push(d as u32);
            d *= 2;
        }
        out.push(self.gpu_count as u32);
        out
    }
}
