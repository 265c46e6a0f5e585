use serde::{Deserialize, Serialize};

/// Per-call communication cost `C + D*B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommCostModel {
    /// C, seconds per call.
    pub latency_per_call: f64,
    /// D, seconds per byte.
    pub per_byte_cost: f64,
    /// B, bytes per call.
    pub bytes_per_call: f64,
}

/// `calls_per_iter * iterations * (C + D*B)` seconds.
pub fn estimate_comm_cost(iterations: u64, calls_per_iter: u64, model: &CommCostModel) -> f64 {
    (calls_per_iter * iterations) as f64 * (model.latency_per_call + model.per_byte_cost * model.bytes_per_call)
}
