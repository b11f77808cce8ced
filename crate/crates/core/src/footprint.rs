//! Memory and transfer arithmetic for sizing a swarm.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub params: u64,
    pub bits_per_param: u32,
    pub bytes_total: u128,
    pub servers_needed: u128,
}

/// Bytes to hold `params` weights at `bits` each, and how many servers of
/// `per_server_bytes` capacity that takes.
pub fn memory_footprint(params: u64, bits: u32, per_server_bytes: u64) -> FootprintReport {
    let bytes_total = params as u128 * bits as u128 / 8;
    let servers_needed = bytes_total.div_ceil(per_server_bytes.max(1) as u128);
    FootprintReport {
        params,
        bits_per_param: bits,
        bytes_total,
        servers_needed,
    }
}

/// Best-case seconds to stream every parameter across a host link once,
/// assuming zero latency.
pub fn offload_upper_bound(params: u64, bits: u32, link_gbit_s: f64) -> f64 {
    if params == 0 {
        return 0.0;
    }
    let bits_total = params as f64 * bits as f64;
    bits_total / (link_gbit_s * 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_footprint() {
        let r = memory_footprint(1, 8, 1);
        assert_eq!(r.bytes_total, 1);
        assert_eq!(r.servers_needed, 1);
    }

    #[test]
    fn zero_params_offload() {
        assert_eq!(offload_upper_bound(0, 8, 256.0), 0.0);
    }

    #[test]
    fn partial_server_rounds_up() {
        assert_eq!(memory_footprint(9, 8, 4).servers_needed, 3);
    }
}
