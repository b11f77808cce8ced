//! Chain planning: choose an ordered sequence of servers whose block spans
//! tile the model, minimizing estimated end-to-end time.
//!
//! Every hop is relayed through the client. The client only measures its own
//! round trip to each server, so the server-to-server leg is estimated as
//! `(rtt_a + rtt_b) / 4`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::allocation::BlockRange;
use crate::error::{Error, Result};
use crate::registry::{ServerEntry, ServerId};

pub const DEFAULT_BEAM_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopPlan {
    pub server: ServerEntry,
    /// Blocks this hop runs; may be a sub-range of the server's span.
    pub blocks: BlockRange,
    pub est_rtt_ms: f64,
    /// Estimated seconds spent on this hop, including the leg that reaches it.
    pub est_cost_s: f64,
}

/// Per-hop cost model inputs.
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    /// Bytes of the hidden-state payload carried into each hop.
    pub payload_bytes: f64,
}

fn rtt_s(rtts: &HashMap<ServerId, f64>, id: &ServerId) -> f64 {
    rtts[id] / 1000.0
}

fn hop_cost(
    entry: &ServerEntry,
    prev: Option<&ServerEntry>,
    blocks: usize,
    rtts: &HashMap<ServerId, f64>,
    cost: CostModel,
) -> f64 {
    let me = rtt_s(rtts, &entry.server_id);
    let latency = match prev {
        None => me / 2.0,
        Some(p) => (rtt_s(rtts, &p.server_id) + me) / 4.0,
    };
    let transfer = match entry.bandwidth_bps {
        Some(bw) if bw.is_finite() && bw > 0.0 => cost.payload_bytes * 8.0 / bw,
        _ => 0.0,
    };
    latency + transfer + blocks as f64 / entry.throughput
}

/// Total cost of a finished chain, including the final leg back to the client.
pub fn chain_cost(hops: &[HopPlan], rtts: &HashMap<ServerId, f64>) -> f64 {
    let body: f64 = hops.iter().map(|h| h.est_cost_s).sum();
    match hops.last() {
        Some(last) => body + rtt_s(rtts, &last.server.server_id) / 2.0,
        None => 0.0,
    }
}

/// Blocks in `target` that no usable entry covers.
pub fn missing_blocks(entries: &[ServerEntry], target: BlockRange) -> Vec<usize> {
    (target.start..target.end)
        .filter(|&b| !entries.iter().any(|e| e.range.contains(b)))
        .collect()
}

#[derive(Clone)]
struct Partial {
    cost: f64,
    last: Option<usize>,
    hops: Vec<(usize, BlockRange, f64)>,
}

/// Beam search over `(next_block, last_server)` states for the segment
/// `target`. Servers missing from `rtts` are treated as unreachable.
///
/// States are expanded in order of their next block. Two partial chains that
/// reach the same block through the same last server have identical futures,
/// so only the cheaper survives; with `beam_width` at least the number of
/// servers nothing else is pruned and the result is optimal.
pub fn plan_segment(
    entries: &[ServerEntry],
    rtts: &HashMap<ServerId, f64>,
    target: BlockRange,
    cost: CostModel,
    beam_width: usize,
) -> Result<Vec<HopPlan>> {
    if beam_width == 0 {
        return Err(Error::input("beam width must be at least 1"));
    }
    let usable: Vec<&ServerEntry> = entries
        .iter()
        .filter(|e| rtts.contains_key(&e.server_id) && e.throughput > 0.0)
        .collect();
    let owned: Vec<ServerEntry> = usable.iter().map(|e| (*e).clone()).collect();
    let missing = missing_blocks(&owned, target);
    if !missing.is_empty() {
        return Err(Error::NoRoute { missing });
    }

    let span = target.end - target.start;
    let mut frontier: Vec<Vec<Partial>> = vec![Vec::new(); span + 1];
    frontier[0].push(Partial {
        cost: 0.0,
        last: None,
        hops: Vec::new(),
    });
    for offset in 0..span {
        let mut states = std::mem::take(&mut frontier[offset]);
        if states.is_empty() {
            continue;
        }
        states.sort_by(|a, b| a.cost.total_cmp(&b.cost));
        let mut seen: Vec<Option<usize>> = Vec::new();
        states.retain(|s| {
            if seen.contains(&s.last) {
                false
            } else {
                seen.push(s.last);
                true
            }
        });
        states.truncate(beam_width);

        let block = target.start + offset;
        for state in &states {
            for (idx, entry) in usable.iter().enumerate() {
                if !entry.range.contains(block) {
                    continue;
                }
                let end = entry.range.end.min(target.end);
                let prev = state.last.map(|i| usable[i]);
                let step = hop_cost(entry, prev, end - block, rtts, cost);
                let mut hops = state.hops.clone();
                hops.push((idx, BlockRange { start: block, end }, step));
                frontier[end - target.start].push(Partial {
                    cost: state.cost + step,
                    last: Some(idx),
                    hops,
                });
            }
        }
    }

    let best = frontier[span]
        .iter()
        .map(|s| {
            let last = usable[s.last.expect("non-empty chain")];
            (s, s.cost + rtt_s(rtts, &last.server_id) / 2.0)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, _)| s)
        .ok_or_else(|| Error::NoRoute {
            missing: Vec::new(),
        })?;
    Ok(best
        .hops
        .iter()
        .map(|&(idx, blocks, step)| HopPlan {
            server: usable[idx].clone(),
            blocks,
            est_rtt_ms: rtts[&usable[idx].server_id],
            est_cost_s: step,
        })
        .collect())
}

/// Plans a full chain over blocks `[0, n_blocks)`.
pub fn plan_chain(
    entries: &[ServerEntry],
    rtts: &HashMap<ServerId, f64>,
    n_blocks: usize,
    payload_bytes: usize,
    beam_width: usize,
) -> Result<Vec<HopPlan>> {
    let target = BlockRange::new(0, n_blocks)?;
    plan_segment(
        entries,
        rtts,
        target,
        CostModel {
            payload_bytes: payload_bytes as f64,
        },
        beam_width,
    )
}

/// Checks that `hops` tile `target` exactly, in order.
pub fn validate_chain(hops: &[HopPlan], target: BlockRange) -> Result<()> {
    let mut next = target.start;
    for h in hops {
        if h.blocks.start != next || h.blocks.is_empty() || !h.server.range.covers(&h.blocks) {
            return Err(Error::input(format!(
                "hop {} does not continue the chain at block {next}",
                h.blocks
            )));
        }
        next = h.blocks.end;
    }
    if next != target.end {
        return Err(Error::input(format!("chain stops at {next}, expected {}", target.end)));
    }
    Ok(())
}

/// Splits `batch` rows across servers in proportion to their throughput.
/// Leftover rows after flooring go round-robin from the first server.
pub fn split_batch(batch: usize, throughputs: &[f64]) -> Vec<usize> {
    if throughputs.is_empty() {
        return Vec::new();
    }
    let total: f64 = throughputs.iter().sum();
    let mut shares: Vec<usize> = if total > 0.0 {
        throughputs
            .iter()
            .map(|t| ((batch as f64) * t / total).floor() as usize)
            .collect()
    } else {
        vec![0; throughputs.len()]
    };
    let mut assigned: usize = shares.iter().sum();
    let mut i = 0;
    while assigned < batch {
        shares[i % throughputs.len()] += 1;
        assigned += 1;
        i += 1;
    }
    shares
}
