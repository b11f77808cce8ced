//! Block-interval selection and rebalancing decisions.
//!
//! A swarm is summarized by per-block throughput (sum over the servers
//! hosting that block). The swarm as a whole runs at its bottleneck, the
//! minimum over blocks, which is what joining and rebalancing servers try to
//! raise.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open block interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockRange {
    pub start: usize,
    pub end: usize,
}

impl BlockRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::input(format!("empty block range {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn checked(start: usize, end: usize, n_blocks: usize) -> Result<Self> {
        let r = Self::new(start, end)?;
        if end > n_blocks {
            return Err(Error::input(format!(
                "block range {start}..{end} exceeds {n_blocks} blocks"
            )));
        }
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, block: usize) -> bool {
        self.start <= block && block < self.end
    }

    pub fn intersects(&self, other: &BlockRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn covers(&self, other: &BlockRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl fmt::Display for BlockRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl std::str::FromStr for BlockRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::input(format!("expected start:end, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::input(format!("bad block index {v:?}: {e}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmServer<Id> {
    pub id: Id,
    pub range: BlockRange,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmView<Id> {
    pub n_blocks: usize,
    pub servers: Vec<SwarmServer<Id>>,
}

impl<Id: PartialEq + Clone> SwarmView<Id> {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            n_blocks,
            servers: Vec::new(),
        }
    }

    pub fn with_server(mut self, id: Id, range: BlockRange, throughput: f64) -> Self {
        self.servers.push(SwarmServer {
            id,
            range,
            throughput,
        });
        self
    }

    pub fn get(&self, id: &Id) -> Option<&SwarmServer<Id>> {
        self.servers.iter().find(|s| &s.id == id)
    }

    pub fn without(&self, id: &Id) -> Self {
        Self {
            n_blocks: self.n_blocks,
            servers: self.servers.iter().filter(|s| &s.id != id).cloned().collect(),
        }
    }
}

pub fn block_throughputs<Id>(view: &SwarmView<Id>) -> Vec<f64> {
    let mut t = vec![0.0; view.n_blocks];
    for s in &view.servers {
        for v in &mut t[s.range.start..s.range.end.min(view.n_blocks)] {
            *v += s.throughput;
        }
    }
    t
}

/// Bottleneck throughput: the minimum over blocks.
pub fn swarm_throughput(t: &[f64]) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.iter().copied().fold(f64::INFINITY, f64::min)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn with_added(t: &[f64], start: usize, k: usize, amount: f64) -> Vec<f64> {
    let mut out = t.to_vec();
    for v in &mut out[start..start + k] {
        *v += amount;
    }
    out
}

/// Start index of the `k`-block interval that, once `my_throughput` is added
/// to it, gives the lexicographically largest ascending throughput vector.
/// Ties go to the smallest start.
pub fn choose_interval(t: &[f64], k: usize, my_throughput: f64) -> Result<usize> {
    let n = t.len();
    if k == 0 || k > n {
        return Err(Error::input(format!("span {k} does not fit in {n} blocks")));
    }
    let mut best_start = 0;
    let mut best = sorted(with_added(t, 0, k, my_throughput));
    for start in 1..=n - k {
        let cand = sorted(with_added(t, start, k, my_throughput));
        if lexicographic(&cand, &best) == Ordering::Greater {
            best = cand;
            best_start = start;
        }
    }
    Ok(best_start)
}

fn uncovered(t: &[f64]) -> usize {
    t.iter().filter(|&&v| v <= 0.0).count()
}

/// Gap-repair plan: servers in `(start, id)` order are packed left to right
/// until `[0, n_blocks)` is tiled; the rest keep their place. Every server
/// derives the same plan from the same view, so independent moves agree.
fn packed_starts<Id: Ord>(view: &SwarmView<Id>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..view.servers.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&view.servers[a], &view.servers[b]);
        (x.range.start, &x.id).cmp(&(y.range.start, &y.id))
    });
    let mut out: Vec<usize> = view.servers.iter().map(|s| s.range.start).collect();
    let mut pos = 0;
    for i in order {
        let k = view.servers[i].range.len();
        if pos >= view.n_blocks || k > view.n_blocks {
            continue;
        }
        let slot = pos.min(view.n_blocks - k);
        out[i] = slot;
        pos = slot + k;
    }
    out
}

/// Where server `self_id` should move, if anywhere.
///
/// With full coverage the server is removed from the view and re-placed with
/// [`choose_interval`]; the move must lift the bottleneck by at least a
/// factor `1 + eps`. While some block is uncovered and the servers' spans add
/// up to at least `n_blocks`, the server takes its slot in the packed plan,
/// which tiles every block once all servers have moved. When the spans cannot
/// cover the model, any move that leaves fewer uncovered blocks qualifies.
pub fn should_rebalance<Id: Ord + Clone>(view: &SwarmView<Id>, self_id: &Id, eps: f64) -> Option<usize> {
    let idx = view.servers.iter().position(|s| &s.id == self_id)?;
    let me = &view.servers[idx];
    let k = me.range.len();
    let current = block_throughputs(view);
    let cur_min = swarm_throughput(&current);
    let capacity: usize = view.servers.iter().map(|s| s.range.len()).sum();
    if cur_min <= 0.0 && capacity >= view.n_blocks {
        let slot = packed_starts(view)[idx];
        return (slot != me.range.start).then_some(slot);
    }
    let others = block_throughputs(&view.without(self_id));
    let start = choose_interval(&others, k, me.throughput).ok()?;
    if start == me.range.start {
        return None;
    }
    let proposed = with_added(&others, start, k, me.throughput);
    let new_min = swarm_throughput(&proposed);
    let qualifies = if cur_min <= 0.0 {
        uncovered(&proposed) < uncovered(&current)
    } else {
        new_min >= (1.0 + eps) * cur_min
    };
    qualifies.then_some(start)
}

/// A server's usable throughput: compute rate capped by how many hidden
/// states per second its link can carry.
pub fn server_throughput(compute_tps: f64, net_bytes_per_s: f64, bytes_per_token: f64) -> f64 {
    compute_tps.min(net_bytes_per_s / bytes_per_token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(a: usize, b: usize) -> BlockRange {
        BlockRange::new(a, b).unwrap()
    }

    #[test]
    fn per_block_sums() {
        let v = SwarmView::new(3)
            .with_server(1, r(0, 2), 10.0)
            .with_server(2, r(1, 3), 5.0);
        assert_eq!(block_throughputs(&v), vec![10.0, 15.0, 5.0]);
        assert_eq!(block_throughputs(&SwarmView::<u8>::new(4)), vec![0.0; 4]);
        let dup = SwarmView::new(3)
            .with_server(1, r(0, 2), 10.0)
            .with_server(2, r(0, 2), 10.0);
        assert_eq!(block_throughputs(&dup), vec![20.0, 20.0, 0.0]);
    }

    #[test]
    fn bottleneck() {
        assert_eq!(swarm_throughput(&[10.0, 15.0, 5.0]), 5.0);
        assert_eq!(swarm_throughput(&[10.0, 0.0, 5.0]), 0.0);
        assert_eq!(swarm_throughput(&[5.0, 15.0, 10.0]), 5.0);
        assert_eq!(swarm_throughput(&[]), 0.0);
    }

    #[test]
    fn picks_weakest_interval() {
        assert_eq!(choose_interval(&[8.0, 8.0, 1.0, 1.0, 8.0, 8.0], 2, 4.0).unwrap(), 2);
        assert_eq!(choose_interval(&[0.0; 4], 2, 3.0).unwrap(), 0);
        assert_eq!(choose_interval(&[3.0, 1.0, 2.0], 3, 1.0).unwrap(), 0);
        assert!(choose_interval(&[1.0, 1.0], 3, 1.0).is_err());
    }

    #[test]
    fn full_span_server_stays() {
        let v = SwarmView::new(4).with_server(0, r(0, 4), 10.0);
        assert_eq!(should_rebalance(&v, &0, 0.2), None);
    }

    #[test]
    fn infinite_eps_never_moves_when_covered() {
        let v = SwarmView::new(4)
            .with_server(0, r(0, 2), 1.0)
            .with_server(1, r(0, 2), 1.0)
            .with_server(2, r(2, 4), 1.0);
        assert_eq!(should_rebalance(&v, &1, f64::INFINITY), None);
    }

    #[test]
    fn crowded_server_moves_to_gap() {
        // L=6: servers 0 and 1 both on [0,3); server 2 on [3,5); block 5 uncovered.
        let v = SwarmView::new(6)
            .with_server(0, r(0, 3), 1.0)
            .with_server(1, r(0, 3), 1.0)
            .with_server(2, r(3, 5), 1.0);
        // Brute force over server 1's starts after removing it.
        let without = block_throughputs(&v.without(&1));
        let best = (0..=3)
            .max_by(|&a, &b| {
                let ta = sorted(with_added(&without, a, 3, 1.0));
                let tb = sorted(with_added(&without, b, 3, 1.0));
                lexicographic(&ta, &tb).then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(best, 3);
        assert_eq!(should_rebalance(&v, &1, 0.2), Some(3));
    }

    #[test]
    fn gap_without_single_improving_move_is_packed() {
        // No single move shrinks the gap at block 5, but a tiling exists.
        let v = SwarmView::new(6)
            .with_server(0, r(0, 2), 1.0)
            .with_server(1, r(1, 3), 1.0)
            .with_server(2, r(3, 5), 1.0);
        assert_eq!(should_rebalance(&v, &0, 0.2), None);
        assert_eq!(should_rebalance(&v, &1, 0.2), Some(2));
        let v = SwarmView::new(6)
            .with_server(0, r(0, 2), 1.0)
            .with_server(1, r(2, 4), 1.0)
            .with_server(2, r(3, 5), 1.0);
        assert_eq!(should_rebalance(&v, &2, 0.2), Some(4));
    }

    #[test]
    fn throughput_is_min_of_compute_and_network() {
        assert_eq!(server_throughput(100.0, 50.0 * 1024.0, 1024.0), 50.0);
        assert_eq!(server_throughput(7.0, 7.0, 1.0), 7.0);
        assert_eq!(server_throughput(500.0, 1e6, 1024.0), 500.0);
    }

    #[test]
    fn range_parsing() {
        assert_eq!("2:5".parse::<BlockRange>().unwrap(), r(2, 5));
        assert!("5:2".parse::<BlockRange>().is_err());
        assert!("x".parse::<BlockRange>().is_err());
        assert!(BlockRange::checked(0, 5, 4).is_err());
    }
}
