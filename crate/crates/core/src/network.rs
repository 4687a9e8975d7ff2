//! Synchronous neighbor-to-neighbor message passing with locality checks
//! and traffic accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits per transmitted scalar under the single-precision convention.
pub const BITS_PER_SCALAR: u64 = 32;

/// Traffic of one exchange round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub messages: u64,
    pub scalars: u64,
}

impl RoundTraffic {
    pub fn bits(&self) -> u64 {
        self.scalars * BITS_PER_SCALAR
    }
}

/// Cumulative traffic counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkStats {
    pub rounds: u64,
    pub messages: u64,
    pub scalars: u64,
    pub bits: u64,
}

impl NetworkStats {
    pub fn add_round(&mut self, t: RoundTraffic) {
        self.rounds += 1;
        self.messages += t.messages;
        self.scalars += t.scalars;
        self.bits += t.bits();
    }

    pub fn merge(&mut self, other: &NetworkStats) {
        self.rounds += other.rounds;
        self.messages += other.messages;
        self.scalars += other.scalars;
        self.bits += other.bits;
    }
}

/// Mailbox network over a fixed neighborhood graph. Messages are buffered
/// until [`Network::deliver`] closes the round; a send across a non-edge is
/// rejected.
#[derive(Clone, Debug)]
pub struct Network {
    neighborhoods: Vec<BTreeSet<usize>>,
    pending: Vec<BTreeMap<usize, Vec<f64>>>,
    round: RoundTraffic,
    stats: NetworkStats,
    per_round: Vec<RoundTraffic>,
}

impl Network {
    pub fn new(neighborhoods: Vec<BTreeSet<usize>>) -> Self {
        let m = neighborhoods.len();
        Self {
            neighborhoods,
            pending: vec![BTreeMap::new(); m],
            round: RoundTraffic::default(),
            stats: NetworkStats::default(),
            per_round: Vec::new(),
        }
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.neighborhoods[i]
    }

    pub fn len(&self) -> usize {
        self.neighborhoods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighborhoods.is_empty()
    }

    /// Queues `payload` from `from` to `to`. Self-delivery is free.
    pub fn send(&mut self, from: usize, to: usize, payload: Vec<f64>) -> Result<()> {
        if from >= self.len() || to >= self.len() || !self.neighborhoods[from].contains(&to) {
            return Err(Error::Locality { from, to });
        }
        if from != to {
            self.round.messages += 1;
            self.round.scalars += payload.len() as u64;
        }
        self.pending[to].insert(from, payload);
        Ok(())
    }

    /// Closes the round and hands every agent its inbox.
    pub fn deliver(&mut self) -> Vec<BTreeMap<usize, Vec<f64>>> {
        let m = self.len();
        let inboxes = std::mem::replace(&mut self.pending, vec![BTreeMap::new(); m]);
        let t = std::mem::take(&mut self.round);
        self.stats.add_round(t);
        self.per_round.push(t);
        inboxes
    }

    pub fn stats(&self) -> NetworkStats {
        self.stats
    }

    pub fn per_round(&self) -> &[RoundTraffic] {
        &self.per_round
    }
}

/// Total transmitted bits for a run: the plain product of its factors.
pub fn communication_accounting(
    vars_per_iter: u64,
    bits_per_var: u64,
    iterations: u64,
    solves_per_step: u64,
) -> u64 {
    vars_per_iter * bits_per_var * iterations * solves_per_step
}
