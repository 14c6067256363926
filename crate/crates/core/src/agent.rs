//! Per-agent estimator state.
//!
//! Agent `i` owns its block `x^i`, the last `B + 1` Gaussian perturbations it
//! drew, and the freshest derivative it has heard from every peer. Its partial
//! gradient pairs each peer's (possibly stale) scalar `D_j(s)` with its own
//! perturbation from that same round `s`.

use std::collections::VecDeque;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::delaynet::{DerivativeBroadcast, PeerTable};

/// Default lower limit on the smoothing radius.
pub const DEFAULT_SMOOTHING_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent {agent} already drew a perturbation for round {round}")]
    DuplicateRound { agent: usize, round: u64 },
    #[error("smoothing radius {u:e} is below the floor {floor:e}")]
    SmoothingUnderflow { u: f64, floor: f64 },
    #[error("agent {agent} has no perturbation for round {round} (oldest kept: {oldest:?})")]
    BufferMiss {
        agent: usize,
        round: u64,
        oldest: Option<u64>,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("agent {agent} produced a non-finite update (eta = {eta}, g = {g:?})")]
    NonFiniteUpdate { agent: usize, eta: f64, g: Vec<f64> },
}

/// Ring buffer of the last `capacity` perturbations, keyed by round.
#[derive(Debug, Clone)]
pub struct PerturbationBuffer {
    capacity: usize,
    slots: VecDeque<(u64, Vec<f64>)>,
}

impl PerturbationBuffer {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        PerturbationBuffer {
            capacity,
            slots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn latest_round(&self) -> Option<u64> {
        self.slots.back().map(|s| s.0)
    }

    pub fn oldest_round(&self) -> Option<u64> {
        self.slots.front().map(|s| s.0)
    }

    fn push(&mut self, round: u64, z: Vec<f64>) {
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back((round, z));
    }

    pub fn get(&self, round: u64) -> Option<&[f64]> {
        let oldest = self.oldest_round()?;
        let idx = round.checked_sub(oldest)? as usize;
        match self.slots.get(idx) {
            Some((r, z)) if *r == round => Some(z),
            _ => None,
        }
    }
}

pub struct AgentState {
    index: usize,
    block: Vec<f64>,
    buffer: PerturbationBuffer,
    peers: PeerTable,
    rng: ChaCha12Rng,
}

impl AgentState {
    /// `bound` is the delay bound `B`; the buffer keeps `B + 1` rounds.
    pub fn new(index: usize, block: Vec<f64>, n: usize, bound: u64, rng: ChaCha12Rng) -> Self {
        AgentState {
            index,
            block,
            buffer: PerturbationBuffer::new(bound as usize + 1),
            peers: PeerTable::new(n),
            rng,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn block(&self) -> &[f64] {
        &self.block
    }

    pub fn buffer(&self) -> &PerturbationBuffer {
        &self.buffer
    }

    pub fn peers(&self) -> &PeerTable {
        &self.peers
    }

    pub fn peers_mut(&mut self) -> &mut PeerTable {
        &mut self.peers
    }

    /// Draws `z^i(round) ~ N(0, I)` from this agent's stream and stores it.
    pub fn draw_perturbation(&mut self, round: u64) -> Result<&[f64], AgentError> {
        if let Some(latest) = self.buffer.latest_round() {
            if round <= latest {
                return Err(AgentError::DuplicateRound {
                    agent: self.index,
                    round,
                });
            }
        }
        let z: Vec<f64> = (0..self.block.len())
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        self.buffer.push(round, z);
        Ok(self.buffer.slots.back().map(|s| s.1.as_slice()).unwrap())
    }

    pub fn perturbation(&self, round: u64) -> Option<&[f64]> {
        self.buffer.get(round)
    }

    pub fn receive(&mut self, arrivals: &[DerivativeBroadcast]) {
        self.peers.update(arrivals);
    }

    /// `g^i = (1/n) sum_{j : tau_j >= 0} D_j(tau_j) z^i(tau_j)`, accumulated in
    /// ascending peer order.
    pub fn assemble_partial_gradient(&self, n: usize) -> Result<Vec<f64>, AgentError> {
        let mut g = vec![0.0; self.block.len()];
        for entry in self.peers.entries() {
            if entry.timestamp < 0 {
                continue;
            }
            let round = entry.timestamp as u64;
            let z = self.buffer.get(round).ok_or(AgentError::BufferMiss {
                agent: self.index,
                round,
                oldest: self.buffer.oldest_round(),
            })?;
            for (gk, zk) in g.iter_mut().zip(z) {
                *gk += entry.value * zk;
            }
        }
        let n = n as f64;
        g.iter_mut().for_each(|gk| *gk /= n);
        Ok(g)
    }

    /// `x^i <- x^i - eta g`.
    pub fn apply_update(&mut self, g: &[f64], eta: f64) -> Result<(), AgentError> {
        if g.len() != self.block.len() {
            return Err(AgentError::DimensionMismatch {
                expected: self.block.len(),
                got: g.len(),
            });
        }
        let next: Vec<f64> = self.block.iter().zip(g).map(|(x, g)| x - eta * g).collect();
        if g.iter().chain(&next).any(|v| !v.is_finite()) {
            return Err(AgentError::NonFiniteUpdate {
                agent: self.index,
                eta,
                g: g.to_vec(),
            });
        }
        self.block = next;
        Ok(())
    }
}

/// `(f_plus - f_minus) / (2u)`.
pub fn two_point_derivative(f_plus: f64, f_minus: f64, u: f64, floor: f64) -> Result<f64, AgentError> {
    if !(u >= floor && u > 0.0) {
        return Err(AgentError::SmoothingUnderflow { u, floor });
    }
    Ok((f_plus - f_minus) / (2.0 * u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delaynet::PeerEntry;
    use crate::rng::{stream, StreamPurpose};

    fn agent(index: usize, block: Vec<f64>, n: usize, bound: u64) -> AgentState {
        AgentState::new(index, block, n, bound, stream(5, 0, StreamPurpose::Perturbation, index as u32))
    }

    #[test]
    fn two_point_examples() {
        assert_eq!(two_point_derivative(7.0, 7.0, 0.1, 1e-8).unwrap(), 0.0);
        assert_eq!(two_point_derivative(1.5, -1.5, 0.5, 1e-8).unwrap(), 3.0);
        let v = two_point_derivative(1.44, 0.64, 0.1, 1e-8).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        assert!(matches!(
            two_point_derivative(1.0, 0.0, 1e-9, 1e-8),
            Err(AgentError::SmoothingUnderflow { .. })
        ));
        assert!(two_point_derivative(1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn perturbation_statistics() {
        let mut a = agent(0, vec![0.0; 3], 1, 0);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let draws = 100_000;
        for t in 0..draws {
            let z = a.draw_perturbation(t).unwrap();
            assert_eq!(z.len(), 3);
            for k in 0..3 {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for k in 0..3 {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn perturbations_are_reproducible() {
        let mut a = agent(2, vec![0.0; 4], 3, 2);
        let mut b = agent(2, vec![0.0; 4], 3, 2);
        for t in 0..5 {
            assert_eq!(a.draw_perturbation(t).unwrap(), b.draw_perturbation(t).unwrap());
        }
    }

    #[test]
    fn duplicate_round_rejected() {
        let mut a = agent(0, vec![0.0], 1, 1);
        a.draw_perturbation(0).unwrap();
        assert!(matches!(a.draw_perturbation(0), Err(AgentError::DuplicateRound { .. })));
    }

    #[test]
    fn buffer_keeps_last_b_plus_one() {
        let bound = 3;
        let mut a = agent(0, vec![0.0], 1, bound);
        for t in 0..bound + 2 {
            a.draw_perturbation(t).unwrap();
            assert_eq!(a.buffer().len() as u64, (t + 1).min(bound + 1));
        }
        let t = bound + 1;
        assert!(a.perturbation(t - bound - 1).is_none());
        for s in t - bound..=t {
            assert!(a.perturbation(s).is_some());
        }
    }

    fn with_buffer(entries: &[(usize, i64, f64)], zs: &[(u64, f64)], n: usize) -> AgentState {
        let mut a = agent(0, vec![0.0], n, 10);
        for &(round, z) in zs {
            a.buffer.push(round, vec![z]);
        }
        for &(j, ts, d) in entries {
            a.peers_mut().set(j, PeerEntry { timestamp: ts, value: d });
        }
        a
    }

    #[test]
    fn partial_gradient_examples() {
        let a = with_buffer(&[(0, 5, 2.0), (1, 3, 4.0)], &[(3, -1.0), (4, 0.0), (5, 0.5)], 2);
        assert_eq!(a.assemble_partial_gradient(2).unwrap(), vec![-1.5]);

        // only one peer has reported; the divisor stays n
        let a = with_buffer(&[(0, 7, 2.0)], &[(7, 0.5)], 2);
        assert_eq!(a.assemble_partial_gradient(2).unwrap(), vec![0.5]);

        let a = with_buffer(&[(0, 1, 0.0), (1, 2, 0.0)], &[(1, 0.3), (2, -0.7)], 2);
        assert_eq!(a.assemble_partial_gradient(2).unwrap(), vec![0.0]);
    }

    #[test]
    fn partial_gradient_buffer_miss() {
        let a = with_buffer(&[(1, 1, 2.0)], &[(4, 1.0)], 2);
        assert!(matches!(
            a.assemble_partial_gradient(2),
            Err(AgentError::BufferMiss { round: 1, .. })
        ));
    }

    #[test]
    fn update_examples() {
        let mut a = agent(0, vec![1.0], 1, 0);
        a.apply_update(&[-1.5], 0.05).unwrap();
        assert!((a.block()[0] - 1.075).abs() < 1e-15);
        let before = a.block().to_vec();
        a.apply_update(&[0.0], 0.05).unwrap();
        assert_eq!(a.block(), before.as_slice());
        assert!(matches!(a.apply_update(&[0.0, 1.0], 0.1), Err(AgentError::DimensionMismatch { .. })));
        assert!(matches!(a.apply_update(&[f64::NAN], 0.1), Err(AgentError::NonFiniteUpdate { .. })));
        assert!(matches!(a.apply_update(&[f64::MAX], 1e10), Err(AgentError::NonFiniteUpdate { .. })));
        assert_eq!(a.block(), before.as_slice());
    }
}
