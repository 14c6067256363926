//! Broadcast medium with bounded per-pair delay.
//!
//! Each round every agent posts one scalar derivative stamped with the round
//! it was computed in. The medium delivers it to every other agent after a
//! delay in `0..=B` drawn from the [`DelayModel`]; self-delivery is instant.
//! Receivers keep only the freshest message per sender in a [`PeerTable`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("broadcast stamped {timestamp} posted at round {round}")]
    StaleTimestamp { timestamp: u64, round: u64 },
    #[error("delay matrix must be {n}x{n}, got {rows} rows")]
    MatrixShape { n: usize, rows: usize },
    #[error("delay matrix row {row} has {len} entries, expected {n}")]
    MatrixRow { row: usize, len: usize, n: usize },
    #[error("delay matrix entry ({from},{to}) = {delay} exceeds bound {bound}")]
    MatrixExceedsBound {
        from: usize,
        to: usize,
        delay: u64,
        bound: u64,
    },
    #[error("delay matrix diagonal entry ({agent},{agent}) must be zero")]
    NonZeroDiagonal { agent: usize },
    #[error("gossip period {period} must be in 1..=B (B = {bound})")]
    GossipPeriod { period: u64, bound: u64 },
    #[error("sender {sender} out of range for {n} agents")]
    UnknownSender { sender: usize, n: usize },
    #[error("delay matrix csv: {0}")]
    MatrixCsv(String),
}

/// How long a broadcast from `j` takes to reach `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayModel {
    ZeroDelay,
    /// `delays[j][i]` rounds from sender `j` to receiver `i`.
    FixedMatrix { delays: Vec<Vec<u64>>, bound: u64 },
    /// i.i.d. uniform on `0..=bound` per (sender, receiver, round).
    UniformRandom { bound: u64 },
    /// The link `j -> i` is up on rounds `t` with `(t + i + j) % period == 0`;
    /// a broadcast waits for the first up round strictly after it was posted,
    /// so delays lie in `1..=period`.
    PeriodicGossip { period: u64, bound: u64 },
}

impl DelayModel {
    pub fn fixed_matrix(delays: Vec<Vec<u64>>, bound: u64) -> Result<Self, DelayError> {
        let n = delays.len();
        for (j, row) in delays.iter().enumerate() {
            if row.len() != n {
                return Err(DelayError::MatrixRow {
                    row: j,
                    len: row.len(),
                    n,
                });
            }
            for (i, &d) in row.iter().enumerate() {
                if i == j && d != 0 {
                    return Err(DelayError::NonZeroDiagonal { agent: i });
                }
                if d > bound {
                    return Err(DelayError::MatrixExceedsBound {
                        from: j,
                        to: i,
                        delay: d,
                        bound,
                    });
                }
            }
        }
        Ok(DelayModel::FixedMatrix { delays, bound })
    }

    /// Parses an `n x n` integer matrix, one row per line, comma separated.
    pub fn fixed_matrix_from_csv(text: &str, bound: u64) -> Result<Self, DelayError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.deserialize::<Vec<u64>>() {
            rows.push(record.map_err(|e| DelayError::MatrixCsv(e.to_string()))?);
        }
        DelayModel::fixed_matrix(rows, bound)
    }

    pub fn periodic_gossip(period: u64, bound: u64) -> Result<Self, DelayError> {
        if period == 0 || period > bound {
            return Err(DelayError::GossipPeriod { period, bound });
        }
        Ok(DelayModel::PeriodicGossip { period, bound })
    }

    pub fn bound(&self) -> u64 {
        match self {
            DelayModel::ZeroDelay => 0,
            DelayModel::FixedMatrix { bound, .. }
            | DelayModel::UniformRandom { bound }
            | DelayModel::PeriodicGossip { bound, .. } => *bound,
        }
    }

    pub fn check_agents(&self, n: usize) -> Result<(), DelayError> {
        if let DelayModel::FixedMatrix { delays, .. } = self {
            if delays.len() != n {
                return Err(DelayError::MatrixShape {
                    n,
                    rows: delays.len(),
                });
            }
        }
        Ok(())
    }

    fn delay(&self, sender: usize, receiver: usize, round: u64, rng: &mut ChaCha12Rng) -> u64 {
        if sender == receiver {
            return 0;
        }
        match self {
            DelayModel::ZeroDelay => 0,
            DelayModel::FixedMatrix { delays, .. } => delays[sender][receiver],
            DelayModel::UniformRandom { bound } => rng.random_range(0..=*bound),
            DelayModel::PeriodicGossip { period, .. } => {
                let phase = (round + (sender + receiver) as u64) % period;
                period - phase
            }
        }
    }
}

/// `D_sender(timestamp)` on the wire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeBroadcast {
    pub sender: usize,
    pub timestamp: u64,
    pub value: f64,
}

/// One scheduled delivery, recorded when tracing is on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub sender: usize,
    pub receiver: usize,
    pub posted: u64,
    pub arrives: u64,
}

pub struct Medium {
    n: usize,
    model: DelayModel,
    rng: ChaCha12Rng,
    pending: BTreeMap<(u64, usize), Vec<DerivativeBroadcast>>,
    trace: Option<Vec<Delivery>>,
}

impl Medium {
    pub fn new(n: usize, model: DelayModel, rng: ChaCha12Rng) -> Result<Self, DelayError> {
        model.check_agents(n)?;
        Ok(Medium {
            n,
            model,
            rng,
            pending: BTreeMap::new(),
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    pub fn trace(&self) -> Option<&[Delivery]> {
        self.trace.as_deref()
    }

    /// Schedules `broadcast` for every receiver. Receivers are visited in
    /// index order so random draws are reproducible.
    pub fn post(&mut self, broadcast: DerivativeBroadcast, round: u64) -> Result<(), DelayError> {
        if broadcast.timestamp != round {
            return Err(DelayError::StaleTimestamp {
                timestamp: broadcast.timestamp,
                round,
            });
        }
        if broadcast.sender >= self.n {
            return Err(DelayError::UnknownSender {
                sender: broadcast.sender,
                n: self.n,
            });
        }
        for receiver in 0..self.n {
            let delay = self.model.delay(broadcast.sender, receiver, round, &mut self.rng);
            let arrives = round + delay;
            self.pending.entry((arrives, receiver)).or_default().push(broadcast);
            if let Some(trace) = self.trace.as_mut() {
                trace.push(Delivery {
                    sender: broadcast.sender,
                    receiver,
                    posted: round,
                    arrives,
                });
            }
        }
        Ok(())
    }

    /// Everything due at `(receiver, round)`, sorted by `(sender, timestamp)`.
    pub fn deliver(&mut self, receiver: usize, round: u64) -> Vec<DerivativeBroadcast> {
        let mut due = self.pending.remove(&(round, receiver)).unwrap_or_default();
        due.sort_by_key(|b| (b.sender, b.timestamp));
        due
    }

    /// Messages scheduled but not yet delivered.
    pub fn in_flight(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }
}

/// Freshest `(timestamp, value)` per sender. Timestamp `-1` means nothing has
/// arrived yet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerEntry {
    pub timestamp: i64,
    pub value: f64,
}

impl PeerEntry {
    pub const EMPTY: PeerEntry = PeerEntry {
        timestamp: -1,
        value: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerTable {
    entries: Vec<PeerEntry>,
}

impl PeerTable {
    pub fn new(n: usize) -> Self {
        PeerTable {
            entries: vec![PeerEntry::EMPTY; n],
        }
    }

    pub fn entries(&self) -> &[PeerEntry] {
        &self.entries
    }

    pub fn get(&self, sender: usize) -> PeerEntry {
        self.entries[sender]
    }

    pub fn set(&mut self, sender: usize, entry: PeerEntry) {
        self.entries[sender] = entry;
    }

    /// Keeps the larger timestamp per sender; older arrivals are dropped.
    pub fn update(&mut self, arrivals: &[DerivativeBroadcast]) {
        for b in arrivals {
            let entry = &mut self.entries[b.sender];
            if b.timestamp as i64 > entry.timestamp {
                *entry = PeerEntry {
                    timestamp: b.timestamp as i64,
                    value: b.value,
                };
            }
        }
    }
}

pub fn update_peer_table(mut table: PeerTable, arrivals: &[DerivativeBroadcast]) -> PeerTable {
    table.update(arrivals);
    table
}
