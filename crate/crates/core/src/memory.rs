//! Key-value episodic buffer.
//!
//! One entry is written per trial: the key is a function of the trial's last
//! observation and the value is a frozen copy of the reservoir state. Reads
//! are a softmax over query-key dot products. How queries and keys are formed
//! is pluggable, see [`QueryKeyHeads`].

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Mlp};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// No episodic memory at all.
    None,
    /// Raw context slice for both query and key.
    Identity,
    /// Learned query and key networks over the full observation.
    Learned,
    /// Raw full observation for both query and key.
    BottomUp,
    /// One stored value picked uniformly at random.
    Random,
}

impl RetrievalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::None => "none",
            RetrievalMode::Identity => "identity",
            RetrievalMode::Learned => "learned",
            RetrievalMode::BottomUp => "bottom_up",
            RetrievalMode::Random => "random",
        }
    }
}

/// Bookkeeping for analysis. Never read by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryMeta {
    pub maze_id: u64,
    pub episode: u64,
    pub trial: usize,
    pub goal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Key as computed at encoding time.
    pub key: Array1<f64>,
    /// Input the key was computed from. Learned heads re-key from this.
    pub key_input: Array1<f64>,
    pub value: Array1<f64>,
    pub meta: EntryMeta,
}

/// Bounded FIFO of memory entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
}

/// Query/key construction. `Identity` and `BottomUp` read raw slices of the
/// observation; `Learned` passes the full observation through two MLPs.
#[derive(Debug, Clone)]
pub enum QueryKeyHeads<'a> {
    Identity { context: Range<usize> },
    BottomUp,
    Learned { query: &'a Mlp, key: &'a Mlp },
    Random,
}

impl QueryKeyHeads<'_> {
    /// The part of the observation the heads look at.
    pub fn input(&self, obs: ArrayView1<f64>) -> Array1<f64> {
        match self {
            QueryKeyHeads::Identity { context } => {
                obs.slice(ndarray::s![context.clone()]).to_owned()
            }
            _ => obs.to_owned(),
        }
    }

    pub fn query(&self, obs: ArrayView1<f64>) -> Array1<f64> {
        let x = self.input(obs);
        match self {
            QueryKeyHeads::Learned { query, .. } => query.forward(x.view()),
            _ => x,
        }
    }

    pub fn key(&self, obs: ArrayView1<f64>) -> Array1<f64> {
        let x = self.input(obs);
        match self {
            QueryKeyHeads::Learned { key, .. } => key.forward(x.view()),
            _ => x,
        }
    }
}

/// Result of a read.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub value: Array1<f64>,
    /// Softmax weights, one per entry (one-hot for random reads, empty when
    /// the buffer is empty).
    pub weights: Vec<f64>,
    pub query: Option<Array1<f64>>,
}

/// `softmax(q.k_i / temperature)` and the weighted sum of values.
pub fn softmax_readout<'a>(
    query: ArrayView1<f64>,
    keys: impl IntoIterator<Item = ArrayView1<'a, f64>>,
    values: impl IntoIterator<Item = &'a Array1<f64>>,
    temperature: f64,
    value_dim: usize,
) -> (Array1<f64>, Vec<f64>) {
    let logits: Vec<f64> = keys
        .into_iter()
        .map(|k| query.dot(&k) / temperature)
        .collect();
    let weights = nn::softmax(&logits);
    let mut value = Array1::zeros(value_dim);
    for (w, v) in weights.iter().zip(values) {
        value.scaled_add(*w, v);
    }
    (value, weights)
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &VecDeque<MemoryEntry> {
        &self.entries
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Stores `(key(x_enc), copy of h)`, evicting the oldest entry if full.
    pub fn encode(
        &mut self,
        heads: &QueryKeyHeads<'_>,
        x_enc: ArrayView1<f64>,
        h: &Array1<f64>,
        meta: EntryMeta,
    ) {
        let key_input = heads.input(x_enc);
        let key = match heads {
            QueryKeyHeads::Learned { key, .. } => key.forward(key_input.view()),
            _ => key_input.clone(),
        };
        self.push(MemoryEntry {
            key,
            key_input,
            value: h.clone(),
            meta,
        });
    }

    /// Reads with the current heads. Learned keys are recomputed from the
    /// stored key inputs so they always reflect the current key network.
    pub fn retrieve<R: Rng + ?Sized>(
        &self,
        heads: &QueryKeyHeads<'_>,
        x_now: ArrayView1<f64>,
        temperature: f64,
        value_dim: usize,
        rng: &mut R,
    ) -> Retrieval {
        if self.entries.is_empty() {
            return Retrieval {
                value: Array1::zeros(value_dim),
                weights: Vec::new(),
                query: None,
            };
        }
        if let QueryKeyHeads::Random = heads {
            let pick = rng.random_range(0..self.entries.len());
            let mut weights = vec![0.0; self.entries.len()];
            weights[pick] = 1.0;
            return Retrieval {
                value: self.entries[pick].value.clone(),
                weights,
                query: None,
            };
        }
        let query = heads.query(x_now);
        let (value, weights) = match heads {
            QueryKeyHeads::Learned { key, .. } => {
                let keys: Vec<Array1<f64>> = self
                    .entries
                    .iter()
                    .map(|e| key.forward(e.key_input.view()))
                    .collect();
                softmax_readout(
                    query.view(),
                    keys.iter().map(|k| k.view()),
                    self.entries.iter().map(|e| &e.value),
                    temperature,
                    value_dim,
                )
            }
            _ => softmax_readout(
                query.view(),
                self.entries.iter().map(|e| e.key.view()),
                self.entries.iter().map(|e| &e.value),
                temperature,
                value_dim,
            ),
        };
        Retrieval {
            value,
            weights,
            query: Some(query),
        }
    }

    /// Writes keys, values and meta as CSV: one row per entry.
    pub fn write_dump(&self, path: &Path, header: &str) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(header.as_bytes());
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let d_k = self.entries.front().map_or(0, |e| e.key.len());
            let d_v = self.entries.front().map_or(0, |e| e.value.len());
            let mut cols = vec![
                "entry".to_string(),
                "maze_id".into(),
                "episode".into(),
                "trial".into(),
                "goal".into(),
            ];
            cols.extend((0..d_k).map(|i| format!("k{i}")));
            cols.extend((0..d_v).map(|i| format!("v{i}")));
            w.write_record(&cols).map_err(|e| Error::Csv {
                path: path.into(),
                source: e,
            })?;
            for (i, e) in self.entries.iter().enumerate() {
                let mut row = vec![
                    i.to_string(),
                    e.meta.maze_id.to_string(),
                    e.meta.episode.to_string(),
                    e.meta.trial.to_string(),
                    e.meta.goal.map_or(String::new(), |g| (g + 1).to_string()),
                ];
                row.extend(e.key.iter().map(|v| v.to_string()));
                row.extend(e.value.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| Error::Csv {
                    path: path.into(),
                    source: e,
                })?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Scales a retrieved value by `sigmoid(gate(h))`. Returns the gated value
/// and the gate output.
pub fn gate_retrieval(gate: &Mlp, h: ArrayView1<f64>, value: &Array1<f64>) -> (Array1<f64>, f64) {
    let g = nn::sigmoid(gate.forward(h)[0]);
    (value * g, g)
}
