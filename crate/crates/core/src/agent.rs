//! Agent forward and backward passes.
//!
//! Per step:
//!
//! 1. `m = (m_max - m_min) * sigmoid(f_filter(b)) + m_min`
//! 2. `x = [r_prev, onehot(a_prev), obs] * m` (elementwise)
//! 3. `h = (1 - leak) h_prev + leak * tanh(W_rec h_prev + W_in x)`
//! 4. read the episodic buffer with the current observation
//! 5. optionally gate the read by `sigmoid(gate(h))`
//! 6. `e_wm = f_emb(h)`, `e_em = f_emb(v)`; attend from `e_wm` over
//!    `{e_wm, e_em}` with `1/sqrt(d_e)` scaling
//! 7. `Q = f_q_head(h_tilde)`
//!
//! Gradients stop at `h_prev` (the reservoir is not unrolled) and at stored
//! memory values; learned keys are recomputed from stored key inputs, so
//! the key network does receive gradient.

use std::ops::Range;

use ndarray::{Array1, ArrayView1, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{AttentionSlots, RunConfig};
use crate::maze::{Action, LOCAL_VIEW_LEN, NUM_ACTIONS};
use crate::memory::{EpisodicMemory, QueryKeyHeads, RetrievalMode};
use crate::nn::{self, Mlp, MlpCache};
use crate::reservoir::{Reservoir, ReservoirState};

/// Every trainable parameter group. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub filter: Mlp,
    pub query: Option<Mlp>,
    pub key: Option<Mlp>,
    pub embed: Mlp,
    pub q_head: Mlp,
    pub gate: Option<Mlp>,
}

impl AgentParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            filter: self.filter.zeros_like(),
            query: self.query.as_ref().map(Mlp::zeros_like),
            key: self.key.as_ref().map(Mlp::zeros_like),
            embed: self.embed.zeros_like(),
            q_head: self.q_head.zeros_like(),
            gate: self.gate.as_ref().map(Mlp::zeros_like),
        }
    }

    /// Named groups in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &Mlp)> {
        let mut g = vec![("filter", &self.filter)];
        if let Some(q) = &self.query {
            g.push(("query", q));
        }
        if let Some(k) = &self.key {
            g.push(("key", k));
        }
        g.push(("embed", &self.embed));
        g.push(("q_head", &self.q_head));
        if let Some(gate) = &self.gate {
            g.push(("gate", gate));
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Mlp)> {
        let mut g = vec![("filter", &mut self.filter)];
        if let Some(q) = &mut self.query {
            g.push(("query", q));
        }
        if let Some(k) = &mut self.key {
            g.push(("key", k));
        }
        g.push(("embed", &mut self.embed));
        g.push(("q_head", &mut self.q_head));
        if let Some(gate) = &mut self.gate {
            g.push(("gate", gate));
        }
        g
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.groups()
            .into_iter()
            .flat_map(|(_, m)| m.slices())
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.groups_mut()
            .into_iter()
            .flat_map(|(_, m)| m.slices_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, m)| m.num_params()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// What a forward pass was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardInputs {
    pub h_prev: ReservoirState,
    pub r_prev: f64,
    pub a_prev: Option<Action>,
    pub obs: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTrace {
    pub query: Array1<f64>,
    pub query_cache: Option<MlpCache>,
    /// Keys used for this read (recomputed for learned heads).
    pub keys: Vec<Array1<f64>>,
    pub key_caches: Vec<MlpCache>,
    pub weights: Vec<f64>,
    /// Ungated read-out.
    pub value: Array1<f64>,
    pub picked: Option<usize>,
}

/// All intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: ForwardInputs,
    pub filter_cache: MlpCache,
    pub filter_sigmoid: Array1<f64>,
    pub m: Array1<f64>,
    pub raw: Array1<f64>,
    pub x: Array1<f64>,
    pub h: ReservoirState,
    pub activation: Array1<f64>,
    pub retrieval: Option<RetrievalTrace>,
    pub gate_cache: Option<MlpCache>,
    pub gate: Option<f64>,
    /// Memory vector fed to the embedding (after gating).
    pub memory_in: Option<Array1<f64>>,
    pub emb_wm: MlpCache,
    pub emb_em: Option<MlpCache>,
    pub attention: Vec<f64>,
    pub h_tilde: Array1<f64>,
    pub q_cache: MlpCache,
    pub q: [f64; NUM_ACTIONS],
}

impl ForwardTrace {
    pub fn greedy_action(&self) -> Action {
        Action::from_index(argmax(&self.q))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..q.len() {
        if q[i] > q[best] {
            best = i;
        }
    }
    best
}

pub fn select_action<R: Rng + ?Sized>(q: &[f64; NUM_ACTIONS], epsilon: f64, rng: &mut R) -> Action {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1]");
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        Action::from_index(rng.random_range(0..NUM_ACTIONS))
    } else {
        Action::from_index(argmax(q))
    }
}

/// `[r_prev, onehot(a_prev), obs] * m`, plus the unfiltered concatenation.
pub fn build_input(
    r_prev: f64,
    a_prev: Option<Action>,
    obs: ArrayView1<f64>,
    m: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let d_in = 1 + NUM_ACTIONS + obs.len();
    assert_eq!(m.len(), d_in, "filter dimension mismatch");
    let mut raw = Array1::zeros(d_in);
    raw[0] = r_prev;
    if let Some(a) = a_prev {
        raw[1 + a.index()] = 1.0;
    }
    raw.slice_mut(ndarray::s![1 + NUM_ACTIONS..]).assign(&obs);
    let x = &raw * m;
    (raw, x)
}

/// `m = (m_max - m_min) * sigmoid(f_filter(b)) + m_min`. Returns the
/// cache, the sigmoid values and `m`.
pub fn compute_filter(
    filter: &Mlp,
    bias: &Array1<f64>,
    m_min: f64,
    m_max: f64,
) -> (MlpCache, Array1<f64>, Array1<f64>) {
    let cache = filter.forward_cached(bias.view());
    let sig = cache.output.mapv(nn::sigmoid);
    let m = sig.mapv(|s| (m_max - m_min) * s + m_min);
    (cache, sig, m)
}

/// Two-slot attention from `e_wm` over `{e_wm, e_em}`.
pub fn fuse_two_slot(e_wm: &Array1<f64>, e_em: &Array1<f64>) -> (Array1<f64>, Vec<f64>) {
    let scale = 1.0 / (e_wm.len() as f64).sqrt();
    let w = nn::softmax(&[e_wm.dot(e_wm) * scale, e_wm.dot(e_em) * scale]);
    let mut out = e_wm * w[0];
    out.scaled_add(w[1], e_em);
    (out, w)
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub mode: RetrievalMode,
    pub attention: AttentionSlots,
    pub obs_dim: usize,
    pub context: Range<usize>,
    pub m_min: f64,
    pub m_max: f64,
    pub temperature: f64,
    pub reservoir: Reservoir,
    pub bias: Array1<f64>,
    pub online: AgentParams,
    pub target: AgentParams,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        cfg: &RunConfig,
        mode: RetrievalMode,
        obs_dim: usize,
    ) -> Self {
        let d_ctx = cfg.env.d_ctx;
        let d_in = 1 + NUM_ACTIONS + obs_dim;
        let a = &cfg.agent;
        let n = cfg.reservoir.n_units;
        let reservoir = Reservoir::new(rng, &cfg.reservoir, d_in);
        let bias: Array1<f64> = (0..a.bias_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let filter = Mlp::new(rng, &[a.bias_dim, a.filter_hidden, d_in]);
        let (query, key) = if mode == RetrievalMode::Learned {
            (
                Some(Mlp::new(rng, &[obs_dim, cfg.memory.hidden, obs_dim])),
                Some(Mlp::new(rng, &[obs_dim, cfg.memory.hidden, obs_dim])),
            )
        } else {
            (None, None)
        };
        let embed = Mlp::new(rng, &[n, a.embed_hidden, a.embed_dim]);
        let q_head = Mlp::new(rng, &[a.embed_dim, a.q_hidden, NUM_ACTIONS]);
        let gate = (a.gating && mode != RetrievalMode::None)
            .then(|| Mlp::new(rng, &[n, a.gate_hidden, 1]));
        let online = AgentParams {
            filter,
            query,
            key,
            embed,
            q_head,
            gate,
        };
        let d_k = match mode {
            RetrievalMode::Identity => d_ctx,
            _ => obs_dim,
        };
        Self {
            mode,
            attention: a.attention,
            obs_dim,
            context: LOCAL_VIEW_LEN..LOCAL_VIEW_LEN + d_ctx,
            m_min: a.m_min,
            m_max: a.m_max,
            temperature: cfg.memory.temperature.unwrap_or((d_k as f64).sqrt()),
            reservoir,
            bias,
            target: online.clone(),
            online,
        }
    }

    pub fn n_units(&self) -> usize {
        self.reservoir.n_units
    }

    pub fn heads<'a>(&self, params: &'a AgentParams) -> Option<QueryKeyHeads<'a>> {
        match self.mode {
            RetrievalMode::None => None,
            RetrievalMode::Identity => Some(QueryKeyHeads::Identity {
                context: self.context.clone(),
            }),
            RetrievalMode::BottomUp => Some(QueryKeyHeads::BottomUp),
            RetrievalMode::Random => Some(QueryKeyHeads::Random),
            RetrievalMode::Learned => Some(QueryKeyHeads::Learned {
                query: params.query.as_ref().expect("learned mode has a query net"),
                key: params.key.as_ref().expect("learned mode has a key net"),
            }),
        }
    }

    pub fn initial_state(&self) -> ReservoirState {
        self.reservoir.reset_state()
    }

    /// Hard copy of the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
    }

    pub fn filter(&self, params: &AgentParams) -> Array1<f64> {
        compute_filter(&params.filter, &self.bias, self.m_min, self.m_max).2
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        params: &AgentParams,
        memory: &EpisodicMemory,
        inputs: ForwardInputs,
        rng: &mut R,
    ) -> ForwardTrace {
        assert_eq!(
            inputs.obs.len(),
            self.obs_dim,
            "observation dimension mismatch"
        );
        let (filter_cache, filter_sigmoid, m) =
            compute_filter(&params.filter, &self.bias, self.m_min, self.m_max);
        let (raw, x) = build_input(inputs.r_prev, inputs.a_prev, inputs.obs.view(), &m);
        let (h, activation) = self
            .reservoir
            .step_with_activation(&inputs.h_prev, x.view());
        let n = self.n_units();

        let retrieval = self
            .heads(params)
            .map(|heads| self.read(&heads, memory, inputs.obs.view(), rng));

        let (gate_cache, gate, memory_in) = match (&retrieval, &params.gate) {
            (Some(r), Some(gate_net)) => {
                let cache = gate_net.forward_cached(h.0.view());
                let g = nn::sigmoid(cache.output[0]);
                (Some(cache), Some(g), Some(&r.value * g))
            }
            (Some(r), None) => (None, None, Some(r.value.clone())),
            (None, _) => (None, None, None),
        };
        debug_assert!(memory_in.as_ref().is_none_or(|v| v.len() == n));

        let emb_wm = params.embed.forward_cached(h.0.view());
        let emb_em = memory_in
            .as_ref()
            .map(|v| params.embed.forward_cached(v.view()));
        let (h_tilde, attention) = match (&emb_em, self.attention) {
            (None, _) => (emb_wm.output.clone(), vec![1.0]),
            (Some(em), AttentionSlots::SingleSlot) => (em.output.clone(), vec![1.0]),
            (Some(em), AttentionSlots::TwoSlot) => fuse_two_slot(&emb_wm.output, &em.output),
        };
        let q_cache = params.q_head.forward_cached(h_tilde.view());
        let q = [
            q_cache.output[0],
            q_cache.output[1],
            q_cache.output[2],
            q_cache.output[3],
        ];
        ForwardTrace {
            inputs,
            filter_cache,
            filter_sigmoid,
            m,
            raw,
            x,
            h,
            activation,
            retrieval,
            gate_cache,
            gate,
            memory_in,
            emb_wm,
            emb_em,
            attention,
            h_tilde,
            q_cache,
            q,
        }
    }

    fn read<R: Rng + ?Sized>(
        &self,
        heads: &QueryKeyHeads<'_>,
        memory: &EpisodicMemory,
        obs: ArrayView1<f64>,
        rng: &mut R,
    ) -> RetrievalTrace {
        let n = self.n_units();
        let empty = |query| RetrievalTrace {
            query,
            query_cache: None,
            keys: Vec::new(),
            key_caches: Vec::new(),
            weights: Vec::new(),
            value: Array1::zeros(n),
            picked: None,
        };
        match heads {
            QueryKeyHeads::Random => {
                if memory.is_empty() {
                    return empty(Array1::zeros(0));
                }
                let pick = rng.random_range(0..memory.len());
                let mut weights = vec![0.0; memory.len()];
                weights[pick] = 1.0;
                RetrievalTrace {
                    query: Array1::zeros(0),
                    query_cache: None,
                    keys: Vec::new(),
                    key_caches: Vec::new(),
                    weights,
                    value: memory.entries()[pick].value.clone(),
                    picked: Some(pick),
                }
            }
            QueryKeyHeads::Learned { query, key } => {
                let query_cache = query.forward_cached(obs);
                let q = query_cache.output.clone();
                if memory.is_empty() {
                    let mut t = empty(q);
                    t.query_cache = Some(query_cache);
                    return t;
                }
                let key_caches: Vec<MlpCache> = memory
                    .entries()
                    .iter()
                    .map(|e| key.forward_cached(e.key_input.view()))
                    .collect();
                let keys: Vec<Array1<f64>> = key_caches.iter().map(|c| c.output.clone()).collect();
                let (value, weights) = crate::memory::softmax_readout(
                    q.view(),
                    keys.iter().map(|k| k.view()),
                    memory.entries().iter().map(|e| &e.value),
                    self.temperature,
                    n,
                );
                RetrievalTrace {
                    query: q,
                    query_cache: Some(query_cache),
                    keys,
                    key_caches,
                    weights,
                    value,
                    picked: None,
                }
            }
            _ => {
                let q = heads.query(obs);
                if memory.is_empty() {
                    return empty(q);
                }
                let keys: Vec<Array1<f64>> =
                    memory.entries().iter().map(|e| e.key.clone()).collect();
                let (value, weights) = crate::memory::softmax_readout(
                    q.view(),
                    keys.iter().map(|k| k.view()),
                    memory.entries().iter().map(|e| &e.value),
                    self.temperature,
                    n,
                );
                RetrievalTrace {
                    query: q,
                    query_cache: None,
                    keys,
                    key_caches: Vec::new(),
                    weights,
                    value,
                    picked: None,
                }
            }
        }
    }

    /// Backpropagates `dL/dQ` (plus a uniform `dL/dm_i` term from the filter
    /// penalty) into `grads`. `memory` must be the buffer the trace was
    /// computed against.
    pub fn backward(
        &self,
        params: &AgentParams,
        memory: &EpisodicMemory,
        trace: &ForwardTrace,
        grad_q: &[f64; NUM_ACTIONS],
        grad_m_extra: f64,
        grads: &mut AgentParams,
    ) {
        let gq = Array1::from_vec(grad_q.to_vec());
        let g_ht = params
            .q_head
            .backward(&trace.q_cache, gq.view(), &mut grads.q_head);

        let e_wm = &trace.emb_wm.output;
        let (g_ewm, g_eem) = match (&trace.emb_em, self.attention) {
            (None, _) => (g_ht, None),
            (Some(_), AttentionSlots::SingleSlot) => (Array1::zeros(e_wm.len()), Some(g_ht)),
            (Some(em), AttentionSlots::TwoSlot) => {
                let e_em = &em.output;
                let w = &trace.attention;
                let scale = 1.0 / (e_wm.len() as f64).sqrt();
                let mut g_wm = &g_ht * w[0];
                let mut g_em = &g_ht * w[1];
                let gw = [g_ht.dot(e_wm), g_ht.dot(e_em)];
                let gs = nn::softmax_backward(w, &gw);
                g_wm.scaled_add(2.0 * gs[0] * scale, e_wm);
                g_wm.scaled_add(gs[1] * scale, e_em);
                g_em.scaled_add(gs[1] * scale, e_wm);
                (g_wm, Some(g_em))
            }
        };

        let mut g_h = params
            .embed
            .backward(&trace.emb_wm, g_ewm.view(), &mut grads.embed);

        if let (Some(em_cache), Some(g_eem)) = (&trace.emb_em, g_eem) {
            let g_mem = params
                .embed
                .backward(em_cache, g_eem.view(), &mut grads.embed);
            let retrieval = trace
                .retrieval
                .as_ref()
                .expect("memory embedding implies a read");
            let g_value = match (&trace.gate_cache, trace.gate, &params.gate) {
                (Some(cache), Some(g), Some(gate_net)) => {
                    let g_gate = g_mem.dot(&retrieval.value);
                    let g_z = Array1::from_elem(1, g_gate * g * (1.0 - g));
                    let gh_gate = gate_net.backward(
                        cache,
                        g_z.view(),
                        grads.gate.as_mut().expect("gate grads"),
                    );
                    g_h += &gh_gate;
                    g_mem * g
                }
                _ => g_mem,
            };
            if let (Some(qc), Some(query_net), Some(key_net)) =
                (&retrieval.query_cache, &params.query, &params.key)
            {
                if !retrieval.weights.is_empty() {
                    assert_eq!(
                        memory.len(),
                        retrieval.weights.len(),
                        "memory changed since forward"
                    );
                    let g_alpha: Vec<f64> = memory
                        .entries()
                        .iter()
                        .map(|e| g_value.dot(&e.value))
                        .collect();
                    let g_logit = nn::softmax_backward(&retrieval.weights, &g_alpha);
                    let inv_t = 1.0 / self.temperature;
                    let mut g_query = Array1::zeros(retrieval.query.len());
                    let gk = grads.key.as_mut().expect("key grads");
                    for ((gl, k), kc) in g_logit
                        .iter()
                        .zip(&retrieval.keys)
                        .zip(&retrieval.key_caches)
                    {
                        let c = gl * inv_t;
                        if c == 0.0 {
                            continue;
                        }
                        g_query.scaled_add(c, k);
                        let g_key = &retrieval.query * c;
                        key_net.backward(kc, g_key.view(), gk);
                    }
                    query_net.backward(
                        qc,
                        g_query.view(),
                        grads.query.as_mut().expect("query grads"),
                    );
                }
            }
        }

        let g_x = self.reservoir.input_gradient(&trace.activation, g_h.view());
        let span = self.m_max - self.m_min;
        let mut g_f = Array1::zeros(g_x.len());
        Zip::from(&mut g_f)
            .and(&g_x)
            .and(&trace.raw)
            .and(&trace.filter_sigmoid)
            .for_each(|gf, &gx, &raw, &s| {
                *gf = (gx * raw + grad_m_extra) * span * s * (1.0 - s);
            });
        params
            .filter
            .backward(&trace.filter_cache, g_f.view(), &mut grads.filter);
    }
}
