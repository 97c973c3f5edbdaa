//! Representational analyses on frozen checkpoints: query/key/value vectors
//! for held-out probe events, cosine similarity matrices and query-key
//! alignment summaries per goal.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{argmax, Agent, ForwardInputs};
use crate::checkpoint::Checkpoint;
use crate::config::EnvConfig;
use crate::harness::stream_seed;
use crate::maze::{
    context_for_trial, generate_maze, local_view, Action, EpisodeType, GoalTransform, GridPos,
    Maze, Observation, Variant,
};
use crate::memory::EpisodicMemory;
use crate::{parallel, Error, Result};

/// Name of the similarity measure, written into every analysis output.
pub const SIMILARITY: &str = "cosine";

#[derive(Debug, Clone, PartialEq)]
pub struct EventRepresentation {
    pub event: usize,
    pub goal: usize,
    pub maze_id: u64,
    pub query: Array1<f64>,
    pub key: Array1<f64>,
    pub value: Array1<f64>,
}

/// Held-out probe mazes. Drawn from their own stream, so they never
/// coincide with training mazes.
pub fn probe_mazes(
    variant: Variant,
    env: &EnvConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<(Maze, GridPos)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "probe"));
    (0..count)
        .map(|i| {
            let maze = generate_maze(
                &mut rng,
                variant,
                env.grid_size,
                env.d_ctx,
                1_000_000 + i as u64,
            )?;
            let n = env.grid_size;
            let start = loop {
                let idx = rng.random_range(0..n * n);
                let p = GridPos::new(idx / n, idx % n);
                if !maze.is_target(p) {
                    break p;
                }
            };
            Ok((maze, start))
        })
        .collect()
}

fn observation(
    pos: GridPos,
    maze: &Maze,
    context: Array1<f64>,
    variant: Variant,
    goal: usize,
) -> Array1<f64> {
    Observation {
        local_view: local_view(pos, maze.grid_size),
        context,
        goal_bit: (variant == Variant::MultiGoal).then_some(goal as f64),
    }
    .flatten()
}

/// One probe event: a greedy explore trial from `start` toward goal `goal`
/// with an empty buffer and a fresh reservoir. The value is the final
/// reservoir state and the key is computed from the final observation, as
/// at encoding time; the query comes from the exploit-context observation at
/// the start cell.
#[allow(clippy::too_many_arguments)]
fn probe_event(
    agent: &Agent,
    env: &EnvConfig,
    variant: Variant,
    transform: &GoalTransform,
    maze: &Maze,
    start: GridPos,
    goal: usize,
    event: usize,
) -> Result<EventRepresentation> {
    let heads = agent.heads(&agent.online).ok_or_else(|| Error::Config {
        key: "condition".into(),
        msg: "checkpoint has no retrieval heads (no-memory condition)".into(),
    })?;
    let goal_opt = (variant == Variant::MultiGoal).then_some(goal);
    let explore_ctx = context_for_trial(maze, variant, EpisodeType::Explore, transform, goal_opt);
    let exploit_ctx = context_for_trial(maze, variant, EpisodeType::Exploit, transform, goal_opt);
    let target = maze.targets[goal];
    let memory = EpisodicMemory::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(event as u64);

    let mut pos = start;
    let mut obs = observation(pos, maze, explore_ctx.clone(), variant, goal);
    let mut inputs = ForwardInputs {
        h_prev: agent.initial_state(),
        r_prev: 0.0,
        a_prev: None,
        obs: obs.clone(),
    };
    let mut trace = agent.forward(&agent.online, &memory, inputs, &mut rng);
    for _ in 0..env.step_limit {
        let a = Action::from_index(argmax(&trace.q));
        pos = a.apply(pos, maze.grid_size);
        let reward = if pos == target {
            env.r_target
        } else {
            -env.c_step
        };
        obs = observation(pos, maze, explore_ctx.clone(), variant, goal);
        inputs = ForwardInputs {
            h_prev: trace.h.clone(),
            r_prev: reward,
            a_prev: Some(a),
            obs: obs.clone(),
        };
        trace = agent.forward(&agent.online, &memory, inputs, &mut rng);
        if pos == target {
            break;
        }
    }
    let query_obs = observation(start, maze, exploit_ctx, variant, goal);
    Ok(EventRepresentation {
        event,
        goal,
        maze_id: maze.id,
        query: heads.query(query_obs.view()),
        key: heads.key(obs.view()),
        value: trace.h.0.clone(),
    })
}

/// Probe events for every (maze, goal) pair, in maze-major order.
pub fn collect_representations(
    checkpoint: &Checkpoint,
    probe_count: usize,
) -> Result<Vec<EventRepresentation>> {
    let agent = checkpoint.restore_agent()?;
    let transform = checkpoint.transform()?;
    let cfg = &checkpoint.config;
    let variant = checkpoint.cell.condition().env_variant;
    let mazes = probe_mazes(variant, &cfg.env, probe_count, checkpoint.seed)?;
    let goals = variant.num_goals();
    let jobs: Vec<(usize, usize)> = (0..mazes.len())
        .flat_map(|m| (0..goals).map(move |g| (m, g)))
        .collect();
    parallel::map(&jobs, |&(m, g)| {
        let (maze, start) = &mazes[m];
        probe_event(
            &agent,
            &cfg.env,
            variant,
            &transform,
            maze,
            *start,
            g,
            m * goals + g,
        )
    })
    .into_iter()
    .collect()
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Entry `(i, j)` is `cos(a_i, b_j)`; undefined entries are NaN.
pub fn similarity_matrix(a: &[Array1<f64>], b: &[Array1<f64>]) -> Array2<f64> {
    let mut m = Array2::from_elem((a.len(), b.len()), f64::NAN);
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            if let Some(c) = cosine(ai, bj) {
                m[[i, j]] = c;
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoalAlignment {
    pub goal: usize,
    pub events: usize,
    pub matched: f64,
    pub mismatched: f64,
    pub margin: f64,
    /// Standard error of the per-event margins.
    pub margin_sem: f64,
}

impl GoalAlignment {
    /// Margin within two standard errors of zero (NaN counts as within).
    pub fn indistinguishable_from_zero(&self) -> bool {
        self.margin.abs().partial_cmp(&(2.0 * self.margin_sem)) != Some(std::cmp::Ordering::Greater)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WithinBetween {
    pub within: f64,
    pub between: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSummary {
    pub goals: Vec<GoalAlignment>,
    pub query: WithinBetween,
    pub key: WithinBetween,
    pub value: WithinBetween,
    /// Cosine of values across distinct events, pooled over goals.
    pub value_cross_event: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn within_between(
    reps: &[EventRepresentation],
    pick: impl Fn(&EventRepresentation) -> &Array1<f64>,
) -> WithinBetween {
    let (mut within, mut between) = (Vec::new(), Vec::new());
    for (i, a) in reps.iter().enumerate() {
        for b in &reps[i + 1..] {
            if let Some(c) = cosine(pick(a), pick(b)) {
                if a.goal == b.goal {
                    within.push(c);
                } else {
                    between.push(c);
                }
            }
        }
    }
    WithinBetween {
        within: mean(&within),
        between: mean(&between),
    }
}

/// Per goal: mean matched-pair `cos(q_i, k_i)`, mean mismatched-pair
/// `cos(q_i, k_j)` over distinct events `i != j` of the same goal, and their
/// difference. The margin's standard error comes from per-event margins.
pub fn alignment_scores(reps: &[EventRepresentation]) -> AlignmentSummary {
    let mut goal_ids: Vec<usize> = reps.iter().map(|r| r.goal).collect();
    goal_ids.sort_unstable();
    goal_ids.dedup();
    let goals = goal_ids
        .into_iter()
        .map(|g| {
            let events: Vec<&EventRepresentation> = reps.iter().filter(|r| r.goal == g).collect();
            let mut matched = Vec::new();
            let mut mismatched = Vec::new();
            let mut margins = Vec::new();
            for (i, a) in events.iter().enumerate() {
                let own = cosine(&a.query, &a.key);
                let others: Vec<f64> = events
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .filter_map(|(_, b)| cosine(&a.query, &b.key))
                    .collect();
                if let Some(c) = own {
                    matched.push(c);
                }
                mismatched.extend_from_slice(&others);
                if let (Some(c), false) = (own, others.is_empty()) {
                    margins.push(c - mean(&others));
                }
            }
            let (margin, margin_sem) = crate::harness::mean_sem(&margins);
            GoalAlignment {
                goal: g,
                events: events.len(),
                matched: mean(&matched),
                mismatched: mean(&mismatched),
                margin,
                margin_sem,
            }
        })
        .collect();
    let mut value_cross_event = Vec::new();
    for (i, a) in reps.iter().enumerate() {
        for b in &reps[i + 1..] {
            if let Some(c) = cosine(&a.value, &b.value) {
                value_cross_event.push(c);
            }
        }
    }
    AlignmentSummary {
        goals,
        query: within_between(reps, |r| &r.query),
        key: within_between(reps, |r| &r.key),
        value: within_between(reps, |r| &r.value),
        value_cross_event,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv {
        path: path.into(),
        source: e,
    }
}

/// Writes a matrix with row and column indices; NaN entries stay empty.
pub fn write_matrix(path: &Path, header: &str, m: &Array2<f64>) -> Result<()> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut head = vec!["row".to_string()];
        head.extend((0..m.ncols()).map(|j| format!("c{j}")));
        w.write_record(&head).map_err(csv_err(path))?;
        for (i, row) in m.rows().into_iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_representations(
    path: &Path,
    header: &str,
    reps: &[EventRepresentation],
) -> Result<()> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let (dq, dk, dv) = reps
            .first()
            .map_or((0, 0, 0), |r| (r.query.len(), r.key.len(), r.value.len()));
        let mut head: Vec<String> = ["event", "goal", "maze_id"].map(String::from).to_vec();
        head.extend((0..dq).map(|i| format!("q{i}")));
        head.extend((0..dk).map(|i| format!("k{i}")));
        head.extend((0..dv).map(|i| format!("v{i}")));
        w.write_record(&head).map_err(csv_err(path))?;
        for r in reps {
            let mut rec = vec![
                r.event.to_string(),
                (r.goal + 1).to_string(),
                r.maze_id.to_string(),
            ];
            for v in r.query.iter().chain(&r.key).chain(&r.value) {
                rec.push(v.to_string());
            }
            w.write_record(&rec).map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Summary as `metric,goal,value` rows. Goals are 1-based; `all` marks
/// pooled statistics.
pub fn write_summary(path: &Path, header: &str, s: &AlignmentSummary) -> Result<()> {
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for g in &s.goals {
        let goal = (g.goal + 1).to_string();
        rows.push(("matched".into(), goal.clone(), g.matched));
        rows.push(("mismatched".into(), goal.clone(), g.mismatched));
        rows.push(("margin".into(), goal.clone(), g.margin));
        rows.push(("margin_sem".into(), goal, g.margin_sem));
    }
    for (name, wb) in [("query", s.query), ("key", s.key), ("value", s.value)] {
        rows.push((format!("{name}_within_goal"), "all".into(), wb.within));
        rows.push((format!("{name}_between_goal"), "all".into(), wb.between));
    }
    rows.push((
        "value_cross_event_mean".into(),
        "all".into(),
        mean(&s.value_cross_event),
    ));
    let mut buf = format!("{header}# similarity: {SIMILARITY}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["metric", "goal", "value"])
            .map_err(csv_err(path))?;
        for (m, g, v) in rows {
            w.write_record([m, g, v.to_string()])
                .map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
