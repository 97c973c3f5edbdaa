//! Experiment driver: episode loop with online learning, per-trial records,
//! seed-level summaries and cross-seed aggregation.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agent::{select_action, Agent, ForwardInputs};
use crate::checkpoint::Checkpoint;
use crate::config::{CellName, Condition, ResetPolicy, RunConfig, Schedule};
use crate::maze::{EpisodeType, GoalTransform, GridPos, Variant, WaterMaze};
use crate::memory::{EntryMeta, EpisodicMemory};
use crate::reservoir::ReservoirState;
use crate::trainer::{td_target_from_q, ReplayBuffer, ReplayItem, TdSample, Trainer};
use crate::{parallel, Error, Result};

/// Minimal number of moves between two cells of an open `grid_size` grid,
/// by breadth-first search.
pub fn shortest_path(grid_size: usize, start: GridPos, target: GridPos) -> usize {
    assert!(
        start.row < grid_size
            && start.col < grid_size
            && target.row < grid_size
            && target.col < grid_size,
        "cells must lie inside the grid"
    );
    let idx = |p: GridPos| p.row * grid_size + p.col;
    let mut dist = vec![usize::MAX; grid_size * grid_size];
    let mut queue = VecDeque::new();
    dist[idx(start)] = 0;
    queue.push_back(start);
    while let Some(p) = queue.pop_front() {
        if p == target {
            return dist[idx(p)];
        }
        for a in crate::maze::Action::ALL {
            let q = a.apply(p, grid_size);
            if dist[idx(q)] == usize::MAX {
                dist[idx(q)] = dist[idx(p)] + 1;
                queue.push_back(q);
            }
        }
    }
    panic!("target unreachable on an open grid");
}

/// Goals for the trials of one explore episode. `explore_index` counts
/// explore episodes only. Blocked schedules hold one goal for
/// `block_length` consecutive explore episodes, alternating; interleaved
/// schedules draw a goal per trial.
pub fn schedule_goals<R: Rng + ?Sized>(
    explore_index: u64,
    schedule: Schedule,
    block_length: usize,
    trials: usize,
    rng: &mut R,
) -> Vec<usize> {
    match schedule {
        Schedule::Blocked => {
            let g = ((explore_index / block_length.max(1) as u64) % 2) as usize;
            vec![g; trials]
        }
        Schedule::Interleaved => (0..trials).map(|_| rng.random_range(0..2)).collect(),
    }
}

/// Exploit goals are redrawn every trial under both schedules.
pub fn exploit_goals<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Vec<usize> {
    (0..trials).map(|_| rng.random_range(0..2)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub run_id: String,
    pub seed: u64,
    pub episode: u64,
    pub trial: usize,
    pub episode_type: EpisodeType,
    /// 1-based goal for multi-goal runs.
    pub goal: Option<usize>,
    pub maze_id: u64,
    pub steps_taken: usize,
    pub shortest_path: usize,
    pub excess_steps: usize,
    pub total_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub loss: f64,
    pub mean_abs_td: f64,
    pub mean_m: f64,
    pub epsilon: f64,
    pub grad_norm: f64,
}

/// Mean gate output over the steps of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub episode: u64,
    pub episode_type: EpisodeType,
    pub trial: usize,
    pub mean_gate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub learn: bool,
    /// Fixed exploration rate instead of the configured schedule.
    pub epsilon: Option<f64>,
    pub episodes: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            learn: true,
            epsilon: None,
            episodes: None,
        }
    }
}

/// Seeds for the independent random streams of one run. Every cell run
/// with the same seed sees the same maze sequence.
pub fn stream_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, mixed into the seed with splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed.wrapping_add(h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn transform_for(cfg: &RunConfig, condition: &Condition, seed: u64) -> GoalTransform {
    let goals = condition.env_variant.num_goals();
    if condition.random_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "transform"));
        GoalTransform::random_orthogonal(&mut rng, cfg.env.d_ctx, goals)
    } else {
        GoalTransform::identity(cfg.env.d_ctx, goals)
    }
}

/// Live state of one (cell, seed) run.
pub struct Run {
    pub cfg: RunConfig,
    pub condition: Condition,
    pub seed: u64,
    pub run_id: String,
    pub env: WaterMaze,
    pub agent: Agent,
    pub memory: EpisodicMemory,
    pub trainer: Trainer,
    pub options: RunOptions,
    total_episodes: usize,
    h: ReservoirState,
    policy_rng: ChaCha8Rng,
    schedule_rng: ChaCha8Rng,
    explore_episodes: u64,
    replay: ReplayBuffer,
    snapshot: Option<Arc<EpisodicMemory>>,
    metrics: Vec<MetricsRow>,
    pending: MetricsAccumulator,
    gates: Vec<GateSample>,
}

#[derive(Debug, Clone, Copy, Default)]
struct MetricsAccumulator {
    n: u64,
    loss: f64,
    td: f64,
    m: f64,
    eps: f64,
    grad: f64,
}

impl Run {
    pub fn new(cfg: &RunConfig, cell: CellName, seed: u64, options: RunOptions) -> Result<Self> {
        let condition = cell.condition();
        Self::with_condition(
            cfg,
            condition,
            transform_for(cfg, &condition, seed),
            seed,
            options,
        )
    }

    /// Like [`Run::new`] with an explicit context transform.
    pub fn with_condition(
        cfg: &RunConfig,
        condition: Condition,
        transform: GoalTransform,
        seed: u64,
        options: RunOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        let env = WaterMaze::new(
            cfg.env.clone(),
            condition.env_variant,
            transform,
            stream_seed(seed, "env"),
        )?;
        let mut agent_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "agent"));
        let agent = Agent::new(&mut agent_rng, cfg, condition.retrieval_mode, env.obs_dim());
        let trainer = Trainer::new(cfg.trainer.clone(), &agent);
        let h = agent.initial_state();
        let total_episodes = options
            .episodes
            .unwrap_or_else(|| cfg.episodes_for(condition.name));
        Ok(Self {
            run_id: format!("{}/{}", condition.name, seed),
            memory: EpisodicMemory::new(cfg.memory.capacity),
            replay: ReplayBuffer::new(if cfg.trainer.replay_batch > 0 {
                cfg.trainer.replay_capacity
            } else {
                0
            }),
            cfg: cfg.clone(),
            condition,
            seed,
            env,
            agent,
            trainer,
            options,
            total_episodes,
            h,
            policy_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "policy")),
            schedule_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "schedule")),
            explore_episodes: 0,
            snapshot: None,
            metrics: Vec::new(),
            pending: MetricsAccumulator::default(),
            gates: Vec::new(),
        })
    }

    pub fn total_episodes(&self) -> usize {
        self.total_episodes
    }

    pub fn epsilon(&self, episode: u64) -> f64 {
        if let Some(e) = self.options.epsilon {
            return e;
        }
        let t = &self.cfg.trainer;
        let horizon = t.epsilon_decay_fraction * self.total_episodes as f64;
        if horizon <= 0.0 || episode as f64 >= horizon {
            t.epsilon_end
        } else {
            t.epsilon_start + (t.epsilon_end - t.epsilon_start) * episode as f64 / horizon
        }
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn gate_samples(&self) -> &[GateSample] {
        &self.gates
    }

    /// Runs one episode (all of its trials) and returns one record per trial.
    pub fn run_episode(&mut self) -> Result<Vec<TrialRecord>> {
        let episode_type = self.env.advance_episode()?;
        let episode = self.env.state().expect("episode started").episode_index;
        let trials = self.cfg.env.trials_per_episode;
        let goals: Vec<Option<usize>> = if self.condition.env_variant == Variant::MultiGoal {
            let g = match episode_type {
                EpisodeType::Explore => {
                    let sched = self.condition.schedule.unwrap_or(Schedule::Interleaved);
                    let g = schedule_goals(
                        self.explore_episodes,
                        sched,
                        self.cfg.harness.block_length,
                        trials,
                        &mut self.schedule_rng,
                    );
                    self.explore_episodes += 1;
                    g
                }
                EpisodeType::Exploit => exploit_goals(trials, &mut self.schedule_rng),
            };
            g.into_iter().map(Some).collect()
        } else {
            if episode_type == EpisodeType::Explore {
                self.explore_episodes += 1;
            }
            vec![None; trials]
        };
        if self.cfg.reservoir.reset == ResetPolicy::Episode {
            self.h = self.agent.initial_state();
        }
        let mut records = Vec::with_capacity(trials);
        for (trial, goal) in goals.into_iter().enumerate() {
            records.push(self.run_trial(episode, episode_type, trial, goal)?);
        }
        self.env.end_episode();
        Ok(records)
    }

    fn run_trial(
        &mut self,
        episode: u64,
        episode_type: EpisodeType,
        trial: usize,
        goal: Option<usize>,
    ) -> Result<TrialRecord> {
        let obs = self.env.begin_trial(trial, goal);
        if self.cfg.reservoir.reset == ResetPolicy::Trial {
            self.h = self.agent.initial_state();
        }
        let maze_id = self.env.state().expect("trial started").current_maze.id;
        let eps = self.epsilon(episode);
        let gamma = self.cfg.trainer.gamma;
        let replay_batch = self.cfg.trainer.replay_batch;

        let inputs = ForwardInputs {
            h_prev: self.h.clone(),
            r_prev: 0.0,
            a_prev: None,
            obs: obs.flatten(),
        };
        let mut trace = self.agent.forward(
            &self.agent.online,
            &self.memory,
            inputs,
            &mut self.policy_rng,
        );
        let mut total_reward = 0.0;
        let mut gate_sum = 0.0;
        let mut gate_n = 0usize;
        let last = loop {
            if let Some(g) = trace.gate {
                gate_sum += g;
                gate_n += 1;
            }
            let action = select_action(&trace.q, eps, &mut self.policy_rng);
            let step = self.env.step(action);
            total_reward += step.reward;
            let next_inputs = ForwardInputs {
                h_prev: trace.h.clone(),
                r_prev: step.reward,
                a_prev: Some(action),
                obs: step.observation.flatten(),
            };
            let next = self.agent.forward(
                &self.agent.online,
                &self.memory,
                next_inputs,
                &mut self.policy_rng,
            );

            if self.options.learn {
                let y = if step.done {
                    step.reward
                } else {
                    let target_q = self
                        .agent
                        .forward(
                            &self.agent.target,
                            &self.memory,
                            next.inputs.clone(),
                            &mut self.policy_rng,
                        )
                        .q;
                    td_target_from_q(step.reward, false, gamma, &next.q, &target_q)
                };
                let mut replayed = Vec::new();
                if replay_batch > 0 {
                    for _ in 0..replay_batch {
                        let Some(item) = self.replay.sample(&mut self.policy_rng).cloned() else {
                            break;
                        };
                        let t = self.agent.forward(
                            &self.agent.online,
                            &item.memory,
                            item.inputs.clone(),
                            &mut self.policy_rng,
                        );
                        let y_r = match (&item.next_inputs, item.done) {
                            (Some(ni), false) => {
                                let on = self
                                    .agent
                                    .forward(
                                        &self.agent.online,
                                        &item.memory,
                                        ni.clone(),
                                        &mut self.policy_rng,
                                    )
                                    .q;
                                let tq = self
                                    .agent
                                    .forward(
                                        &self.agent.target,
                                        &item.memory,
                                        ni.clone(),
                                        &mut self.policy_rng,
                                    )
                                    .q;
                                td_target_from_q(item.reward, false, gamma, &on, &tq)
                            }
                            _ => item.reward,
                        };
                        replayed.push((t, item.action, y_r, item.memory));
                    }
                }
                let mut batch = vec![(
                    TdSample {
                        trace: &trace,
                        action,
                        target: y,
                    },
                    &self.memory,
                )];
                for (t, a, y_r, mem) in &replayed {
                    batch.push((
                        TdSample {
                            trace: t,
                            action: *a,
                            target: *y_r,
                        },
                        mem.as_ref(),
                    ));
                }
                let stats = self.trainer.update_step(&mut self.agent, &batch);
                self.record_metrics(episode, eps, &stats);
                if replay_batch > 0 {
                    let snapshot = self
                        .snapshot
                        .get_or_insert_with(|| Arc::new(self.memory.clone()))
                        .clone();
                    self.replay.push(ReplayItem {
                        inputs: trace.inputs.clone(),
                        action,
                        reward: step.reward,
                        done: step.done,
                        next_inputs: (!step.done).then(|| next.inputs.clone()),
                        memory: snapshot,
                    });
                }
            }
            trace = next;
            if step.done {
                break step;
            }
        };
        self.h = trace.h.clone();

        if last.info.reached_target || self.cfg.memory.store_on_timeout {
            if let Some(heads) = self.agent.heads(&self.agent.online) {
                self.memory.encode(
                    &heads,
                    trace.inputs.obs.view(),
                    &trace.h.0,
                    EntryMeta {
                        maze_id,
                        episode,
                        trial,
                        goal,
                    },
                );
                self.snapshot = None;
            }
        }
        if gate_n > 0 {
            self.gates.push(GateSample {
                episode,
                episode_type,
                trial,
                mean_gate: gate_sum / gate_n as f64,
            });
        }

        let shortest = last.info.shortest_path;
        let steps = last.info.steps_taken;
        let excess = if last.info.reached_target {
            steps - shortest
        } else {
            self.cfg.env.step_limit.saturating_sub(shortest)
        };
        Ok(TrialRecord {
            run_id: self.run_id.clone(),
            seed: self.seed,
            episode,
            trial,
            episode_type,
            goal: goal.map(|g| g + 1),
            maze_id,
            steps_taken: steps,
            shortest_path: shortest,
            excess_steps: excess,
            total_reward,
        })
    }

    fn record_metrics(&mut self, episode: u64, eps: f64, stats: &crate::trainer::StepStats) {
        let p = &mut self.pending;
        p.n += 1;
        p.loss += stats.loss.loss;
        p.td += stats.loss.mean_abs_td;
        p.m += stats.loss.mean_m;
        p.eps += eps;
        p.grad += stats.grad_norm;
        if p.n == self.cfg.trainer.metrics_every {
            let n = p.n as f64;
            self.metrics.push(MetricsRow {
                step: self.trainer.steps(),
                episode,
                loss: p.loss / n,
                mean_abs_td: p.td / n,
                mean_m: p.m / n,
                epsilon: p.eps / n,
                grad_norm: p.grad / n,
            });
            self.pending = MetricsAccumulator::default();
        }
    }

    /// Runs the whole episode budget.
    pub fn run_all(&mut self) -> Result<Vec<TrialRecord>> {
        let mut records = Vec::with_capacity(self.total_episodes * self.cfg.env.trials_per_episode);
        for _ in 0..self.total_episodes {
            records.extend(self.run_episode()?);
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_run(self)
    }
}

/// End-of-training scores of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalScore {
    pub explore_excess: f64,
    pub exploit_excess: f64,
    pub explore_trials: usize,
    pub exploit_trials: usize,
}

/// Mean excess steps per episode type over the last `fraction` of episodes.
pub fn final_score(records: &[TrialRecord], fraction: f64) -> FinalScore {
    let last = records.iter().map(|r| r.episode).max().map_or(0, |e| e + 1);
    let cut = last - ((last as f64 * fraction).ceil() as u64).min(last);
    let (mut es, mut en, mut xs, mut xn) = (0.0, 0usize, 0.0, 0usize);
    for r in records.iter().filter(|r| r.episode >= cut) {
        match r.episode_type {
            EpisodeType::Explore => {
                es += r.excess_steps as f64;
                en += 1;
            }
            EpisodeType::Exploit => {
                xs += r.excess_steps as f64;
                xn += 1;
            }
        }
    }
    FinalScore {
        explore_excess: if en > 0 { es / en as f64 } else { f64::NAN },
        exploit_excess: if xn > 0 { xs / xn as f64 } else { f64::NAN },
        explore_trials: en,
        exploit_trials: xn,
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub episode_bucket: u64,
    pub condition: String,
    pub episode_type: EpisodeType,
    pub mean_excess: f64,
    pub sem: f64,
    pub n_seeds: usize,
}

/// Cross-seed learning curves: per seed, mean excess steps within
/// consecutive windows of `window` episodes; then mean and SEM over seeds.
pub fn aggregate_curves(
    condition: &str,
    runs: &[&[TrialRecord]],
    window: usize,
) -> Vec<AggregateRow> {
    let window = window.max(1) as u64;
    // (bucket, type) -> per-seed means
    let mut cells: BTreeMap<(u64, u8), Vec<f64>> = BTreeMap::new();
    for records in runs {
        let mut sums: BTreeMap<(u64, u8), (f64, usize)> = BTreeMap::new();
        for r in records.iter() {
            let key = (r.episode / window, r.episode_type as u8);
            let e = sums.entry(key).or_default();
            e.0 += r.excess_steps as f64;
            e.1 += 1;
        }
        for (k, (s, n)) in sums {
            cells.entry(k).or_default().push(s / n as f64);
        }
    }
    cells
        .into_iter()
        .map(|((bucket, t), vals)| {
            let (mean, sem) = mean_sem(&vals);
            AggregateRow {
                episode_bucket: bucket * window,
                condition: condition.to_string(),
                episode_type: if t == 0 {
                    EpisodeType::Explore
                } else {
                    EpisodeType::Exploit
                },
                mean_excess: mean,
                sem,
                n_seeds: vals.len(),
            }
        })
        .collect()
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub cell: CellName,
    pub seed: u64,
    pub records: Vec<TrialRecord>,
    pub metrics: Vec<MetricsRow>,
    pub gates: Vec<GateSample>,
    pub score: FinalScore,
    pub checkpoint: Checkpoint,
    pub memory: EpisodicMemory,
    pub reservoir_digest_unchanged: bool,
}

pub fn run_cell(
    cfg: &RunConfig,
    cell: CellName,
    seed: u64,
    options: RunOptions,
) -> Result<RunOutput> {
    let mut run = Run::new(cfg, cell, seed, options)?;
    let digest = run.agent.reservoir.weight_digest();
    let records = run.run_all()?;
    if !run.agent.online.is_finite() {
        return Err(Error::Run {
            cell: cell.to_string(),
            seed,
            msg: "parameters diverged".into(),
        });
    }
    let score = final_score(&records, cfg.harness.final_fraction);
    Ok(RunOutput {
        cell,
        seed,
        score,
        checkpoint: run.checkpoint(),
        reservoir_digest_unchanged: digest == run.agent.reservoir.weight_digest(),
        metrics: std::mem::take(&mut run.metrics),
        gates: std::mem::take(&mut run.gates),
        memory: run.memory,
        records,
    })
}

pub fn run_dir(out: &Path, cell: CellName, seed: u64) -> PathBuf {
    out.join(cell.as_str()).join(seed.to_string())
}

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| Error::Csv {
                path: path.into(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_records(path: &Path, header: &str, records: &[TrialRecord]) -> Result<()> {
    write_csv(path, header, records)
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let err = |e| Error::Csv {
        path: path.into(),
        source: e,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(err)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(err)
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    read_csv(path)
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    read_csv(path)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

pub fn read_gates(path: &Path) -> Result<Vec<GateSample>> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub seed: u64,
    pub explore_excess: f64,
    pub exploit_excess: f64,
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Default)]
pub struct ExperimentReport {
    pub completed: Vec<(CellName, u64)>,
    pub failed: Vec<(CellName, u64, String)>,
    pub aggregate: Vec<AggregateRow>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every configured cell for every seed (in parallel when enabled) and
/// writes `<out>/<cell>/<seed>/{records.csv, metrics.csv, memory.csv,
/// checkpoint.bin}` (plus `gates.csv` when gating is on), `<out>/aggregate.csv`
/// and `<out>/summary.csv`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let header = cfg.header_comment();
    let jobs: Vec<(CellName, u64)> = cfg
        .cells()
        .into_iter()
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = parallel::map(
        &jobs,
        |&(cell, seed)| -> Result<(CellName, u64, Vec<TrialRecord>)> {
            let out = run_cell(cfg, cell, seed, RunOptions::default())?;
            let dir = run_dir(&cfg.out_dir, cell, seed);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_records(&dir.join("records.csv"), &header, &out.records)?;
            write_csv(&dir.join("metrics.csv"), &header, &out.metrics)?;
            out.memory.write_dump(&dir.join("memory.csv"), &header)?;
            out.checkpoint.save(&dir.join("checkpoint.bin"))?;
            if !out.gates.is_empty() {
                write_csv(&dir.join("gates.csv"), &header, &out.gates)?;
            }
            log::info!(
                "{cell}/{seed}: final explore excess {:.3}, exploit excess {:.3}",
                out.score.explore_excess,
                out.score.exploit_excess
            );
            Ok((cell, seed, out.records))
        },
    );

    let mut report = ExperimentReport::default();
    let mut by_cell: BTreeMap<CellName, Vec<Vec<TrialRecord>>> = BTreeMap::new();
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok((cell, seed, records)) => {
                let score = final_score(&records, cfg.harness.final_fraction);
                report.summary.push(SummaryRow {
                    condition: cell.to_string(),
                    seed,
                    explore_excess: score.explore_excess,
                    exploit_excess: score.exploit_excess,
                });
                report.completed.push((cell, seed));
                by_cell.entry(cell).or_default().push(records);
            }
            Err(e) => {
                log::error!("{}/{} aborted: {e}", job.0, job.1);
                report.failed.push((job.0, job.1, e.to_string()));
            }
        }
    }
    for (cell, runs) in &by_cell {
        let refs: Vec<&[TrialRecord]> = runs.iter().map(Vec::as_slice).collect();
        report.aggregate.extend(aggregate_curves(
            cell.as_str(),
            &refs,
            cfg.harness.smoothing_window,
        ));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_csv(
        &cfg.out_dir.join("aggregate.csv"),
        &header,
        &report.aggregate,
    )?;
    write_csv(&cfg.out_dir.join("summary.csv"), &header, &report.summary)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfs_corner_to_corner() {
        assert_eq!(shortest_path(4, GridPos::new(0, 0), GridPos::new(3, 3)), 6);
        assert_eq!(shortest_path(4, GridPos::new(2, 1), GridPos::new(2, 1)), 0);
    }

    #[test]
    fn blocked_goals_alternate_per_explore_episode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            schedule_goals(0, Schedule::Blocked, 1, 5, &mut rng),
            vec![0; 5]
        );
        assert_eq!(
            schedule_goals(1, Schedule::Blocked, 1, 5, &mut rng),
            vec![1; 5]
        );
        assert_eq!(
            schedule_goals(2, Schedule::Blocked, 1, 5, &mut rng),
            vec![0; 5]
        );
        assert_eq!(
            schedule_goals(3, Schedule::Blocked, 2, 5, &mut rng),
            vec![1; 5]
        );
    }

    #[test]
    fn sem_is_sample_std_over_root_n() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let sd = (((1.5f64).powi(2) * 2.0 + (0.5f64).powi(2) * 2.0) / 3.0).sqrt();
        assert!((s - sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn final_score_uses_trailing_fraction() {
        let rec = |episode, t, excess| TrialRecord {
            run_id: "x".into(),
            seed: 0,
            episode,
            trial: 0,
            episode_type: t,
            goal: None,
            maze_id: 0,
            steps_taken: excess,
            shortest_path: 0,
            excess_steps: excess,
            total_reward: 0.0,
        };
        let mut records = Vec::new();
        for e in 0..10u64 {
            let t = if e % 2 == 0 {
                EpisodeType::Explore
            } else {
                EpisodeType::Exploit
            };
            records.push(rec(e, t, e as usize));
        }
        let s = final_score(&records, 0.2);
        assert_eq!(s.explore_excess, 8.0);
        assert_eq!(s.exploit_excess, 9.0);
    }
}
