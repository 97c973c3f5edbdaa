//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Training criteria run the desk preset (20,000 episodes, 5 seeds). Their
//! outputs are cached under `target/acceptance/` (or `$EPCTL_ACCEPTANCE_DIR`)
//! and reused only when the cached config header matches the current one;
//! set `EPCTL_ACCEPTANCE_FRESH=1` to retrain regardless, or
//! `EPCTL_ACCEPTANCE_QUICK=1` to evaluate only the criteria that need no
//! training runs.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use episodic_control::agent::{fuse_two_slot, Agent, ForwardInputs};
use episodic_control::analysis::{alignment_scores, collect_representations};
use episodic_control::checkpoint::Checkpoint;
use episodic_control::config::{Preset, TrainerConfig};
use episodic_control::harness::{
    mean_sem, read_gates, read_summary, run_dir, run_experiment, shortest_path, write_records, Run,
    RunOptions, SummaryRow,
};
use episodic_control::maze::{Action, GridPos};
use episodic_control::memory::{EntryMeta, EpisodicMemory, QueryKeyHeads};
use episodic_control::trainer::{
    huber, td_target, td_target_from_q, TdSample, Trainer, Transition,
};
use episodic_control::{CellName, ReservoirState, RetrievalMode, RunConfig};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(n: u8, name: &str, o: &Outcome) {
    println!(
        "criterion {n} [{name}]: {} {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

// ---------------------------------------------------------------- 1

fn unit_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 6;
    let heads = QueryKeyHeads::Identity { context: 0..d };
    let rand_vec = |rng: &mut ChaCha8Rng, n: usize| -> Array1<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    let meta = |i: usize| EntryMeta {
        maze_id: i as u64,
        episode: i as u64,
        trial: 0,
        goal: None,
    };

    // retrieval: weights sum to one, permutation equivariance
    for trial in 0..200 {
        let n = 1 + trial % 12;
        let keys: Vec<Array1<f64>> = (0..n).map(|_| rand_vec(&mut rng, d)).collect();
        let values: Vec<Array1<f64>> = (0..n).map(|_| rand_vec(&mut rng, 5)).collect();
        let q = rand_vec(&mut rng, d);
        let mut fwd = EpisodicMemory::new(n);
        let mut rev = EpisodicMemory::new(n);
        for i in 0..n {
            fwd.encode(&heads, keys[i].view(), &values[i], meta(i));
            let j = n - 1 - i;
            rev.encode(&heads, keys[j].view(), &values[j], meta(j));
        }
        let a = fwd.retrieve(&heads, q.view(), 0.7, 5, &mut rng);
        let b = rev.retrieve(&heads, q.view(), 0.7, 5, &mut rng);
        check(
            (a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "weights sum to 1",
        );
        check(a.weights.iter().all(|&w| w >= 0.0), "weights nonnegative");
        check(
            (&a.value - &b.value).iter().all(|x| x.abs() < 1e-9),
            "permutation equivariance",
        );
        check(
            (0..n).all(|i| (a.weights[i] - b.weights[n - 1 - i]).abs() < 1e-12),
            "weights permute",
        );
        if n == 1 {
            check(
                a.value == values[0] && a.weights == vec![1.0],
                "single entry exact",
            );
        }
    }

    // attention weights
    for _ in 0..200 {
        let (_, w) = fuse_two_slot(&rand_vec(&mut rng, 8), &rand_vec(&mut rng, 8));
        check((w[0] + w[1] - 1.0).abs() < 1e-12, "attention sums to 1");
    }

    // filter bounds after every optimizer step
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.agent.m_min = 0.1;
    cfg.agent.m_max = 0.8;
    cfg.trainer.learning_rate = 1e-2;
    cfg.trainer.lambda_filter = 1.0;
    let obs_dim = 9 + cfg.env.d_ctx;
    let mut agent = Agent::new(&mut rng, &cfg, RetrievalMode::Identity, obs_dim);
    let memory = EpisodicMemory::new(4);
    let mut trainer = Trainer::new(cfg.trainer.clone(), &agent);
    for _ in 0..500 {
        let inputs = ForwardInputs {
            h_prev: ReservoirState(rand_vec(&mut rng, cfg.reservoir.n_units) * 0.3),
            r_prev: -0.05,
            a_prev: Some(Action::Right),
            obs: rand_vec(&mut rng, obs_dim),
        };
        let t = agent.forward(&agent.online, &memory, inputs, &mut rng);
        let s = TdSample {
            trace: &t,
            action: Action::Up,
            target: rng.random_range(-1.0..1.0),
        };
        trainer.update_step(&mut agent, &[(s, &memory)]);
        let m = agent.filter(&agent.online);
        check(m.iter().all(|&v| (0.1..=0.8).contains(&v)), "filter bounds");
    }

    // Huber closed form and double-Q decoupling
    for i in 0..1000 {
        let e = (i as f64 - 500.0) / 97.0;
        let dlt = 0.25 + (i % 7) as f64 * 0.3;
        let expect = if e.abs() <= dlt {
            e * e / 2.0
        } else {
            dlt * (e.abs() - dlt / 2.0)
        };
        check((huber(e, dlt) - expect).abs() < 1e-12, "huber closed form");
    }
    let y = td_target_from_q(
        0.0,
        false,
        0.9,
        &[0.1, 0.2, 0.9, 0.0],
        &[3.0, 0.0, 0.5, 0.0],
    );
    check(
        (y - 0.45).abs() < 1e-12,
        "double-Q uses online argmax, target value",
    );

    // BFS equals Manhattan distance on open grids
    for size in 2..=8usize {
        for a in 0..size * size {
            for b in 0..size * size {
                let (pa, pb) = (
                    GridPos::new(a / size, a % size),
                    GridPos::new(b / size, b % size),
                );
                check(
                    shortest_path(size, pa, pb) == pa.manhattan(pb),
                    "bfs = manhattan",
                );
            }
        }
    }

    // byte-identical traces per seed
    let mut small = RunConfig::preset(Preset::Desk);
    small.reservoir.n_units = 30;
    let options = RunOptions {
        episodes: Some(20),
        ..RunOptions::default()
    };
    let dir = std::env::temp_dir().join(format!("epctl-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let recs = Run::new(&small, CellName::Exp2Learned, 3, options)
            .unwrap()
            .run_all()
            .unwrap();
        let p = dir.join(format!("{k}.csv"));
        write_records(&p, &small.header_comment(), &recs).unwrap();
        bytes.push(std::fs::read(&p).unwrap());
    }
    let _ = std::fs::remove_dir_all(&dir);
    check(bytes[0] == bytes[1], "environment determinism");

    failures.dedup();
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 300.0;
    Outcome::new(
        ok,
        format!("({secs:.1}s, limit 300s) {}", failures.join("; ")),
    )
}

// ---------------------------------------------------------------- 2

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut errors = Vec::new();
    for &(mode, gating, attention, groups) in common::CASES {
        match common::worst_group_error(mode, gating, attention, groups) {
            Ok(e) => worst = worst.max(e),
            Err(msg) => errors.push(msg),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = errors.is_empty() && worst < 1e-4 && secs < 60.0;
    Outcome::new(
        ok,
        format!(
            "worst relative error {worst:.2e} (limit 1e-4), {secs:.1}s (limit 60s) {}",
            errors.join("; ")
        ),
    )
}

// ------------------------------------------------------- training runs

fn acceptance_root() -> PathBuf {
    std::env::var_os("EPCTL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

/// Config header of a results file, minus the output path (which does not
/// affect results, so runs made with the CLI elsewhere can be copied in).
fn header_of(text: &str) -> String {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter(|l| !l.starts_with("# out_dir"))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Summary rows for a configured experiment, from cache when the cached run
/// was produced by exactly this config.
fn experiment(name: &str, mut cfg: RunConfig) -> Result<(RunConfig, Vec<SummaryRow>), String> {
    cfg.out_dir = acceptance_root().join(name);
    let summary = cfg.out_dir.join("summary.csv");
    let expected = cfg.cells().len() * cfg.seeds.len();
    let fresh = std::env::var_os("EPCTL_ACCEPTANCE_FRESH").is_some();
    let cached = std::fs::read_to_string(&summary)
        .map(|t| header_of(&t))
        .ok();
    if !fresh && cached == Some(header_of(&cfg.header_comment())) {
        if let Ok(rows) = read_summary(&summary) {
            if rows.len() == expected {
                eprintln!("acceptance: reusing {}", cfg.out_dir.display());
                return Ok((cfg, rows));
            }
        }
    }
    eprintln!(
        "acceptance: training {name} into {} (this takes a while)",
        cfg.out_dir.display()
    );
    let start = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    eprintln!(
        "acceptance: {name} took {:.0}s",
        start.elapsed().as_secs_f64()
    );
    if !report.failed.is_empty() {
        return Err(format!(
            "{} run(s) failed: {:?}",
            report.failed.len(),
            report.failed
        ));
    }
    Ok((cfg, report.summary))
}

fn desk(experiment: u8) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.experiment = experiment;
    cfg
}

#[derive(Clone, Copy)]
struct Stat {
    mean: f64,
    sem: f64,
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}+-{:.2}", self.mean, self.sem)
    }
}

fn stat(values: &[f64]) -> Stat {
    let (mean, sem) = mean_sem(values);
    Stat { mean, sem }
}

fn pooled(a: Stat, b: Stat) -> f64 {
    (a.sem * a.sem + b.sem * b.sem).sqrt()
}

/// `a` lower than `b` by more than the pooled standard error.
fn clearly_lower(a: Stat, b: Stat) -> bool {
    b.mean - a.mean > pooled(a, b)
}

struct Scores {
    explore: BTreeMap<String, Stat>,
    exploit: BTreeMap<String, Stat>,
    exploit_by_seed: BTreeMap<String, Vec<(u64, f64)>>,
}

fn scores(rows: &[SummaryRow]) -> Scores {
    let mut explore: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut exploit: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut by_seed: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        explore
            .entry(r.condition.clone())
            .or_default()
            .push(r.explore_excess);
        exploit
            .entry(r.condition.clone())
            .or_default()
            .push(r.exploit_excess);
        by_seed
            .entry(r.condition.clone())
            .or_default()
            .push((r.seed, r.exploit_excess));
    }
    Scores {
        explore: explore.into_iter().map(|(k, v)| (k, stat(&v))).collect(),
        exploit: exploit.into_iter().map(|(k, v)| (k, stat(&v))).collect(),
        exploit_by_seed: by_seed,
    }
}

// ---------------------------------------------------------------- 3, 4

fn experiment_one(s: &Scores) -> (Outcome, Outcome) {
    let (sim, dis, none) = (
        s.exploit["exp1_similar"],
        s.exploit["exp1_dissimilar"],
        s.exploit["exp1_no_memory"],
    );
    let c3 = Outcome::new(
        clearly_lower(sim, dis) && clearly_lower(sim, none),
        format!(
            "exploit excess: similar {sim}, dissimilar {dis} (gap {:.2} vs pooled SEM {:.2}), no-memory {none} (gap {:.2} vs pooled SEM {:.2})",
            dis.mean - sim.mean,
            pooled(sim, dis),
            none.mean - sim.mean,
            pooled(sim, none)
        ),
    );
    let (sim_e, none_e) = (s.explore["exp1_similar"], s.explore["exp1_no_memory"]);
    let c4 = Outcome::new(
        none_e.mean - sim_e.mean <= pooled(sim_e, none_e),
        format!(
            "explore excess: no-memory {none_e} vs similar {sim_e} (no-memory minus similar {:.2}, pooled SEM {:.2})",
            none_e.mean - sim_e.mean,
            pooled(sim_e, none_e)
        ),
    );
    (c3, c4)
}

// ---------------------------------------------------------------- 5

fn experiment_two(s: &Scores) -> Outcome {
    let (l, b, r) = (
        s.exploit["exp2_learned"],
        s.exploit["exp2_bottom_up"],
        s.exploit["exp2_random"],
    );
    Outcome::new(
        clearly_lower(l, b) && clearly_lower(l, r),
        format!(
            "exploit excess: learned {l}, bottom-up {b} (gap {:.2} vs pooled SEM {:.2}), random {r} (gap {:.2} vs pooled SEM {:.2})",
            b.mean - l.mean,
            pooled(l, b),
            r.mean - l.mean,
            pooled(l, r)
        ),
    )
}

// ---------------------------------------------------------------- 6

fn experiment_three(s3: &Scores, s2: &Scores) -> Outcome {
    let (bl, il) = (s3.exploit["exp3_blocked"], s3.exploit["exp3_interleaved"]);
    let blocked: BTreeMap<u64, f64> = s3.exploit_by_seed["exp3_blocked"].iter().copied().collect();
    let paired: Vec<(f64, f64)> = s2.exploit_by_seed["exp2_learned"]
        .iter()
        .filter_map(|(seed, v)| blocked.get(seed).map(|b| (*b, *v)))
        .collect();
    let b_mean = paired.iter().map(|p| p.0).sum::<f64>() / paired.len() as f64;
    let e2_mean = paired.iter().map(|p| p.1).sum::<f64>() / paired.len() as f64;
    let rel = (b_mean - e2_mean) / e2_mean;
    Outcome::new(
        clearly_lower(bl, il) && rel <= 0.2,
        format!(
            "exploit excess: blocked {bl}, interleaved {il} (gap {:.2} vs pooled SEM {:.2}); blocked vs exp2 learned endpoint {b_mean:.2} vs {e2_mean:.2} ({:+.1}%, limit +20%)",
            il.mean - bl.mean,
            pooled(bl, il),
            rel * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 7

fn representations(cfg: &RunConfig) -> Outcome {
    let probes = cfg.harness.probe_mazes;
    let mut blocked_both = 0;
    let mut interleaved_random = 0;
    let mut within_minus_between_q = Vec::new();
    let mut within_minus_between_k = Vec::new();
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        for cell in [CellName::Exp3Blocked, CellName::Exp3Interleaved] {
            let path = run_dir(&cfg.out_dir, cell, seed).join("checkpoint.bin");
            let summary = match Checkpoint::load_matching(&path, cfg)
                .and_then(|ck| collect_representations(&ck, probes))
            {
                Ok(reps) => alignment_scores(&reps),
                Err(e) => return Outcome::new(false, format!("{cell}/{seed}: {e}")),
            };
            let margins: Vec<String> = summary
                .goals
                .iter()
                .map(|g| format!("{:.3}+-{:.3}", g.margin, g.margin_sem))
                .collect();
            lines.push(format!("{cell}/{seed} margins [{}]", margins.join(", ")));
            if cell == CellName::Exp3Blocked {
                if summary.goals.iter().all(|g| g.margin > 0.0) {
                    blocked_both += 1;
                }
                within_minus_between_q.push(summary.query.within - summary.query.between);
                within_minus_between_k.push(summary.key.within - summary.key.between);
            } else if summary
                .goals
                .iter()
                .any(|g| g.indistinguishable_from_zero())
            {
                interleaved_random += 1;
            }
        }
    }
    let n = cfg.seeds.len();
    let majority = n / 2 + 1;
    let q = within_minus_between_q.iter().sum::<f64>() / n as f64;
    let k = within_minus_between_k.iter().sum::<f64>() / n as f64;
    Outcome::new(
        blocked_both >= majority && interleaved_random >= majority && q > 0.0 && k > 0.0,
        format!(
            "blocked seeds with both margins > 0: {blocked_both}/{n}; interleaved seeds with a margin indistinguishable from 0: {interleaved_random}/{n}; blocked within-minus-between similarity: query {q:.3}, key {k:.3}; {}",
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Degenerate task: uninformative random observations and a constant reward
/// on every step, trained through the full double-Q update. Returns the
/// fraction of the initial distance to `m_min` covered in 2,000 steps.
fn filter_shrinkage(learning_rate: f64) -> (f64, f64, f64) {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.trainer.lambda_filter = 1e-2;
    cfg.trainer.learning_rate = learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs_dim = 9 + cfg.env.d_ctx;
    let mut agent = Agent::new(&mut rng, &cfg, RetrievalMode::None, obs_dim);
    let memory = EpisodicMemory::new(1);
    let mut trainer = Trainer::new(cfg.trainer.clone(), &agent);
    let m_min = cfg.agent.m_min;
    let m0 = agent.filter(&agent.online).mean().unwrap();
    let obs = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let reward = -0.05;
    let first = ForwardInputs {
        h_prev: agent.initial_state(),
        r_prev: 0.0,
        a_prev: None,
        obs: obs(&mut rng),
    };
    let mut trace = agent.forward(&agent.online, &memory, first, &mut rng);
    for _ in 0..2_000 {
        let action = Action::from_index(rng.random_range(0..4));
        let inputs = ForwardInputs {
            h_prev: trace.h.clone(),
            r_prev: reward,
            a_prev: Some(action),
            obs: obs(&mut rng),
        };
        let next = agent.forward(&agent.online, &memory, inputs, &mut rng);
        let tr = Transition {
            trace: trace.clone(),
            action,
            reward,
            done: false,
            next: Some(next.clone()),
        };
        let y = td_target(&tr, &agent, &memory, cfg.trainer.gamma, &mut rng);
        let s = TdSample {
            trace: &trace,
            action,
            target: y,
        };
        trainer.update_step(&mut agent, &[(s, &memory)]);
        trace = next;
    }
    let m1 = agent.filter(&agent.online).mean().unwrap();
    (m0, m1, (m0 - m1) / (m0 - m_min))
}

/// Judged at the default trainer settings; the desk preset's smaller
/// learning rate is reported alongside.
fn regularizer() -> Outcome {
    let lr = TrainerConfig::default().learning_rate;
    let (m0, m1, frac) = filter_shrinkage(lr);
    let desk_lr = RunConfig::preset(Preset::Desk).trainer.learning_rate;
    let (_, d1, dfrac) = filter_shrinkage(desk_lr);
    Outcome::new(
        frac >= 0.5,
        format!(
            "lr {lr:e}: mean(m) {m0:.3} -> {m1:.3} after 2000 steps, {:.0}% of the distance to m_min (need >= 50%); at the desk lr {desk_lr:e}: -> {d1:.3}, {:.0}%",
            frac * 100.0,
            dfrac * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 9

fn gating(cfg: &RunConfig) -> Outcome {
    let total = cfg.harness.episodes as f64;
    let from = (total * (1.0 - cfg.harness.final_fraction)).floor() as u64;
    let mut explore_means = Vec::new();
    let mut exploit_means = Vec::new();
    for &seed in &cfg.seeds {
        let path = run_dir(&cfg.out_dir, CellName::Exp1Similar, seed).join("gates.csv");
        let gates = match read_gates(&path) {
            Ok(g) => g,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let late = gates.iter().filter(|g| g.episode >= from);
        // first explore trial: every stored memory belongs to another maze
        let (mut ex, mut xp) = (Vec::new(), Vec::new());
        for g in late {
            match (g.episode_type, g.trial) {
                (episodic_control::maze::EpisodeType::Explore, 0) => ex.push(g.mean_gate),
                (episodic_control::maze::EpisodeType::Exploit, _) => xp.push(g.mean_gate),
                _ => {}
            }
        }
        explore_means.push(ex.iter().sum::<f64>() / ex.len().max(1) as f64);
        exploit_means.push(xp.iter().sum::<f64>() / xp.len().max(1) as f64);
    }
    let (e, x) = (stat(&explore_means), stat(&exploit_means));
    Outcome::new(
        e.mean < x.mean,
        format!(
            "mean gate over the final 10%: unrelated-memory explore trials {e}, exploit trials {x}"
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let start = Instant::now();
    let mut outcomes: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut run = |n: u8, name: &'static str, o: Outcome| {
        report(n, name, &o);
        outcomes.push((n, name, o));
    };

    run(1, "unit/property suite", unit_suite());
    run(2, "gradient check", gradient_check());
    run(8, "regularizer", regularizer());
    if std::env::var_os("EPCTL_ACCEPTANCE_QUICK").is_some() {
        println!(
            "acceptance: EPCTL_ACCEPTANCE_QUICK set, training criteria 3-7 and 9 not evaluated"
        );
        std::process::exit(i32::from(outcomes.iter().any(|o| !o.2.pass)));
    }

    let exp1 = experiment("exp1", desk(1));
    match &exp1 {
        Ok((_, rows)) => {
            let (c3, c4) = experiment_one(&scores(rows));
            run(3, "exp1 exploit", c3);
            run(4, "exp1 explore cost", c4);
        }
        Err(e) => {
            run(3, "exp1 exploit", Outcome::new(false, e.clone()));
            run(4, "exp1 explore cost", Outcome::new(false, e.clone()));
        }
    }
    let exp2 = experiment("exp2", desk(2));
    match &exp2 {
        Ok((_, rows)) => run(5, "exp2 retrieval", experiment_two(&scores(rows))),
        Err(e) => run(5, "exp2 retrieval", Outcome::new(false, e.clone())),
    }
    let exp3 = experiment("exp3", desk(3));
    match (&exp3, &exp2) {
        (Ok((_, r3)), Ok((_, r2))) => run(
            6,
            "exp3 behaviour",
            experiment_three(&scores(r3), &scores(r2)),
        ),
        (Err(e), _) | (_, Err(e)) => run(6, "exp3 behaviour", Outcome::new(false, e.clone())),
    }
    match &exp3 {
        Ok((cfg, _)) => run(7, "exp3 representations", representations(cfg)),
        Err(e) => run(7, "exp3 representations", Outcome::new(false, e.clone())),
    }
    let mut gate_cfg = desk(1);
    gate_cfg.conditions = vec![CellName::Exp1Similar];
    gate_cfg.agent.gating = true;
    match experiment("gating", gate_cfg) {
        Ok((cfg, _)) => run(9, "gating", gating(&cfg)),
        Err(e) => run(9, "gating", Outcome::new(false, e)),
    }

    outcomes.sort_by_key(|o| o.0);
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.2.pass).map(|o| o.0).collect();
    println!();
    for (n, name, o) in &outcomes {
        println!(
            "criterion {n} [{name}]: {}",
            if o.pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
