use episodic_control::analysis::collect_representations;
use episodic_control::checkpoint::Checkpoint;
use episodic_control::config::Preset;
use episodic_control::harness::{
    read_aggregate, read_records, run_cell, run_dir, run_experiment, Run, RunOptions,
};
use episodic_control::{CellName, Error, RunConfig};

fn small() -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.reservoir.n_units = 24;
    cfg.agent.bias_dim = 8;
    cfg.agent.filter_hidden = 8;
    cfg.agent.embed_dim = 8;
    cfg.agent.embed_hidden = 8;
    cfg.agent.q_hidden = 8;
    cfg.memory.hidden = 8;
    cfg.harness.episodes = 12;
    cfg
}

fn trained(cfg: &RunConfig, cell: CellName, seed: u64) -> Checkpoint {
    run_cell(cfg, cell, seed, RunOptions::default())
        .unwrap()
        .checkpoint
}

#[test]
fn checkpoint_round_trip_restores_the_agent() {
    let cfg = small();
    let mut run = Run::new(&cfg, CellName::Exp2Learned, 3, RunOptions::default()).unwrap();
    run.run_all().unwrap();
    let ck = Checkpoint::from_run(&run);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let agent = back.restore_agent().unwrap();
    assert_eq!(agent.online, run.agent.online);
    assert_eq!(agent.target, run.agent.target);
    assert_eq!(
        agent.reservoir.weight_digest(),
        run.agent.reservoir.weight_digest()
    );
    assert_eq!(back.transform().unwrap(), run.env.transform().clone());
    assert!(Checkpoint::load_matching(&path, &cfg).is_ok());
}

#[test]
fn checkpoint_rejects_a_different_config() {
    let cfg = small();
    let ck = trained(&cfg, CellName::Exp1Similar, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ck.save(&path).unwrap();
    let mut other = cfg.clone();
    other.reservoir.n_units = 30;
    assert!(matches!(
        Checkpoint::load_matching(&path, &other),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn checkpoint_rejects_bad_bytes() {
    let cfg = small();
    let bytes = trained(&cfg, CellName::Exp1Similar, 1).to_bytes();
    let p = std::path::Path::new("mem");

    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    let err = Checkpoint::from_bytes(&bad_version, p).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic, p).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing, p).is_err());
    assert!(Checkpoint::load(&std::env::temp_dir().join("no-such-checkpoint.bin")).is_err());
}

#[test]
fn experiment_writes_the_output_tree_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.harness.episodes = 6;
    cfg.harness.smoothing_window = 2;
    cfg.conditions = vec![CellName::Exp1Similar, CellName::Exp1NoMemory];
    cfg.seeds = vec![0, 1];
    cfg.out_dir = dir.path().join("a");
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.completed.len(), 4);
    assert!(report.failed.is_empty());
    for cell in [CellName::Exp1Similar, CellName::Exp1NoMemory] {
        for seed in [0, 1] {
            let d = run_dir(&cfg.out_dir, cell, seed);
            for f in ["records.csv", "metrics.csv", "memory.csv", "checkpoint.bin"] {
                assert!(d.join(f).is_file(), "{}", d.join(f).display());
            }
            let records = read_records(&d.join("records.csv")).unwrap();
            assert_eq!(records.len(), 6 * cfg.env.trials_per_episode);
        }
    }
    let text = std::fs::read_to_string(cfg.out_dir.join("aggregate.csv")).unwrap();
    assert!(
        text.starts_with('#'),
        "aggregate files carry the config header"
    );

    let first = read_aggregate(&cfg.out_dir.join("aggregate.csv")).unwrap();
    cfg.out_dir = dir.path().join("b");
    run_experiment(&cfg).unwrap();
    let second = read_aggregate(&cfg.out_dir.join("aggregate.csv")).unwrap();
    assert_eq!(first, second);
    // headers differ only in the output path
    let body = |p: &str| -> String {
        std::fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .collect()
    };
    assert_eq!(body("a/aggregate.csv"), body("b/aggregate.csv"));
    assert_eq!(
        body("a/exp1_similar/1/records.csv"),
        body("b/exp1_similar/1/records.csv")
    );
}

#[test]
fn analysis_produces_one_representation_per_maze_and_goal() {
    let cfg = small();
    let ck = trained(&cfg, CellName::Exp3Blocked, 2);
    let reps = collect_representations(&ck, 20).unwrap();
    assert_eq!(reps.len(), 40);
    assert_eq!(reps.iter().filter(|r| r.goal == 0).count(), 20);
    let again = collect_representations(&ck, 20).unwrap();
    assert_eq!(reps, again);
    // a checkpoint without heads cannot be probed
    let none = trained(&cfg, CellName::Exp1NoMemory, 2);
    assert!(collect_representations(&none, 3).is_err());
}

#[test]
fn identity_queries_are_the_exploit_context() {
    let cfg = small();
    let ck = trained(&cfg, CellName::Exp1Dissimilar, 4);
    let reps = collect_representations(&ck, 5).unwrap();
    assert_eq!(reps.len(), 5);
    let transform = ck.transform().unwrap();
    for r in &reps {
        assert_eq!(r.query.len(), cfg.env.d_ctx);
        assert_eq!(r.key.len(), cfg.env.d_ctx);
        // explore context = W * exploit context; the key sees the explore side
        let expect = transform.matrices[0].t().dot(&r.key);
        for (a, b) in r.query.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
