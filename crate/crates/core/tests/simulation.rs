use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skewsim::data::make_partition_plan;
use skewsim::nn::Arch;
use skewsim::scout::{skewscout_run_on, ControllerConfig};
use skewsim::sim::{expected_values_sent, run_experiment, run_experiment_on, Cluster, ExperimentConfig, LrKind, MetricsLog, NormChoice, Sampler};
use skewsim::sync::{dgc_sparsity, top_k_count, Aggregation, Algo};
use skewsim::{Exec, Precision};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        synth_samples: 1200,
        synth_dim: 12,
        synth_classes: 6,
        arch: Arch::Mlp,
        hidden: 16,
        norm: NormChoice::Batch,
        k: 3,
        skew_fraction: 0.5,
        eta0: 0.02,
        batch_size: 16,
        epochs: 4,
        ..ExperimentConfig::default()
    }
}

#[test]
fn repeated_runs_write_identical_logs() {
    for algo in [Algo::Bsp, Algo::Gaia, Algo::Fedavg, Algo::Dgc] {
        let cfg = ExperimentConfig { algo, iter_local: 5, ..small() };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv(), "{algo:?}");
        assert_eq!(a.summary, b.summary);
    }
}

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    for algo in [Algo::Gaia, Algo::Dgc] {
        let par = ExperimentConfig { algo, exec: Exec::Parallel, ..small() };
        let seq = ExperimentConfig { exec: Exec::Sequential, ..par.clone() };
        assert_eq!(run_experiment(&par).unwrap().log.to_csv(), run_experiment(&seq).unwrap().log.to_csv());
    }
}

#[test]
fn metrics_log_csv_round_trips() {
    let out = run_experiment(&ExperimentConfig { algo: Algo::Gaia, ..small() }).unwrap();
    let csv = out.log.to_csv();
    assert!(csv.starts_with("epoch,step,node,metric,value\n"));
    assert_eq!(MetricsLog::from_csv(&csv).unwrap().to_csv(), csv);
}

fn resume_matches_straight_run(cfg: &ExperimentConfig) {
    let ds = Arc::new(cfg.load_dataset().unwrap());
    let mut straight = Cluster::<f32>::new(cfg, ds.clone()).unwrap();
    straight.run_until(100).unwrap();

    let mut first = Cluster::<f32>::new(cfg, ds.clone()).unwrap();
    first.run_until(50).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.sksm");
    first.save_checkpoint(&path).unwrap();
    drop(first);
    let mut resumed = Cluster::<f32>::load_checkpoint(&path, Some(ds)).unwrap();
    resumed.run_until(100).unwrap();

    assert_eq!(resumed.step(), straight.step());
    assert_eq!(resumed.to_checkpoint_bytes(), straight.to_checkpoint_bytes(), "{:?}", cfg.algo);
    assert_eq!(resumed.log().to_csv(), straight.log().to_csv());
}

#[test]
fn checkpoint_resume_is_bitwise() {
    for algo in [Algo::Bsp, Algo::Gaia, Algo::Fedavg, Algo::Dgc] {
        resume_matches_straight_run(&ExperimentConfig { algo, iter_local: 7, epochs: 6, ..small() });
    }
}

#[test]
fn checkpoint_without_dataset_reloads_it() {
    let cfg = ExperimentConfig { algo: Algo::Gaia, ..small() };
    let ds = Arc::new(cfg.load_dataset().unwrap());
    let mut c = Cluster::<f32>::new(&cfg, ds).unwrap();
    c.run_until(20).unwrap();
    let bytes = c.to_checkpoint_bytes();
    let back = Cluster::<f32>::from_checkpoint_bytes(&bytes, None).unwrap();
    assert_eq!(back.to_checkpoint_bytes(), bytes);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small();
    let ds = Arc::new(cfg.load_dataset().unwrap());
    let mut c = Cluster::<f32>::new(&cfg, ds.clone()).unwrap();
    c.run_until(5).unwrap();
    let bytes = c.to_checkpoint_bytes();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Cluster::<f32>::from_checkpoint_bytes(&bad, Some(ds.clone())).is_err());
    assert!(Cluster::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() / 2], Some(ds.clone())).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Cluster::<f32>::from_checkpoint_bytes(&long, Some(ds.clone())).is_err());
    assert!(Cluster::<f64>::from_checkpoint_bytes(&bytes, Some(ds)).is_err());
}

#[test]
fn dense_ledgers_match_closed_forms() {
    for (algo, iter_local) in [(Algo::Bsp, 1), (Algo::Fedavg, 20), (Algo::Fedavg, 7)] {
        let cfg = ExperimentConfig { algo, iter_local, ..small() };
        let ds = Arc::new(cfg.load_dataset().unwrap());
        let mut c = Cluster::<f32>::new(&cfg, ds).unwrap();
        c.run_to_end().unwrap();
        let want = expected_values_sent(algo, cfg.k, c.num_params(), c.total_steps(), iter_local).unwrap();
        assert_eq!(c.sync_ledger().values_sent, want, "{algo:?} {iter_local}");
        for n in c.nodes() {
            assert_eq!(n.ledger.values_sent * cfg.k as u64, want);
        }
    }
}

#[test]
fn dgc_ledger_follows_the_sparsity_schedule() {
    let cfg = ExperimentConfig { algo: Algo::Dgc, e_warm: 1, ..small() };
    let ds = Arc::new(cfg.load_dataset().unwrap());
    let mut c = Cluster::<f32>::new(&cfg, ds).unwrap();
    c.run_to_end().unwrap();
    let (m, k, spe) = (c.num_params(), cfg.k, c.steps_per_epoch());
    let per_node: usize = (0..c.total_steps()).map(|s| 2 * top_k_count(dgc_sparsity(s / spe + 1, 1), m) * (k - 1)).sum();
    assert_eq!(c.sync_ledger().values_sent, (per_node * k) as u64);
    let bsp = expected_values_sent(Algo::Bsp, k, m, c.total_steps(), 1).unwrap();
    assert!(c.sync_ledger().values_sent <= bsp);
}

#[test]
fn gaia_traffic_shrinks_as_the_threshold_grows() {
    let mut last = u64::MAX;
    let mut bsp = 0;
    for t0 in [0.0, 0.02, 0.05, 0.10, 0.20] {
        let cfg = ExperimentConfig { algo: Algo::Gaia, t0, t_min: 0.0, ..small() };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.summary.total_values_sent <= last, "t0 {t0}");
        last = out.summary.total_values_sent;
        if bsp == 0 {
            let ds = Arc::new(cfg.load_dataset().unwrap());
            let c = Cluster::<f32>::new(&cfg, ds).unwrap();
            bsp = expected_values_sent(Algo::Bsp, cfg.k, c.num_params(), out.summary.steps, 1).unwrap();
            // Every entry, two values each, to K-1 peers.
            assert_eq!(out.summary.total_values_sent, bsp * 2 * (cfg.k as u64 - 1));
        }
    }
    assert!(last <= bsp);
}

#[test]
fn every_partition_sample_is_seen_each_epoch() {
    let cfg = ExperimentConfig { skew_fraction: 0.8, ..small() };
    let ds = cfg.load_dataset().unwrap();
    let parts = make_partition_plan(&ds, cfg.k, cfg.skew_fraction, cfg.data_seed).unwrap().partitions();
    let epoch_len = parts.iter().map(Vec::len).max().unwrap();
    let spe = epoch_len.div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in &parts {
        let mut s = Sampler::new();
        for _epoch in 0..2 {
            let mut counts = vec![0usize; ds.len()];
            for _ in 0..spe {
                for i in s.next_batch(p, epoch_len, cfg.batch_size, &mut rng) {
                    counts[i] += 1;
                }
            }
            let seen: Vec<usize> = p.iter().map(|&i| counts[i]).collect();
            let (lo, hi) = (*seen.iter().min().unwrap(), *seen.iter().max().unwrap());
            assert!(lo >= 1 && hi - lo <= 1);
            assert_eq!(seen.iter().sum::<usize>(), epoch_len);
            if p.len() == epoch_len {
                assert_eq!(hi, 1);
            }
        }
    }
    let c = Cluster::<f32>::new(&cfg, Arc::new(ds)).unwrap();
    assert_eq!(c.steps_per_epoch(), spe);
    assert_eq!(c.total_steps(), spe * cfg.epochs);
}

#[test]
fn step_counters_and_epoch_rows() {
    let cfg = ExperimentConfig { algo: Algo::Fedavg, iter_local: 5, ..small() };
    let ds = Arc::new(cfg.load_dataset().unwrap());
    let mut c = Cluster::<f32>::new(&cfg, ds).unwrap();
    c.superstep().unwrap();
    assert_eq!(c.step(), 5);
    c.run_to_end().unwrap();
    assert_eq!(c.step(), c.total_steps());
    assert_eq!(c.log().series("val_acc", None).len(), cfg.epochs);
    assert_eq!(c.log().series("train_acc", Some(0)).len(), cfg.epochs);
}

#[test]
fn bsp_accuracy_does_not_depend_on_node_count() {
    let mut accs = Vec::new();
    for (k, b) in [(1, 60), (2, 30), (5, 12)] {
        let cfg = ExperimentConfig {
            synth_samples: 10000,
            synth_dim: 32,
            synth_separation: 4.0,
            arch: Arch::LogReg,
            norm: NormChoice::None,
            k,
            batch_size: b,
            skew_fraction: 0.0,
            bsp_aggregation: Aggregation::Mean,
            eta0: 0.05,
            lr_schedule: LrKind::Polynomial,
            epochs: 20,
            precision: Precision::F64,
            ..ExperimentConfig::default()
        };
        accs.push(run_experiment(&cfg).unwrap().summary.final_val_acc);
    }
    let (lo, hi) = accs.iter().fold((1.0f64, 0.0f64), |(l, h), &a| (l.min(a), h.max(a)));
    assert!(hi - lo <= 0.005, "{accs:?}");
}

#[test]
fn logreg_learns_separated_blobs() {
    let cfg = ExperimentConfig { synth_separation: 6.0, epochs: 5, ..ExperimentConfig::default() };
    let out = run_experiment(&cfg).unwrap();
    assert!(out.summary.final_val_acc >= 0.95, "{}", out.summary.final_val_acc);
    assert!(!out.summary.diverged);
    assert_eq!(out.summary.seeds.len(), 3);
}

#[test]
fn exploding_learning_rate_is_a_terminal_event() {
    let cfg = ExperimentConfig { eta0: 1e30, momentum: 0.0, ..small() };
    let out = run_experiment(&cfg).unwrap();
    assert!(out.summary.diverged);
    assert_eq!(out.log.last("diverged", None), Some(1.0));
    assert!(out.summary.steps < out.summary.epochs_completed.max(1) * 1000);
}

#[test]
fn iid_accuracy_loss_stays_small() {
    let cfg = ExperimentConfig {
        synth_samples: 4000,
        synth_separation: 6.0,
        arch: Arch::LogReg,
        norm: NormChoice::None,
        algo: Algo::Gaia,
        skew_fraction: 0.0,
        epochs: 6,
        ..ExperimentConfig::default()
    };
    let ds = Arc::new(cfg.load_dataset().unwrap());
    let ctl = ControllerConfig { travel_period: 20, ..ControllerConfig::default() };
    let out = skewscout_run_on(&cfg, &ctl, ds).unwrap();
    assert!(!out.events.is_empty());
    for e in &out.events[1..] {
        assert!(e.al < 0.05, "step {} al {}", e.step, e.al);
    }
}

#[test]
fn gaia_per_node_accuracy_is_logged() {
    let cfg = ExperimentConfig { algo: Algo::Gaia, ..small() };
    let out = run_experiment_on(&cfg, Arc::new(cfg.load_dataset().unwrap())).unwrap();
    let mean = (0..cfg.k).map(|k| out.log.last("val_acc", Some(k)).unwrap()).sum::<f64>() / cfg.k as f64;
    assert!((out.summary.final_val_acc - mean).abs() < 1e-12);
    assert_eq!(out.summary.per_node_val_acc.len(), cfg.k);
}
