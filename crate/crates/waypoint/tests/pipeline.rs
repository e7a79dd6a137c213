use std::path::Path;
use std::process::Command;

use waypoint::checkpoint::{Checkpoint, Stage};
use waypoint::config::ExperimentConfig;
use waypoint::io::Logger;
use waypoint::pipeline::{self, Context, Sweep};
use waypoint::Error;

const TINY: &str = r#"
seed = 3
[dataset]
n_train_graphs = 2
n_unseen_graphs = 1
train_episodes_per_graph = 4
val_seen_episodes_per_graph = 2
unseen_episodes_per_graph = 3
[embed]
d_enc = 16
[decoder]
n_blocks = 1
n_heads = 2
d_model = 16
[pretrain]
iterations = 4
batch_size = 2
eval_every = 2
learning_rate = 1e-3
[finetune]
iterations = 4
batch_size = 2
replay_capacity = 4
eval_every = 2
learning_rate = 1e-3
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn ctx(dir: &Path, force: bool) -> Context {
    Context::new(tiny(), dir, force, Logger::silent())
}

fn generated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    pipeline::gen(&mut ctx(dir.path(), false)).unwrap();
    dir
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn config_defaults_round_trip_through_toml() {
    let c = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    let t = tiny();
    assert_eq!(ExperimentConfig::from_toml(&t.to_toml()).unwrap(), t);
}

#[test]
fn unknown_config_keys_are_rejected() {
    for text in ["bogus = 1", "[decoder]\nn_layers = 3", "[env.world]\nrooms = 2", "[nonsense]\n"] {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{}", text);
    }
}

#[test]
fn invalid_values_are_config_errors() {
    for text in ["[decoder]\nd_model = 10\nn_heads = 3", "[pretrain]\nbatch_size = 0", "[decoder]\nmax_timesteps = 4"] {
        let e = ExperimentConfig::from_toml(text).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{}", text);
    }
}

#[test]
fn seed_override_reaches_every_stage_and_the_hash() {
    let c = tiny().with_seed(11).unwrap();
    assert_eq!((c.pretrain.seed, c.finetune.seed), (11, 11));
    assert_ne!(c.hash(), tiny().hash());
    assert_eq!(c.model_hash(), tiny().model_hash());
}

#[test]
fn gen_is_reproducible_and_refuses_to_overwrite() {
    let a = generated();
    let b = generated();
    for f in waypoint::io::dataset_files(&a.path().join("data")) {
        let g = b.path().join("data").join(f.file_name().unwrap());
        assert_eq!(read(&f), read(&g), "{}", f.display());
    }
    let e = pipeline::gen(&mut ctx(a.path(), false)).unwrap_err();
    assert_eq!(e.exit_code(), 5);
    pipeline::gen(&mut ctx(a.path(), true)).unwrap();
}

#[test]
fn loaded_dataset_matches_generated_and_unseen_graphs_are_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = ctx(dir.path(), false);
    let mut c2 = ctx(dir.path(), false);
    let made = pipeline::gen(&mut c2).unwrap();
    let loaded = c.load_dataset().unwrap();
    assert_eq!(made, loaded);
    let seen: std::collections::BTreeSet<u32> = loaded.train.iter().map(|t| t.episode.graph_id).collect();
    assert!(loaded.val_unseen.iter().all(|t| !seen.contains(&t.episode.graph_id)));
    assert!(loaded.val_seen.iter().all(|t| seen.contains(&t.episode.graph_id)));
}

#[test]
fn dataset_from_another_config_is_rejected() {
    let dir = generated();
    let mut cfg = tiny();
    cfg.data_seed = 9;
    let c = Context::new(cfg, dir.path(), false, Logger::silent());
    assert!(matches!(c.load_dataset(), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = generated();
    let mut c = ctx(dir.path(), false);
    let run = pipeline::finetune(&mut c, None, None).unwrap();
    let bytes = read(&run.checkpoint);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert_eq!(ck.finetune.as_ref().unwrap(), &run.state);
    assert_eq!(ck.store, run.agent.store);
    assert_eq!(ck.meta.stage, Stage::Finetune);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = generated();
    let run = pipeline::pretrain(&mut ctx(dir.path(), false), None, None).unwrap();
    let bytes = read(&run.checkpoint);
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let a = generated();
    let full = pipeline::pretrain(&mut ctx(a.path(), false), None, None).unwrap();
    let b = generated();
    let half = pipeline::pretrain(&mut ctx(b.path(), false), None, Some(2)).unwrap();
    assert_eq!(half.curve.len(), 1);
    let rest = pipeline::pretrain(&mut ctx(b.path(), false), Some(&half.checkpoint), None).unwrap();
    assert_eq!(rest.curve, full.curve);
    assert_eq!(read(&rest.checkpoint), read(&full.checkpoint));
    assert_eq!(read(a.path().join("reports/pretrain_curve.jsonl")), read(b.path().join("reports/pretrain_curve.jsonl")));
}

#[test]
fn resumed_finetuning_matches_an_uninterrupted_run() {
    let a = generated();
    let pt = pipeline::pretrain(&mut ctx(a.path(), false), None, None).unwrap();
    let full = pipeline::finetune(&mut ctx(a.path(), false), Some(&pt.checkpoint), None).unwrap();
    assert_eq!(full.label, "PT+FT");

    let b = generated();
    let pt = pipeline::pretrain(&mut ctx(b.path(), false), None, None).unwrap();
    let half = pipeline::finetune(&mut ctx(b.path(), false), Some(&pt.checkpoint), Some(2)).unwrap();
    let rest = pipeline::finetune(&mut ctx(b.path(), false), Some(&half.checkpoint), None).unwrap();
    assert_eq!(rest.label, "PT+FT");
    assert_eq!(rest.curve, full.curve);
    assert_eq!(rest.state, full.state);
    assert_eq!(read(&rest.checkpoint), read(&full.checkpoint));
}

#[test]
fn finetune_without_checkpoint_is_the_ft_only_arm() {
    let dir = generated();
    let run = pipeline::finetune(&mut ctx(dir.path(), false), None, None).unwrap();
    assert_eq!(run.label, "FT-only");
    let report: pipeline::EvalReport = waypoint::io::read_json(&dir.path().join("reports/finetune_ft-only.json")).unwrap();
    assert_eq!(report.label, "FT-only");
    assert_eq!(report.iteration, 4);
}

#[test]
fn finetuning_keeps_the_best_unseen_model_aside() {
    let dir = generated();
    let run = pipeline::finetune(&mut ctx(dir.path(), false), None, None).unwrap();
    let best = Checkpoint::load(&dir.path().join("checkpoints/finetune_ft-only_best.ckpt")).unwrap();
    let top = run.curve.iter().map(|p| p.val_unseen.sr).fold(f64::NEG_INFINITY, f64::max);
    let first = run.curve.iter().find(|p| p.val_unseen.sr == top).unwrap();
    assert_eq!(best.meta.iteration, first.iteration);
    assert_eq!(best.meta.finetune_curve.len(), run.curve.iter().position(|p| p.iteration == first.iteration).unwrap() + 1);
}

#[test]
fn eval_reproduces_the_report_of_the_saved_model() {
    let dir = generated();
    let mut c = ctx(dir.path(), false);
    let run = pipeline::pretrain(&mut c, None, None).unwrap();
    let ds = c.load_dataset().unwrap();
    let before = pipeline::evaluate_agent(&c, &run.agent, &ds).unwrap();
    let r = pipeline::eval(&mut c, Some(&run.checkpoint), false).unwrap();
    assert_eq!((r.val_seen, r.val_unseen), before);
}

#[test]
fn expert_eval_is_perfect() {
    let dir = generated();
    let r = pipeline::eval(&mut ctx(dir.path(), false), None, true).unwrap();
    for m in [&r.val_seen, &r.val_unseen] {
        assert_eq!((m.sr, m.spl, m.ne), (100.0, 100.0, 0.0));
    }
    assert!(r.table().contains("expert"));
}

#[test]
fn seq_len_sweep_has_two_rows_over_two_splits() {
    let dir = generated();
    let r = pipeline::ablate(&mut ctx(dir.path(), false), Sweep::SeqLen).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.rows[1].decoder.context_length, Some(1));
    let table = r.table();
    assert!(table.contains("val_seen") && table.contains("val_unseen"));
    assert_eq!(table.lines().filter(|l| l.starts_with("K=")).count(), 2);
}

#[test]
fn n_blocks_sweep_covers_four_depths() {
    let v = Sweep::NBlocks.variants(&tiny().decoder);
    assert_eq!(v.iter().map(|(_, d)| d.n_blocks).collect::<Vec<_>>(), vec![3, 5, 9, 12]);
}

#[test]
fn checkpoint_from_a_different_model_is_rejected() {
    let dir = generated();
    let run = pipeline::pretrain(&mut ctx(dir.path(), false), None, None).unwrap();
    let mut cfg = tiny();
    cfg.decoder.n_blocks = 2;
    let mut c = Context::new(cfg, dir.path(), true, Logger::silent());
    assert!(matches!(pipeline::eval(&mut c, Some(&run.checkpoint), false), Err(Error::Config(_))));
}

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    let cfg = dir.join("tiny.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_waypoint"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

#[test]
fn cli_runs_the_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [&["gen"][..], &["pretrain"], &["finetune", "--checkpoint"], &["eval", "--checkpoint"], &["eval", "--expert"], &["ablate", "seq-len"]] {
        let mut a: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        if a.last().map(|s| s == "--checkpoint") == Some(true) {
            let ck = if a[0] == "finetune" { "checkpoints/pretrain.ckpt" } else { "checkpoints/finetune_pt-ft.ckpt" };
            a.push(d.join(ck).display().to_string());
        }
        let refs: Vec<&str> = a.iter().map(|s| s.as_str()).collect();
        let out = cli(d, &refs);
        assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    }
    for f in ["reports/eval_pt-ft.json", "reports/eval_expert.txt", "reports/ablate_seq_len.txt", "reports/pretrain.log"] {
        assert!(d.join(f).exists(), "{}", f);
    }
    let log = std::fs::read_to_string(d.join("reports/pretrain.log")).unwrap();
    assert!(log.lines().any(|l| l.contains("event=pretrain.eval") && l.contains("it=4")));
}

#[test]
fn cli_exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // missing dataset
    assert_eq!(cli(d, &["pretrain"]).status.code(), Some(3));
    // missing checkpoint
    assert_eq!(cli(d, &["eval", "--checkpoint", "nope.ckpt"]).status.code(), Some(3));
    // unknown key
    std::fs::write(d.join("bad.toml"), "colour = 1").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_waypoint")).args(["gen", "--config"]).arg(d.join("bad.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // overwrite refused
    assert_eq!(cli(d, &["gen"]).status.code(), Some(0));
    assert_eq!(cli(d, &["gen"]).status.code(), Some(5));
    // numerical blow-up
    let blow = format!("{}\n", TINY.replace("learning_rate = 1e-3\n[finetune]", "learning_rate = 1e300\n[finetune]"));
    std::fs::write(d.join("tiny.toml"), blow).unwrap();
    let out = cli(d, &["pretrain", "--force"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
