//! The stages behind each CLI subcommand. Every stage reads its inputs from
//! and writes its outputs under the resolved [`Paths`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waypoint_core::decoder::DecoderConfig;
use waypoint_core::env::{generate_worlds, make_dataset, Dataset, EpisodeSpec, Split, Vocabulary};
use waypoint_core::metrics::{format_table, MetricsReport};
use waypoint_core::train::{
    evaluate, expert_report, finetune as run_finetune, pretrain as run_pretrain, sap_accuracy, Agent,
    EncodedDataset, FinetunePoint, FinetuneState, PretrainPoint, SapAccuracy,
};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{ExperimentConfig, Paths};
use crate::error::{Error, Result};
use crate::io::{self, claim_outputs, write_bytes, write_json, write_jsonl, Logger, Meta};

pub const EVAL_SPLITS: [Split; 2] = [Split::ValSeen, Split::ValUnseen];

pub struct Context {
    pub cfg: ExperimentConfig,
    pub paths: Paths,
    pub force: bool,
    pub log: Logger,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: &Path, force: bool, log: Logger) -> Self {
        let paths = cfg.paths.under(out);
        Self { cfg, paths, force, log }
    }

    fn report(&self, name: &str) -> PathBuf {
        self.paths.report_dir.join(name)
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths.checkpoint_dir.join(name)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        io::load_dataset(&self.paths.data_dir, &self.cfg)
    }

    /// `target_return_scale` times the best expert return in the training split.
    pub fn target_return(&self, ds: &Dataset) -> f64 {
        self.cfg.finetune.target_return_scale * ds.max_train_return()
    }
}

pub fn vocabulary(cfg: &ExperimentConfig) -> Vocabulary {
    Vocabulary::new(cfg.env.world.n_landmarks)
}

pub fn new_agent(cfg: &ExperimentConfig) -> Result<Agent> {
    Ok(Agent::new(cfg.embed, cfg.decoder.clone(), vocabulary(cfg), cfg.seed)?)
}

pub fn agent_from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Agent> {
    Ok(Agent::from_store(cfg.embed, cfg.decoder.clone(), vocabulary(cfg), ck.store.clone())?)
}

fn episodes(trajs: &[waypoint_core::env::Trajectory]) -> Vec<EpisodeSpec> {
    trajs.iter().map(|t| t.episode.clone()).collect()
}

/// Header line prepended to text tables.
fn stamp(meta: &Meta) -> String {
    format!("# {} config_hash={} seed={} version={}\n", meta.kind, meta.config_hash, meta.seed, meta.version)
}

fn slug(label: &str) -> String {
    label.to_ascii_lowercase().replace('+', "-")
}

/// Training callbacks can only return core errors; an IO failure inside one
/// is parked here and re-raised once the loop has stopped.
fn stash(r: Result<()>, slot: &mut Option<Error>) -> waypoint_core::Result<()> {
    r.map_err(|e| {
        *slot = Some(e);
        waypoint_core::Error::InvalidConfig("aborted by callback".into())
    })
}

fn unstash<T>(r: waypoint_core::Result<T>, slot: Option<Error>) -> Result<T> {
    match (r, slot) {
        (Err(_), Some(e)) => Err(e),
        (r, _) => Ok(r?),
    }
}

// ---------------------------------------------------------------- gen

pub fn gen(ctx: &mut Context) -> Result<Dataset> {
    claim_outputs(&io::dataset_files(&ctx.paths.data_dir), ctx.force)?;
    let cfg = &ctx.cfg;
    let graphs = generate_worlds(&cfg.env, cfg.n_graphs(), cfg.data_seed)?;
    let ds = make_dataset(graphs, &cfg.env, &cfg.dataset, cfg.data_seed)?;
    io::save_dataset(&ctx.paths.data_dir, &ds, cfg)?;
    for s in Split::ALL {
        let t = ds.split(s);
        let lens: Vec<f64> = t.iter().map(|t| t.episode.expert_length).collect();
        let mean = lens.iter().sum::<f64>() / lens.len().max(1) as f64;
        let (lo, hi) = lens.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        let steps = t.iter().map(|t| t.len()).sum::<usize>() as f64 / t.len().max(1) as f64;
        ctx.log.log(
            "gen.split",
            &[
                ("split", s.name().into()),
                ("episodes", t.len().to_string()),
                ("expert_len_mean", format!("{:.3}", mean)),
                ("expert_len_min", format!("{:.3}", lo)),
                ("expert_len_max", format!("{:.3}", hi)),
                ("steps_mean", format!("{:.2}", steps)),
            ],
        );
    }
    ctx.log.log("gen.done", &[("graphs", ds.graphs.len().to_string()), ("dir", ctx.paths.data_dir.display().to_string())]);
    Ok(ds)
}

// ---------------------------------------------------------------- pretrain

pub struct PretrainRun {
    pub agent: Agent,
    pub curve: Vec<PretrainPoint>,
    pub checkpoint: PathBuf,
}

fn check_stop(until: Option<usize>, total: usize, every: usize) -> Result<usize> {
    match until {
        None => Ok(total),
        Some(u) if u == 0 || u > total => Err(Error::Config(format!("--until {} outside 1..={}", u, total))),
        // Runs can only stop where a checkpoint is written, so that resuming
        // is exact.
        Some(u) if u % every != 0 && u != total => {
            Err(Error::Config(format!("--until {} is not a multiple of eval_every {}", u, every)))
        }
        Some(u) => Ok(u),
    }
}

/// Offline pre-training, optionally resumed from a pre-training checkpoint
/// and optionally stopped early at `until`.
pub fn pretrain(ctx: &mut Context, resume: Option<&Path>, until: Option<usize>) -> Result<PretrainRun> {
    let cfg = ctx.cfg.clone();
    let ck_path = ctx.checkpoint("pretrain.ckpt");
    let curve_path = ctx.report("pretrain_curve.jsonl");
    let end = check_stop(until, cfg.pretrain.iterations, cfg.pretrain.eval_every)?;

    let (mut agent, mut curve, start) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(&cfg, p)?;
            if ck.meta.stage != Stage::Pretrain {
                return Err(Error::Config(format!("{} is not a pre-training checkpoint", p.display())));
            }
            (agent_from_checkpoint(&cfg, &ck)?, ck.meta.pretrain_curve.clone(), ck.meta.iteration)
        }
        None => {
            claim_outputs(&[ck_path.clone(), curve_path.clone()], ctx.force)?;
            (new_agent(&cfg)?, Vec::new(), 0)
        }
    };
    if start > end {
        return Err(Error::Config(format!("checkpoint is at iteration {}, past the requested stop {}", start, end)));
    }
    let ds = ctx.load_dataset()?;
    let data = EncodedDataset::new(&agent, &ds)?;
    ctx.log.log(
        "pretrain.start",
        &[("from", start.to_string()), ("to", end.to_string()), ("params", agent.store.num_scalars().to_string())],
    );
    let log = &mut ctx.log;
    let curve_meta = Meta::new("pretrain_curve", &cfg);
    let mut failure = None;
    let res = run_pretrain(&mut agent, &data, &cfg.pretrain, start..end, |p, a| {
        curve.push(p.clone());
        log.log(
            "pretrain.eval",
            &[
                ("it", p.iteration.to_string()),
                ("loss", format!("{:.6}", p.loss)),
                ("sap_seen", format!("{:.2}", p.val_seen.percent())),
                ("sap_unseen", format!("{:.2}", p.val_unseen.percent())),
            ],
        );
        let mut ck = Checkpoint::new(Stage::Pretrain, "PT", p.iteration, &cfg, a.store.clone());
        ck.meta.pretrain_curve = curve.clone();
        let written = ck.save(&ck_path).and_then(|_| write_jsonl(&curve_path, &curve_meta, &curve));
        stash(written, &mut failure)
    });
    unstash(res, failure)?;
    Ok(PretrainRun { agent, curve, checkpoint: ck_path })
}

// ---------------------------------------------------------------- finetune

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: Meta,
    pub label: String,
    pub stage: Option<Stage>,
    pub iteration: usize,
    pub val_seen: MetricsReport,
    pub val_unseen: MetricsReport,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let names: Vec<&str> = EVAL_SPLITS.iter().map(|s| s.name()).collect();
        let row = (self.label.clone(), vec![Some(self.val_seen.clone()), Some(self.val_unseen.clone())]);
        format!("{}{}", stamp(&self.meta), format_table(&names, &[row]))
    }

    fn write(&self, base: &Path) -> Result<()> {
        write_json(&base.with_extension("json"), self)?;
        write_bytes(&base.with_extension("txt"), self.table().as_bytes())
    }
}

pub struct FinetuneRun {
    pub agent: Agent,
    pub label: String,
    pub state: FinetuneState,
    pub curve: Vec<FinetunePoint>,
    pub checkpoint: PathBuf,
}

/// Online fine-tuning. Without a checkpoint this is the fine-tune-only arm
/// ("FT-only"); from a pre-training checkpoint it is "PT+FT"; from a
/// fine-tuning checkpoint it resumes that run.
pub fn finetune(ctx: &mut Context, from: Option<&Path>, until: Option<usize>) -> Result<FinetuneRun> {
    let cfg = ctx.cfg.clone();
    let end = check_stop(until, cfg.finetune.iterations, cfg.finetune.eval_every)?;
    let loaded = match from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(&cfg, p)?;
            Some(ck)
        }
        None => None,
    };
    let (mut agent, label, mut state, mut curve, pt_curve, resuming) = match loaded {
        None => (new_agent(&cfg)?, "FT-only".to_string(), FinetuneState::new(&cfg.finetune)?, Vec::new(), Vec::new(), false),
        Some(ck) => match (ck.meta.stage, ck.finetune.clone()) {
            (Stage::Pretrain, _) => {
                let mut a = agent_from_checkpoint(&cfg, &ck)?;
                // A new phase with its own learning rate starts with fresh moments.
                a.store.reset_optimizer();
                (a, "PT+FT".to_string(), FinetuneState::new(&cfg.finetune)?, Vec::new(), ck.meta.pretrain_curve.clone(), false)
            }
            (Stage::Finetune, Some(st)) => {
                let a = agent_from_checkpoint(&cfg, &ck)?;
                (a, ck.meta.label.clone(), st, ck.meta.finetune_curve.clone(), ck.meta.pretrain_curve.clone(), true)
            }
            (Stage::Finetune, None) => {
                return Err(Error::Checkpoint { path: from.unwrap().into(), reason: "fine-tuning state missing".into() })
            }
        },
    };
    let s = slug(&label);
    let ck_path = ctx.checkpoint(&format!("finetune_{}.ckpt", s));
    let best_path = ctx.checkpoint(&format!("finetune_{}_best.ckpt", s));
    let curve_path = ctx.report(&format!("finetune_{}_curve.jsonl", s));
    let report_base = ctx.report(&format!("finetune_{}", s));
    if !resuming {
        claim_outputs(
            &[ck_path.clone(), best_path.clone(), curve_path.clone(), report_base.with_extension("json"), report_base.with_extension("txt")],
            ctx.force,
        )?;
    }
    if state.iteration > end {
        return Err(Error::Config(format!("checkpoint is at iteration {}, past the requested stop {}", state.iteration, end)));
    }
    let ds = ctx.load_dataset()?;
    ctx.log.log("finetune.start", &[("label", label.clone()), ("from", state.iteration.to_string()), ("to", end.to_string())]);
    let log = &mut ctx.log;
    let curve_meta = Meta::new("finetune_curve", &cfg);
    let mut failure = None;
    // The latest model is what resumes; the best-unseen-SR one is kept aside.
    let mut best = curve.iter().map(|p| p.val_unseen.sr).fold(f64::NEG_INFINITY, f64::max);
    let res = run_finetune(&mut agent, &ds, &cfg.env, &cfg.finetune, &mut state, end, |p, a, st| {
        curve.push(p.clone());
        log.log(
            "finetune.eval",
            &[
                ("label", label.clone()),
                ("it", p.iteration.to_string()),
                ("loss", format!("{:.6}", p.loss)),
                ("entropy", format!("{:.4}", p.entropy)),
                ("lambda", format!("{:.5}", p.lambda)),
                ("replay_return", format!("{:.3}", p.replay_mean_return)),
                ("sr_seen", format!("{:.2}", p.val_seen.sr)),
                ("sr_unseen", format!("{:.2}", p.val_unseen.sr)),
                ("spl_seen", format!("{:.2}", p.val_seen.spl)),
                ("spl_unseen", format!("{:.2}", p.val_unseen.spl)),
            ],
        );
        let mut ck = Checkpoint::new(Stage::Finetune, &label, p.iteration, &cfg, a.store.clone());
        ck.meta.pretrain_curve = pt_curve.clone();
        ck.meta.finetune_curve = curve.clone();
        ck.finetune = Some(st.clone());
        let mut written = ck.save(&ck_path).and_then(|_| write_jsonl(&curve_path, &curve_meta, &curve));
        if written.is_ok() && p.val_unseen.sr > best {
            best = p.val_unseen.sr;
            written = ck.save(&best_path);
        }
        stash(written, &mut failure)
    });
    unstash(res, failure)?;
    if let Some(last) = curve.last().filter(|p| p.iteration == end) {
        EvalReport {
            meta: Meta::new("finetune_report", &cfg),
            label: label.clone(),
            stage: Some(Stage::Finetune),
            iteration: last.iteration,
            val_seen: last.val_seen.clone(),
            val_unseen: last.val_unseen.clone(),
        }
        .write(&report_base)?;
    }
    Ok(FinetuneRun { agent, label, state, curve, checkpoint: ck_path })
}

// ---------------------------------------------------------------- eval

/// Greedy evaluation on both validation splits.
pub fn evaluate_agent(ctx: &Context, agent: &Agent, ds: &Dataset) -> Result<(MetricsReport, MetricsReport)> {
    let target = ctx.target_return(ds);
    let seen = evaluate(agent, &ds.graphs, &episodes(&ds.val_seen), &ctx.cfg.env, target)?;
    let unseen = evaluate(agent, &ds.graphs, &episodes(&ds.val_unseen), &ctx.cfg.env, target)?;
    Ok((seen, unseen))
}

/// Evaluate a checkpoint, or replay the expert when `expert` is set.
pub fn eval(ctx: &mut Context, checkpoint: Option<&Path>, expert: bool) -> Result<EvalReport> {
    let ds = ctx.load_dataset()?;
    let meta = Meta::new("eval_report", &ctx.cfg);
    let report = match (checkpoint, expert) {
        (_, true) => {
            let env = &ctx.cfg.env;
            EvalReport {
                meta,
                label: "expert".into(),
                stage: None,
                iteration: 0,
                val_seen: expert_report(&ds.graphs, &episodes(&ds.val_seen), env)?,
                val_unseen: expert_report(&ds.graphs, &episodes(&ds.val_unseen), env)?,
            }
        }
        (Some(p), false) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(&ctx.cfg, p)?;
            let agent = agent_from_checkpoint(&ctx.cfg, &ck)?;
            let (val_seen, val_unseen) = evaluate_agent(ctx, &agent, &ds)?;
            EvalReport { meta, label: ck.meta.label.clone(), stage: Some(ck.meta.stage), iteration: ck.meta.iteration, val_seen, val_unseen }
        }
        (None, false) => return Err(Error::Config("eval needs --checkpoint or --expert".into())),
    };
    let base = ctx.report(&format!("eval_{}", slug(&report.label)));
    claim_outputs(&[base.with_extension("json"), base.with_extension("txt")], ctx.force)?;
    report.write(&base)?;
    ctx.log.log(
        "eval.done",
        &[
            ("label", report.label.clone()),
            ("sr_seen", format!("{:.2}", report.val_seen.sr)),
            ("sr_unseen", format!("{:.2}", report.val_unseen.sr)),
            ("spl_seen", format!("{:.2}", report.val_seen.spl)),
            ("spl_unseen", format!("{:.2}", report.val_unseen.spl)),
            ("ne_seen", format!("{:.3}", report.val_seen.ne)),
            ("ne_unseen", format!("{:.3}", report.val_unseen.ne)),
        ],
    );
    Ok(report)
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Full-episode context against a single-step context.
    SeqLen,
    /// 3, 5, 9 and 12 transformer blocks.
    NBlocks,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::SeqLen => "seq_len",
            Sweep::NBlocks => "n_blocks",
        }
    }

    pub fn variants(self, base: &DecoderConfig) -> Vec<(String, DecoderConfig)> {
        match self {
            Sweep::SeqLen => vec![
                ("K=full".into(), DecoderConfig { context_length: None, ..base.clone() }),
                ("K=1".into(), DecoderConfig { context_length: Some(1), ..base.clone() }),
            ],
            Sweep::NBlocks => [3, 5, 9, 12]
                .iter()
                .map(|l| (format!("L={}", l), DecoderConfig { n_blocks: *l, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub decoder: DecoderConfig,
    pub sap_seen: SapAccuracy,
    pub sap_unseen: SapAccuracy,
    pub val_seen: MetricsReport,
    pub val_unseen: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub meta: Meta,
    pub sweep: Sweep,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let names: Vec<&str> = EVAL_SPLITS.iter().map(|s| s.name()).collect();
        let rows: Vec<(String, Vec<Option<MetricsReport>>)> =
            self.rows.iter().map(|r| (r.name.clone(), vec![Some(r.val_seen.clone()), Some(r.val_unseen.clone())])).collect();
        format!("{}{}", stamp(&self.meta), format_table(&names, &rows))
    }
}

/// Pre-train one model per sweep setting from scratch and evaluate each.
pub fn ablate(ctx: &mut Context, sweep: Sweep) -> Result<AblationReport> {
    let base = ctx.report(&format!("ablate_{}", sweep.name()));
    claim_outputs(&[base.with_extension("json"), base.with_extension("txt")], ctx.force)?;
    let ds = ctx.load_dataset()?;
    let mut rows = Vec::new();
    for (name, dec) in sweep.variants(&ctx.cfg.decoder) {
        let mut cfg = ctx.cfg.clone();
        cfg.decoder = dec.clone();
        cfg.validate()?;
        let mut agent = new_agent(&cfg)?;
        let data = EncodedDataset::new(&agent, &ds)?;
        ctx.log.log("ablate.train", &[("sweep", sweep.name().into()), ("variant", name.clone())]);
        let n = cfg.pretrain.iterations;
        run_pretrain(&mut agent, &data, &cfg.pretrain, 0..n, |_, _| Ok(()))?;
        let (val_seen, val_unseen) = evaluate_agent(ctx, &agent, &ds)?;
        let row = AblationRow {
            name: name.clone(),
            decoder: dec,
            sap_seen: sap_accuracy(&agent, &data.val_seen)?,
            sap_unseen: sap_accuracy(&agent, &data.val_unseen)?,
            val_seen,
            val_unseen,
        };
        ctx.log.log(
            "ablate.row",
            &[
                ("variant", name),
                ("sr_seen", format!("{:.2}", row.val_seen.sr)),
                ("sr_unseen", format!("{:.2}", row.val_unseen.sr)),
                ("spl_seen", format!("{:.2}", row.val_seen.spl)),
                ("spl_unseen", format!("{:.2}", row.val_unseen.spl)),
            ],
        );
        rows.push(row);
    }
    let report = AblationReport { meta: Meta::new(&format!("ablate_{}", sweep.name()), &ctx.cfg), sweep, rows };
    write_json(&base.with_extension("json"), &report)?;
    write_bytes(&base.with_extension("txt"), report.table().as_bytes())?;
    print!("{}", report.table());
    Ok(report)
}
