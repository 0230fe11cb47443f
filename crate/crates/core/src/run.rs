//! Run orchestration shared by the CLI and the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, RunMode};
use crate::controller::{
    make_trainer, settle_trial, Branch, Session, SessionSnapshot, Stage, StageState, TrialRunner,
};
use crate::data::{eval_batches, Batch, Corpus, DataPipeline, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::model::Model;
use crate::train::StepStats;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let tok = match &cfg.vocab_path {
        Some(p) => Tokenizer::from_vocab_file(p)?,
        None => Tokenizer::Bytes,
    };
    if tok.vocab_size() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "model.vocab_size={} but the tokenizer has {} ids",
            cfg.model.vocab_size,
            tok.vocab_size()
        )));
    }
    Ok(tok)
}

/// Training corpus and fixed evaluation batches for a config.
pub fn load_data(cfg: &RunConfig) -> Result<(Corpus, Vec<Batch>)> {
    let tok = tokenizer(cfg)?;
    let path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let corpus = Corpus::ingest(path, cfg.model.seq_len, &tok)?;
    let (train, eval) = match &cfg.eval_path {
        Some(p) => (corpus, Corpus::ingest(p, cfg.model.seq_len, &tok)?),
        None => corpus.split_holdout(cfg.holdout_fraction)?,
    };
    let eval = eval_batches(&eval, cfg.eval_batch_size, cfg.eval_batches);
    Ok((train, eval))
}

fn pipeline(cfg: &RunConfig, train: Corpus) -> Result<DataPipeline> {
    DataPipeline::new(train, cfg.seed, cfg.schedule, cfg.denoise)
}

fn stop_reached(cfg: &RunConfig, s: &StageState) -> bool {
    (cfg.max_steps > 0 && s.global_step >= cfg.max_steps)
        || (cfg.budget_s > 0.0 && s.wall_time_s >= cfg.budget_s)
}

/// Updates left before the stop condition, estimating the step time from
/// a throwaway step on a copy of the session.
fn remaining_steps(cfg: &RunConfig, session: &Session) -> Result<u64> {
    let mut horizon = u64::MAX;
    if cfg.max_steps > 0 {
        horizon = cfg.max_steps.saturating_sub(session.state.global_step);
    }
    if cfg.budget_s > 0.0 {
        let mut probe = session.clone();
        let t = probe.step()?.time_s;
        let left = (cfg.budget_s - session.state.wall_time_s).max(0.0);
        horizon = horizon.min((left / t).ceil() as u64);
    }
    Ok(horizon.max(1))
}

/// Sets the Real-stage horizon as if the switch happened now.
fn prepare_real_horizon(cfg: &RunConfig, session: &mut Session) -> Result<()> {
    if cfg.real_steps > 0 {
        session.settings.real.total_steps = cfg.real_steps;
        return Ok(());
    }
    let mut probe = session.clone();
    if probe.state.stage == Stage::Pseudo {
        probe.settings.real.total_steps = 1;
        probe.enter_real()?;
    }
    session.settings.real.total_steps = remaining_steps(cfg, &probe)?;
    Ok(())
}

pub fn checkpoint_of(session: &Session) -> Checkpoint {
    Checkpoint {
        model: session.trainer.model.clone(),
        optimizer: session.trainer.optimizer.clone(),
        schedule: session.trainer.schedule,
        stage_step: session.trainer.stage_step,
        state: session.state.clone(),
    }
}

/// Fresh session for the configured mode.
pub fn new_session(cfg: &RunConfig, train: Corpus, eval: Vec<Batch>) -> Result<Session> {
    let shared = cfg.mode != RunMode::RealOnly;
    let model = Model::build(cfg.model_config(shared), cfg.seed)?;
    let data = pipeline(cfg, train)?;
    let mut session = Session::new(model, data, eval, cfg.settings(1, 1), cfg.seed)?;
    let (explicit, stage) = if shared {
        (cfg.pseudo_steps, Stage::Pseudo)
    } else {
        (cfg.real_steps, Stage::Real)
    };
    let horizon = if explicit > 0 {
        explicit
    } else {
        remaining_steps(cfg, &session)?
    };
    match stage {
        Stage::Pseudo => session.settings.pseudo.total_steps = horizon,
        Stage::Real => session.settings.real.total_steps = horizon,
    }
    session.trainer.schedule.total_steps = horizon;
    Ok(session)
}

/// Rebuilds a session from a checkpoint of the same run.
pub fn resume_session(
    cfg: &RunConfig,
    train: Corpus,
    eval: Vec<Batch>,
    ck: Checkpoint,
) -> Result<Session> {
    let expected = cfg.model_config(ck.model.is_shared());
    if ck.model.config != expected {
        return Err(Error::Dimension(format!(
            "checkpoint model {:?} does not match config {:?}",
            ck.model.config, expected
        )));
    }
    let mut settings = cfg.settings(1, 1);
    match ck.state.stage {
        Stage::Pseudo => settings.pseudo.total_steps = ck.schedule.total_steps,
        Stage::Real => settings.real.total_steps = ck.schedule.total_steps,
    }
    let mut trainer = make_trainer(ck.model, ck.optimizer, ck.state.stage, ck.stage_step, &settings)?;
    trainer.schedule = ck.schedule;
    let mut data = pipeline(cfg, train)?;
    data.restore(ck.state.data_pos, ck.state.batches_drawn);
    Ok(Session {
        trainer,
        data,
        eval,
        state: ck.state,
        settings,
    })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_eval: f32,
    pub state: StageState,
    pub error: Option<Error>,
}

/// Per-step observer for callers that want more than the metrics stream.
pub trait StepObserver {
    fn on_step(&mut self, _stage: Stage, _stats: &StepStats) {}
}

impl StepObserver for () {}

/// Output locations for a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub append_metrics: bool,
}

/// Metrics, checkpoints and observer calls for main-line steps.
struct Recorder<'a> {
    cfg: &'a RunConfig,
    out: Option<&'a RunOutput>,
    writer: Option<MetricsWriter<fs::File>>,
    observer: &'a mut dyn StepObserver,
    records: Vec<MetricsRecord>,
    pending_event: Option<String>,
    last: Option<StepStats>,
    /// Newest record, written once the next one arrives or the run ends.
    held: Option<MetricsRecord>,
}

impl Recorder<'_> {
    fn save(&self, session: &Session) -> Result<()> {
        if let Some(o) = self.out {
            checkpoint::save(&o.dir.join(CHECKPOINT_FILE), &checkpoint_of(session))?;
        }
        Ok(())
    }

    fn after_step(&mut self, session: &Session, stage: Stage, stats: &StepStats) -> Result<()> {
        self.observer.on_step(stage, stats);
        self.last = Some(stats.clone());
        let step = session.state.global_step;
        let with_eval = step % self.cfg.eval_interval == 0;
        if step % self.cfg.log_interval == 0 || with_eval || self.pending_event.is_some() {
            self.log(session, stats, with_eval)?;
        }
        if step % self.cfg.checkpoint_interval == 0 {
            self.save(session)?;
        }
        Ok(())
    }

    /// Closing record with an evaluation, then flushes the held record.
    fn finish(&mut self, session: &Session) -> Result<()> {
        let step = session.state.global_step;
        match self.held.as_mut() {
            Some(r) if r.step == step => {
                if r.eval_loss.is_none() {
                    r.eval_loss = Some(session.evaluate()?);
                }
            }
            _ => {
                if let Some(stats) = self.last.clone() {
                    self.log(session, &stats, true)?;
                }
            }
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(r) = self.held.take() {
            if let Some(w) = self.writer.as_mut() {
                w.write(&r)?;
            }
            self.records.push(r);
        }
        Ok(())
    }

    fn log(&mut self, session: &Session, stats: &StepStats, with_eval: bool) -> Result<()> {
        let step = session.state.global_step;
        {
            let eval_loss = if with_eval {
                Some(session.evaluate()?)
            } else {
                None
            };
            let rec = MetricsRecord {
                step,
                stage: session.state.stage,
                wall_time_s: session.state.wall_time_s,
                samples_consumed: session.state.samples_consumed,
                train_loss: stats.loss,
                eval_loss,
                lr: stats.lr,
                bytes_moved: stats.movement.total(),
                event: self.pending_event.take(),
            };
            self.flush()?;
            self.held = Some(rec);
        }
        Ok(())
    }
}

/// Session wrapper whose Pseudo continuation steps are recorded.
struct Logged<'s, 'r, 'a> {
    session: &'s mut Session,
    recorder: &'r mut Recorder<'a>,
}

impl AsMut<Session> for Logged<'_, '_, '_> {
    fn as_mut(&mut self) -> &mut Session {
        self.session
    }
}

impl TrialRunner for Logged<'_, '_, '_> {
    type Snapshot = SessionSnapshot;

    fn snapshot(&self) -> SessionSnapshot {
        self.session.snapshot()
    }

    fn restore(&mut self, s: SessionSnapshot) {
        self.session.restore(s)
    }

    fn current_step(&self) -> u64 {
        self.session.current_step()
    }

    fn enter_real(&mut self) -> Result<()> {
        self.session.enter_real()
    }

    fn train_step(&mut self, branch: Branch) -> Result<f64> {
        let stage = self.session.state.stage;
        let stats = self.session.step()?;
        if branch == Branch::PseudoContinuation {
            self.recorder.after_step(self.session, stage, &stats)?;
        }
        Ok(stats.time_s)
    }

    fn eval_loss(&mut self) -> Result<f64> {
        self.session.eval_loss()
    }

    fn charge(&mut self, seconds: f64) {
        self.session.charge(seconds)
    }
}

/// Drives `session` to the stop condition, writing metrics and checkpoints
/// to `out` when given. A divergence is reported in
/// [`RunOutcome::error`] after the final checkpoint is written. Trials that
/// start before the stop condition run to completion.
pub fn drive(
    cfg: &RunConfig,
    session: &mut Session,
    out: Option<&RunOutput>,
    observer: &mut dyn StepObserver,
) -> Result<RunOutcome> {
    let writer = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let cfg_path = o.dir.join(CONFIG_FILE);
            fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            Some(MetricsWriter::open(&o.dir.join(METRICS_FILE), o.append_metrics)?)
        }
        None => None,
    };
    let mut rec = Recorder {
        cfg,
        out,
        writer,
        observer,
        records: Vec::new(),
        pending_event: None,
        last: None,
        held: None,
    };
    let detecting = matches!(cfg.mode, RunMode::Auto | RunMode::P2r);
    let mut error = None;

    while !stop_reached(cfg, &session.state) {
        if detecting && session.state.stage == Stage::Pseudo {
            let step = session.state.global_step;
            let forced = cfg.mode == RunMode::P2r
                && cfg
                    .force_switch_s
                    .is_some_and(|t| session.state.wall_time_s >= t);
            if forced {
                prepare_real_horizon(cfg, session)?;
                session.delink()?;
                rec.pending_event = Some("DELINK".into());
            } else if step > 0
                && step % cfg.switch.eval_interval_steps == 0
                && session.state.last_eval_step != Some(step)
            {
                prepare_real_horizon(cfg, session)?;
                let trial = {
                    let mut logged = Logged {
                        session: &mut *session,
                        recorder: &mut rec,
                    };
                    match settle_trial(&mut logged, &cfg.switch) {
                        Ok(t) => t,
                        Err(e @ Error::Divergence { .. }) => {
                            error = Some(e);
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                };
                if trial.fired && !stop_reached(cfg, &session.state) {
                    prepare_real_horizon(cfg, session)?;
                    session.delink()?;
                    rec.pending_event = Some("DELINK".into());
                }
                continue;
            }
        }
        let stage = session.state.stage;
        let stats = match session.step() {
            Ok(s) => s,
            Err(e @ Error::Divergence { .. }) => {
                error = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        rec.after_step(session, stage, &stats)?;
    }
    rec.finish(session)?;
    rec.save(session)?;
    let final_eval = session.evaluate()?;
    Ok(RunOutcome {
        records: rec.records,
        final_eval,
        state: session.state.clone(),
        error,
    })
}

/// Loads data, builds or resumes a session and runs it.
pub fn run_from_config(
    cfg: &RunConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    let (train, eval) = load_data(cfg)?;
    let (mut session, append) = match resume {
        Some(p) => (resume_session(cfg, train, eval, checkpoint::load(p)?)?, true),
        None => (new_session(cfg, train, eval)?, false),
    };
    let output = out.map(|d| RunOutput {
        dir: d.to_path_buf(),
        append_metrics: append,
    });
    drive(cfg, &mut session, output.as_ref(), &mut ())
}
