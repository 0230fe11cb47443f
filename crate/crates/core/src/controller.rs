//! Two-stage orchestration: Pseudo training, switch detection by trial
//! transfer, delinking and Real continuation.

use std::fmt;
use std::str::FromStr;

use crate::data::{Batch, DataPipeline, StreamPos};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::offload::{plan_offload, ByteProfile, MovementCoefficients, TieredStore};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule, Moments};
use crate::train::{eval_loss, StepStats, Trainer, VirtualClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pseudo,
    Real,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pseudo => "PSEUDO",
            Stage::Real => "REAL",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PSEUDO" => Ok(Stage::Pseudo),
            "REAL" => Ok(Stage::Real),
            _ => Err(Error::Parse {
                line: 0,
                msg: format!("unknown stage {s:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchPolicy {
    pub eval_interval_steps: u64,
    pub trial_budget_steps: u64,
    /// Evaluation points per trial (plus the shared starting point).
    pub slope_window: u64,
}

impl Default for SwitchPolicy {
    fn default() -> Self {
        Self {
            eval_interval_steps: 500,
            trial_budget_steps: 50,
            slope_window: 5,
        }
    }
}

impl SwitchPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval_steps == 0 || self.trial_budget_steps == 0 || self.slope_window == 0 {
            return Err(Error::Config("switch policy fields must be positive".into()));
        }
        if self.trial_budget_steps > self.eval_interval_steps {
            return Err(Error::Config(format!(
                "trial budget {} exceeds eval interval {}",
                self.trial_budget_steps, self.eval_interval_steps
            )));
        }
        if self.slope_window > self.trial_budget_steps {
            return Err(Error::Config(format!(
                "slope window {} exceeds trial budget {}",
                self.slope_window, self.trial_budget_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub step: u64,
    pub real_slope: f64,
    pub pseudo_slope: f64,
    pub fired: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageState {
    pub stage: Stage,
    pub global_step: u64,
    pub samples_consumed: u64,
    pub wall_time_s: f64,
    pub seed: u64,
    pub data_pos: StreamPos,
    pub batches_drawn: u64,
    pub last_eval_step: Option<u64>,
    pub trials: Vec<TrialRecord>,
    pub switch_step: Option<u64>,
}

impl StageState {
    pub fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            global_step: 0,
            samples_consumed: 0,
            wall_time_s: 0.0,
            seed,
            data_pos: StreamPos::default(),
            batches_drawn: 0,
            last_eval_step: None,
            trials: Vec::new(),
            switch_step: None,
        }
    }
}

/// Builds the Real model and optimizer from a Pseudo pair by copying the
/// shared layer into every position. Moments are copied when
/// `copy_moments`, otherwise zeroed with the bias-correction count reset.
pub fn delink(model: &Model, optimizer: &AdamW, copy_moments: bool) -> Result<(Model, AdamW)> {
    if !model.is_shared() {
        return Err(Error::State("delink requires a Pseudo (shared) model".into()));
    }
    let l = model.config.n_layers_graph;
    let real = Model {
        config: model.config.clone().unshared(),
        embed: model.embed.clone(),
        layers: vec![model.layers[0].clone(); l],
        layout: model.layout.clone(),
    };
    let widen = |m: &Moments| Moments {
        embed: m.embed.clone(),
        layers: vec![m.layers[0].clone(); l],
    };
    let opt = if copy_moments {
        AdamW {
            config: optimizer.config,
            m: widen(&optimizer.m),
            v: widen(&optimizer.v),
            step: optimizer.step,
        }
    } else {
        AdamW::new(&real, optimizer.config)
    };
    Ok((real, opt))
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Which branch of a trial transfer a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Speculative Real training that is discarded afterwards.
    RealTrial,
    /// Pseudo training after the revert; part of the main run.
    PseudoContinuation,
}

/// What the switch detector needs from a training run.
pub trait TrialRunner {
    type Snapshot;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
    fn current_step(&self) -> u64;
    /// Converts the live run to the Real stage.
    fn enter_real(&mut self) -> Result<()>;
    /// Runs one update, returning the seconds it took.
    fn train_step(&mut self, branch: Branch) -> Result<f64>;
    fn eval_loss(&mut self) -> Result<f64>;
    /// Adds time spent outside the main run (the discarded Real trial).
    fn charge(&mut self, seconds: f64);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    pub real_time_s: f64,
    pub pseudo_time_s: f64,
}

/// Trial transfer at the current step: snapshot, delink, train Real for
/// the trial budget, revert, then train Pseudo for the same time. Fires
/// when Real loss falls faster per unit time than Pseudo loss. On return the
/// runner holds the Pseudo continuation with the trial time charged.
pub fn run_switch_trial<R: TrialRunner>(run: &mut R, policy: &SwitchPolicy) -> Result<TrialOutcome> {
    policy.validate()?;
    let step = run.current_step();
    let snapshot = run.snapshot();
    let start_loss = run.eval_loss()?;

    run.enter_real()?;
    let spacing = (policy.trial_budget_steps / policy.slope_window).max(1);
    let mut real_points = vec![(0.0, start_loss)];
    let mut targets = Vec::new();
    let mut t = 0.0;
    for s in 1..=policy.trial_budget_steps {
        t += run.train_step(Branch::RealTrial)?;
        if s % spacing == 0 || s == policy.trial_budget_steps {
            real_points.push((t, run.eval_loss()?));
            targets.push(t);
        }
    }
    targets.dedup();
    let real_time_s = t;
    run.restore(snapshot);
    run.charge(real_time_s);

    let mut pseudo_points = vec![(0.0, start_loss)];
    let mut elapsed = 0.0;
    let mut next = 0;
    while next < targets.len() {
        elapsed += run.train_step(Branch::PseudoContinuation)?;
        if elapsed >= targets[next] {
            pseudo_points.push((elapsed, run.eval_loss()?));
            while next < targets.len() && targets[next] <= elapsed {
                next += 1;
            }
        }
    }
    let real_slope = ls_slope(&real_points);
    let pseudo_slope = ls_slope(&pseudo_points);
    Ok(TrialOutcome {
        record: TrialRecord {
            step,
            real_slope,
            pseudo_slope,
            fired: real_slope < pseudo_slope,
        },
        real_time_s,
        pseudo_time_s: elapsed,
    })
}

/// Per-stage optimization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSettings {
    pub peak_lr: f32,
    /// Cosine horizon in updates.
    pub total_steps: u64,
    pub micro_batch: usize,
    pub accumulation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub pseudo: StageSettings,
    pub real: StageSettings,
    pub warmup_ratio: f64,
    pub min_lr_ratio: f32,
    pub adam: AdamWConfig,
    pub clock: VirtualClock,
    pub coefficients: MovementCoefficients,
    /// Fast-tier bytes for layer state; `None` keeps every layer resident.
    pub offload_budget: Option<u64>,
    pub copy_moments_on_delink: bool,
}

impl RunSettings {
    pub fn stage(&self, stage: Stage) -> &StageSettings {
        match stage {
            Stage::Pseudo => &self.pseudo,
            Stage::Real => &self.real,
        }
    }
}

/// Plans placement for `model` under the run's budget.
pub fn make_store(model: &Model, settings: &RunSettings) -> Result<TieredStore> {
    let profile = ByteProfile::from_model(model);
    match settings.offload_budget {
        None => Ok(TieredStore::all_fast(profile)),
        Some(budget) => {
            let plan = plan_offload(&profile, budget, &settings.clock.link, &settings.coefficients)?;
            TieredStore::new(profile, plan.placement, budget, settings.coefficients)
        }
    }
}

pub fn make_trainer(
    model: Model,
    optimizer: AdamW,
    stage: Stage,
    stage_step: u64,
    settings: &RunSettings,
) -> Result<Trainer> {
    let s = settings.stage(stage);
    let store = make_store(&model, settings)?;
    Ok(Trainer {
        model,
        optimizer,
        schedule: CosineSchedule {
            peak_lr: s.peak_lr,
            warmup_ratio: settings.warmup_ratio,
            total_steps: s.total_steps,
            min_lr_ratio: settings.min_lr_ratio,
        },
        store,
        clock: settings.clock,
        micro_batch: s.micro_batch,
        accumulation: s.accumulation,
        stage_step,
    })
}

/// A live run: trainer, data position, evaluation set and bookkeeping.
#[derive(Debug, Clone)]
pub struct Session {
    pub trainer: Trainer,
    pub data: DataPipeline,
    pub eval: Vec<Batch>,
    pub state: StageState,
    pub settings: RunSettings,
}

#[derive(Debug, Clone)]
pub struct SessionSnapshot {
    trainer: Trainer,
    data_pos: StreamPos,
    batches_drawn: u64,
    state: StageState,
}

impl SessionSnapshot {
    pub fn model(&self) -> &Model {
        &self.trainer.model
    }

    pub fn state(&self) -> &StageState {
        &self.state
    }
}

impl Session {
    pub fn new(
        model: Model,
        data: DataPipeline,
        eval: Vec<Batch>,
        settings: RunSettings,
        seed: u64,
    ) -> Result<Self> {
        let stage = if model.is_shared() {
            Stage::Pseudo
        } else {
            Stage::Real
        };
        let optimizer = AdamW::new(&model, settings.adam);
        let trainer = make_trainer(model, optimizer, stage, 0, &settings)?;
        let mut state = StageState::new(stage, seed);
        let (pos, drawn) = data.state();
        state.data_pos = pos;
        state.batches_drawn = drawn;
        Ok(Self {
            trainer,
            data,
            eval,
            state,
            settings,
        })
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let stats = self.trainer.step(&mut self.data).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence {
                step: self.state.global_step,
                loss,
            },
            other => other,
        })?;
        self.state.global_step += 1;
        self.state.samples_consumed += stats.samples;
        self.state.wall_time_s += stats.time_s;
        let (pos, drawn) = self.data.state();
        self.state.data_pos = pos;
        self.state.batches_drawn = drawn;
        Ok(stats)
    }

    pub fn evaluate(&self) -> Result<f32> {
        eval_loss(&self.trainer.model, &self.eval)
    }

    /// Delinks in place and restarts the schedule with the Real settings.
    pub fn delink(&mut self) -> Result<()> {
        if self.state.stage != Stage::Pseudo {
            return Err(Error::State("run is already in the Real stage".into()));
        }
        let (model, opt) = delink(
            &self.trainer.model,
            &self.trainer.optimizer,
            self.settings.copy_moments_on_delink,
        )?;
        self.trainer = make_trainer(model, opt, Stage::Real, 0, &self.settings)?;
        self.state.stage = Stage::Real;
        self.state.switch_step = Some(self.state.global_step);
        Ok(())
    }

    /// Runs a trial transfer; when it fires the run is delinked at the end
    /// of the Pseudo continuation.
    pub fn detect_switch(&mut self, policy: &SwitchPolicy) -> Result<TrialRecord> {
        let record = settle_trial(self, policy)?;
        if record.fired {
            self.delink()?;
        }
        Ok(record)
    }
}

/// Runs a trial on any runner wrapping `session` and books the result.
pub fn settle_trial<R>(run: &mut R, policy: &SwitchPolicy) -> Result<TrialRecord>
where
    R: TrialRunner + AsMut<Session>,
{
    if run.as_mut().state.stage != Stage::Pseudo {
        return Err(Error::State("switch detection needs the Pseudo stage".into()));
    }
    let outcome = run_switch_trial(run, policy)?;
    let state = &mut run.as_mut().state;
    state.last_eval_step = Some(outcome.record.step);
    state.trials.push(outcome.record);
    Ok(outcome.record)
}

impl AsMut<Session> for Session {
    fn as_mut(&mut self) -> &mut Session {
        self
    }
}

impl TrialRunner for Session {
    type Snapshot = SessionSnapshot;

    fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            trainer: self.trainer.clone(),
            data_pos: self.data.stream.position(),
            batches_drawn: self.data.batches_drawn,
            state: self.state.clone(),
        }
    }

    fn restore(&mut self, s: SessionSnapshot) {
        self.trainer = s.trainer;
        self.data.restore(s.data_pos, s.batches_drawn);
        self.state = s.state;
    }

    fn current_step(&self) -> u64 {
        self.state.global_step
    }

    fn enter_real(&mut self) -> Result<()> {
        self.delink()
    }

    fn train_step(&mut self, _branch: Branch) -> Result<f64> {
        Ok(self.step()?.time_s)
    }

    fn eval_loss(&mut self) -> Result<f64> {
        Ok(self.evaluate()? as f64)
    }

    fn charge(&mut self, seconds: f64) {
        self.state.wall_time_s += seconds;
    }
}
