//! Scripted loss curves with a known Pseudo/Real crossover.

use p2r::controller::{run_switch_trial, Branch, SwitchPolicy, TrialRunner};
use p2r::error::Result;

/// Scripted run: Pseudo loss follows `2 + 3·exp(-n/150)` per step (1 s
/// each); after a delink the loss falls linearly at `rate` per second
/// (2 s per step). The Pseudo slope per second is `-0.02·exp(-n/150)`, so
/// Real overtakes it at `n* = 150·ln(0.02 / rate)`.
#[derive(Clone)]
pub struct Scripted {
    pub rate: f64,
    pub step: u64,
    pub real: Option<(f64, f64)>,
    pub wall: f64,
    pub params: Vec<f32>,
}

impl Scripted {
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            step: 0,
            real: None,
            wall: 0.0,
            params: vec![0.5; 8],
        }
    }

    pub fn pseudo_loss(n: u64) -> f64 {
        2.0 + 3.0 * (-(n as f64) / 150.0).exp()
    }

    pub fn crossover(rate: f64) -> f64 {
        150.0 * (0.02 / rate).ln()
    }
}

impl TrialRunner for Scripted {
    type Snapshot = Scripted;

    fn snapshot(&self) -> Scripted {
        self.clone()
    }

    fn restore(&mut self, s: Scripted) {
        *self = s;
    }

    fn current_step(&self) -> u64 {
        self.step
    }

    fn enter_real(&mut self) -> Result<()> {
        self.real = Some((Self::pseudo_loss(self.step), 0.0));
        Ok(())
    }

    fn train_step(&mut self, _branch: Branch) -> Result<f64> {
        self.step += 1;
        let dt = match self.real.as_mut() {
            Some((_, t)) => {
                *t += 2.0;
                for p in self.params.iter_mut() {
                    *p = (*p * 1.37).sin();
                }
                2.0
            }
            None => {
                for (i, p) in self.params.iter_mut().enumerate() {
                    *p = (*p + i as f32 * 0.01).cos();
                }
                1.0
            }
        };
        self.wall += dt;
        Ok(dt)
    }

    fn eval_loss(&mut self) -> Result<f64> {
        Ok(match self.real {
            Some((base, t)) => base - self.rate * t,
            None => Self::pseudo_loss(self.step),
        })
    }

    fn charge(&mut self, seconds: f64) {
        self.wall += seconds;
    }
}

/// Main loop: Pseudo steps with a trial at every interval boundary. Returns
/// the step whose trial fired.
pub fn detect(rate: f64, policy: &SwitchPolicy, limit: u64) -> Option<u64> {
    let mut run = Scripted::new(rate);
    while run.step < limit {
        if run.step > 0 && run.step % policy.eval_interval_steps == 0 {
            let out = run_switch_trial(&mut run, policy).unwrap();
            assert_eq!(run.real, None, "trial must leave the run in Pseudo");
            if out.record.fired {
                return Some(out.record.step);
            }
            // Continuation may cross the next boundary.
            let next = (run.step / policy.eval_interval_steps + 1) * policy.eval_interval_steps;
            while run.step < next {
                run.train_step(Branch::PseudoContinuation).unwrap();
            }
            continue;
        }
        run.train_step(Branch::PseudoContinuation).unwrap();
    }
    None
}

pub fn policy() -> SwitchPolicy {
    SwitchPolicy {
        eval_interval_steps: 100,
        trial_budget_steps: 10,
        slope_window: 5,
    }
}
