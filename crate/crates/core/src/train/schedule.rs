use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    ReduceLr,
    EarlyStop,
}

/// Plateau rule on a maximized validation metric: after `lr_patience`
/// epochs without an improvement above `min_delta` the rate is multiplied by
/// `factor`; after `stop_patience` such epochs training stops.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr0: f64,
    pub factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    stagnant: usize,
    wait: usize,
    reductions: i32,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, factor: f64, lr_patience: usize, stop_patience: usize, min_delta: f64) -> Self {
        Self {
            lr0,
            factor,
            lr_patience,
            stop_patience,
            min_delta,
            best: None,
            stagnant: 0,
            wait: 0,
            reductions: 0,
        }
    }

    /// `lr0 · factor^k` after `k` reductions.
    pub fn lr(&self) -> f64 {
        self.lr0 * self.factor.powi(self.reductions)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's metric and returns the decision it triggers.
    pub fn observe(&mut self, metric: f64) -> Action {
        let improved = match self.best {
            None => !metric.is_nan(),
            Some(b) => metric > b + self.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.stagnant = 0;
            self.wait = 0;
            return Action::None;
        }
        self.stagnant += 1;
        self.wait += 1;
        if self.stagnant >= self.stop_patience {
            Action::EarlyStop
        } else if self.wait >= self.lr_patience {
            self.wait = 0;
            self.reductions += 1;
            Action::ReduceLr
        } else {
            Action::None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(trace: &[f64]) -> Vec<(Action, f64)> {
        let mut s = PlateauSchedule::new(0.001, 0.25, 4, 6, 1e-4);
        let mut out = Vec::new();
        for &m in trace {
            let a = s.observe(m);
            out.push((a, s.lr()));
            if a == Action::EarlyStop {
                break;
            }
        }
        out
    }

    #[test]
    fn stagnant_trace_reduces_at_epoch_five_and_stops_at_seven() {
        let log = run(&[0.5; 10]);
        assert_eq!(log.len(), 7);
        for (i, (a, lr)) in log.iter().enumerate() {
            let epoch = i + 1;
            match epoch {
                5 => assert_eq!((*a, *lr), (Action::ReduceLr, 0.00025)),
                7 => assert_eq!((*a, *lr), (Action::EarlyStop, 0.00025)),
                e if e < 5 => assert_eq!((*a, *lr), (Action::None, 0.001)),
                _ => assert_eq!((*a, *lr), (Action::None, 0.00025)),
            }
        }
    }

    #[test]
    fn improving_trace_never_triggers() {
        let trace: Vec<f64> = (0..10).map(|i| 0.5 + 0.01 * i as f64).collect();
        assert!(run(&trace).iter().all(|&(a, lr)| a == Action::None && lr == 0.001));
    }

    #[test]
    fn sub_threshold_gain_is_stagnation() {
        let log = run(&[0.5, 0.50005, 0.50009, 0.5, 0.50001]);
        assert_eq!(log[4].0, Action::ReduceLr);
    }

    #[test]
    fn repeated_reductions_are_exact_powers() {
        let mut s = PlateauSchedule::new(0.001, 0.25, 1, 100, 1e-4);
        s.observe(1.0);
        for k in 1..6 {
            assert_eq!(s.observe(0.0), Action::ReduceLr);
            assert_eq!(s.lr(), 0.001 * 0.25f64.powi(k));
        }
    }
}
