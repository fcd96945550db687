use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::NnError;

/// Per-epoch learning-rate schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// Linear ramp to `eta0` over `warmup_epochs`, then cosine decay to `eta_min`.
    WarmupCosine {
        eta0: f64,
        eta_min: f64,
        warmup_epochs: usize,
        total_epochs: usize,
    },
    /// `lr_search` for epochs before `switch_epoch`, `lr_finetune` from it on.
    TwoPhase {
        lr_search: f64,
        lr_finetune: f64,
        switch_epoch: usize,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<(), NnError> {
        match *self {
            Schedule::WarmupCosine {
                eta0,
                eta_min,
                warmup_epochs,
                total_epochs,
            } => {
                if warmup_epochs >= total_epochs {
                    return Err(NnError::InvalidSchedule(format!(
                        "warmup ({warmup_epochs}) must be shorter than the run ({total_epochs})"
                    )));
                }
                if !(eta0 > 0.0 && eta_min >= 0.0 && eta_min <= eta0) {
                    return Err(NnError::InvalidSchedule(
                        "need 0 <= eta_min <= eta0, eta0 > 0".into(),
                    ));
                }
            }
            Schedule::TwoPhase {
                lr_search,
                lr_finetune,
                ..
            } => {
                if !(lr_finetune > 0.0 && lr_finetune < lr_search) {
                    return Err(NnError::InvalidSchedule(
                        "fine-tuning rate must be positive and below the search rate".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64, NnError> {
        match *self {
            Schedule::WarmupCosine {
                eta0,
                eta_min,
                warmup_epochs,
                total_epochs,
            } => {
                if epoch >= total_epochs {
                    return Err(NnError::EpochOutOfRange {
                        epoch,
                        total: total_epochs,
                    });
                }
                if epoch < warmup_epochs {
                    return Ok(eta0 * (epoch + 1) as f64 / warmup_epochs as f64);
                }
                let progress =
                    (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
                Ok(eta_min + 0.5 * (eta0 - eta_min) * (1.0 + (PI * progress).cos()))
            }
            Schedule::TwoPhase {
                lr_search,
                lr_finetune,
                switch_epoch,
            } => Ok(if epoch < switch_epoch {
                lr_search
            } else {
                lr_finetune
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER: Schedule = Schedule::WarmupCosine {
        eta0: 0.1,
        eta_min: 0.0,
        warmup_epochs: 100,
        total_epochs: 2000,
    };

    #[test]
    fn warmup_reaches_eta0() {
        assert!((PAPER.lr_at(99).unwrap() - 0.1).abs() < 1e-15);
        assert!((PAPER.lr_at(49).unwrap() - 0.05).abs() < 1e-15);
        assert!((PAPER.lr_at(0).unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn last_epoch_matches_formula() {
        // 0.05 * (1 + cos(pi * 1899/1900)), evaluated independently
        let expect = 0.05 * (1.0 - (PI / 1900.0).cos());
        let got = PAPER.lr_at(1999).unwrap();
        assert!((got - expect).abs() < 1e-18);
        assert!((got - 6.834e-8).abs() < 1e-10);
    }

    #[test]
    fn cosine_monotone_and_continuous() {
        let mut prev = PAPER.lr_at(100).unwrap();
        assert!((prev - PAPER.lr_at(99).unwrap()).abs() < 1e-12);
        for e in 101..2000 {
            let lr = PAPER.lr_at(e).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(matches!(
            PAPER.lr_at(2000),
            Err(NnError::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn two_phase_switches() {
        let s = Schedule::TwoPhase {
            lr_search: 1e-3,
            lr_finetune: 1e-4,
            switch_epoch: 3,
        };
        assert_eq!(s.lr_at(2).unwrap(), 1e-3);
        assert_eq!(s.lr_at(3).unwrap(), 1e-4);
        let degenerate = Schedule::TwoPhase {
            lr_search: 1e-3,
            lr_finetune: 1e-4,
            switch_epoch: 0,
        };
        assert_eq!(degenerate.lr_at(0).unwrap(), 1e-4);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let s = Schedule::WarmupCosine {
            eta0: 0.1,
            eta_min: 0.0,
            warmup_epochs: 10,
            total_epochs: 10,
        };
        assert!(s.validate().is_err());
        let t = Schedule::TwoPhase {
            lr_search: 1e-4,
            lr_finetune: 1e-3,
            switch_epoch: 1,
        };
        assert!(t.validate().is_err());
    }
}
