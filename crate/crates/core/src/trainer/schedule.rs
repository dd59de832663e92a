use std::f64::consts::PI;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("step {step} outside [0, {total})")]
    OutOfRange { step: u64, total: u64 },
    #[error("warm-up {warmup} must be shorter than the run ({total} steps)")]
    WarmupTooLong { warmup: u64, total: u64 },
}

/// Linear warm-up to `peak_lr` over `warmup_steps`, then cosine decay to
/// zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self, ScheduleError> {
        if warmup_steps >= total_steps {
            return Err(ScheduleError::WarmupTooLong {
                warmup: warmup_steps,
                total: total_steps,
            });
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, ScheduleError> {
        if step >= self.total_steps {
            return Err(ScheduleError::OutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            // (step+1)/W reaches exactly 1.0 at step W-1
            return Ok(self.peak_lr * ((step + 1) as f64 / self.warmup_steps as f64));
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(0.5 * self.peak_lr * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint_and_end() {
        let s = WarmupCosine::new(1e-3, 1000, 4000).unwrap();
        assert_eq!(s.lr_at(499).unwrap(), 5.0e-4);
        assert_eq!(s.lr_at(999).unwrap(), 1e-3);
        assert_eq!(s.lr_at(1000).unwrap(), 1e-3);
    }

    #[test]
    fn cosine_half_way() {
        let s = WarmupCosine::new(2.0, 1000, 3000).unwrap();
        assert!((s.lr_at(2000).unwrap() - 1.0).abs() < 1e-12);
        assert!(s.lr_at(2999).unwrap() <= s.lr_at(1000).unwrap());
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = WarmupCosine::new(0.5, 0, 10).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.5);
    }

    #[test]
    fn range_errors() {
        let s = WarmupCosine::new(0.5, 2, 10).unwrap();
        assert_eq!(s.lr_at(10), Err(ScheduleError::OutOfRange { step: 10, total: 10 }));
        assert!(WarmupCosine::new(0.5, 10, 10).is_err());
    }
}
