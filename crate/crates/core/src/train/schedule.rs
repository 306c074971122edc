/// Piecewise-constant step decay by epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    /// First epoch at the halved rate.
    pub drop_start: usize,
    /// Epochs between further halvings.
    pub half_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { base_lr: 1e-4, drop_start: 70, half_every: 20 }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.drop_start {
            return self.base_lr;
        }
        let halvings = 1 + (epoch - self.drop_start) / self.half_every.max(1);
        self.base_lr * 0.5f64.powi(halvings.min(1074) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_breakpoints() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(69), 1e-4);
        assert_eq!(s.lr_at(70), 5e-5);
        assert_eq!(s.lr_at(89), 5e-5);
        assert_eq!(s.lr_at(90), 2.5e-5);
    }

    #[test]
    fn non_increasing() {
        let s = Schedule { base_lr: 3e-3, drop_start: 4, half_every: 3 };
        for e in 0..200 {
            assert!(s.lr_at(e + 1) <= s.lr_at(e));
        }
    }
}
