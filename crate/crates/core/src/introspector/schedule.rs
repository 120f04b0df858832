/// Validation-loss plateau tracking for early stopping and LR decay.
///
/// An epoch improves when its loss is below `best - min_delta`. Two
/// counters of non-improving epochs run off the same best value: reaching
/// `lr_patience` requests a decay and resets only the LR counter; reaching
/// `stop_patience` requests a stop.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    stop_patience: usize,
    lr_patience: usize,
    factor: f64,
    min_delta: f64,
    best: f64,
    since_best: usize,
    since_decay: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub decay_lr: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(stop_patience: usize, lr_patience: usize, factor: f64, min_delta: f64) -> Self {
        Self {
            stop_patience,
            lr_patience,
            factor,
            min_delta,
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleEvent {
        let mut ev = ScheduleEvent::default();
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.since_best = 0;
            self.since_decay = 0;
            ev.improved = true;
            return ev;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_decay >= self.lr_patience {
            self.since_decay = 0;
            ev.decay_lr = true;
        }
        ev.stop = self.since_best >= self.stop_patience;
        ev
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_loss_decays_at_11_and_stops_at_16() {
        let mut s = PlateauSchedule::new(15, 10, 0.7, 1e-6);
        let mut lr: f64 = 0.01;
        let mut decays = Vec::new();
        let mut stop = None;
        for epoch in 1..=200 {
            let ev = s.observe(1.0);
            if ev.decay_lr {
                lr *= 0.7;
                decays.push(epoch);
            }
            if ev.stop {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(decays, vec![11]);
        assert_eq!(stop, Some(16));
        assert!((lr - 0.007).abs() < 1e-15);
    }

    #[test]
    fn improving_loss_never_decays() {
        let mut s = PlateauSchedule::new(15, 10, 0.7, 1e-6);
        for epoch in 1..=200 {
            let ev = s.observe(10.0 - epoch as f64 * 0.01);
            assert!(ev.improved && !ev.decay_lr && !ev.stop);
        }
    }
}
