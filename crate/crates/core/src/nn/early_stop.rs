/// Patience-based early stopping on a monitored loss.
///
/// An epoch counts as an improvement only if the loss drops below the best seen
/// so far by more than `min_delta`; training stops once `patience` consecutive
/// epochs fail to improve.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    stagnant: usize,
    epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            stagnant: 0,
            epochs: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epochs += 1;
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - self.min_delta,
        };
        if improved {
            self.best = Some(loss);
            self.best_epoch = self.epochs;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        StopDecision {
            improved,
            stop: self.stagnant >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best loss.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn stagnant_epochs(&self) -> usize {
        self.stagnant
    }
}
