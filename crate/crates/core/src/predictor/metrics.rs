//! Prequential (test-then-train) classification metrics.

use super::Label;

/// Confusion counts with delay as the positive class.
///
/// Ratios are reported as `None` while their denominator is zero rather than
/// being coerced to 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrequentialMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PrequentialMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one prediction/outcome pair.
    pub fn update(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::Delay, Label::Delay) => self.tp += 1,
            (Label::NoDelay, Label::NoDelay) => self.tn += 1,
            (Label::Delay, Label::NoDelay) => self.fp += 1,
            (Label::NoDelay, Label::Delay) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, denom: u64) -> Option<f64> {
    if denom == 0 {
        None
    } else {
        Some(num as f64 / denom as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_one_cell_per_update() {
        let mut m = PrequentialMetrics::new();
        m.update(Label::Delay, Label::Delay);
        assert_eq!((m.tp, m.tn, m.fp, m.fn_), (1, 0, 0, 0));
        m.update(Label::NoDelay, Label::Delay);
        assert_eq!((m.tp, m.tn, m.fp, m.fn_), (1, 0, 0, 1));
    }

    #[test]
    fn hand_counted_sequence() {
        let mut m = PrequentialMetrics::new();
        m.update(Label::Delay, Label::Delay); // TP
        m.update(Label::NoDelay, Label::NoDelay); // TN
        m.update(Label::Delay, Label::NoDelay); // FP
        assert_eq!(m.accuracy(), Some(2.0 / 3.0));
        assert_eq!(m.precision(), Some(0.5));
        assert_eq!(m.recall(), Some(1.0));
    }

    #[test]
    fn empty_metrics_report_absent_ratios() {
        let m = PrequentialMetrics::new();
        assert_eq!(m.accuracy(), None);
        assert_eq!(m.precision(), None);
        assert_eq!(m.recall(), None);
        // Only negatives seen: recall/precision stay undefined or defined as
        // their denominators allow.
        let mut m = PrequentialMetrics::new();
        m.update(Label::NoDelay, Label::NoDelay);
        assert_eq!(m.accuracy(), Some(1.0));
        assert_eq!(m.precision(), None);
        assert_eq!(m.recall(), None);
    }
}
