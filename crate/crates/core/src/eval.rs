//! Detection scoring against ground-truth centres.

use serde::{Deserialize, Serialize};

/// Default matching radius in pixels.
pub const MATCH_RADIUS: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchStats {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_positives)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_negatives)
    }

    /// Harmonic mean of precision and recall; 1 when both sets are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_positives + self.false_positives + self.false_negatives;
        ratio(2 * self.true_positives, denom)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            true_positives: self.true_positives + other.true_positives,
            false_positives: self.false_positives + other.false_positives,
            false_negatives: self.false_negatives + other.false_negatives,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Greedy one-to-one matching: candidate pairs within `radius` are taken in
/// order of increasing distance, each point used at most once.
pub fn match_points(predicted: &[(f64, f64)], truth: &[(f64, f64)], radius: f64) -> MatchStats {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt();
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    MatchStats { true_positives: tp, false_positives: predicted.len() - tp, false_negatives: truth.len() - tp }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_empty() {
        let pts = [(1.0, 1.0), (50.0, 50.0)];
        let s = match_points(&pts, &pts, MATCH_RADIUS);
        assert_eq!((s.true_positives, s.f1()), (2, 1.0));
        assert_eq!(match_points(&[], &[], MATCH_RADIUS).f1(), 1.0);
        let miss = match_points(&[], &pts, MATCH_RADIUS);
        assert_eq!((miss.recall(), miss.f1()), (0.0, 0.0));
    }

    #[test]
    fn one_to_one_and_radius() {
        // two predictions near one truth: only one matches
        let s = match_points(&[(0.0, 0.0), (0.0, 3.0)], &[(0.0, 1.0)], MATCH_RADIUS);
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (1, 1, 0));
        let far = match_points(&[(0.0, 0.0)], &[(0.0, 10.5)], MATCH_RADIUS);
        assert_eq!(far.true_positives, 0);
        let f1 = match_points(&[(0.0, 0.0), (100.0, 100.0)], &[(0.0, 0.0), (50.0, 50.0)], MATCH_RADIUS).f1();
        assert!((f1 - 0.5).abs() < 1e-12);
    }
}
