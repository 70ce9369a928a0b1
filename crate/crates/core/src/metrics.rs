//! Ranking metrics: AUC via mid-rank sums and user-grouped gAUC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabel<T> {
    pub score: T,
    pub label: u8,
    pub user_id: String,
}

impl<T> ScoredLabel<T> {
    pub fn new(score: T, label: u8, user_id: impl Into<String>) -> Self {
        ScoredLabel {
            score,
            label,
            user_id: user_id.into(),
        }
    }
}

/// How per-user AUCs are combined in [`gauc`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GaucWeighting {
    /// Weight each eligible user by their impression count.
    #[default]
    Impressions,
    /// Plain mean over eligible users.
    Uniform,
}

/// Probability that a random positive scores above a random negative, ties
/// counted as one half. O(n log n) via mid-ranks.
pub fn auc<T: Real>(items: &[ScoredLabel<T>]) -> Result<T> {
    let scores: Vec<(T, u8)> = items.iter().map(|i| (i.score, i.label)).collect();
    auc_pairs(&scores)
}

fn auc_pairs<T: Real>(items: &[(T, u8)]) -> Result<T> {
    if let Some((s, _)) = items.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::UndefinedMetric(format!("non-finite score {s}")));
    }
    if let Some((_, l)) = items.iter().find(|(_, l)| *l > 1) {
        return Err(Error::UndefinedMetric(format!("label {l} is not 0 or 1")));
    }
    let pos = items.iter().filter(|(_, l)| *l == 1).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].0.partial_cmp(&items[b].0).expect("finite scores"));

    // Sum of (1-based) mid-ranks of the positives.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && items[order[j + 1]].0 == items[order[i]].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| items[k].1 == 1).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(T::lit((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// User-level AUC: per-user AUC over users that have both classes, averaged
/// with the chosen weighting. Users with a single class are skipped.
pub fn gauc<T: Real>(items: &[ScoredLabel<T>], weighting: GaucWeighting) -> Result<T> {
    let mut groups: BTreeMap<&str, Vec<(T, u8)>> = BTreeMap::new();
    for it in items {
        groups
            .entry(it.user_id.as_str())
            .or_default()
            .push((it.score, it.label));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for g in groups.values() {
        let pos = g.iter().filter(|(_, l)| *l == 1).count();
        if pos == 0 || pos == g.len() {
            continue;
        }
        let w = match weighting {
            GaucWeighting::Impressions => g.len() as f64,
            GaucWeighting::Uniform => 1.0,
        };
        num += w * auc_pairs(g)?.as_f64();
        den += w;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "no user has both positive and negative labels".into(),
        ));
    }
    Ok(T::lit(num / den))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(scores: &[f64], labels: &[u8]) -> Vec<ScoredLabel<f64>> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredLabel::new(s, l, "u"))
            .collect()
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc(&items(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_eq!(auc(&items(&[0.3; 5], &[1, 0, 0, 1, 1])).unwrap(), 0.5);
        assert_eq!(auc(&items(&[0.1, 0.9], &[1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc(&items(&[0.1, 0.2], &[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auc::<f64>(&[]).is_err());
    }

    #[test]
    fn gauc_hand_average() {
        // user a: perfect (1.0); user b: tied (0.5); two impressions each
        let v = vec![
            ScoredLabel::new(0.9, 1, "a"),
            ScoredLabel::new(0.1, 0, "a"),
            ScoredLabel::new(0.5, 1, "b"),
            ScoredLabel::new(0.5, 0, "b"),
            ScoredLabel::new(0.7, 1, "c"), // single class, skipped
        ];
        assert_eq!(gauc(&v, GaucWeighting::Impressions).unwrap(), 0.75);
        assert_eq!(gauc(&v, GaucWeighting::Uniform).unwrap(), 0.75);
        assert!(gauc(&v[4..], GaucWeighting::Impressions).is_err());
    }

    #[test]
    fn gauc_weightings_differ() {
        let v = vec![
            ScoredLabel::new(0.9, 1, "a"),
            ScoredLabel::new(0.1, 0, "a"),
            ScoredLabel::new(0.2, 0, "a"),
            ScoredLabel::new(0.1, 1, "b"),
            ScoredLabel::new(0.9, 0, "b"),
        ];
        let imp: f64 = gauc(&v, GaucWeighting::Impressions).unwrap();
        let uni: f64 = gauc(&v, GaucWeighting::Uniform).unwrap();
        assert!((imp - 3.0 / 5.0).abs() < 1e-15);
        assert!((uni - 0.5).abs() < 1e-15);
    }
}
