//! Rules that turn vote tallies or score vectors into class decisions.

use serde::{Deserialize, Serialize};

use crate::codes::ovo_pairs;
use crate::error::{Error, Result};

/// Per-class vote counts from one ensemble plus its nominal size. Classes may
/// abstain, so the votes can sum to less than `size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    votes: Vec<u32>,
    size: u32,
}

impl VoteTally {
    pub fn new(votes: Vec<u32>, size: u32) -> Result<Self> {
        if size == 0 {
            return Err(Error::SizeZero(0));
        }
        let total: u64 = votes.iter().map(|&v| u64::from(v)).sum();
        if total > u64::from(size) {
            return Err(Error::InvalidSpec(format!("{total} votes exceed tally size {size}")));
        }
        Ok(Self { votes, size })
    }

    /// Single vote for `class`.
    pub fn one(n_classes: usize, class: usize) -> Self {
        let mut votes = vec![0; n_classes];
        votes[class] = 1;
        Self { votes, size: 1 }
    }

    /// `weight` votes for `class`, out of `weight`.
    pub fn weighted(n_classes: usize, class: usize, weight: u32) -> Self {
        let mut votes = vec![0; n_classes];
        votes[class] = weight;
        Self { votes, size: weight.max(1) }
    }

    pub fn empty(n_classes: usize) -> Self {
        Self { votes: vec![0; n_classes], size: 0 }
    }

    pub fn votes(&self) -> &[u32] {
        &self.votes
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn n_classes(&self) -> usize {
        self.votes.len()
    }

    /// Parallel composition: votes and sizes add.
    pub fn absorb(&mut self, other: &VoteTally) {
        if self.votes.len() < other.votes.len() {
            self.votes.resize(other.votes.len(), 0);
        }
        for (a, b) in self.votes.iter_mut().zip(&other.votes) {
            *a += b;
        }
        self.size += other.size;
    }

    pub fn scaled(&self, factor: u32) -> Self {
        Self { votes: self.votes.iter().map(|v| v * factor).collect(), size: self.size * factor }
    }

    /// Votes of `class` over the size.
    pub fn fraction(&self, class: usize) -> f64 {
        f64::from(self.votes[class]) / f64::from(self.size)
    }
}

/// Argmax with lowest-index tie breaking. Returns `(index, tie)`.
fn argmax_by<T: PartialOrd + Copy>(values: &[T]) -> (usize, bool) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let tie = values.iter().filter(|&&v| v == values[best]).count() > 1;
    (best, tie)
}

pub fn plurality(tally: &VoteTally) -> Result<(usize, bool)> {
    if tally.votes.is_empty() {
        return Err(Error::EmptyTally);
    }
    if tally.size == 0 {
        return Err(Error::SizeZero(0));
    }
    Ok(argmax_by(&tally.votes))
}

/// Each voter casts `weight` votes for its class.
pub fn weighted_vote(n_classes: usize, ballots: &[(usize, u32)]) -> Result<VoteTally> {
    if ballots.is_empty() {
        return Err(Error::EmptyTally);
    }
    let mut tally = VoteTally::empty(n_classes);
    for &(class, weight) in ballots {
        if class >= n_classes {
            return Err(Error::IndexOutOfRange { index: class, len: n_classes });
        }
        tally.absorb(&VoteTally::weighted(n_classes, class, weight));
    }
    Ok(tally)
}

/// The class whose one-vs-all classifier fires strongest.
pub fn ova_max_confidence(scores: &[f64], n_classes: usize) -> Result<(usize, bool)> {
    if scores.len() != n_classes {
        return Err(Error::LengthMismatch { expected: n_classes, found: scores.len() });
    }
    if scores.is_empty() {
        return Err(Error::EmptyTally);
    }
    Ok(argmax_by(scores))
}

fn pair_column(n_classes: usize, a: usize, b: usize) -> usize {
    // columns are ordered (0,1), (0,2), .. (0,n-1), (1,2), ..
    a * n_classes - a * (a + 1) / 2 + (b - a - 1)
}

fn ordered_decisions<T: Copy>(n_classes: usize, decisions: &[((usize, usize), T)]) -> Result<Vec<T>> {
    let mut by_col = vec![None; n_classes * n_classes.saturating_sub(1) / 2];
    for &((a, b), d) in decisions {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        if a == b || b >= n_classes {
            return Err(Error::InvalidSpec(format!("({a}, {b}) is not a class pair")));
        }
        by_col[pair_column(n_classes, a, b)] = Some(d);
    }
    ovo_pairs(n_classes).into_iter().zip(by_col).map(|((a, b), d)| d.ok_or(Error::MissingPair(a, b))).collect()
}

/// Max-wins: every pairwise winner gets one vote. Returns the tally (size
/// n(n-1)/2) alongside the plurality decision.
pub fn ovo_vote(n_classes: usize, winners: &[((usize, usize), usize)]) -> Result<(usize, bool, VoteTally)> {
    let ordered = ordered_decisions(n_classes, winners)?;
    let mut votes = vec![0u32; n_classes];
    for ((a, b), w) in ovo_pairs(n_classes).into_iter().zip(ordered) {
        if w != a && w != b {
            return Err(Error::InvalidSpec(format!("winner {w} is not in pair ({a}, {b})")));
        }
        votes[w] += 1;
    }
    let tally = VoteTally::new(votes, (n_classes * (n_classes - 1) / 2).max(1) as u32)?;
    let (class, tie) = plurality(&tally)?;
    Ok((class, tie, tally))
}

/// Weighted voting: pair `(a, b)` with confidence `r` in [0, 1] for `a`
/// adds `r` to `a` and `1 - r` to `b`.
pub fn ovo_weighted_vote(n_classes: usize, confidences: &[((usize, usize), f64)]) -> Result<(usize, bool, Vec<f64>)> {
    let normalized: Vec<((usize, usize), f64)> =
        confidences.iter().map(|&((a, b), r)| if a < b { ((a, b), r) } else { ((b, a), 1.0 - r) }).collect();
    let ordered = ordered_decisions(n_classes, &normalized)?;
    let mut scores = vec![0.0; n_classes];
    for (index, ((a, b), r)) in ovo_pairs(n_classes).into_iter().zip(ordered).enumerate() {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::OutputOutOfRange { index, value: r });
        }
        scores[a] += r;
        scores[b] += 1.0 - r;
    }
    let (class, tie) = argmax_by(&scores);
    Ok((class, tie, scores))
}

/// Mean of per-member probability vectors, then argmax.
pub fn soft_vote(probabilities: &[Vec<f64>]) -> Result<(usize, bool, Vec<f64>)> {
    let first = probabilities.first().ok_or(Error::EmptyTally)?;
    let mut mean = vec![0.0; first.len()];
    for p in probabilities {
        if p.len() != mean.len() {
            return Err(Error::LengthMismatch { expected: mean.len(), found: p.len() });
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = probabilities.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let (class, tie) = argmax_by(&mean);
    Ok((class, tie, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certainty {
    pub class: usize,
    /// Per class, the sum over ensembles of votes / size.
    pub scores: Vec<f64>,
    /// Plurality winner of each ensemble.
    pub winners: Vec<usize>,
    /// False when every ensemble already agreed and the class passed through.
    pub invoked: bool,
    pub tie: bool,
}

/// Cross-ensemble decision by summed vote fractions.
///
/// `validation_error` is each ensemble's recorded validation error; on an
/// exact score tie the plurality winner of the most accurate ensemble is
/// taken if it is among the tied classes, otherwise the lowest tied index.
/// Scores are compared exactly over a common denominator.
pub fn degree_of_certainty(tallies: &[VoteTally], validation_error: &[f64]) -> Result<Certainty> {
    if tallies.len() < 2 {
        return Err(Error::FewerThanTwoTallies(tallies.len()));
    }
    if validation_error.len() != tallies.len() {
        return Err(Error::LengthMismatch { expected: tallies.len(), found: validation_error.len() });
    }
    if let Some(i) = tallies.iter().position(|t| t.size == 0) {
        return Err(Error::SizeZero(i));
    }
    let n_classes = tallies[0].votes.len();
    if n_classes == 0 {
        return Err(Error::EmptyTally);
    }
    if let Some(t) = tallies.iter().find(|t| t.votes.len() != n_classes) {
        return Err(Error::LengthMismatch { expected: n_classes, found: t.votes.len() });
    }
    let scores: Vec<f64> = (0..n_classes).map(|c| tallies.iter().map(|t| t.fraction(c)).sum()).collect();
    let winners: Vec<usize> = tallies.iter().map(|t| argmax_by(&t.votes).0).collect();
    if winners.iter().all(|&w| w == winners[0]) {
        return Ok(Certainty { class: winners[0], scores, winners, invoked: false, tie: false });
    }

    let exact = exact_scores(tallies, n_classes);
    let (lowest, tie) = argmax_by(&exact);
    let class = if tie {
        let best_ensemble = (0..tallies.len())
            .min_by(|&a, &b| validation_error[a].total_cmp(&validation_error[b]))
            .expect("at least two tallies");
        let preferred = winners[best_ensemble];
        if exact[preferred] == exact[lowest] {
            preferred
        } else {
            lowest
        }
    } else {
        lowest
    };
    Ok(Certainty { class, scores, winners, invoked: true, tie })
}

/// Scores scaled by the product of all sizes, as exact integers.
fn exact_scores(tallies: &[VoteTally], n_classes: usize) -> Vec<u128> {
    let product: u128 = tallies.iter().map(|t| u128::from(t.size)).product();
    (0..n_classes)
        .map(|c| tallies.iter().map(|t| u128::from(t.votes[c]) * (product / u128::from(t.size))).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tally(pairs: &[(usize, u32)], n: usize, size: u32) -> VoteTally {
        let mut votes = vec![0; n];
        for &(c, v) in pairs {
            votes[c] = v;
        }
        VoteTally::new(votes, size).unwrap()
    }

    #[test]
    fn plurality_examples() {
        assert_eq!(plurality(&tally(&[(3, 5), (7, 4)], 10, 9)).unwrap(), (3, false));
        assert_eq!(plurality(&tally(&[(1, 4), (2, 4)], 10, 9)).unwrap(), (1, true));
        assert_eq!(plurality(&tally(&[(0, 9)], 10, 9)).unwrap(), (0, false));
        assert!(matches!(plurality(&VoteTally::new(vec![], 1).unwrap()), Err(Error::EmptyTally)));
        assert!(VoteTally::new(vec![3, 3], 5).is_err());
        assert!(matches!(VoteTally::new(vec![0], 0), Err(Error::SizeZero(_))));
    }

    #[test]
    fn ova_examples() {
        assert_eq!(ova_max_confidence(&[0.1, 0.9, 0.3], 3).unwrap(), (1, false));
        assert_eq!(ova_max_confidence(&[0.5; 4], 4).unwrap(), (0, true));
        assert_eq!(ova_max_confidence(&[0.2], 1).unwrap(), (0, false));
        assert!(matches!(ova_max_confidence(&[0.2], 2), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn ovo_examples() {
        let (c, tie, t) = ovo_vote(3, &[((0, 1), 0), ((0, 2), 0), ((1, 2), 1)]).unwrap();
        assert_eq!((c, tie, t.votes()[0]), (0, false, 2));
        let (c, tie, _) = ovo_vote(3, &[((0, 1), 0), ((0, 2), 2), ((1, 2), 1)]).unwrap();
        assert_eq!((c, tie), (0, true));
        assert!(matches!(ovo_vote(3, &[((0, 1), 0), ((1, 2), 1)]), Err(Error::MissingPair(0, 2))));
        // pairs given in reverse order are accepted
        let (c, _, _) = ovo_vote(3, &[((1, 0), 1), ((2, 0), 2), ((2, 1), 1)]).unwrap();
        assert_eq!(c, 1);
    }

    #[test]
    fn ovo_pair_columns_follow_code_order() {
        for (j, (a, b)) in ovo_pairs(7).into_iter().enumerate() {
            assert_eq!(pair_column(7, a, b), j);
        }
    }

    #[test]
    fn ovo_weighted_examples() {
        let (c, _, s) = ovo_weighted_vote(3, &[((0, 1), 0.6), ((0, 2), 0.4), ((1, 2), 0.9)]).unwrap();
        assert_eq!(c, 1);
        assert!((s[1] - 1.3).abs() < 1e-12);
        assert!(ovo_weighted_vote(3, &[((0, 1), 1.5), ((0, 2), 0.4), ((1, 2), 0.9)]).is_err());
    }

    #[test]
    fn soft_and_weighted() {
        let (c, _, m) = soft_vote(&[vec![0.6, 0.4], vec![0.1, 0.9]]).unwrap();
        assert_eq!(c, 1);
        assert!((m[0] - 0.35).abs() < 1e-12);
        let t = weighted_vote(10, &[(7, 3), (7, 2), (7, 2)]).unwrap();
        assert_eq!((t.votes()[7], t.size()), (7, 7));
    }

    #[test]
    fn certainty_examples() {
        let a = tally(&[(4, 6), (1, 3)], 10, 9);
        let b = tally(&[(4, 50), (2, 51)], 10, 101);
        // pluralities 4 and 2 disagree here; check the agreeing case separately
        let agree = degree_of_certainty(&[a.clone(), tally(&[(4, 60)], 10, 101)], &[0.1, 0.2]).unwrap();
        assert_eq!((agree.class, agree.invoked), (4, false));
        let d = degree_of_certainty(&[a, b], &[0.1, 0.2]).unwrap();
        assert!(d.invoked);
        assert_eq!(d.class, 4);

        let v1 = tally(&[(3, 7), (5, 2)], 10, 9);
        let v2 = tally(&[(3, 60), (5, 41)], 10, 101);
        let d = degree_of_certainty(&[v1, v2], &[0.0, 0.0]).unwrap();
        assert!(!d.invoked);
        assert!((d.scores[3] - (7.0 / 9.0 + 60.0 / 101.0)).abs() < 1e-12);
        let v1 = tally(&[(3, 2), (5, 7)], 10, 9);
        let v2 = tally(&[(3, 60), (5, 41)], 10, 101);
        let d = degree_of_certainty(&[v1, v2], &[0.0, 0.0]).unwrap();
        assert!(d.invoked);
        assert_eq!(d.class, 5);

        let v1 = tally(&[(2, 9)], 10, 9);
        let v2 = tally(&[(8, 101)], 10, 101);
        let d = degree_of_certainty(&[v1.clone(), v2.clone()], &[0.02, 0.01]).unwrap();
        assert_eq!((d.class, d.tie), (8, true));
        let d = degree_of_certainty(&[v1.clone(), v2], &[0.01, 0.02]).unwrap();
        assert_eq!(d.class, 2);

        assert!(matches!(degree_of_certainty(&[v1], &[0.0]), Err(Error::FewerThanTwoTallies(1))));
    }

    #[test]
    fn ovo_matches_tally_oracle() {
        use rand::Rng as _;
        let mut rng = crate::seed::rng(42);
        for _ in 0..1000 {
            let mut table = Vec::new();
            let mut counts = [0u32; 10];
            for a in 0..10 {
                for b in a + 1..10 {
                    let w = if rng.random_bool(0.5) { a } else { b };
                    counts[w] += 1;
                    table.push(((a, b), w));
                }
            }
            let best = *counts.iter().max().unwrap();
            let first = counts.iter().position(|&c| c == best).unwrap();
            let tied = counts.iter().filter(|&&c| c == best).count() > 1;
            let (class, tie, tally) = ovo_vote(10, &table).unwrap();
            assert_eq!((class, tie), (first, tied));
            assert_eq!(tally.votes(), &counts);
        }
    }

    #[test]
    fn certainty_terms_are_bounded() {
        for size in 1..=12u32 {
            for a in 0..=size {
                for b in 0..=size - a {
                    let t = VoteTally::new(vec![a, b, size - a - b], size).unwrap();
                    assert!((0..3).all(|c| (0.0..=1.0).contains(&t.fraction(c))));
                }
            }
        }
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        fn any_tally() -> impl Strategy<Value = VoteTally> {
            (proptest::collection::vec(0u32..7, 4), 0u32..3).prop_filter_map("empty", |(votes, spare)| {
                let size = votes.iter().sum::<u32>() + spare;
                VoteTally::new(votes, size).ok()
            })
        }

        proptest! {
            #[test]
            fn scaling_a_tally_keeps_the_decision(a in any_tally(), b in any_tally(), k in 1u32..20) {
                let errs = [0.01, 0.02];
                let base = degree_of_certainty(&[a.clone(), b.clone()], &errs).unwrap();
                let scaled = degree_of_certainty(&[a.scaled(k), b], &errs).unwrap();
                prop_assert_eq!(base.class, scaled.class);
                prop_assert_eq!(base.tie, scaled.tie);
            }

            #[test]
            fn unanimous_winner_passes_through(a in any_tally(), b in any_tally(), c in 0usize..4) {
                let mut a = a.votes().to_vec();
                let mut b = b.votes().to_vec();
                a[c] = a.iter().max().unwrap() + 1;
                b[c] = b.iter().max().unwrap() + 1;
                let ta = VoteTally::new(a.clone(), a.iter().sum()).unwrap();
                let tb = VoteTally::new(b.clone(), b.iter().sum()).unwrap();
                let out = degree_of_certainty(&[ta, tb], &[0.3, 0.1]).unwrap();
                prop_assert_eq!(out.class, c);
                prop_assert!(!out.invoked);
            }

            #[test]
            fn fractions_stay_in_unit_interval(t in any_tally()) {
                let total: f64 = (0..4).map(|c| t.fraction(c)).sum();
                prop_assert!((0..4).all(|c| (0.0..=1.0).contains(&t.fraction(c))));
                prop_assert!(total <= 1.0 + 1e-12);
            }
        }
    }
}
