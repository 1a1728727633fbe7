//! Corpus BLEU and TER from additive per-sentence statistics, bootstrap
//! confidence intervals and cumulative-prefix curves.

use std::collections::HashMap;
use std::ops::AddAssign;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 1000;
/// Shift search limits.
pub const MAX_SHIFT_DISTANCE: usize = 50;
pub const MAX_SHIFT_LENGTH: usize = 10;

/// Per-sentence statistics that add up to corpus statistics.
pub trait SufficientStats: Clone + Default + for<'a> AddAssign<&'a Self> {
    /// Corpus-level score of the (aggregated) statistics.
    fn score(&self) -> f64;
}

pub fn aggregate<S: SufficientStats>(stats: &[S]) -> S {
    let mut total = S::default();
    for s in stats {
        total += s;
    }
    total
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothing {
    /// Plain corpus BLEU: any zero precision gives 0.
    #[default]
    None,
    /// Zero-match precisions of order 2 and up count as 1 / (total + 1).
    AddOne,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped n-gram matches, orders 1..=4.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-gram counts, orders 1..=4.
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

impl BleuStats {
    pub fn from_pair<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = h.values().sum();
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    /// BLEU in [0, 100]. Orders for which the hypothesis has no n-grams at
    /// all are left out of the geometric mean (so a one-word exact match
    /// still scores 100).
    pub fn bleu(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            let total = self.totals[n];
            if total == 0 {
                continue;
            }
            let m = self.matches[n];
            let p = if m == 0 {
                match smoothing {
                    Smoothing::AddOne if n > 0 => 1.0 / (total as f64 + 1.0),
                    _ => return 0.0,
                }
            } else {
                m as f64 / total as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        (100.0 * bp * (log_sum / orders as f64).exp()).clamp(0.0, 100.0)
    }
}

impl AddAssign<&BleuStats> for BleuStats {
    fn add_assign(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

impl SufficientStats for BleuStats {
    fn score(&self) -> f64 {
        self.bleu(Smoothing::None)
    }
}

/// BLEU statistics scored with add-one smoothing, for early points of
/// cumulative curves.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothedBleu(pub BleuStats);

impl AddAssign<&SmoothedBleu> for SmoothedBleu {
    fn add_assign(&mut self, o: &SmoothedBleu) {
        self.0 += &o.0;
    }
}

impl SufficientStats for SmoothedBleu {
    fn score(&self) -> f64 {
        self.0.bleu(Smoothing::AddOne)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerStats {
    pub edits: u64,
    pub ref_len: u64,
}

impl TerStats {
    /// TER as a percentage; not clamped, so it can exceed 100.
    pub fn ter(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        100.0 * self.edits as f64 / self.ref_len as f64
    }
}

impl AddAssign<&TerStats> for TerStats {
    fn add_assign(&mut self, o: &TerStats) {
        self.edits += o.edits;
        self.ref_len += o.ref_len;
    }
}

impl SufficientStats for TerStats {
    fn score(&self) -> f64 {
        self.ter()
    }
}

/// Levenshtein distance with unit insertion, deletion and substitution
/// costs.
pub fn edit_distance<A: PartialEq>(hyp: &[A], reference: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// `hyp` with the block `[start, start + len)` moved so it begins at `to`
/// in the sequence that remains after removing it.
fn shifted<A: Clone>(hyp: &[A], start: usize, len: usize, to: usize) -> Vec<A> {
    let mut rest: Vec<A> = hyp[..start].iter().chain(&hyp[start + len..]).cloned().collect();
    let block = hyp[start..start + len].to_vec();
    rest.splice(to..to, block);
    rest
}

fn occurs_in<A: PartialEq>(block: &[A], reference: &[A]) -> bool {
    reference.windows(block.len()).any(|w| w == block)
}

/// Number of TER edits: block shifts chosen greedily (largest reduction of
/// edit distance first, each shift costing 1) followed by the edit distance
/// of the shifted hypothesis. A shift is only taken when it strictly lowers
/// the total, and only blocks that appear somewhere in the reference are
/// moved.
pub fn ter_edits<A: PartialEq + Clone>(hyp: &[A], reference: &[A], shifts: bool) -> usize {
    let mut cur = hyp.to_vec();
    let mut dist = edit_distance(&cur, reference);
    let mut n_shifts = 0;
    while shifts && dist > 1 {
        let mut best: Option<(usize, Vec<A>)> = None;
        for start in 0..cur.len() {
            for len in (1..=MAX_SHIFT_LENGTH.min(cur.len() - start)).rev() {
                if !occurs_in(&cur[start..start + len], reference) {
                    continue;
                }
                let remaining = cur.len() - len;
                let lo = start.saturating_sub(MAX_SHIFT_DISTANCE);
                let hi = (start + MAX_SHIFT_DISTANCE).min(remaining);
                for to in lo..=hi {
                    if to == start {
                        continue;
                    }
                    let cand = shifted(&cur, start, len, to);
                    let d = edit_distance(&cand, reference);
                    if d + 1 < dist && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, cand));
                    }
                }
            }
        }
        match best {
            Some((d, cand)) => {
                cur = cand;
                dist = d;
                n_shifts += 1;
            }
            None => break,
        }
    }
    dist + n_shifts
}

impl TerStats {
    pub fn from_pair<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R], shifts: bool) -> Self {
        let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
        TerStats {
            edits: ter_edits(&h, &r, shifts) as u64,
            ref_len: r.len() as u64,
        }
    }
}

fn check_lengths<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("sentence list"));
    }
    Ok(())
}

pub fn bleu_stats<S: AsRef<str>, R: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<R>]) -> Result<Vec<BleuStats>> {
    check_lengths(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::from_pair(h, r)).collect())
}

pub fn ter_stats<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<R>],
    shifts: bool,
) -> Result<Vec<TerStats>> {
    check_lengths(hyps, refs)?;
    hyps.iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (h, r))| {
            if r.is_empty() {
                Err(Error::EmptyReference(i))
            } else {
                Ok(TerStats::from_pair(h, r, shifts))
            }
        })
        .collect()
}

/// Corpus BLEU of tokenized sentences.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<R>]) -> Result<f64> {
    Ok(aggregate(&bleu_stats(hyps, refs)?).score())
}

/// Corpus TER (with shifts) of tokenized sentences.
pub fn ter<S: AsRef<str>, R: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<R>]) -> Result<f64> {
    Ok(aggregate(&ter_stats(hyps, refs, true)?).score())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.high - self.low)
    }
}

/// Percentile 95% interval of the corpus score over `n_resamples` resamples
/// of the sentences (with replacement). Resample `k` draws its indices from
/// a ChaCha8 stream seeded with `seed`, so results are reproducible.
pub fn bootstrap_ci<S: SufficientStats>(stats: &[S], n_resamples: usize, seed: u64) -> Interval {
    let point = aggregate(stats).score();
    if stats.is_empty() || n_resamples == 0 {
        return Interval {
            point,
            low: point,
            high: point,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let mut total = S::default();
            for _ in 0..stats.len() {
                total += &stats[rng.random_range(0..stats.len())];
            }
            total.score()
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let lo_idx = ((0.025 * n as f64).floor() as usize).min(n - 1);
    let hi_idx = ((0.975 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Interval {
        point,
        low: scores[lo_idx],
        high: scores[hi_idx],
    }
}

/// Corpus score of every prefix: entry `i` aggregates sentences `0..=i`.
pub fn cumulative_curve<S: SufficientStats>(stats: &[S]) -> Vec<f64> {
    let mut total = S::default();
    stats
        .iter()
        .map(|s| {
            total += s;
            total.score()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_sentences: usize,
    pub bleu: f64,
    pub bleu_low: f64,
    pub bleu_high: f64,
    pub bleu_half_width: f64,
    pub ter: f64,
    pub ter_low: f64,
    pub ter_high: f64,
    pub ter_half_width: f64,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>, R: AsRef<str>>(
        hyps: &[Vec<S>],
        refs: &[Vec<R>],
        n_resamples: usize,
        seed: u64,
    ) -> Result<Self> {
        let b = bootstrap_ci(&bleu_stats(hyps, refs)?, n_resamples, seed);
        let t = bootstrap_ci(&ter_stats(hyps, refs, true)?, n_resamples, seed);
        Ok(EvalReport {
            n_sentences: hyps.len(),
            bleu: b.point,
            bleu_low: b.low,
            bleu_high: b.high,
            bleu_half_width: b.half_width(),
            ter: t.point,
            ter_low: t.low,
            ter_high: t.high,
            ter_half_width: t.half_width(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_perfect() {
        let h = vec![toks("a b c d e"), toks("x")];
        assert_eq!(bleu(&h, &h).unwrap(), 100.0);
        assert_eq!(ter(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let s = BleuStats::from_pair(&toks("the the the cat"), &toks("the cat sat down"));
        assert_eq!((s.matches[0], s.totals[0]), (2, 4));
        assert_eq!((s.matches[1], s.totals[1]), (1, 3));
    }

    #[test]
    fn no_matches_is_zero() {
        assert_eq!(bleu(&[toks("a b c d")], &[toks("e f g h")]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_bleu() {
        // matches 6/6, 2/5, 1/4, 0/3; hyp 6 tokens vs ref 7
        let s = BleuStats::from_pair(&toks("a b c d x e"), &toks("a b c x d e f"));
        assert_eq!(s.matches, [6, 2, 1, 0]);
        assert_eq!(s.totals, [6, 5, 4, 3]);
        assert_eq!(s.bleu(Smoothing::None), 0.0);
        let bp = (1.0f64 - 7.0 / 6.0).exp();
        let manual = 100.0 * bp * (1.0 * (2.0 / 5.0) * (1.0 / 4.0) * (1.0 / 4.0f64)).powf(0.25);
        assert!((s.bleu(Smoothing::AddOne) - manual).abs() < 1e-12);
        // no zero precision: smoothing changes nothing
        let s = BleuStats::from_pair(&toks("a b c d e"), &toks("a b c d f"));
        let manual = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((s.bleu(Smoothing::None) - manual).abs() < 1e-12);
        assert_eq!(s.bleu(Smoothing::None), s.bleu(Smoothing::AddOne));
    }

    #[test]
    fn ter_examples() {
        assert_eq!(ter(&[toks("a b x d e")], &[toks("a b c d e")]).unwrap(), 20.0);
        assert_eq!(ter(&[toks("b a")], &[toks("a b")]).unwrap(), 50.0);
        assert_eq!(ter_edits(&["b", "a"], &["a", "b"], false), 2);
        // unclamped above 100
        assert_eq!(ter(&[toks("x y z w")], &[toks("a")]).unwrap(), 400.0);
    }

    #[test]
    fn empty_reference_and_mismatch_are_errors() {
        assert!(matches!(
            ter(&[toks("a")], &[Vec::<&str>::new()]),
            Err(Error::EmptyReference(0))
        ));
        assert!(matches!(
            bleu(&[toks("a")], &[toks("a"), toks("b")]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn constant_stats_give_zero_width_interval() {
        let s = vec![BleuStats::from_pair(&toks("a b c d"), &toks("a b c e")); 20];
        let ci = bootstrap_ci(&s, 200, 1);
        assert_eq!(ci.low, ci.point);
        assert_eq!(ci.high, ci.point);
        assert_eq!(bootstrap_ci(&s, 200, 1), ci);
    }
}
