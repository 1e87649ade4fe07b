//! Corpus-level caption metrics: BLEU-1..4, METEOR (exact matching),
//! ROUGE-L and CIDEr.
//!
//! Scales: BLEU in `[0, 100]`, METEOR and ROUGE-L in `[0, 1]`, CIDEr in
//! `[0, 10]`.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const CIDER_MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Evaluation("pair without references".into()));
        }
        Ok(Self { candidate, references })
    }

    /// Tokenizes with the model's normalization.
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        Self::new(
            normalize(candidate),
            references.iter().map(|r| normalize(r.as_ref())).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl ScoreReport {
    pub const CSV_HEADER: &'static str = "bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider";

    pub fn csv_row(&self) -> String {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.meteor,
            self.rouge_l,
            self.cider,
        ]
        .map(|v| format!("{v:.4}"))
        .join(",")
    }
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<ScoreReport> {
    Ok(ScoreReport {
        bleu1: bleu(pairs, 1)?,
        bleu2: bleu(pairs, 2)?,
        bleu3: bleu(pairs, 3)?,
        bleu4: bleu(pairs, 4)?,
        meteor: meteor(pairs)?,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
    })
}

fn non_empty(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("empty candidate corpus".into()));
    }
    Ok(())
}

pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `c`; the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU-n, unsmoothed.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    non_empty(pairs)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Evaluation(format!("BLEU order {n} outside 1..=4")));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut clipped, mut total) = (0usize, 0usize);
        for p in pairs {
            let cand = ngram_counts(&p.candidate, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &p.references {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            clipped += cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total += p.candidate.len().saturating_sub(k - 1);
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let r: usize = pairs.iter().map(|p| closest_ref_len(p.candidate.len(), &p.references)).sum();
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| rouge_pair(&p.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Number of matches and chunks of an exact unigram alignment with the
/// largest number of matches and, among those, the fewest chunks.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        positions.entry(w).or_default().push(j);
    }
    // matches still obtainable for each word, and candidate occurrences left
    let mut need: HashMap<&str, usize> = HashMap::new();
    let mut left: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *left.entry(w).or_insert(0) += 1;
    }
    for (w, &a) in &left {
        let b = positions.get(w).map_or(0, Vec::len);
        need.insert(w, a.min(b));
    }
    let m: usize = need.values().sum();
    if m == 0 {
        return (0, 0);
    }

    struct Search<'a> {
        cand: &'a [String],
        positions: HashMap<&'a str, Vec<usize>>,
        used: Vec<bool>,
        need: HashMap<&'a str, usize>,
        left: HashMap<&'a str, usize>,
        best: usize,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, prev: Option<(usize, usize)>, chunks: usize) {
            if chunks >= self.best {
                return;
            }
            if i == self.cand.len() {
                self.best = chunks;
                return;
            }
            let w = self.cand[i].as_str();
            *self.left.get_mut(w).expect("counted") -= 1;
            let need = self.need[w];
            if need > 0 {
                let mut options: Vec<usize> = self.positions.get(w).cloned().unwrap_or_default();
                options.retain(|&j| !self.used[j]);
                let cont = prev.and_then(|(pi, pj)| (pi + 1 == i).then_some(pj + 1));
                options.sort_by_key(|&j| (Some(j) != cont, j));
                for j in options {
                    let extends = cont == Some(j);
                    self.used[j] = true;
                    *self.need.get_mut(w).expect("counted") -= 1;
                    self.go(i + 1, Some((i, j)), chunks + usize::from(!extends));
                    *self.need.get_mut(w).expect("counted") += 1;
                    self.used[j] = false;
                }
            }
            if self.left[w] >= need {
                self.go(i + 1, prev, chunks);
            }
            *self.left.get_mut(w).expect("counted") += 1;
        }
    }

    let mut search = Search {
        cand,
        positions,
        used: vec![false; reference.len()],
        need,
        left,
        best: usize::MAX,
    };
    search.go(0, None, 0);
    (m, search.best)
}

fn meteor_pair(cand: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = meteor_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    let total: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| meteor_pair(&p.candidate, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / pairs.len() as f64)
}

fn tf_idf<'a>(tokens: &'a [String], n: usize, idf: &impl Fn(&[String]) -> f64) -> HashMap<&'a [String], f64> {
    let mut v: HashMap<&[String], f64> = HashMap::new();
    for g in tokens.windows(n) {
        *v.entry(g).or_insert(0.0) += 1.0;
    }
    for (g, x) in v.iter_mut() {
        *x *= idf(g);
    }
    v
}

/// CIDEr with n = 1..4: count vectors weighted by `ln(N / max(1, df))`,
/// where `df` counts the pairs whose references contain the n-gram;
/// clipped cosine against each reference, averaged over references and
/// orders, times 10, averaged over the corpus.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    if pairs.len() < 2 {
        return Err(Error::CorpusTooSmall);
    }
    let n_docs = pairs.len() as f64;
    let mut total = 0.0;
    let mut per_pair = vec![0.0; pairs.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for p in pairs {
            let grams: HashSet<&[String]> = p.references.iter().flat_map(|r| r.windows(n)).collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let norm = |v: &HashMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        for (k, p) in pairs.iter().enumerate() {
            let vc = tf_idf(&p.candidate, n, &idf);
            let nc = norm(&vc);
            let mut sim = 0.0;
            for r in &p.references {
                let vr = tf_idf(r, n, &idf);
                let nr = norm(&vr);
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vr
                        .iter()
                        .map(|(g, &xr)| vc.get(g).map_or(0.0, |&xc| xc.min(xr) * xr))
                        .sum();
                    sim += dot / (nc * nr);
                }
            }
            per_pair[k] += sim / p.references.len() as f64;
        }
    }
    for s in per_pair {
        total += 10.0 * s / CIDER_MAX_N as f64;
    }
    Ok(total / n_docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: &str, refs: &[&str]) -> EvalPair {
        EvalPair::from_text(c, refs).unwrap()
    }

    #[test]
    fn bleu_examples() {
        let p = [pair("the cat sat on mat", &["the cat sat on the mat"])];
        assert!((bleu(&p, 1).unwrap() - 100.0 * (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-12);
        assert!((bleu(&p, 1).unwrap() - 81.87).abs() < 0.01);
        let clip = [pair("the the the", &["the cat"])];
        // p1 = 1/3, c = 3 > r = 2
        assert!((bleu(&clip, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        let same = [pair("a b c d", &["a b c d"])];
        for n in 1..=4 {
            assert!((bleu(&same, n).unwrap() - 100.0).abs() < 1e-12);
        }
        assert!(bleu(&[], 1).is_err());
        assert_eq!(bleu(&[pair("a b", &["c d"])], 1).unwrap(), 0.0);
    }

    #[test]
    fn closest_reference_prefers_shorter_on_ties() {
        let refs: Vec<Vec<String>> = vec![normalize("a b c d e f"), normalize("a b")];
        assert_eq!(closest_ref_len(4, &refs), 2);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&[pair("the cat sat", &["the cat ran"])]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[pair("a b", &["a b"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[pair("a b", &["c d"])]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[pair("", &["c d"])]).unwrap(), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let s = meteor(&[pair("the cat sat", &["the cat sat"])]).unwrap();
        assert!((s - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert!((s - 0.9815).abs() < 1e-4);
        assert_eq!(meteor(&[pair("a", &["a"])]).unwrap(), 0.5);
        assert_eq!(meteor(&[pair("a b", &["c d"])]).unwrap(), 0.0);
    }

    #[test]
    fn meteor_picks_fewest_chunks() {
        // greedy leftmost would map the first "a" to ref 0 and give 2 chunks
        let c = normalize("a b");
        let r = normalize("a x a b");
        assert_eq!(meteor_alignment(&c, &r), (2, 1));
        let c = normalize("b a c a");
        let r = normalize("a c a b");
        assert_eq!(meteor_alignment(&c, &r), (4, 2));
    }

    #[test]
    fn cider_examples() {
        let p = [
            pair("a large white church near houses", &["a large white church near houses"]),
            pair("two boats in the blue harbor", &["two boats in the blue harbor"]),
        ];
        assert!((cider(&p).unwrap() - 10.0).abs() < 1e-12);
        let d = [pair("x y z w", &["a b c d"]), pair("q r s t", &["e f g h"])];
        assert_eq!(cider(&d).unwrap(), 0.0);
        assert!(matches!(cider(&p[..1]), Err(Error::CorpusTooSmall)));
    }

    #[test]
    fn report_csv() {
        let r = ScoreReport {
            bleu1: 1.0,
            bleu2: 2.0,
            bleu3: 3.0,
            bleu4: 4.0,
            meteor: 0.5,
            rouge_l: 0.25,
            cider: 7.0,
        };
        assert_eq!(r.csv_row(), "1.0000,2.0000,3.0000,4.0000,0.5000,0.2500,7.0000");
    }
}
