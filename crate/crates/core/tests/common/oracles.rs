//! Reference implementations written independently of the library code,
//! favouring obviousness over speed.

use ndarray::Array2;

use krsvqg::model::Model;
use krsvqg::training::stage::{example_gradients, example_loss};
use krsvqg::training::{CaptionFeatures, Example, Objective};

/// Mean over non-PAD targets of `logsumexp(row) - row[target]`.
pub fn loss_oracle(logits: &Array2<f64>, targets: &[u32]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == 0 {
            continue;
        }
        let row: Vec<f64> = logits.row(r).to_vec();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares every analytic gradient entry of the question loss with a
/// central difference of step `h`.
pub fn finite_difference_check(model: &mut Model, ex: &Example, h: f64) -> GradCheck {
    let (_, grads) = example_gradients(model, ex, Objective::Question, CaptionFeatures::TeacherForced).unwrap();
    let names: Vec<String> = model.params().names().cloned().collect();
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
    };
    for name in names {
        let shape = model.params().get(&name).unwrap().dim();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Array2::zeros(shape));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params().get(&name).unwrap()[[r, c]];
                model.params_mut().get_mut(&name).unwrap()[[r, c]] = orig + h;
                let up = example_loss(model, ex, Objective::Question, CaptionFeatures::TeacherForced).unwrap();
                model.params_mut().get_mut(&name).unwrap()[[r, c]] = orig - h;
                let down = example_loss(model, ex, Objective::Question, CaptionFeatures::TeacherForced).unwrap();
                model.params_mut().get_mut(&name).unwrap()[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = rel_error(analytic[[r, c]], numeric);
                out.checked += 1;
                if rel > out.worst_rel {
                    out.worst_rel = rel;
                    out.worst_param = format!("{name}[{r},{c}] analytic {} numeric {numeric}", analytic[[r, c]]);
                }
            }
        }
    }
    out
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn unique(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub type Corpus = Vec<(Vec<String>, Vec<Vec<String>>)>;

pub fn bleu_oracle(corpus: &Corpus, n: usize) -> f64 {
    let mut precisions = Vec::new();
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, refs) in corpus {
            let cg = ngrams(cand, k);
            total += cg.len();
            for g in unique(&cg) {
                let best_ref = refs.iter().map(|r| count(&ngrams(r, k), &g)).max().unwrap_or(0);
                matched += count(&cg, &g).min(best_ref);
            }
        }
        if matched == 0 {
            return 0.0;
        }
        precisions.push(matched as f64 / total as f64);
    }
    let c: usize = corpus.iter().map(|(c, _)| c.len()).sum();
    let mut r = 0usize;
    for (cand, refs) in corpus {
        let mut best = refs[0].len();
        for x in refs {
            let (d, bd) = ((x.len() as i64 - cand.len() as i64).abs(), (best as i64 - cand.len() as i64).abs());
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let geo = precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
    100.0 * bp * geo.exp()
}

fn is_subsequence(sub: &[String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == s))
}

/// Longest common subsequence by trying every subset of `a`.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i].clone()).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(corpus: &Corpus) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut best: f64 = 0.0;
        for r in refs {
            let l = lcs_oracle(cand, r) as f64;
            if l > 0.0 {
                let p = l / cand.len() as f64;
                let rec = l / r.len() as f64;
                best = best.max((1.0 + beta2) * p * rec / (rec + beta2 * p));
            }
        }
        total += best;
    }
    total / corpus.len() as f64
}

/// Every one-to-one exact alignment; returns (max matches, min chunks
/// among maximal alignments).
pub fn meteor_alignment_oracle(cand: &[String], reference: &[String]) -> (usize, usize) {
    fn rec(i: usize, cand: &[String], reference: &[String], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == cand.len() {
            let m = cur.len();
            let mut chunks = 0;
            for (k, &(ci, rj)) in cur.iter().enumerate() {
                if k == 0 || !(cur[k - 1].0 + 1 == ci && cur[k - 1].1 + 1 == rj) {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        rec(i + 1, cand, reference, used, cur, best);
        for j in 0..reference.len() {
            if !used[j] && reference[j] == cand[i] {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, cand, reference, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    rec(0, cand, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor_oracle(corpus: &Corpus) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut best: f64 = 0.0;
        for r in refs {
            let (m, chunks) = meteor_alignment_oracle(cand, r);
            if m == 0 {
                continue;
            }
            let p = m as f64 / cand.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f = p * rec / (0.9 * p + 0.1 * rec);
            let frag = chunks as f64 / m as f64;
            best = best.max(f * (1.0 - 0.5 * frag * frag * frag));
        }
        total += best;
    }
    total / corpus.len() as f64
}

pub fn cider_oracle(corpus: &Corpus) -> f64 {
    let docs = corpus.len() as f64;
    let mut score = vec![0.0; corpus.len()];
    for n in 1..=4 {
        let df = |g: &Vec<String>| {
            corpus
                .iter()
                .filter(|(_, refs)| refs.iter().any(|r| ngrams(r, n).contains(g)))
                .count()
                .max(1) as f64
        };
        let vector = |tokens: &[String]| -> Vec<(Vec<String>, f64)> {
            let grams = ngrams(tokens, n);
            unique(&grams)
                .into_iter()
                .map(|g| {
                    let w = count(&grams, &g) as f64 * (docs / df(&g)).ln();
                    (g, w)
                })
                .collect()
        };
        let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        for (k, (cand, refs)) in corpus.iter().enumerate() {
            let vc = vector(cand);
            let mut acc = 0.0;
            for r in refs {
                let vr = vector(r);
                let (nc, nr) = (norm(&vc), norm(&vr));
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, wr) in &vr {
                    if let Some((_, wc)) = vc.iter().find(|(x, _)| x == g) {
                        dot += wc.min(*wr) * wr;
                    }
                }
                acc += dot / (nc * nr);
            }
            score[k] += acc / refs.len() as f64;
        }
    }
    score.iter().map(|s| 10.0 * s / 4.0).sum::<f64>() / docs
}

/// Scalar AdamW, one parameter at a time.
pub struct ScalarAdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdamW {
    pub fn new(lr: f64, wd: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            wd,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, p: f64, g: f64) -> f64 {
        self.t += 1;
        let p = p - self.lr * self.wd * p;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let mhat = self.m / (1.0 - self.beta1.powi(self.t));
        let vhat = self.v / (1.0 - self.beta2.powi(self.t));
        p - self.lr * mhat / (vhat.sqrt() + self.eps)
    }
}
