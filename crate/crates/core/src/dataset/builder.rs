use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::triplet::{load_triplets, triplet_to_sentence, KnowledgeTriplet, Relation};
use crate::error::{Error, Result};
use crate::tokenizer::normalize;

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub caption: String,
    pub knowledge_sentence: String,
    pub question: String,
    pub answer: String,
    pub triplet: KnowledgeTriplet,
}

/// True when `needle` occurs in `haystack` as a contiguous run of whole tokens.
pub fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let t = &self.triplet;
        let bad = |why: &str| Err(Error::Schema(format!("record `{}`: {why}", self.image)));
        if t.head.is_empty() || t.tail.is_empty() {
            return bad("empty triplet concept");
        }
        if self.answer != t.head && self.answer != t.tail {
            return bad("answer is neither head nor tail");
        }
        let s = normalize(&self.knowledge_sentence);
        if !contains_phrase(&s, &normalize(&t.head)) || !contains_phrase(&s, &normalize(&t.tail)) {
            return bad("knowledge sentence lacks head or tail");
        }
        let c = normalize(&self.caption);
        if !contains_phrase(&c, &normalize(&t.head)) && !contains_phrase(&c, &normalize(&t.tail)) {
            return bad("caption mentions neither head nor tail");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletMatch {
    pub triplet: KnowledgeTriplet,
    /// Longest matched concept, in tokens.
    pub length: usize,
}

/// Triplets whose head or tail occurs in the caption, longest match first,
/// ties broken by triplet order.
pub fn match_triplets(caption: &str, triplets: &[KnowledgeTriplet]) -> Vec<TripletMatch> {
    let tokens = normalize(caption);
    let mut out: Vec<TripletMatch> = triplets
        .iter()
        .filter_map(|t| {
            let length = [&t.head, &t.tail]
                .into_iter()
                .map(|c| normalize(c))
                .filter(|c| contains_phrase(&tokens, c))
                .map(|c| c.len())
                .max()?;
            Some(TripletMatch {
                triplet: t.clone(),
                length,
            })
        })
        .collect();
    out.sort_by(|a, b| b.length.cmp(&a.length).then_with(|| a.triplet.cmp(&b.triplet)));
    out
}

/// Head or tail with equal probability, fixed by `seed`.
pub fn sample_answer(t: &KnowledgeTriplet, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        t.head.clone()
    } else {
        t.tail.clone()
    }
}

/// Question obtained by replacing the answer in the knowledge sentence
/// with "what".
pub fn template_question(t: &KnowledgeTriplet, answer: &str) -> String {
    let sentence = triplet_to_sentence(t).to_lowercase();
    let body = sentence.trim_end_matches('.');
    let gapped = if answer == t.head {
        body.replacen(answer, "what", 1)
    } else {
        match body.rfind(answer) {
            Some(at) => format!("{}what{}", &body[..at], &body[at + answer.len()..]),
            None => body.to_string(),
        }
    };
    let mut chars = gapped.chars();
    let mut q: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    q.push('?');
    q
}

/// Seeded shuffle, then `floor(N/5)` records to validation.
pub fn split_dataset<T: Clone>(records: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if records.len() < 5 {
        return Err(Error::TooFewRecords {
            needed: 5,
            got: records.len(),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = records.len() / 5;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[n_val..]), pick(&order[..n_val])))
}

/// Parses `image_ref<TAB>text` lines.
pub fn parse_pairs(text: &str, what: &'static str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, body)) if !id.trim().is_empty() && !body.trim().is_empty() => {
                out.push((id.trim().to_string(), body.trim().to_string()))
            }
            _ => return Err(Error::format(what, format!("line {}: expected `id<TAB>text`", i + 1))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub captions: usize,
    pub triplets: usize,
    pub malformed_triplet_lines: Vec<usize>,
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub skipped_images: Vec<String>,
    pub relation_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub summary: BuildSummary,
}

/// One record per caption that matches at least one triplet. Questions come
/// from `questions` when given for the image, otherwise from the template.
pub fn build_records(
    captions: &[(String, String)],
    triplets: &[KnowledgeTriplet],
    questions: &HashMap<String, String>,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<String>)> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, (image, caption)) in captions.iter().enumerate() {
        let Some(best) = match_triplets(caption, triplets).into_iter().next() else {
            warn!("no triplet matches caption of `{image}`");
            skipped.push(image.clone());
            continue;
        };
        let t = best.triplet;
        let answer = sample_answer(&t, seed.wrapping_add(i as u64));
        let question = questions
            .get(image)
            .cloned()
            .unwrap_or_else(|| template_question(&t, &answer));
        let record = SampleRecord {
            image: image.clone(),
            caption: caption.clone(),
            knowledge_sentence: triplet_to_sentence(&t),
            question,
            answer,
            triplet: t,
        };
        record.validate()?;
        records.push(record);
    }
    Ok((records, skipped))
}

pub fn build_dataset(
    captions_text: &str,
    triplets_text: &str,
    questions: &HashMap<String, String>,
    seed: u64,
) -> Result<BuildOutput> {
    let captions = parse_pairs(captions_text, "captions")?;
    let load = load_triplets(triplets_text, &Relation::ALL)?;
    let (records, skipped_images) = build_records(&captions, &load.triplets, questions, seed)?;
    let (train, val) = split_dataset(&records, seed)?;
    let mut relation_histogram = BTreeMap::new();
    for r in &records {
        *relation_histogram.entry(r.triplet.relation.to_string()).or_insert(0) += 1;
    }
    let summary = BuildSummary {
        captions: captions.len(),
        triplets: load.triplets.len(),
        malformed_triplet_lines: load.warnings.iter().map(|w| w.line).collect(),
        records: records.len(),
        train: train.len(),
        val: val.len(),
        skipped_images,
        relation_histogram,
    };
    Ok(BuildOutput { train, val, summary })
}

pub fn to_jsonl(records: &[SampleRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format("dataset", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub summary: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            summary: dir.join("summary.json"),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads inputs, builds, and writes `train.jsonl`, `val.jsonl` and
/// `summary.json` into `out_dir`.
pub fn build_dataset_files(
    captions: &Path,
    triplets: &Path,
    questions: Option<&Path>,
    out_dir: &Path,
    seed: u64,
) -> Result<(DatasetFiles, BuildSummary)> {
    let captions_text = read(captions)?;
    let triplets_text = read(triplets)?;
    let questions: HashMap<String, String> = match questions {
        Some(p) => parse_pairs(&read(p)?, "questions")?.into_iter().collect(),
        None => HashMap::new(),
    };
    let out = build_dataset(&captions_text, &triplets_text, &questions, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = DatasetFiles::in_dir(out_dir);
    let mut summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    summary.push('\n');
    for (path, body) in [
        (&files.train, to_jsonl(&out.train)),
        (&files.val, to_jsonl(&out.val)),
        (&files.summary, summary),
    ] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok((files, out.summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: Relation, tl: &str) -> KnowledgeTriplet {
        KnowledgeTriplet::new(h, r, tl).unwrap()
    }

    #[test]
    fn matches_on_word_boundaries() {
        let court = t("basketball court", Relation::UsedFor, "playing games");
        let m = match_triplets("a basketball court surrounded by trees", &[court.clone()]);
        assert_eq!(m, vec![TripletMatch { triplet: court, length: 2 }]);
        assert!(match_triplets("courts and treetops", &[t("tree", Relation::PartOf, "forest")]).is_empty());
        assert!(match_triplets("a lake", &[t("tree", Relation::PartOf, "forest")]).is_empty());
    }

    #[test]
    fn longest_match_ranks_first() {
        let short = t("court", Relation::UsedFor, "tennis");
        let long = t("basketball court", Relation::UsedFor, "playing games");
        let m = match_triplets("a basketball court", &[short.clone(), long.clone()]);
        assert_eq!(m[0].triplet, long);
        assert_eq!(m[1].triplet, short);
    }

    #[test]
    fn answers_are_deterministic_and_balanced() {
        let tr = t("bridge", Relation::UsedFor, "crossing water");
        assert_eq!(sample_answer(&tr, 9), sample_answer(&tr, 9));
        let heads = (0..1000).filter(|&s| sample_answer(&tr, s) == "bridge").count();
        assert!((450..=550).contains(&heads), "{heads}");
        let same = t("x", Relation::PartOf, "x");
        assert_eq!(sample_answer(&same, 3), "x");
    }

    #[test]
    fn template_questions() {
        let tr = t("basketball court", Relation::UsedFor, "playing games");
        assert_eq!(template_question(&tr, "playing games"), "Basketball court is used for what?");
        assert_eq!(template_question(&tr, "basketball court"), "What is used for playing games?");
    }

    #[test]
    fn split_sizes() {
        let v: Vec<u32> = (0..300).collect();
        let (tr, va) = split_dataset(&v, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (240, 60));
        let (tr, va) = split_dataset(&v[..5], 1).unwrap();
        assert_eq!((tr.len(), va.len()), (4, 1));
        assert!(matches!(split_dataset(&v[..4], 1), Err(Error::TooFewRecords { .. })));
        assert_eq!(split_dataset(&v, 7).unwrap(), split_dataset(&v, 7).unwrap());
    }

    #[test]
    fn record_round_trips_with_exact_field_names() {
        let tr = t("river", Relation::HasProperty, "dangerous to traverse");
        let r = SampleRecord {
            image: "a.raw".into(),
            caption: "a river".into(),
            knowledge_sentence: triplet_to_sentence(&tr),
            question: "River has the property of being what?".into(),
            answer: "dangerous to traverse".into(),
            triplet: tr,
        };
        r.validate().unwrap();
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"knowledge_sentence\"") && line.contains("\"relation\":\"HasProperty\""));
        let back: SampleRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn invalid_records_are_caught() {
        let tr = t("river", Relation::HasProperty, "wet");
        let r = SampleRecord {
            image: "a".into(),
            caption: "a lake".into(),
            knowledge_sentence: triplet_to_sentence(&tr),
            question: "q".into(),
            answer: "wet".into(),
            triplet: tr,
        };
        assert!(r.validate().is_err());
    }
}
