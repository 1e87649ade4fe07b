use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Commonsense relations the builder can render as sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Relation {
    UsedFor,
    AtLocation,
    HasProperty,
    CapableOf,
    PartOf,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::UsedFor,
        Relation::AtLocation,
        Relation::HasProperty,
        Relation::CapableOf,
        Relation::PartOf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::UsedFor => "UsedFor",
            Relation::AtLocation => "AtLocation",
            Relation::HasProperty => "HasProperty",
            Relation::CapableOf => "CapableOf",
            Relation::PartOf => "PartOf",
        }
    }

    /// Sentence template, `{head} … {tail}`.
    fn connective(self) -> &'static str {
        match self {
            Relation::UsedFor => "is used for",
            Relation::AtLocation => "is at location",
            Relation::HasProperty => "has the property of being",
            Relation::CapableOf => "is capable of",
            Relation::PartOf => "is part of",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = Error;

    /// Accepts `UsedFor`, `used for`, `used_for` and `/r/UsedFor`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .trim_start_matches("/r/")
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        Relation::ALL
            .into_iter()
            .find(|r| r.as_str().to_lowercase() == key)
            .ok_or_else(|| Error::UnsupportedRelation(s.trim().to_string()))
    }
}

impl TryFrom<String> for Relation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Relation> for String {
    fn from(r: Relation) -> Self {
        r.as_str().to_string()
    }
}

/// `<head, relation, tail>` with lowercase, space-separated concepts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriplet {
    pub head: String,
    pub relation: Relation,
    pub tail: String,
}

impl KnowledgeTriplet {
    pub fn new(head: &str, relation: Relation, tail: &str) -> Result<Self> {
        let head = normalize_concept(head);
        let tail = normalize_concept(tail);
        if head.is_empty() || tail.is_empty() {
            return Err(Error::format("triplet", "empty head or tail"));
        }
        Ok(Self { head, relation, tail })
    }

    fn sort_key(&self) -> (&str, &str, &str) {
        (&self.head, self.relation.as_str(), &self.tail)
    }
}

impl Ord for KnowledgeTriplet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for KnowledgeTriplet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lowercase, underscores to spaces, collapsed whitespace.
pub fn normalize_concept(s: &str) -> String {
    s.replace('_', " ")
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Knowledge sentence for a triplet: template, capitalized first letter,
/// terminal period.
pub fn triplet_to_sentence(t: &KnowledgeTriplet) -> String {
    let body = format!("{} {} {}", t.head, t.relation.connective(), t.tail);
    let mut chars = body.chars();
    let mut s: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    s.push('.');
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct TripletLoad {
    pub triplets: Vec<KnowledgeTriplet>,
    pub warnings: Vec<LoadWarning>,
}

/// Parses `relation<TAB>head<TAB>tail` lines. Malformed lines are skipped
/// with a warning; relations outside `filter` are dropped; duplicates
/// collapse to their first occurrence.
pub fn load_triplets(text: &str, filter: &[Relation]) -> Result<TripletLoad> {
    let mut out = TripletLoad::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = if fields.len() != 3 {
            Err(format!("expected 3 tab-separated fields, found {}", fields.len()))
        } else {
            match fields[0].parse::<Relation>() {
                Err(_) => Ok(None),
                Ok(rel) => KnowledgeTriplet::new(fields[1], rel, fields[2])
                    .map(Some)
                    .map_err(|e| e.to_string()),
            }
        };
        match parsed {
            Err(reason) => {
                warn!("triplet line {lineno}: {reason}");
                out.warnings.push(LoadWarning { line: lineno, reason });
            }
            Ok(Some(t)) if filter.contains(&t.relation) => {
                if seen.insert(t.clone()) {
                    out.triplets.push(t);
                }
            }
            Ok(_) => {}
        }
    }
    if out.triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    Ok(out)
}
