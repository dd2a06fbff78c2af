//! Synthetic question/answer corpus with fictitious entities.
//!
//! Every subdomain owns a disjoint set of entity names and attribute
//! words. Answers share a pool of connectives across all subdomains, so
//! connective slots are unpredictable (high entropy) while entity and
//! attribute slots are memorized facts (low entropy) once a model has
//! been trained on the corpus.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use numkit::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::entropy::{Class, TokenProfile};
use crate::error::{contract, AlterError, Result};
use crate::model::BaseModel;
use crate::tokenizer::{self, Tokenizer, BOS, EOS};

pub const DEFAULT_CONNECTIVES: [&str; 12] = [
    "however",
    "therefore",
    "moreover",
    "thus",
    "meanwhile",
    "furthermore",
    "hence",
    "nevertheless",
    "consequently",
    "besides",
    "indeed",
    "accordingly",
];

pub const DEFAULT_RELATIONS: [&str; 3] = ["color", "city", "food"];

pub const DEFAULT_QUESTION_TEMPLATES: [&str; 3] = [
    "what is the {rel} of {ent} ?",
    "tell me the {rel} of {ent} ?",
    "which {rel} does {ent} have ?",
];

pub const DEFAULT_ANSWER_TEMPLATE: &str = "{c1} {ent} {attr} {c2}";

/// Which part of the corpus a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subdomain {
    /// Forgetting subdomain, numbered from 1.
    Forget(usize),
    Retain,
}

impl Subdomain {
    /// Zero-based forgetting index, if any.
    pub fn forget_index(self) -> Option<usize> {
        match self {
            Self::Forget(d) => Some(d - 1),
            Self::Retain => None,
        }
    }
}

impl fmt::Display for Subdomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Forget(d) => write!(f, "{d}"),
            Self::Retain => f.write_str("retain"),
        }
    }
}

impl Serialize for Subdomain {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Forget(d) => s.serialize_u64(*d as u64),
            Self::Retain => s.serialize_str("retain"),
        }
    }
}

impl<'de> Deserialize<'de> for Subdomain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(de::Error::custom("subdomain numbers start at 1")),
            Raw::Num(n) => Ok(Self::Forget(n as usize)),
            Raw::Text(t) if t == "retain" => Ok(Self::Retain),
            Raw::Text(t) => Err(de::Error::custom(format!(
                "subdomain must be a number or \"retain\", got {t:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub subdomain: Subdomain,
    pub question: String,
    pub answer: String,
    pub split: Split,
}

impl QaRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        match (self.split, self.subdomain) {
            (Split::Forget, Subdomain::Forget(_)) | (Split::Retain, Subdomain::Retain) => Ok(()),
            (Split::Forget, Subdomain::Retain) => {
                Err("forget record must carry a numeric subdomain".into())
            }
            (Split::Retain, Subdomain::Forget(_)) => {
                Err("retain record must carry subdomain \"retain\"".into())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub subdomains: usize,
    pub entities_per_subdomain: usize,
    pub retain_entities: usize,
    /// Distinct attribute words per (subdomain, relation).
    pub attribute_values: usize,
    pub relations: Vec<String>,
    pub connectives: Vec<String>,
    pub question_templates: Vec<String>,
    pub answer_template: String,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            subdomains: 3,
            entities_per_subdomain: 20,
            retain_entities: 40,
            attribute_values: 6,
            relations: DEFAULT_RELATIONS.iter().map(|s| s.to_string()).collect(),
            connectives: DEFAULT_CONNECTIVES.iter().map(|s| s.to_string()).collect(),
            question_templates: DEFAULT_QUESTION_TEMPLATES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            answer_template: DEFAULT_ANSWER_TEMPLATE.to_string(),
            seed: 17,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(AlterError::Spec(m.to_string()));
        if self.subdomains == 0 || self.entities_per_subdomain == 0 || self.retain_entities == 0 {
            return err("need at least one subdomain, one entity per subdomain and one retain entity");
        }
        if self.relations.is_empty() || self.attribute_values == 0 {
            return err("need at least one relation and one attribute value");
        }
        if self.connectives.len() < 2 {
            return err("need at least two connectives");
        }
        if self.question_templates.is_empty() {
            return err("need at least one question template");
        }
        for t in &self.question_templates {
            if !t.contains("{rel}") || !t.contains("{ent}") {
                return err("question templates must contain {rel} and {ent}");
            }
        }
        for slot in ["{c1}", "{c2}", "{ent}", "{attr}"] {
            if !self.answer_template.contains(slot) {
                return Err(AlterError::Spec(format!("answer template lacks {slot}")));
            }
        }
        Ok(())
    }

    /// Fixed words of the corpus: connectives, relations and template words.
    pub fn frame_words(&self) -> Vec<String> {
        let mut words: Vec<String> = self.connectives.clone();
        words.extend(self.relations.iter().cloned());
        for t in self.question_templates.iter().chain([&self.answer_template]) {
            for w in tokenizer::segment(t) {
                if !w.starts_with('{') && !w.ends_with('}') {
                    words.push(w.to_string());
                }
            }
        }
        words
    }
}

/// Groups in generation order: subdomains 1..=N, then the retain set.
fn groups(spec: &CorpusSpec) -> Vec<(Subdomain, usize)> {
    (1..=spec.subdomains)
        .map(|d| (Subdomain::Forget(d), spec.entities_per_subdomain))
        .chain([(Subdomain::Retain, spec.retain_entities)])
        .collect()
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize, coda: bool) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    if coda {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
    }
    w
}

fn unique_words(
    rng: &mut ChaCha8Rng,
    taken: &mut HashSet<String>,
    count: usize,
    syllables: usize,
    coda: bool,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return Err(AlterError::Spec(
                "could not draw enough distinct pseudo-words".into(),
            ));
        }
        let w = pseudo_word(rng, syllables, coda);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(k, v);
    }
    s
}

/// Generates the corpus. Output depends only on `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<QaRecord>> {
    spec.validate()?;
    let mut taken: HashSet<String> = spec.frame_words().into_iter().collect();
    let mut seen = HashSet::new();
    for w in spec.connectives.iter().chain(&spec.relations) {
        if !seen.insert(w) {
            return Err(AlterError::Spec(format!("word {w:?} used twice in the frame")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for (group, n_entities) in groups(spec) {
        let entities = unique_words(&mut rng, &mut taken, n_entities, 2, true)?;
        let pools: Vec<Vec<String>> = spec
            .relations
            .iter()
            .map(|_| unique_words(&mut rng, &mut taken, spec.attribute_values, 3, false))
            .collect::<Result<_>>()?;
        let mut k = 0usize;
        for ent in &entities {
            for (rel, pool) in spec.relations.iter().zip(&pools) {
                let attr = pool.choose(&mut rng).expect("non-empty pool");
                let qt = spec
                    .question_templates
                    .choose(&mut rng)
                    .expect("non-empty templates");
                let c1 = spec.connectives.choose(&mut rng).expect("connectives");
                let c2 = spec.connectives.choose(&mut rng).expect("connectives");
                let (id, split) = match group {
                    Subdomain::Forget(d) => (format!("f{d}-{k:03}"), Split::Forget),
                    Subdomain::Retain => (format!("r-{k:03}"), Split::Retain),
                };
                records.push(QaRecord {
                    id,
                    subdomain: group,
                    question: fill(qt, &[("{rel}", rel), ("{ent}", ent)]),
                    answer: fill(
                        &spec.answer_template,
                        &[("{c1}", c1), ("{c2}", c2), ("{ent}", ent), ("{attr}", attr)],
                    ),
                    split,
                });
                k += 1;
            }
        }
    }
    Ok(records)
}

/// Retain-set facts re-drawn with fresh connectives and question frames.
/// They contain no forget-set entity and are never trained on.
pub fn holdout_variants(spec: &CorpusSpec, records: &[QaRecord]) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_401d);
    records
        .iter()
        .filter(|r| r.split == Split::Retain)
        .map(|r| {
            let words: Vec<&str> = tokenizer::segment(&r.answer);
            let c1 = spec.connectives.choose(&mut rng).expect("connectives");
            let c2 = spec.connectives.choose(&mut rng).expect("connectives");
            let answer = words
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    if spec.connectives.iter().any(|c| c == w) {
                        if i == 0 {
                            c1.as_str()
                        } else {
                            c2.as_str()
                        }
                    } else {
                        w
                    }
                })
                .collect::<Vec<_>>()
                .join(" ");
            QaRecord {
                id: format!("h-{}", r.id),
                answer,
                ..r.clone()
            }
        })
        .collect()
}

/// Tokenizer over every word of `records` plus the frame vocabulary.
pub fn build_tokenizer(spec: &CorpusSpec, records: &[QaRecord]) -> Tokenizer {
    let frame = spec.frame_words();
    let mut words: Vec<&str> = frame.iter().map(String::as_str).collect();
    for r in records {
        words.extend(tokenizer::segment(&r.question));
        words.extend(tokenizer::segment(&r.answer));
    }
    Tokenizer::from_words(words)
}

pub fn save(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| AlterError::io(path, e))?;
    f.write_all(&buf).map_err(|e| AlterError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<QaRecord>> {
    let f = fs::File::open(path).map_err(|e| AlterError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| AlterError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| AlterError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        out.push(rec);
    }
    Ok(out)
}

/// A record encoded for the model: inputs `ids[..n-1]` predict `ids[1..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub subdomain: Subdomain,
    pub ids: Vec<usize>,
    /// Per output row: the target is an answer token.
    pub answer: Vec<bool>,
    /// Per output row: the target is an answer token that carries
    /// knowledge (not a connective). Exact match is scored on these.
    pub scored: Vec<bool>,
}

impl Example {
    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }

    pub fn rows(&self) -> usize {
        self.ids.len() - 1
    }
}

pub fn encode(tok: &Tokenizer, connectives: &[String], record: &QaRecord) -> Example {
    let q = tok.encode(&record.question);
    let a = tok.encode(&record.answer);
    let conn: HashSet<usize> = connectives.iter().filter_map(|c| tok.id(c)).collect();
    let mut ids = Vec::with_capacity(q.len() + a.len() + 2);
    ids.push(BOS);
    ids.extend(&q);
    ids.extend(&a);
    ids.push(EOS);
    let rows = ids.len() - 1;
    let answer_rows = q.len()..q.len() + a.len();
    let answer: Vec<bool> = (0..rows).map(|t| answer_rows.contains(&t)).collect();
    let scored = (0..rows)
        .map(|t| answer[t] && !conn.contains(&ids[t + 1]))
        .collect();
    Example {
        id: record.id.clone(),
        subdomain: record.subdomain,
        ids,
        answer,
        scored,
    }
}

pub fn encode_all(tok: &Tokenizer, connectives: &[String], records: &[QaRecord]) -> Vec<Example> {
    records.iter().map(|r| encode(tok, connectives, r)).collect()
}

/// Entity-like words (not connectives, relations or template words) that
/// appear in records of `subdomain`.
pub fn content_words(spec: &CorpusSpec, records: &[QaRecord], subdomain: Subdomain) -> HashSet<String> {
    let frame: HashSet<String> = spec.frame_words().into_iter().collect();
    records
        .iter()
        .filter(|r| r.subdomain == subdomain)
        .flat_map(|r| {
            tokenizer::segment(&r.question)
                .into_iter()
                .chain(tokenizer::segment(&r.answer))
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|w| !frame.contains(w))
        .collect()
}

pub fn check_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        Err(contract(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

/// Mean final-layer hidden state over answer rows of class Low.
pub fn subdomain_centroid(
    model: &BaseModel,
    examples: &[Example],
    profiles: &[Vec<TokenProfile>],
) -> Result<Vec<f64>> {
    low_answer_mean(model, examples, profiles, |_, hidden| hidden)
}

/// Mean next-token distribution over answer rows of class Low.
pub fn route_centroid(
    model: &BaseModel,
    examples: &[Example],
    profiles: &[Vec<TokenProfile>],
) -> Result<Vec<f64>> {
    low_answer_mean(model, examples, profiles, |logits, _| logits.softmax_rows())
}

fn low_answer_mean(
    model: &BaseModel,
    examples: &[Example],
    profiles: &[Vec<TokenProfile>],
    pick: impl Fn(Tensor, Tensor) -> Tensor,
) -> Result<Vec<f64>> {
    check_nonempty(examples, "centroid example set")?;
    if profiles.len() != examples.len() {
        return Err(contract("one profile per example is required"));
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (ex, prof) in examples.iter().zip(profiles) {
        let (logits, hidden) = model.forward_plain(ex.inputs())?;
        let rows = pick(logits, hidden);
        sum.resize(rows.cols(), 0.0);
        for (t, p) in prof.iter().enumerate().take(ex.rows()) {
            if ex.answer[t] && p.class == Class::Low {
                for (acc, v) in sum.iter_mut().zip(rows.row(t)) {
                    *acc += v;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(contract("no Low answer rows to average"));
    }
    Ok(sum.into_iter().map(|v| v / count as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        let spec = CorpusSpec::default();
        let recs = generate(&spec).unwrap();
        assert_eq!(recs.iter().filter(|r| r.split == Split::Forget).count(), 180);
        assert_eq!(recs.iter().filter(|r| r.split == Split::Retain).count(), 120);
        for d in 1..=3 {
            assert_eq!(
                recs.iter()
                    .filter(|r| r.subdomain == Subdomain::Forget(d))
                    .count(),
                60
            );
        }
    }

    #[test]
    fn hundred_entities_pairwise_disjoint() {
        let spec = CorpusSpec::default();
        let recs = generate(&spec).unwrap();
        let mut all = HashSet::new();
        let mut total = 0;
        for g in [
            Subdomain::Forget(1),
            Subdomain::Forget(2),
            Subdomain::Forget(3),
            Subdomain::Retain,
        ] {
            let words = content_words(&spec, &recs, g);
            total += words.len();
            all.extend(words);
        }
        assert_eq!(total, all.len());
        let entities: HashSet<&str> = recs
            .iter()
            .map(|r| tokenizer::segment(&r.answer)[1])
            .collect();
        assert_eq!(entities.len(), 100);
    }

    #[test]
    fn answers_have_two_connectives_and_two_facts() {
        let spec = CorpusSpec::default();
        for r in generate(&spec).unwrap() {
            let words = tokenizer::segment(&r.answer);
            let n_conn = words
                .iter()
                .filter(|w| spec.connectives.iter().any(|c| c == *w))
                .count();
            assert!(n_conn >= 2, "{}", r.answer);
            assert_eq!(words.len() - n_conn, 2, "{}", r.answer);
        }
    }

    #[test]
    fn vocabulary_is_desk_scale() {
        let spec = CorpusSpec::default();
        let recs = generate(&spec).unwrap();
        let v = build_tokenizer(&spec, &recs).vocab_size();
        assert!((180..=220).contains(&v), "vocab {v}");
    }

    #[test]
    fn reserved_frame_word_collision_is_spec_error() {
        let mut spec = CorpusSpec::default();
        spec.relations.push("however".into());
        assert!(matches!(generate(&spec), Err(AlterError::Spec(_))));
    }

    #[test]
    fn encoding_marks_answer_rows() {
        let spec = CorpusSpec::default();
        let recs = generate(&spec).unwrap();
        let tok = build_tokenizer(&spec, &recs);
        let ex = encode(&tok, &spec.connectives, &recs[0]);
        assert_eq!(ex.answer.iter().filter(|&&a| a).count(), 4);
        assert_eq!(ex.scored.iter().filter(|&&a| a).count(), 2);
        assert_eq!(tok.decode(&ex.ids[1..ex.ids.len() - 1]), format!("{} {}", recs[0].question, recs[0].answer));
    }

    #[test]
    fn holdout_keeps_facts_and_skips_forget_entities() {
        let spec = CorpusSpec::default();
        let recs = generate(&spec).unwrap();
        let hold = holdout_variants(&spec, &recs);
        assert_eq!(hold.len(), 120);
        let forget_words: HashSet<String> = (1..=3)
            .flat_map(|d| content_words(&spec, &recs, Subdomain::Forget(d)))
            .collect();
        for h in &hold {
            for w in tokenizer::segment(&h.answer) {
                assert!(!forget_words.contains(w));
            }
        }
    }

    #[test]
    fn missing_subdomain_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(
            &p,
            "{\"id\":\"r-000\",\"question\":\"q\",\"answer\":\"a\",\"split\":\"retain\"}\n",
        )
        .unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains("subdomain"), "{err}");
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn split_subdomain_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(
            &p,
            "{\"id\":\"x\",\"subdomain\":2,\"question\":\"q\",\"answer\":\"a\",\"split\":\"retain\"}\n",
        )
        .unwrap();
        assert!(matches!(load(&p), Err(AlterError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load(&p).unwrap().is_empty());
    }
}
