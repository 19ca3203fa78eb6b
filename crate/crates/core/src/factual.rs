//! Factual evidence generator: knowledge-triple ingestion, completion via a
//! small causal language model, the four-rule filter, and template
//! verbalization.

use crate::encoder::{tokenize, EncoderConfig, Vocabulary, EOS, SEP};
use crate::textual::{DecodeMode, LmTrainConfig, TextualGenerator, TrainOpts};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

pub fn default_templates() -> &'static str {
    include_str!("../data/relation_templates.tsv")
}
pub fn default_stopwords() -> &'static str {
    include_str!("../data/stopwords.txt")
}
pub fn default_pos_lexicon() -> &'static str {
    include_str!("../data/pos_lexicon.tsv")
}
pub fn default_frequency_table() -> &'static str {
    include_str!("../data/word_frequency.txt")
}
pub fn bundled_kg_seed() -> &'static str {
    include_str!("../data/kg_seed.tsv")
}
pub fn bundled_corpus() -> &'static str {
    include_str!("../data/corpus_commonsense.txt")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KgError {
    #[error("unknown relation label `{0}`")]
    UnknownRelation(String),
    #[error("template table is malformed: {0}")]
    BadTemplates(String),
    #[error("frequency table is malformed: {0}")]
    BadFrequencyTable(String),
    #[error("novelty metrics need a nonempty generated set")]
    EmptyGeneratedSet,
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Ingested,
    Generated,
}

/// One knowledge unit: subject and object as token sequences, relation from
/// the closed label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub subject: Vec<String>,
    pub relation: String,
    pub object: Vec<String>,
    pub provenance: Provenance,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str, provenance: Provenance) -> Self {
        Triple {
            subject: tokenize(subject),
            relation: relation.to_string(),
            object: tokenize(object),
            provenance,
        }
    }

    pub fn subject_text(&self) -> String {
        self.subject.join(" ")
    }

    pub fn object_text(&self) -> String {
        self.object.join(" ")
    }

    /// Head word of a multi-word subject: its last token.
    pub fn subject_head(&self) -> &str {
        self.subject.last().map(String::as_str).unwrap_or("")
    }

    pub fn object_head(&self) -> &str {
        self.object.last().map(String::as_str).unwrap_or("")
    }

    fn key(&self) -> (String, String, String) {
        (
            self.subject_text(),
            self.relation.clone(),
            self.object_text(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub added: usize,
    pub duplicates: usize,
    pub skipped: usize,
    pub diagnostics: Vec<String>,
}

/// Triples indexed by subject head word plus the relation template table.
#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    triples: Vec<Triple>,
    subject_index: HashMap<String, Vec<usize>>,
    templates: BTreeMap<String, String>,
    canonical: HashMap<String, String>,
    seen: HashSet<(String, String, String)>,
    objects: HashSet<String>,
}

impl KnowledgeStore {
    pub fn with_default_templates() -> Self {
        Self::from_template_text(default_templates()).expect("bundled templates parse")
    }

    /// Parse `Relation \t pattern-with-{s}-and-{o}` rows.
    pub fn from_template_text(text: &str) -> Result<Self, KgError> {
        let mut templates = BTreeMap::new();
        let mut canonical = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, pattern) = line.split_once('\t').ok_or_else(|| {
                KgError::BadTemplates(format!("line {}: missing tab", i + 1))
            })?;
            if !pattern.contains("{s}") || !pattern.contains("{o}") {
                return Err(KgError::BadTemplates(format!(
                    "line {}: pattern needs {{s}} and {{o}}",
                    i + 1
                )));
            }
            if templates
                .insert(label.to_string(), pattern.to_string())
                .is_some()
            {
                return Err(KgError::BadTemplates(format!("duplicate label {label}")));
            }
            canonical.insert(label.to_lowercase(), label.to_string());
        }
        Ok(KnowledgeStore {
            triples: Vec::new(),
            subject_index: HashMap::new(),
            templates,
            canonical,
            seen: HashSet::new(),
            objects: HashSet::new(),
        })
    }

    pub fn from_template_file(path: &Path) -> Result<Self, KgError> {
        let text = std::fs::read_to_string(path).map_err(|e| KgError::Io(e.to_string()))?;
        Self::from_template_text(&text)
    }

    /// Canonical label for any casing of a known relation.
    pub fn canonical_relation(&self, label: &str) -> Result<&str, KgError> {
        self.canonical
            .get(&label.to_lowercase())
            .map(String::as_str)
            .ok_or_else(|| KgError::UnknownRelation(label.to_string()))
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.seen.contains(&t.key())
    }

    pub fn has_object(&self, object_text: &str) -> bool {
        self.objects.contains(object_text)
    }

    /// Stored triples whose subject head word matches.
    pub fn by_subject_head(&self, head: &str) -> impl Iterator<Item = &Triple> {
        self.subject_index
            .get(head)
            .into_iter()
            .flatten()
            .map(|&i| &self.triples[i])
    }

    fn insert(&mut self, triple: Triple) -> bool {
        if self.seen.contains(&triple.key()) {
            return false;
        }
        self.seen.insert(triple.key());
        self.objects.insert(triple.object_text());
        self.subject_index
            .entry(triple.subject_head().to_string())
            .or_default()
            .push(self.triples.len());
        self.triples.push(triple);
        true
    }

    /// Ingest tab-separated `subject \t relation \t object` rows. Malformed
    /// rows and unknown relations are counted and skipped; duplicates leave
    /// the store unchanged, so ingestion is idempotent.
    pub fn ingest_text(&mut self, text: &str) -> IngestReport {
        let mut report = IngestReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                report.skipped += 1;
                report
                    .diagnostics
                    .push(format!("line {}: expected 3 tab-separated fields", i + 1));
                continue;
            }
            let (s, r, o) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            if s.is_empty() || o.is_empty() {
                report.skipped += 1;
                report
                    .diagnostics
                    .push(format!("line {}: empty subject or object", i + 1));
                continue;
            }
            let relation = match self.canonical_relation(r) {
                Ok(rel) => rel.to_string(),
                Err(_) => {
                    report.skipped += 1;
                    report
                        .diagnostics
                        .push(format!("line {}: unknown relation `{r}`", i + 1));
                    continue;
                }
            };
            let triple = Triple::new(s, &relation, o, Provenance::Ingested);
            if triple.subject.is_empty() || triple.object.is_empty() {
                report.skipped += 1;
                report
                    .diagnostics
                    .push(format!("line {}: subject or object tokenizes to nothing", i + 1));
                continue;
            }
            if self.insert(triple) {
                report.added += 1;
            } else {
                report.duplicates += 1;
            }
        }
        report
    }

    pub fn ingest_file(&mut self, path: &Path) -> Result<IngestReport, KgError> {
        let text = std::fs::read_to_string(path).map_err(|e| KgError::Io(e.to_string()))?;
        Ok(self.ingest_text(&text))
    }

    /// Write the store back as a triple file (same multiset as ingested).
    pub fn export(&self, out: &mut impl Write) -> std::io::Result<()> {
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                t.subject_text(),
                t.relation,
                t.object_text()
            )?;
        }
        Ok(())
    }

    /// Instantiate the relation template with the surface forms, lowercased.
    pub fn verbalize(&self, t: &Triple) -> Result<String, KgError> {
        let pattern = self
            .templates
            .get(&t.relation)
            .ok_or_else(|| KgError::UnknownRelation(t.relation.clone()))?;
        Ok(pattern
            .replace("{s}", &t.subject_text())
            .replace("{o}", &t.object_text())
            .to_lowercase())
    }
}

// ── word statistics ─────────────────────────────────────────────────────

/// Word → frequency rank (1 = most frequent), optionally with raw counts.
#[derive(Debug, Clone, Default)]
pub struct FrequencyTable {
    rank: HashMap<String, usize>,
    count: HashMap<String, u64>,
}

impl FrequencyTable {
    /// Parse rank-ordered lines: `word` or `word \t count`.
    pub fn parse(text: &str) -> Result<Self, KgError> {
        let mut table = FrequencyTable::default();
        let mut next_rank = 1usize;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (word, count) = match line.split_once('\t') {
                Some((w, c)) => {
                    let parsed = c.trim().parse::<u64>().map_err(|_| {
                        KgError::BadFrequencyTable(format!("line {}: bad count `{c}`", i + 1))
                    })?;
                    (w.trim(), Some(parsed))
                }
                None => (line, None),
            };
            if table.rank.contains_key(word) {
                return Err(KgError::BadFrequencyTable(format!(
                    "line {}: duplicate word `{word}`",
                    i + 1
                )));
            }
            table.rank.insert(word.to_string(), next_rank);
            if let Some(c) = count {
                table.count.insert(word.to_string(), c);
            }
            next_rank += 1;
        }
        Ok(table)
    }

    pub fn from_ranked_words(words: &[&str]) -> Self {
        let rank = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), i + 1))
            .collect();
        FrequencyTable {
            rank,
            count: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }

    /// Rank of a word; unknown words are treated as maximally rare.
    pub fn rank(&self, word: &str) -> Option<usize> {
        self.rank.get(word).copied()
    }

    pub fn count(&self, word: &str) -> u64 {
        self.count.get(word).copied().unwrap_or(0)
    }

    pub fn in_top_k(&self, word: &str, k: usize) -> bool {
        self.rank(word).is_some_and(|r| r <= k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Other,
}

impl PosTag {
    fn parse(s: &str) -> Option<PosTag> {
        match s.trim() {
            "noun" => Some(PosTag::Noun),
            "verb" => Some(PosTag::Verb),
            "adjective" => Some(PosTag::Adjective),
            "adverb" => Some(PosTag::Adverb),
            "other" => Some(PosTag::Other),
            _ => None,
        }
    }
}

/// Coarse part-of-speech lookup: bundled lexicon entries first, then suffix
/// heuristics; unknown words default to noun so every query has a tag.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    tags: HashMap<String, Vec<PosTag>>,
}

impl PosLexicon {
    pub fn parse(text: &str) -> Self {
        let mut tags: HashMap<String, Vec<PosTag>> = HashMap::new();
        for line in text.lines() {
            let Some((word, list)) = line.split_once('\t') else {
                continue;
            };
            let parsed: Vec<PosTag> = list.split(',').filter_map(PosTag::parse).collect();
            if !parsed.is_empty() {
                tags.insert(word.trim().to_string(), parsed);
            }
        }
        PosLexicon { tags }
    }

    pub fn bundled() -> Self {
        Self::parse(default_pos_lexicon())
    }

    pub fn tags(&self, word: &str) -> Vec<PosTag> {
        if let Some(t) = self.tags.get(word) {
            return t.clone();
        }
        let suffix_tag = if word.ends_with("ly") {
            Some(PosTag::Adverb)
        } else if word.ends_with("ing") || word.ends_with("ed") {
            Some(PosTag::Verb)
        } else if ["ous", "ful", "ive", "able", "less"]
            .iter()
            .any(|s| word.ends_with(s))
        {
            Some(PosTag::Adjective)
        } else {
            None
        };
        vec![suffix_tag.unwrap_or(PosTag::Noun)]
    }
}

/// Stopword set used when extracting entities.
#[derive(Debug, Clone, Default)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn parse(text: &str) -> Self {
        Stopwords(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn bundled() -> Self {
        Self::parse(default_stopwords())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }
}

/// A content word pulled from a sample, with its POS tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub word: String,
    pub tags: Vec<PosTag>,
}

/// Content words (nouns, verbs, adjectives) from the given texts, stopwords
/// removed, deduplicated in first-occurrence order.
pub fn extract_entities(texts: &[&str], lexicon: &PosLexicon, stop: &Stopwords) -> Vec<Entity> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for text in texts {
        for tok in tokenize(text) {
            if !tok.chars().all(char::is_alphanumeric) || tok.chars().all(char::is_numeric) {
                continue;
            }
            if stop.contains(&tok) || seen.contains(&tok) {
                continue;
            }
            let tags = lexicon.tags(&tok);
            let content = tags
                .iter()
                .any(|t| matches!(t, PosTag::Noun | PosTag::Verb | PosTag::Adjective));
            if content {
                seen.insert(tok.clone());
                out.push(Entity { word: tok, tags });
            }
        }
    }
    out
}

// ── filtering ───────────────────────────────────────────────────────────

/// Hyper-parameters of the four-rule filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    /// Rule (iii): subjects inside the top-K frequency ranks are dropped.
    pub top_k: usize,
    /// Rule (ii): frequency slack K^o.
    pub freq_slack: usize,
    /// Rule (iv): object budget K^r per (subject, relation).
    pub max_objects: usize,
    /// Compare rule (ii) by raw counts instead of ranks.
    pub count_mode: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            top_k: 500,
            freq_slack: 100,
            max_objects: 2,
            count_mode: false,
        }
    }
}

/// Apply the four subject rules. A triple survives only if its subject head
/// (i) POS-matches a sample entity, (ii) is no more frequent than the object
/// allows, (iii) is not a top-K word, and (iv) fits the per-(subject,
/// relation) object budget in candidate order.
pub fn filter(
    candidates: &[Triple],
    entities: &[Entity],
    freq: &FrequencyTable,
    lexicon: &PosLexicon,
    params: &FilterParams,
) -> Vec<Triple> {
    let entity_tags: HashMap<&str, &Vec<PosTag>> =
        entities.iter().map(|e| (e.word.as_str(), &e.tags)).collect();
    let mut kept_objects: HashMap<(String, String), Vec<String>> = HashMap::new();
    let mut out = Vec::new();
    for cand in candidates {
        let head = cand.subject_head();
        // (i) POS tag of the subject head matches the tag of the entity it
        // grounds to; subjects that ground to no entity fail
        let Some(tags) = entity_tags.get(head) else {
            continue;
        };
        let head_tags = lexicon.tags(head);
        if !head_tags.iter().any(|t| tags.contains(t)) {
            continue;
        }
        // (ii) subject frequency below object frequency plus the slack
        let pass_freq = if params.count_mode {
            freq.count(head) < freq.count(cand.object_head()) + params.freq_slack as u64
        } else {
            // rank form: at most `freq_slack` ranks more frequent than the
            // object (unknown words rank as infinitely rare and pass)
            match (freq.rank(head), freq.rank(cand.object_head())) {
                (Some(s), Some(o)) => s + params.freq_slack > o,
                _ => true,
            }
        };
        if !pass_freq {
            continue;
        }
        // (iii) subject not among the top-K frequent words
        if freq.in_top_k(head, params.top_k) {
            continue;
        }
        // (iv) first K^r distinct objects per (subject, relation)
        let key = (cand.subject_text(), cand.relation.clone());
        let kept = kept_objects.entry(key).or_default();
        let obj = cand.object_text();
        if !kept.contains(&obj) {
            if kept.len() >= params.max_objects {
                continue;
            }
            kept.push(obj);
        }
        out.push(cand.clone());
    }
    out
}

/// `(N/T sro, N/T o)`: fractions of generated triples / objects absent from
/// the training store.
pub fn novelty_metrics(
    generated: &[Triple],
    training: &KnowledgeStore,
) -> Result<(f64, f64), KgError> {
    if generated.is_empty() {
        return Err(KgError::EmptyGeneratedSet);
    }
    let n = generated.len() as f64;
    let novel_sro = generated.iter().filter(|t| !training.contains(t)).count() as f64;
    let novel_o = generated
        .iter()
        .filter(|t| !training.has_object(&t.object_text()))
        .count() as f64;
    Ok((novel_sro / n, novel_o / n))
}

// ── completion model ────────────────────────────────────────────────────

/// Triple-completion language model: the textual generator's causal model
/// retrained on `[subject [SEP] relation [SEP] object]` sequences. Relation
/// labels enter the vocabulary as single lowercased tokens.
pub struct CompletionModel {
    pub generator: TextualGenerator,
}

impl CompletionModel {
    /// Build vocabulary from the store's triples and train the model.
    pub fn train(
        store: &KnowledgeStore,
        mut cfg: EncoderConfig,
        opts: &TrainOpts,
    ) -> Result<Self, KgError> {
        let mut texts: Vec<String> = Vec::with_capacity(store.len());
        for t in store.triples() {
            texts.push(format!(
                "{} {} {}",
                t.subject_text(),
                t.relation.to_lowercase(),
                t.object_text()
            ));
        }
        let mut vocab = Vocabulary::build(texts.iter().map(String::as_str), cfg.vocab_size);
        for rel in store.relations() {
            vocab.absorb(&rel.to_lowercase());
        }
        cfg.vocab_size = vocab.len();
        let mut generator = TextualGenerator::new(
            vocab,
            cfg,
            LmTrainConfig {
                max_tokens: 8,
                ..LmTrainConfig::default()
            },
        );
        let corpus: Vec<Vec<u32>> = store
            .triples()
            .iter()
            .map(|t| Self::sequence(&generator.vocab, t))
            .collect();
        generator
            .pretrain(&corpus, opts)
            .map_err(|e| KgError::Io(e.to_string()))?;
        Ok(CompletionModel { generator })
    }

    fn sequence(vocab: &Vocabulary, t: &Triple) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in &t.subject {
            ids.push(vocab.id(w));
        }
        ids.push(SEP);
        ids.push(vocab.id(&t.relation.to_lowercase()));
        ids.push(SEP);
        for w in &t.object {
            ids.push(vocab.id(w));
        }
        ids
    }

    /// Decode object candidates for `subject [SEP] relation [SEP]`. Greedy
    /// decoding yields one deterministic candidate; top-k sampling yields up
    /// to `n_candidates` distinct ones.
    pub fn complete(
        &self,
        store: &KnowledgeStore,
        subject: &str,
        relation: &str,
        n_candidates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Triple>, KgError> {
        let relation = store.canonical_relation(relation)?.to_string();
        let subj_ids: Vec<u32> = tokenize(subject)
            .iter()
            .map(|w| self.generator.vocab.id(w))
            .collect();
        let rel_ids = vec![self.generator.vocab.id(&relation.to_lowercase())];
        let prompt_p = subj_ids;
        let runs = match self.generator.train_cfg.decode {
            DecodeMode::Greedy => 1,
            DecodeMode::TopK(_) => n_candidates.max(1),
        };
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for _ in 0..runs {
            let ids = self
                .generator
                .generate_evidence(&prompt_p, &rel_ids, rng);
            let words: Vec<String> = ids
                .iter()
                .filter(|&&i| i != EOS)
                .map(|&i| self.generator.vocab.token(i).to_string())
                .filter(|w| w != "[PAD]" && w != "[SEP]" && w != "[UNK]")
                .collect();
            if words.is_empty() {
                continue;
            }
            let text = words.join(" ");
            if seen.insert(text.clone()) {
                out.push(Triple {
                    subject: tokenize(subject),
                    relation: relation.clone(),
                    object: words,
                    provenance: Provenance::Generated,
                });
            }
        }
        Ok(out)
    }
}

/// Per-sample factual-evidence settings.
#[derive(Debug, Clone)]
pub struct FactualGenConfig {
    pub filter: FilterParams,
    /// Verbalized sentences injected per sample.
    pub max_sentences: usize,
    /// Relations the completion model is queried with per entity.
    pub completion_relations: Vec<String>,
    pub candidates_per_entity: usize,
}

impl Default for FactualGenConfig {
    fn default() -> Self {
        FactualGenConfig {
            filter: FilterParams::default(),
            max_sentences: 3,
            completion_relations: vec![
                "IsA".into(),
                "CapableOf".into(),
                "UsedFor".into(),
                "HasProperty".into(),
                "AtLocation".into(),
                "Causes".into(),
                "PartOf".into(),
            ],
            candidates_per_entity: 1,
        }
    }
}

/// End-to-end factual evidence for one sample's texts: extract entities,
/// gather stored + completed triples, filter, cap, and verbalize.
#[allow(clippy::too_many_arguments)]
pub fn factual_evidence(
    texts: &[&str],
    store: &KnowledgeStore,
    completion: Option<&CompletionModel>,
    freq: &FrequencyTable,
    lexicon: &PosLexicon,
    stop: &Stopwords,
    cfg: &FactualGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, KgError> {
    let entities = extract_entities(texts, lexicon, stop);
    let mut candidates: Vec<Triple> = Vec::new();
    for entity in &entities {
        for t in store.by_subject_head(&entity.word) {
            candidates.push(t.clone());
        }
        if let Some(model) = completion {
            for rel in &cfg.completion_relations {
                let generated = model.complete(
                    store,
                    &entity.word,
                    rel,
                    cfg.candidates_per_entity,
                    rng,
                )?;
                candidates.extend(generated);
            }
        }
    }
    let kept = filter(&candidates, &entities, freq, lexicon, &cfg.filter);
    kept.iter()
        .take(cfg.max_sentences)
        .map(|t| store.verbalize(t))
        .collect()
}
