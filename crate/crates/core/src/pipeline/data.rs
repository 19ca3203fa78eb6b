//! Samples, the line-delimited dataset and evidence formats, and evidence
//! attachment.

use super::{PipelineError, Result};
use crate::encoder::{Vocabulary, SEP};
use crate::factual::{
    factual_evidence, CompletionModel, FactualGenConfig, FrequencyTable, KnowledgeStore,
    PosLexicon, Stopwords,
};
use crate::textual::{GeneratorSample, TextualGenerator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceSource {
    Textual,
    Factual,
}

/// One generated evidence sentence attached to a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub id: String,
    pub source: EvidenceSource,
    pub text: String,
}

/// Which generators feed the evidence segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvidenceSources {
    None,
    Textual,
    Factual,
    #[default]
    Both,
}

impl EvidenceSources {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EvidenceSources::None),
            "textual" => Ok(EvidenceSources::Textual),
            "factual" => Ok(EvidenceSources::Factual),
            "both" => Ok(EvidenceSources::Both),
            other => Err(PipelineError::Config(format!(
                "evidence must be none|textual|factual|both, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvidenceSources::None => "none",
            EvidenceSources::Textual => "textual",
            EvidenceSources::Factual => "factual",
            EvidenceSources::Both => "both",
        }
    }

    fn admits(&self, source: EvidenceSource) -> bool {
        matches!(
            (self, source),
            (EvidenceSources::Both, _)
                | (EvidenceSources::Textual, EvidenceSource::Textual)
                | (EvidenceSources::Factual, EvidenceSource::Factual)
        )
    }
}

/// One multi-choice item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub paragraph: String,
    pub question: String,
    pub options: Vec<String>,
    /// Absent on unlabeled test splits.
    pub label: Option<usize>,
    pub evidence: Vec<EvidenceRecord>,
}

impl Sample {
    /// One-hot label vector, when labeled.
    pub fn one_hot(&self) -> Option<Vec<f64>> {
        self.label.map(|l| {
            let mut y = vec![0.0; self.options.len()];
            y[l] = 1.0;
            y
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    context: String,
    question: String,
    answer0: String,
    answer1: String,
    answer2: String,
    answer3: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

/// Parse line-delimited JSON records with fields `id`, `context`,
/// `question`, `answer0..answer3`, and optional `label`. Malformed records
/// are rejected with their line number; ids must be unique.
pub fn parse_dataset(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::Dataset {
                line: line_no,
                message: e.to_string(),
            })?;
        let options = vec![raw.answer0, raw.answer1, raw.answer2, raw.answer3];
        if raw.context.trim().is_empty()
            || raw.question.trim().is_empty()
            || options.iter().any(|o| o.trim().is_empty())
        {
            return Err(PipelineError::Dataset {
                line: line_no,
                message: "context, question, and every answer must be nonempty".into(),
            });
        }
        if let Some(l) = raw.label {
            if l >= options.len() {
                return Err(PipelineError::Dataset {
                    line: line_no,
                    message: format!("label {l} out of range for {} options", options.len()),
                });
            }
        }
        if !seen.insert(raw.id.clone()) {
            return Err(PipelineError::Dataset {
                line: line_no,
                message: format!("duplicate id `{}`", raw.id),
            });
        }
        out.push(Sample {
            id: raw.id,
            paragraph: raw.context,
            question: raw.question,
            options,
            label: raw.label,
            evidence: Vec::new(),
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn save_dataset(samples: &[Sample], out: &mut impl Write) -> Result<()> {
    for s in samples {
        if s.options.len() != 4 {
            return Err(PipelineError::Dataset {
                line: 0,
                message: format!(
                    "record format carries exactly 4 answers, sample `{}` has {}",
                    s.id,
                    s.options.len()
                ),
            });
        }
        let raw = RawRecord {
            id: s.id.clone(),
            context: s.paragraph.clone(),
            question: s.question.clone(),
            answer0: s.options[0].clone(),
            answer1: s.options[1].clone(),
            answer2: s.options[2].clone(),
            answer3: s.options[3].clone(),
            label: s.label,
        };
        serde_json::to_writer(&mut *out, &raw)
            .map_err(|e| PipelineError::Evidence(e.to_string()))?;
        writeln!(out)?;
    }
    Ok(())
}

/// Evidence files are line-delimited JSON `{id, source, text}` records.
pub fn save_evidence(records: &[EvidenceRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(|e| PipelineError::Evidence(e.to_string()))?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_evidence(path: &Path) -> Result<Vec<EvidenceRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvidenceRecord = serde_json::from_str(line)
            .map_err(|e| PipelineError::Evidence(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Replace every sample's evidence with the admitted records from `records`
/// (textual before factual). Attaching twice replaces rather than appends.
/// Records for ids outside `samples` are ignored so one evidence file can
/// serve several splits.
pub fn attach_evidence_records(
    samples: &mut [Sample],
    records: &[EvidenceRecord],
    sources: EvidenceSources,
) -> Result<()> {
    for s in samples.iter_mut() {
        let mut picked: Vec<EvidenceRecord> = Vec::new();
        for source in [EvidenceSource::Textual, EvidenceSource::Factual] {
            if !sources.admits(source) {
                continue;
            }
            picked.extend(
                records
                    .iter()
                    .filter(|r| r.id == s.id && r.source == source)
                    .cloned(),
            );
        }
        s.evidence = picked;
    }
    Ok(())
}

/// Token ids of a sample's evidence segment: textual texts first, then
/// factual, with a `[SEP]` between the two source groups.
pub fn evidence_ids(sample: &Sample, vocab: &Vocabulary) -> Vec<u32> {
    let textual: Vec<&EvidenceRecord> = sample
        .evidence
        .iter()
        .filter(|r| r.source == EvidenceSource::Textual)
        .collect();
    let factual: Vec<&EvidenceRecord> = sample
        .evidence
        .iter()
        .filter(|r| r.source == EvidenceSource::Factual)
        .collect();
    let mut ids = Vec::new();
    for (gi, group) in [textual, factual].iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        if gi == 1 && !ids.is_empty() {
            ids.push(SEP);
        }
        for r in group {
            ids.extend(vocab.encode(&r.text));
        }
    }
    ids
}

/// A labeled sample in generator form.
pub fn to_generator_sample(sample: &Sample, vocab: &Vocabulary) -> Option<GeneratorSample> {
    let label = sample.label?;
    Some(GeneratorSample {
        p: vocab.encode(&sample.paragraph),
        q: vocab.encode(&sample.question),
        options: sample.options.iter().map(|o| vocab.encode(o)).collect(),
        label,
    })
}

/// Run the textual generator over every sample.
pub fn generate_textual_records(
    samples: &[Sample],
    generator: &TextualGenerator,
    seed: u64,
) -> Vec<EvidenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let p = generator.vocab.encode(&s.paragraph);
            let q = generator.vocab.encode(&s.question);
            let ids = generator.generate_evidence(&p, &q, &mut rng);
            EvidenceRecord {
                id: s.id.clone(),
                source: EvidenceSource::Textual,
                text: generator.vocab.decode(&ids),
            }
        })
        .collect()
}

/// Run the factual pipeline over every sample; each sample's capped
/// verbalized sentences are joined into one record.
#[allow(clippy::too_many_arguments)]
pub fn generate_factual_records(
    samples: &[Sample],
    store: &KnowledgeStore,
    completion: Option<&CompletionModel>,
    freq: &FrequencyTable,
    lexicon: &PosLexicon,
    stop: &Stopwords,
    cfg: &FactualGenConfig,
    seed: u64,
) -> Result<Vec<EvidenceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in samples {
        let mut texts: Vec<&str> = vec![&s.paragraph, &s.question];
        texts.extend(s.options.iter().map(String::as_str));
        let sentences =
            factual_evidence(&texts, store, completion, freq, lexicon, stop, cfg, &mut rng)?;
        if !sentences.is_empty() {
            out.push(EvidenceRecord {
                id: s.id.clone(),
                source: EvidenceSource::Factual,
                text: sentences.join(" . "),
            });
        }
    }
    Ok(out)
}

/// Generate and attach evidence from the enabled sources in one call.
#[allow(clippy::too_many_arguments)]
pub fn attach_generated_evidence(
    samples: &mut [Sample],
    sources: EvidenceSources,
    textual: Option<&TextualGenerator>,
    factual: Option<(
        &KnowledgeStore,
        Option<&CompletionModel>,
        &FrequencyTable,
        &PosLexicon,
        &Stopwords,
        &FactualGenConfig,
    )>,
    seed: u64,
) -> Result<()> {
    let mut records = Vec::new();
    if matches!(sources, EvidenceSources::Textual | EvidenceSources::Both) {
        let generator = textual.ok_or_else(|| {
            PipelineError::Config("textual evidence requested but no generator given".into())
        })?;
        records.extend(generate_textual_records(samples, generator, seed));
    }
    if matches!(sources, EvidenceSources::Factual | EvidenceSources::Both) {
        let (store, completion, freq, lexicon, stop, cfg) = factual.ok_or_else(|| {
            PipelineError::Config("factual evidence requested but no knowledge store given".into())
        })?;
        records.extend(generate_factual_records(
            samples, store, completion, freq, lexicon, stop, cfg, seed,
        )?);
    }
    attach_evidence_records(samples, &records, sources)
}
