//! Tokenization, input packing, and a small trainable contextual encoder
//! producing per-segment features for paragraph, question, option, and
//! evidence.

mod transformer;

pub use transformer::{causal_encode, encode, encode_segments, init_params, AttnMode, EncoderOutput};

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const EOS: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[EOS]"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncoderError {
    #[error("packed length {got} exceeds the {budget}-token budget even after truncation")]
    OverLength { got: usize, budget: usize },
    #[error("segment target {target} below actual width {got} for {segment}")]
    TargetTooSmall {
        segment: &'static str,
        target: usize,
        got: usize,
    },
    #[error("vocabulary file is malformed: {0}")]
    BadVocabFile(String),
    #[error("io: {0}")]
    Io(String),
}

/// Lowercased word/punctuation tokenization: alphanumeric runs become word
/// tokens, every other non-whitespace character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Dense token-to-id mapping with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Build from an iterator of texts: tokens ranked by frequency (ties by
    /// token order) up to `cap` total entries including the reserved ids.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::with_reserved();
        for (tok, _) in ranked {
            if vocab.len() >= cap {
                break;
            }
            vocab.push(tok);
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.token_to_id.contains_key(&token) {
            self.token_to_id
                .insert(token.clone(), self.id_to_token.len() as u32);
            self.id_to_token.push(token);
        }
    }

    /// Extend with every token of `text` that is not yet present.
    pub fn absorb(&mut self, text: &str) {
        for tok in tokenize(text) {
            self.push(tok);
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Tokenize and map to ids; unseen words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut f = std::fs::File::create(path).map_err(|e| EncoderError::Io(e.to_string()))?;
        for tok in &self.id_to_token {
            writeln!(f, "{tok}").map_err(|e| EncoderError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// One token per line, line number = id, reserved tokens first.
    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let f = std::fs::File::open(path).map_err(|e| EncoderError::Io(e.to_string()))?;
        let mut id_to_token = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| EncoderError::Io(e.to_string()))?;
            id_to_token.push(line);
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*want) {
                return Err(EncoderError::BadVocabFile(format!(
                    "line {i} must be the reserved token {want}"
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Feature width d.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.d % self.heads != 0 {
            return Err(format!(
                "feature width {} must be a positive multiple of {} heads",
                self.d, self.heads
            ));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 256,
            vocab_size: 20_000,
            seed: 0,
        }
    }
}

/// Column ranges of each segment inside a packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentBounds {
    pub p: (usize, usize),
    pub q: (usize, usize),
    pub o: (usize, usize),
    pub e: (usize, usize),
}

impl SegmentBounds {
    pub fn t(&self) -> usize {
        self.p.1 - self.p.0
    }
    pub fn n(&self) -> usize {
        self.q.1 - self.q.0
    }
    pub fn h(&self) -> usize {
        self.o.1 - self.o.0
    }
    pub fn k(&self) -> usize {
        self.e.1 - self.e.0
    }
}

/// Packed reader input `[CLS] P [SEP] Q [SEP] O [SEP] E` with recorded
/// segment boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<u32>,
    pub bounds: SegmentBounds,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-segment width targets; segments are padded in place up to these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentTargets {
    pub t: usize,
    pub n: usize,
    pub h: usize,
    pub k: usize,
}

/// Pack one option's input. Over-budget inputs are truncated: paragraph from
/// the front first, then evidence from the back; question and option are
/// never cut. Segment targets, when given, pad each segment in place with
/// `[PAD]` so a whole batch shares one geometry.
pub fn pack_input(
    p: &[u32],
    q: &[u32],
    o: &[u32],
    e: &[u32],
    budget: usize,
    targets: Option<SegmentTargets>,
) -> Result<PackedInput, EncoderError> {
    let mut p = p.to_vec();
    let mut e = e.to_vec();
    let overhead = 4; // [CLS] and three [SEP]
    let need = |p: &[u32], e: &[u32]| overhead + p.len() + q.len() + o.len() + e.len();
    if need(&p, &e) > budget {
        let over = need(&p, &e) - budget;
        let cut_p = over.min(p.len().saturating_sub(1));
        p.drain(..cut_p);
        if need(&p, &e) > budget {
            let over = need(&p, &e) - budget;
            let cut_e = over.min(e.len());
            e.truncate(e.len() - cut_e);
        }
        if need(&p, &e) > budget {
            return Err(EncoderError::OverLength {
                got: need(&p, &e),
                budget,
            });
        }
    }
    let (tp, tq, to, te) = match targets {
        Some(SegmentTargets { t, n, h, k }) => {
            for (name, target, got) in [
                ("paragraph", t, p.len()),
                ("question", n, q.len()),
                ("option", h, o.len()),
                ("evidence", k, e.len()),
            ] {
                if target < got {
                    return Err(EncoderError::TargetTooSmall {
                        segment: name,
                        target,
                        got,
                    });
                }
            }
            (t, n, h, k)
        }
        None => (p.len(), q.len(), o.len(), e.len()),
    };
    if overhead + tp + tq + to + te > budget {
        return Err(EncoderError::OverLength {
            got: overhead + tp + tq + to + te,
            budget,
        });
    }
    let mut ids = Vec::with_capacity(overhead + tp + tq + to + te);
    let seg = |ids: &mut Vec<u32>, body: &[u32], width: usize| {
        let start = ids.len();
        ids.extend_from_slice(body);
        ids.resize(start + width, PAD);
        (start, start + width)
    };
    ids.push(CLS);
    let pb = seg(&mut ids, &p, tp);
    ids.push(SEP);
    let qb = seg(&mut ids, q, tq);
    ids.push(SEP);
    let ob = seg(&mut ids, o, to);
    ids.push(SEP);
    let eb = seg(&mut ids, &e, te);
    Ok(PackedInput {
        ids,
        bounds: SegmentBounds {
            p: pb,
            q: qb,
            o: ob,
            e: eb,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_words_and_punctuation() {
        assert_eq!(tokenize("He fell."), vec!["he", "fell", "."]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("  \t\n "), Vec::<String>::new());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = Vocabulary::build(["the cat sat"].into_iter(), 100);
        let ids = vocab.encode("the dog sat");
        assert_eq!(ids[0], vocab.id("the"));
        assert_eq!(ids[1], UNK);
        assert_eq!(ids[2], vocab.id("sat"));
    }

    #[test]
    fn vocab_round_trips_in_vocab_tokens() {
        let vocab = Vocabulary::build(["alpha beta gamma"].into_iter(), 100);
        for tok in ["alpha", "beta", "gamma"] {
            assert_eq!(vocab.token(vocab.id(tok)), tok);
        }
    }

    #[test]
    fn vocab_reserved_ids_are_fixed() {
        let vocab = Vocabulary::build(["x"].into_iter(), 100);
        assert_eq!(vocab.id("[PAD]"), PAD);
        assert_eq!(vocab.id("[CLS]"), CLS);
        assert_eq!(vocab.id("[SEP]"), SEP);
        assert_eq!(vocab.id("[UNK]"), UNK);
        assert_eq!(vocab.id("[EOS]"), EOS);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocabulary::build(["one two three two"].into_iter(), 100);
        vocab.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.len(), vocab.len());
        assert_eq!(back.id("two"), vocab.id("two"));
    }

    #[test]
    fn vocab_cap_is_respected() {
        let vocab = Vocabulary::build(["a b c d e f g h"].into_iter(), 7);
        assert_eq!(vocab.len(), 7);
    }

    #[test]
    fn pack_length_is_segments_plus_overhead() {
        let packed = pack_input(&[10, 11], &[12], &[13], &[14], 256, None).unwrap();
        // t + n + h + k + [CLS] + 3·[SEP]
        assert_eq!(packed.len(), 2 + 1 + 1 + 1 + 4);
        assert_eq!(packed.ids[0], CLS);
        assert_eq!(packed.bounds.t(), 2);
        assert_eq!(packed.bounds.n(), 1);
        assert_eq!(packed.bounds.h(), 1);
        assert_eq!(packed.bounds.k(), 1);
    }

    #[test]
    fn empty_evidence_still_emits_trailing_sep() {
        let packed = pack_input(&[10], &[11], &[12], &[], 256, None).unwrap();
        assert_eq!(*packed.ids.last().unwrap(), SEP);
        assert_eq!(packed.bounds.k(), 0);
    }

    #[test]
    fn over_budget_paragraph_truncates_from_front() {
        let p: Vec<u32> = (10..30).collect();
        let packed = pack_input(&p, &[40], &[41], &[], 10, None).unwrap();
        assert_eq!(packed.len(), 10);
        // 10 - overhead(4) - q(1) - o(1) = 4 paragraph tokens, the newest ones
        assert_eq!(packed.bounds.t(), 4);
        assert_eq!(&packed.ids[1..5], &[26, 27, 28, 29]);
    }

    #[test]
    fn evidence_truncates_from_back_after_paragraph() {
        let p: Vec<u32> = (10..20).collect();
        let e: Vec<u32> = (50..60).collect();
        let packed = pack_input(&p, &[40], &[41], &e, 12, None).unwrap();
        assert_eq!(packed.len(), 12);
        assert_eq!(packed.bounds.t(), 1);
        // e cut from the back: whatever remains is a prefix of e
        let k = packed.bounds.k();
        let (es, ee) = packed.bounds.e;
        assert_eq!(&packed.ids[es..ee], &e[..k]);
    }

    #[test]
    fn impossible_budget_rejected() {
        let err = pack_input(&[1], &[2, 3, 4], &[5, 6, 7], &[], 8, None).unwrap_err();
        assert!(matches!(err, EncoderError::OverLength { .. }));
    }

    #[test]
    fn segment_targets_pad_in_place() {
        let packed = pack_input(
            &[10, 11],
            &[12],
            &[13],
            &[],
            256,
            Some(SegmentTargets {
                t: 4,
                n: 4,
                h: 4,
                k: 4,
            }),
        )
        .unwrap();
        assert_eq!(packed.len(), 20);
        assert_eq!(packed.bounds.t(), 4);
        assert_eq!(packed.ids[1..5], [10, 11, PAD, PAD]);
        assert_eq!(packed.ids[5], SEP);
    }
}
