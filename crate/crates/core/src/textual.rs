//! Textual evidence generator: a small causal language model trained with a
//! joint generation + classification objective, decoded greedily (or top-k)
//! to emit one evidence sentence per paragraph/question pair. Also houses
//! the BLEU / self-BLEU / perplexity metrics used to judge generations.

use crate::encoder::{self, EncoderConfig, Vocabulary, EOS, PAD, SEP};
use crate::numerics::{
    Binder, Optimizer, OptimizerConfig, ParamStore, Result, Tape, Tensor, TensorError, VarId,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    TopK(usize),
}

/// Training/decoding knobs for the generator.
#[derive(Debug, Clone)]
pub struct LmTrainConfig {
    /// Weight of the classification loss inside the joint objective.
    pub lambda: f64,
    /// Decode budget per evidence sentence.
    pub max_tokens: usize,
    pub decode: DecodeMode,
    /// Pool the classifier feature from the final non-pad position (a causal
    /// model's first position has seen nothing) or literally the first token.
    pub pool_first_token: bool,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            lambda: 0.5,
            max_tokens: 40,
            decode: DecodeMode::Greedy,
            pool_first_token: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// One multi-choice item in generator form: token ids only.
#[derive(Debug, Clone)]
pub struct GeneratorSample {
    pub p: Vec<u32>,
    pub q: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub label: usize,
}

/// Causal language model with a vocabulary head and an option classifier.
pub struct TextualGenerator {
    pub cfg: EncoderConfig,
    pub train_cfg: LmTrainConfig,
    pub params: ParamStore<f64>,
    pub vocab: Vocabulary,
}

const PREFIX: &str = "lm";

impl TextualGenerator {
    pub fn new(vocab: Vocabulary, mut cfg: EncoderConfig, train_cfg: LmTrainConfig) -> Self {
        cfg.vocab_size = vocab.len();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        encoder::init_params(&mut params, PREFIX, &cfg, &mut rng);
        let d = cfg.d;
        let v = cfg.vocab_size;
        let limit = (6.0 / (v + d) as f64).sqrt();
        let head = (0..v * d)
            .map(|_| rng.gen_range(-limit..limit))
            .collect::<Vec<f64>>();
        params.insert("lm.head", Tensor::from_vec(vec![v, d], head).unwrap());
        let w_y = (0..d)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect::<Vec<f64>>();
        params.insert("cls.w_y", Tensor::from_vec(vec![1, d], w_y).unwrap());
        TextualGenerator {
            cfg,
            train_cfg,
            params,
            vocab,
        }
    }

    /// `[P [SEP] Q [SEP] A [EOS]]`, truncating the paragraph from the front
    /// when over the model's sequence budget.
    pub fn lm_sequence(&self, p: &[u32], q: &[u32], a: &[u32]) -> Vec<u32> {
        let budget = self.cfg.max_seq_len;
        let fixed = q.len() + a.len() + 3; // two separators and [EOS]
        let keep = budget.saturating_sub(fixed).min(p.len());
        let mut seq = Vec::with_capacity(fixed + keep);
        seq.extend_from_slice(&p[p.len() - keep..]);
        seq.push(SEP);
        seq.extend_from_slice(q);
        seq.push(SEP);
        seq.extend_from_slice(a);
        seq.push(EOS);
        seq
    }

    fn logits_on(&self, tape: &mut Tape<f64>, binder: &mut Binder, ids: &[u32]) -> Result<VarId> {
        let feats = encoder::causal_encode(tape, binder, &self.params, PREFIX, &self.cfg, ids)?;
        let head = binder.get(tape, &self.params, "lm.head")?;
        tape.matmul(head, feats)
    }

    /// Mean negative log-likelihood of each next token given its prefix;
    /// pad targets are excluded. Requires at least two tokens.
    pub fn lm_loss_on(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        ids: &[u32],
    ) -> Result<VarId> {
        if ids.len() < 2 {
            return Err(TensorError::NonFinite {
                context: "language-model loss over a sequence shorter than 2".into(),
            });
        }
        let logits = self.logits_on(tape, binder, ids)?;
        let t = ids.len();
        let predictors = tape.slice_cols(logits, 0, t - 1)?;
        let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
        let active: Vec<bool> = ids[1..].iter().map(|&i| i != PAD).collect();
        if active.iter().all(|a| !a) {
            return Err(TensorError::NonFinite {
                context: "language-model loss over an all-pad continuation".into(),
            });
        }
        tape.cross_entropy_cols(predictors, &targets, &active)
    }

    fn pooled_position(&self, ids: &[u32]) -> usize {
        if self.train_cfg.pool_first_token {
            0
        } else {
            ids.iter().rposition(|&i| i != PAD).unwrap_or(0)
        }
    }

    /// Option score logits (1×m) from the pooled classifier feature of each
    /// option packing `[P [SEP] Q [SEP] O_j]`.
    pub fn class_logits_on(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        sample: &GeneratorSample,
    ) -> Result<VarId> {
        let w_y = binder.get(tape, &self.params, "cls.w_y")?;
        let mut logits = Vec::with_capacity(sample.options.len());
        for opt in &sample.options {
            let mut ids = self.lm_sequence(&sample.p, &sample.q, opt);
            ids.pop(); // the classifier packing carries no [EOS]
            let feats =
                encoder::causal_encode(tape, binder, &self.params, PREFIX, &self.cfg, &ids)?;
            let pos = self.pooled_position(&ids);
            let pooled = tape.slice_cols(feats, pos, pos + 1)?;
            logits.push(tape.matmul(w_y, pooled)?);
        }
        tape.concat_cols(&logits)
    }

    /// Cross-entropy of the true option under a softmax over option scores.
    pub fn class_loss_on(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        sample: &GeneratorSample,
    ) -> Result<VarId> {
        let logits = self.class_logits_on(tape, binder, sample)?;
        class_loss_from_logits(tape, logits, sample.label)
    }

    /// Joint objective: `lm_loss + lambda · class_loss`.
    pub fn total_loss_on(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        sample: &GeneratorSample,
    ) -> Result<VarId> {
        let answer = &sample.options[sample.label];
        let seq = self.lm_sequence(&sample.p, &sample.q, answer);
        let gen = self.lm_loss_on(tape, binder, &seq)?;
        if self.train_cfg.lambda == 0.0 {
            return Ok(gen);
        }
        let class = self.class_loss_on(tape, binder, sample)?;
        let weighted = tape.scale(class, self.train_cfg.lambda);
        tape.add(gen, weighted)
    }

    /// Language-model pretraining over raw token sequences; returns the
    /// per-epoch mean loss curve.
    pub fn pretrain(&mut self, corpus: &[Vec<u32>], opts: &TrainOpts) -> Result<Vec<f64>> {
        self.train_loop(corpus.len(), opts, |gen, tape, binder, idx| {
            let mut seq = corpus[idx].clone();
            seq.push(EOS);
            gen.lm_loss_on(tape, binder, &seq)
        })
    }

    /// Joint fine-tuning on multi-choice samples.
    pub fn finetune(&mut self, samples: &[GeneratorSample], opts: &TrainOpts) -> Result<Vec<f64>> {
        self.train_loop(samples.len(), opts, |gen, tape, binder, idx| {
            gen.total_loss_on(tape, binder, &samples[idx])
        })
    }

    fn train_loop(
        &mut self,
        n: usize,
        opts: &TrainOpts,
        loss_of: impl Fn(&Self, &mut Tape<f64>, &mut Binder, usize) -> Result<VarId>,
    ) -> Result<Vec<f64>> {
        let steps_per_epoch = n.div_ceil(opts.batch_size);
        let mut optimizer = Optimizer::new(OptimizerConfig {
            total_steps: steps_per_epoch * opts.epochs,
            ..opts.optimizer.clone()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut curve = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(opts.batch_size) {
                self.params.zero_grads();
                let inv = 1.0 / batch.len() as f64;
                for &idx in batch {
                    let mut tape = Tape::new();
                    let mut binder = Binder::new(true);
                    let loss = loss_of(self, &mut tape, &mut binder, idx)?;
                    epoch_loss += tape.value(loss).item();
                    let scaled = tape.scale(loss, inv);
                    tape.backward(scaled)?;
                    binder.harvest(&tape, &mut self.params)?;
                }
                optimizer.step(&mut self.params)?;
            }
            curve.push(epoch_loss / n as f64);
        }
        Ok(curve)
    }

    /// Autoregressive decode from `[P [SEP] Q [SEP]]` until `[EOS]`, a
    /// period, or the token budget. Greedy decoding is deterministic.
    pub fn generate_evidence(&self, p: &[u32], q: &[u32], rng: &mut ChaCha8Rng) -> Vec<u32> {
        let budget = self.cfg.max_seq_len;
        let fixed = q.len() + 2;
        // leave decode room, but never let the reservation evict more than
        // half the window
        let reserve = self.train_cfg.max_tokens.min(budget / 2);
        let keep = budget.saturating_sub(fixed + reserve).min(p.len());
        let mut seq: Vec<u32> = Vec::new();
        seq.extend_from_slice(&p[p.len() - keep..]);
        seq.push(SEP);
        seq.extend_from_slice(q);
        seq.push(SEP);
        let period = self.vocab.id(".");
        let mut out = Vec::new();
        for _ in 0..self.train_cfg.max_tokens {
            if seq.len() >= self.cfg.max_seq_len {
                break;
            }
            let mut tape = Tape::new();
            let mut binder = Binder::new(false);
            let logits = match self.logits_on(&mut tape, &mut binder, &seq) {
                Ok(l) => l,
                Err(_) => break,
            };
            let t = seq.len();
            let v = self.cfg.vocab_size;
            let col: Vec<f64> = (0..v).map(|r| tape.value(logits).at(r, t - 1)).collect();
            let next = match self.train_cfg.decode {
                DecodeMode::Greedy => argmax(&col) as u32,
                DecodeMode::TopK(k) => sample_top_k(&col, k.max(1), rng) as u32,
            };
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
            if next == period {
                break;
            }
        }
        out
    }

    /// Write `params.bin`, `vocab.txt`, and `lm.meta` into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("params.bin"))?;
        self.vocab
            .save(&dir.join("vocab.txt"))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let decode = match self.train_cfg.decode {
            DecodeMode::Greedy => "greedy".to_string(),
            DecodeMode::TopK(k) => format!("topk:{k}"),
        };
        let meta = format!(
            "d = {}\nlayers = {}\nheads = {}\nmax_seq_len = {}\nvocab_size = {}\nseed = {}\n\
             lambda = {}\nmax_tokens = {}\ndecode = {}\npool_first_token = {}\n",
            self.cfg.d,
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.max_seq_len,
            self.cfg.vocab_size,
            self.cfg.seed,
            self.train_cfg.lambda,
            self.train_cfg.max_tokens,
            decode,
            self.train_cfg.pool_first_token,
        );
        std::fs::write(dir.join("lm.meta"), meta)
    }

    /// Rebuild a generator from a checkpoint directory.
    pub fn load(dir: &std::path::Path) -> std::result::Result<Self, String> {
        let read = |name: &str| -> std::result::Result<String, String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| format!("{}: {e}", dir.join(name).display()))
        };
        let meta_text = read("lm.meta")?;
        let mut kv = std::collections::BTreeMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let need = |key: &str| -> std::result::Result<String, String> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| format!("lm.meta missing `{key}`"))
        };
        let parse = |key: &str| -> std::result::Result<usize, String> {
            need(key)?
                .parse()
                .map_err(|_| format!("lm.meta bad `{key}`"))
        };
        let decode = match need("decode")?.as_str() {
            "greedy" => DecodeMode::Greedy,
            other => match other.strip_prefix("topk:") {
                Some(k) => DecodeMode::TopK(
                    k.parse().map_err(|_| "lm.meta bad decode".to_string())?,
                ),
                None => return Err(format!("lm.meta bad decode `{other}`")),
            },
        };
        let cfg = EncoderConfig {
            d: parse("d")?,
            layers: parse("layers")?,
            heads: parse("heads")?,
            max_seq_len: parse("max_seq_len")?,
            vocab_size: parse("vocab_size")?,
            seed: parse("seed")? as u64,
        };
        let train_cfg = LmTrainConfig {
            lambda: need("lambda")?
                .parse()
                .map_err(|_| "lm.meta bad lambda".to_string())?,
            max_tokens: parse("max_tokens")?,
            decode,
            pool_first_token: need("pool_first_token")? == "true",
            seed: cfg.seed,
        };
        let vocab = Vocabulary::load(&dir.join("vocab.txt")).map_err(|e| e.to_string())?;
        let params =
            crate::numerics::ParamStore::load(&dir.join("params.bin")).map_err(|e| e.to_string())?;
        Ok(TextualGenerator {
            cfg,
            train_cfg,
            params,
            vocab,
        })
    }

    /// Pooled mean negative log-likelihood per predicted token over a corpus.
    pub fn corpus_lm_loss(&self, corpus: &[Vec<u32>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in corpus {
            let mut ids = seq.clone();
            ids.push(EOS);
            let mut tape = Tape::new();
            let mut binder = Binder::new(false);
            let loss = self.lm_loss_on(&mut tape, &mut binder, &ids)?;
            let active = ids[1..].iter().filter(|&&i| i != PAD).count();
            total += tape.value(loss).item() * active as f64;
            count += active;
        }
        Ok(total / count as f64)
    }

    /// `exp` of the corpus-level language-model loss.
    pub fn perplexity(&self, corpus: &[Vec<u32>]) -> Result<f64> {
        Ok(self.corpus_lm_loss(corpus)?.exp())
    }
}

/// Cross-entropy of `label` under a softmax over a 1×m logits row.
pub fn class_loss_from_logits(
    tape: &mut Tape<f64>,
    logits: VarId,
    label: usize,
) -> Result<VarId> {
    let as_col = tape.transpose(logits)?;
    tape.cross_entropy_cols(as_col, &[label], &[true])
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    let mx = logits[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (logits[i] - mx).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    for (w, &i) in weights.iter().zip(&idx) {
        if pick < *w {
            return i;
        }
        pick -= w;
    }
    *idx.last().unwrap()
}

// ── generation metrics ──────────────────────────────────────────────────

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(
    tokens: &[T],
    n: usize,
) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision BLEU with brevity penalty. Orders 1 and 2 use
/// exact clipped counts; orders ≥ 3 are add-one smoothed. An order the
/// candidate is too short to produce counts as vacuously satisfied.
pub fn bleu_multi<T: std::hash::Hash + Eq + Clone>(
    candidate: &[T],
    references: &[&[T]],
    n: usize,
) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let total: usize = cand.values().sum();
        if total == 0 {
            continue; // vacuous order: p = 1 contributes ln 1
        }
        let mut matched = 0usize;
        for (gram, &count) in &cand {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, order).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        let p = if order >= 3 {
            (matched + 1) as f64 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let diff = (len as i64 - candidate.len() as i64).abs();
            (diff, len)
        })
        .unwrap() as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Single-reference BLEU.
pub fn bleu<T: std::hash::Hash + Eq + Clone>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    bleu_multi(candidate, &[reference], n)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("self-BLEU needs at least 2 texts, got {0}")]
    CorpusTooSmall(usize),
}

/// Mean BLEU of every text against the rest of the corpus; higher means
/// lower diversity.
pub fn self_bleu<T: std::hash::Hash + Eq + Clone>(
    corpus: &[Vec<T>],
    n: usize,
) -> std::result::Result<f64, MetricError> {
    if corpus.len() < 2 {
        return Err(MetricError::CorpusTooSmall(corpus.len()));
    }
    let mut total = 0.0;
    for (i, text) in corpus.iter().enumerate() {
        let refs: Vec<&[T]> = corpus
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.as_slice())
            .collect();
        total += bleu_multi(text, &refs, n);
    }
    Ok(total / corpus.len() as f64)
}
