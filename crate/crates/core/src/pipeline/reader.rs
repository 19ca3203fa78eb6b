//! The reader: encoder → evidence injection → multi-grain features → answer
//! head, with batched training, evaluation, prediction, and checkpointing.

use super::config::{ConfigMap, PipelineConfig};
use super::data::{evidence_ids, Sample};
use super::{PipelineError, Result};
use crate::capsule::{
    margin_loss, maxpool_head, multigrain, option_spans, predict, route, MarginLossParams,
    MultiGrainKernels, RoutingConfig, RoutingScope, RoutingWeights,
};
use crate::encoder::{
    self, encode_segments, pack_input, EncoderConfig, PackedInput, SegmentTargets, Vocabulary,
};
use crate::injection::{assemble_final, build_relations, option_block, AttentionWeights, PAIR_NAMES};
use crate::numerics::{Binder, Optimizer, ParamStore, Tape, Tensor, VarId};
use crate::textual::class_loss_from_logits;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Capsule,
    Maxpool,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Capsule => "capsule",
            HeadKind::Maxpool => "maxpool",
        }
    }
}

/// Architecture half of [`PipelineConfig`]; everything a checkpoint needs to
/// rebuild the model.
#[derive(Debug, Clone)]
pub struct ReaderConfig {
    pub encoder: EncoderConfig,
    pub capsule_dim: usize,
    pub routing_iters: usize,
    pub margins: MarginLossParams,
    pub head: HeadKind,
    pub per_pair_attention: bool,
    pub routing_per_option: bool,
    pub num_options: usize,
}

impl From<&PipelineConfig> for ReaderConfig {
    fn from(cfg: &PipelineConfig) -> Self {
        ReaderConfig {
            encoder: cfg.encoder.clone(),
            capsule_dim: cfg.capsule_dim,
            routing_iters: cfg.routing_iters,
            margins: cfg.margins,
            head: cfg.head,
            per_pair_attention: cfg.per_pair_attention,
            routing_per_option: cfg.routing_per_option,
            num_options: cfg.num_options,
        }
    }
}

pub struct ReaderModel {
    pub cfg: ReaderConfig,
    pub params: ParamStore<f64>,
    pub vocab: Vocabulary,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
    .expect("generated data matches shape")
}

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_vec(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
    .expect("generated data matches shape")
}

// Vote maps start small: the routing sum feeds squash, whose gradient dies
// once ‖s‖ is large, so saturated-at-init capsules never recover.
const ROUTE_INIT: f64 = 0.01;

impl ReaderModel {
    /// Deterministic parameter creation from the config seed; only the
    /// selected head's parameters exist.
    pub fn init(mut cfg: ReaderConfig, vocab: Vocabulary) -> Self {
        cfg.encoder.vocab_size = vocab.len();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed);
        encoder::init_params(&mut params, "enc", &cfg.encoder, &mut rng);
        let d = cfg.encoder.d;
        if cfg.per_pair_attention {
            for pair in PAIR_NAMES {
                params.insert(format!("inj.w_g.{pair}"), xavier(d, d, &mut rng));
            }
        } else {
            params.insert("inj.w_g", xavier(d, d, &mut rng));
        }
        params.insert("inj.w_m", xavier(d, 2 * d, &mut rng));
        params.insert("inj.b_m", Tensor::zeros(vec![d, 1]).unwrap());
        let rows = 3 * d;
        params.insert("cap.conv2.k", xavier(rows, rows * 2, &mut rng));
        params.insert("cap.conv2.b", Tensor::zeros(vec![rows, 1]).unwrap());
        params.insert("cap.conv4.k", xavier(rows, rows * 4, &mut rng));
        params.insert("cap.conv4.b", Tensor::zeros(vec![rows, 1]).unwrap());
        match cfg.head {
            HeadKind::Capsule => {
                for j in 0..cfg.num_options {
                    params.insert(
                        format!("cap.route.{j}"),
                        uniform(cfg.capsule_dim, rows, ROUTE_INIT, &mut rng),
                    );
                }
            }
            HeadKind::Maxpool => {
                params.insert("head.w_score", xavier(1, rows, &mut rng));
            }
        }
        ReaderModel { cfg, params, vocab }
    }

    /// Shared per-batch geometry: every segment padded to the batch maximum
    /// and then to a multiple of 4, shrunk (paragraph first, then evidence)
    /// if the packed budget would overflow.
    pub fn batch_targets(&self, batch: &[&Sample]) -> Result<SegmentTargets> {
        let ceil4 = |x: usize| x.div_ceil(4) * 4;
        let mut t = 0;
        let mut n = 0;
        let mut h = 0;
        let mut k = 0;
        for s in batch {
            t = t.max(self.vocab.encode(&s.paragraph).len());
            n = n.max(self.vocab.encode(&s.question).len());
            for o in &s.options {
                h = h.max(self.vocab.encode(o).len());
            }
            k = k.max(evidence_ids(s, &self.vocab).len());
        }
        let budget = self.cfg.encoder.max_seq_len;
        let (mut t, n, h, mut k) = (ceil4(t.max(1)), ceil4(n.max(1)), ceil4(h.max(1)), ceil4(k));
        let overhead = 4;
        let over = (overhead + t + n + h + k).saturating_sub(budget);
        if over > 0 {
            let cut = ceil4(over).min(t.saturating_sub(4));
            t -= cut;
            let over = (overhead + t + n + h + k).saturating_sub(budget);
            if over > 0 {
                let cut = ceil4(over).min(k);
                k -= cut;
            }
        }
        if overhead + t + n + h + k > budget {
            return Err(PipelineError::Encoder(encoder::EncoderError::OverLength {
                got: overhead + t + n + h + k,
                budget,
            }));
        }
        Ok(SegmentTargets { t, n, h, k })
    }

    /// One packing per option under the shared batch geometry.
    pub fn pack_sample(
        &self,
        sample: &Sample,
        targets: SegmentTargets,
    ) -> Result<Vec<PackedInput>> {
        let p_full = self.vocab.encode(&sample.paragraph);
        let p = &p_full[p_full.len().saturating_sub(targets.t)..];
        let q = self.vocab.encode(&sample.question);
        let e_full = evidence_ids(sample, &self.vocab);
        let e = &e_full[..e_full.len().min(targets.k)];
        let budget = self.cfg.encoder.max_seq_len;
        sample
            .options
            .iter()
            .map(|opt| {
                let o = self.vocab.encode(opt);
                Ok(pack_input(p, &q, &o, e, budget, Some(targets))?)
            })
            .collect()
    }

    fn attention_weights(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
    ) -> Result<AttentionWeights> {
        if self.cfg.per_pair_attention {
            let mut ids = [VarId(0); 9];
            for (slot, pair) in PAIR_NAMES.iter().enumerate() {
                ids[slot] = binder.get(tape, &self.params, &format!("inj.w_g.{pair}"))?;
            }
            Ok(AttentionWeights::PerPair {
                p_q: ids[0],
                p_o: ids[1],
                p_e: ids[2],
                q_p: ids[3],
                q_o: ids[4],
                q_e: ids[5],
                o_p: ids[6],
                o_q: ids[7],
                o_e: ids[8],
            })
        } else {
            Ok(AttentionWeights::Shared(binder.get(
                tape,
                &self.params,
                "inj.w_g",
            )?))
        }
    }

    /// Full forward pass for one sample's packings. Returns per-option
    /// scores (capsule norms, or option logits for the max-pool head) plus
    /// what the loss needs.
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        packings: &[PackedInput],
    ) -> Result<HeadOut> {
        let weights = self.attention_weights(tape, binder)?;
        let w_m = binder.get(tape, &self.params, "inj.w_m")?;
        let b_m = binder.get(tape, &self.params, "inj.b_m")?;
        let mut blocks = Vec::with_capacity(packings.len());
        for packing in packings {
            let enc = encode_segments(
                tape,
                binder,
                &self.params,
                "enc",
                &self.cfg.encoder,
                packing,
            )?;
            let rel = build_relations(tape, &enc, weights)?;
            blocks.push(option_block(tape, &enc, &rel, w_m, b_m)?);
        }
        let f = assemble_final(tape, &blocks)?;
        let kernels = MultiGrainKernels {
            conv2: binder.get(tape, &self.params, "cap.conv2.k")?,
            conv2_bias: binder.get(tape, &self.params, "cap.conv2.b")?,
            conv4: binder.get(tape, &self.params, "cap.conv4.k")?,
            conv4_bias: binder.get(tape, &self.params, "cap.conv4.b")?,
        };
        let mg = multigrain(tape, f, &kernels)?;
        let b = packings[0].bounds;
        let tnh = b.t() + b.n() + b.h();
        let m = self.cfg.num_options;
        match self.cfg.head {
            HeadKind::Capsule => {
                let mut per_option = Vec::with_capacity(m);
                for j in 0..m {
                    per_option.push(binder.get(tape, &self.params, &format!("cap.route.{j}"))?);
                }
                let scope = if self.cfg.routing_per_option {
                    RoutingScope::PerOption(option_spans(m, tnh))
                } else {
                    RoutingScope::AllColumns
                };
                let outcome = route(
                    tape,
                    mg.l,
                    &RoutingWeights::PerOption(per_option),
                    &RoutingConfig {
                        iterations: self.cfg.routing_iters,
                        scope,
                    },
                )?;
                Ok(HeadOut::Capsule {
                    capsules: outcome.capsules,
                    norms: outcome.norms,
                })
            }
            HeadKind::Maxpool => {
                let w_score = binder.get(tape, &self.params, "head.w_score")?;
                let logits = maxpool_head(tape, mg.l, &option_spans(m, tnh), w_score)?;
                Ok(HeadOut::Maxpool { logits })
            }
        }
    }

    /// Scalar training loss for one sample.
    pub fn sample_loss(
        &self,
        tape: &mut Tape<f64>,
        binder: &mut Binder,
        packings: &[PackedInput],
        one_hot: &[f64],
    ) -> Result<VarId> {
        match self.forward(tape, binder, packings)? {
            HeadOut::Capsule { capsules, .. } => {
                Ok(margin_loss(tape, capsules, one_hot, &self.cfg.margins)?)
            }
            HeadOut::Maxpool { logits } => {
                let label = one_hot
                    .iter()
                    .position(|&y| y == 1.0)
                    .ok_or_else(|| PipelineError::Training("label vector has no 1".into()))?;
                Ok(class_loss_from_logits(tape, logits, label)?)
            }
        }
    }

    /// Per-option scores for prediction: capsule norms, or softmax
    /// probabilities of the max-pool logits.
    pub fn sample_scores(&self, packings: &[PackedInput]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        match self.forward(&mut tape, &mut binder, packings)? {
            HeadOut::Capsule { norms, .. } => Ok(tape.value(norms).data().to_vec()),
            HeadOut::Maxpool { logits } => {
                let probs = tape.softmax(logits, 1)?;
                Ok(tape.value(probs).data().to_vec())
            }
        }
    }

    // ── checkpointing ───────────────────────────────────────────────────

    /// Write `params.bin`, `vocab.txt`, and `reader.meta` into `dir`.
    pub fn save(&self, dir: &Path, loss_curve: &[f64]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("params.bin"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let curve = loss_curve
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let meta = format!(
            "d = {}\nlayers = {}\nheads = {}\nmax_seq_len = {}\nvocab_size = {}\nseed = {}\n\
             capsule_dim = {}\nrouting_iters = {}\nm_plus = {}\nm_minus = {}\n\
             lambda_margin = {}\nhead = {}\nper_pair_attention = {}\nrouting_per_option = {}\n\
             num_options = {}\nloss_curve = {}\n",
            self.cfg.encoder.d,
            self.cfg.encoder.layers,
            self.cfg.encoder.heads,
            self.cfg.encoder.max_seq_len,
            self.cfg.encoder.vocab_size,
            self.cfg.encoder.seed,
            self.cfg.capsule_dim,
            self.cfg.routing_iters,
            self.cfg.margins.m_plus,
            self.cfg.margins.m_minus,
            self.cfg.margins.lambda,
            self.cfg.head.as_str(),
            self.cfg.per_pair_attention,
            self.cfg.routing_per_option,
            self.cfg.num_options,
            curve,
        );
        std::fs::write(dir.join("reader.meta"), meta)?;
        Ok(())
    }

    /// Rebuild a model (and its training loss curve) from a checkpoint dir.
    pub fn load(dir: &Path) -> Result<(Self, Vec<f64>)> {
        for file in ["params.bin", "vocab.txt", "reader.meta"] {
            if !dir.join(file).exists() {
                return Err(PipelineError::MissingCheckpointFile(file.into()));
            }
        }
        let meta = ConfigMap::load(&dir.join("reader.meta"))?;
        let need = |key: &str| -> Result<&str> {
            meta.get(key)
                .ok_or_else(|| PipelineError::Config(format!("reader.meta missing `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            need(key)?
                .parse()
                .map_err(|_| PipelineError::Config(format!("reader.meta bad `{key}`")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            need(key)?
                .parse()
                .map_err(|_| PipelineError::Config(format!("reader.meta bad `{key}`")))
        };
        let head = match need("head")? {
            "capsule" => HeadKind::Capsule,
            "maxpool" => HeadKind::Maxpool,
            other => {
                return Err(PipelineError::Config(format!(
                    "reader.meta bad head `{other}`"
                )))
            }
        };
        let cfg = ReaderConfig {
            encoder: EncoderConfig {
                d: parse_usize("d")?,
                layers: parse_usize("layers")?,
                heads: parse_usize("heads")?,
                max_seq_len: parse_usize("max_seq_len")?,
                vocab_size: parse_usize("vocab_size")?,
                seed: parse_usize("seed")? as u64,
            },
            capsule_dim: parse_usize("capsule_dim")?,
            routing_iters: parse_usize("routing_iters")?,
            margins: MarginLossParams {
                m_plus: parse_f64("m_plus")?,
                m_minus: parse_f64("m_minus")?,
                lambda: parse_f64("lambda_margin")?,
            },
            head,
            per_pair_attention: need("per_pair_attention")? == "true",
            routing_per_option: need("routing_per_option")? == "true",
            num_options: parse_usize("num_options")?,
        };
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let params = ParamStore::load(&dir.join("params.bin"))?;
        let loss_curve = match meta.get("loss_curve") {
            None | Some("") => Vec::new(),
            Some(csv) => csv
                .split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| PipelineError::Config("reader.meta bad loss_curve".into()))
                })
                .collect::<Result<Vec<f64>>>()?,
        };
        Ok((ReaderModel { cfg, params, vocab }, loss_curve))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum HeadOut {
    Capsule { capsules: VarId, norms: VarId },
    Maxpool { logits: VarId },
}

// ── training ────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub model: ReaderModel,
    pub loss_curve: Vec<f64>,
    pub dev_accuracy_curve: Vec<f64>,
}

/// Build the vocabulary a reader trains with: every text segment plus any
/// attached evidence, capped by the encoder config.
pub fn reader_vocabulary(samples: &[Sample], cap: usize) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for s in samples {
        texts.push(&s.paragraph);
        texts.push(&s.question);
        texts.extend(s.options.iter().map(String::as_str));
        texts.extend(s.evidence.iter().map(|e| e.text.as_str()));
    }
    Vocabulary::build(texts.into_iter(), cap)
}

/// Batched margin-loss (or cross-entropy) training with per-epoch dev
/// evaluation, early stopping, and a deterministic schedule from the seed.
/// A non-finite loss aborts, keeping the last good parameters.
pub fn train_reader(
    train: &[Sample],
    dev: Option<&[Sample]>,
    cfg: &PipelineConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(PipelineError::Training("no training samples".into()));
    }
    if train.iter().any(|s| s.label.is_none()) {
        return Err(PipelineError::Training(
            "training samples must be labeled".into(),
        ));
    }
    let vocab = reader_vocabulary(train, cfg.encoder.vocab_size);
    let mut model = ReaderModel::init(ReaderConfig::from(cfg), vocab);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut optimizer = Optimizer::new(cfg.optimizer(steps_per_epoch * cfg.epochs));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut dev_curve = Vec::new();
    let mut best: Option<(f64, ParamStore<f64>)> = None;
    let mut stale = 0usize;
    'training: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let targets = model.batch_targets(&batch)?;
            model.params.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            for sample in &batch {
                let packings = model.pack_sample(sample, targets)?;
                let one_hot = sample.one_hot().expect("labels checked above");
                let mut tape = Tape::new();
                let mut binder = Binder::new(true);
                let loss = model.sample_loss(&mut tape, &mut binder, &packings, &one_hot)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    // abort with the last good parameters: no step has been
                    // applied with this batch's gradients
                    break 'training;
                }
                epoch_loss += value;
                let scaled = tape.scale(loss, inv);
                tape.backward(scaled)?;
                binder.harvest(&tape, &mut model.params)?;
            }
            optimizer.step(&mut model.params)?;
        }
        loss_curve.push(epoch_loss / train.len() as f64);
        if let Some(dev_samples) = dev {
            let report = evaluate(&model, dev_samples, cfg.batch_size)?;
            let acc = report.accuracy.unwrap_or(0.0);
            dev_curve.push(acc);
            let improved = best.as_ref().is_none_or(|(b, _)| acc > *b);
            if improved {
                best = Some((acc, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        loss_curve,
        dev_accuracy_curve: dev_curve,
    })
}

// ── evaluation and prediction ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

/// Score every sample in deterministic batch order.
pub fn predict_samples(
    model: &ReaderModel,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let targets = model.batch_targets(&batch)?;
        for sample in batch {
            let packings = model.pack_sample(sample, targets)?;
            let scores = model.sample_scores(&packings)?;
            out.push(Prediction {
                id: sample.id.clone(),
                predicted: predict(&scores),
                scores,
            });
        }
    }
    Ok(out)
}

/// `sample_id \t predicted_index \t score_1..score_m` rows.
pub fn write_predictions(preds: &[Prediction], out: &mut impl Write) -> Result<()> {
    for p in preds {
        write!(out, "{}\t{}", p.id, p.predicted)?;
        for s in &p.scores {
            write!(out, "\t{s:.6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Accuracy, confusion counts, and run provenance in diffable text form.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
    pub loss_curve: Vec<f64>,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self.accuracy {
            Some(acc) => out.push_str(&format!("accuracy = {acc:.6}\n")),
            None => out.push_str("accuracy = NA\n"),
        }
        out.push_str(&format!("correct = {}\n", self.correct));
        out.push_str(&format!("total = {}\n", self.total));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("config_fingerprint = {}\n", self.config_fingerprint));
        let curve = self
            .loss_curve
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("loss_curve = {curve}\n"));
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, count) in row.iter().enumerate() {
                out.push_str(&format!("confusion_{i}_{j} = {count}\n"));
            }
        }
        out
    }
}

/// Accuracy over argmax-score predictions. Every sample must be labeled;
/// unlabeled splits go through [`predict_samples`] instead.
pub fn evaluate(model: &ReaderModel, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    if samples.iter().any(|s| s.label.is_none()) {
        return Err(PipelineError::Unlabeled);
    }
    let m = model.cfg.num_options;
    let preds = predict_samples(model, samples, batch_size)?;
    let mut confusion = vec![vec![0usize; m]; m];
    let mut correct = 0usize;
    for (sample, pred) in samples.iter().zip(&preds) {
        let truth = sample.label.expect("checked above");
        confusion[truth][pred.predicted] += 1;
        if truth == pred.predicted {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: Some(correct as f64 / samples.len() as f64),
        correct,
        total: samples.len(),
        confusion,
        loss_curve: Vec::new(),
        config_fingerprint: String::new(),
        seed: 0,
    })
}
