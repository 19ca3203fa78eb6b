//! End-to-end pipeline behavior: dataset parsing, evidence attachment,
//! reader training, evaluation, prediction, and checkpoint round-trips.

use cegi_core::capsule::predict;
use cegi_core::encoder::EncoderConfig;
use cegi_core::pipeline::{
    attach_evidence_records, evaluate, evidence_ids, parse_dataset, predict_samples, synth_task,
    train_reader, write_predictions, EvidenceDependency, EvidenceRecord, EvidenceSource,
    EvidenceSources, PipelineConfig, PipelineError, ReaderConfig, ReaderModel, Sample, SynthSpec,
};
use cegi_core::pipeline::reader_vocabulary;

fn fixture_jsonl() -> String {
    let mk = |id: &str, label: Option<usize>| {
        let label_part = label.map(|l| format!(",\"label\":{l}")).unwrap_or_default();
        format!(
            "{{\"id\":\"{id}\",\"context\":\"the old man fell on the street\",\
             \"question\":\"what happens next\",\
             \"answer0\":\"an ambulance comes\",\"answer1\":\"he sings a song\",\
             \"answer2\":\"nothing at all\",\"answer3\":\"the street vanishes\"{label_part}}}"
        )
    };
    format!("{}\n{}\n{}\n", mk("a", Some(0)), mk("b", Some(2)), mk("c", Some(3)))
}

#[test]
fn three_record_fixture_parses_with_label_bits() {
    let samples = parse_dataset(&fixture_jsonl()).unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[0].one_hot().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(samples[1].one_hot().unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(samples[2].one_hot().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn record_missing_an_option_is_rejected_with_line() {
    let bad = "{\"id\":\"x\",\"context\":\"c\",\"question\":\"q\",\
               \"answer0\":\"a\",\"answer1\":\"b\",\"answer3\":\"d\",\"label\":0}";
    let err = parse_dataset(bad).unwrap_err();
    match err {
        PipelineError::Dataset { line, message } => {
            assert_eq!(line, 1);
            assert!(message.contains("answer2"), "message: {message}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let text = fixture_jsonl().replace("\"id\":\"b\"", "\"id\":\"a\"");
    let err = parse_dataset(&text).unwrap_err();
    assert!(err.to_string().contains("duplicate id"));
}

#[test]
fn unlabeled_split_parses_and_refuses_accuracy() {
    let mut text = fixture_jsonl();
    text = text
        .replace(",\"label\":0", "")
        .replace(",\"label\":2", "")
        .replace(",\"label\":3", "");
    let samples = parse_dataset(&text).unwrap();
    assert!(samples.iter().all(|s| s.label.is_none()));
    let vocab = reader_vocabulary(&samples, 200);
    let model = ReaderModel::init(tiny_reader_config(0), vocab);
    let err = evaluate(&model, &samples, 4).unwrap_err();
    assert!(matches!(err, PipelineError::Unlabeled));
    // predictions still work
    let preds = predict_samples(&model, &samples, 4).unwrap();
    assert_eq!(preds.len(), 3);
    let mut buf = Vec::new();
    write_predictions(&preds, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().starts_with("a\t"));
}

fn tiny_reader_config(seed: u64) -> ReaderConfig {
    ReaderConfig::from(&tiny_pipeline_config(seed))
}

fn tiny_pipeline_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        encoder: EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            max_seq_len: 48,
            vocab_size: 400,
            seed,
        },
        capsule_dim: 8,
        batch_size: 8,
        epochs: 3,
        learning_rate: 2e-3,
        warmup_proportion: 0.1,
        seed,
        ..PipelineConfig::default()
    }
}

fn tiny_synth(n: usize, seed: u64) -> Vec<Sample> {
    synth_task(&SynthSpec {
        n,
        vocab_words: 20,
        evidence_dependency: EvidenceDependency::Required,
        distractor_similarity: 0.5,
        num_options: 4,
        p_len: 4,
        q_len: 2,
        o_len: 2,
        seed,
    })
}

#[test]
fn attach_none_yields_empty_evidence_segment() {
    let mut samples = tiny_synth(6, 1);
    assert!(samples.iter().all(|s| !s.evidence.is_empty()));
    let records: Vec<EvidenceRecord> = samples.iter().flat_map(|s| s.evidence.clone()).collect();
    attach_evidence_records(&mut samples, &records, EvidenceSources::None).unwrap();
    let vocab = reader_vocabulary(&samples, 200);
    for s in &samples {
        assert!(s.evidence.is_empty());
        assert!(evidence_ids(s, &vocab).is_empty());
    }
}

#[test]
fn attach_both_orders_textual_then_factual_and_replaces() {
    let mut samples = parse_dataset(&fixture_jsonl()).unwrap();
    let records = vec![
        EvidenceRecord {
            id: "a".into(),
            source: EvidenceSource::Factual,
            text: "ambulance is related to hospital".into(),
        },
        EvidenceRecord {
            id: "a".into(),
            source: EvidenceSource::Textual,
            text: "he calls for medical attention".into(),
        },
    ];
    attach_evidence_records(&mut samples, &records, EvidenceSources::Both).unwrap();
    assert_eq!(samples[0].evidence.len(), 2);
    assert_eq!(samples[0].evidence[0].source, EvidenceSource::Textual);
    assert_eq!(samples[0].evidence[1].source, EvidenceSource::Factual);
    assert!(samples[1].evidence.is_empty());
    // the packed evidence segment holds textual tokens, a separator, then factual
    let vocab = reader_vocabulary(&samples, 400);
    let ids = evidence_ids(&samples[0], &vocab);
    let sep_pos = ids
        .iter()
        .position(|&i| i == cegi_core::encoder::SEP)
        .unwrap();
    assert!(sep_pos > 0 && sep_pos < ids.len() - 1);
    // attaching a second time replaces instead of appending
    attach_evidence_records(&mut samples, &records, EvidenceSources::Both).unwrap();
    assert_eq!(samples[0].evidence.len(), 2);
    // filtering to one source keeps only that source
    attach_evidence_records(&mut samples, &records, EvidenceSources::Factual).unwrap();
    assert_eq!(samples[0].evidence.len(), 1);
    assert_eq!(samples[0].evidence[0].source, EvidenceSource::Factual);
}

#[test]
fn attach_ignores_records_for_other_splits() {
    let mut samples = parse_dataset(&fixture_jsonl()).unwrap();
    let records = vec![
        EvidenceRecord {
            id: "other-split".into(),
            source: EvidenceSource::Textual,
            text: "x".into(),
        },
        EvidenceRecord {
            id: "a".into(),
            source: EvidenceSource::Textual,
            text: "kept".into(),
        },
    ];
    attach_evidence_records(&mut samples, &records, EvidenceSources::Both).unwrap();
    assert_eq!(samples[0].evidence.len(), 1);
    assert!(samples[1].evidence.is_empty());
}

#[test]
fn training_loss_decreases_on_small_fixture() {
    let train = tiny_synth(20, 7);
    let cfg = PipelineConfig {
        epochs: 4,
        ..tiny_pipeline_config(7)
    };
    let outcome = train_reader(&train, None, &cfg).unwrap();
    assert_eq!(outcome.loss_curve.len(), 4);
    for w in outcome.loss_curve.windows(2) {
        assert!(w[1] < w[0], "loss curve not decreasing: {:?}", outcome.loss_curve);
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let train = tiny_synth(8, 3);
    let cfg = PipelineConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..tiny_pipeline_config(3)
    };
    let outcome = train_reader(&train, None, &cfg).unwrap();
    let vocab = reader_vocabulary(&train, cfg.encoder.vocab_size);
    let fresh = ReaderModel::init(ReaderConfig::from(&cfg), vocab);
    for ((name_a, a), (name_b, b)) in outcome.model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(a.data(), b.data(), "{name_a} drifted under lr=0");
    }
    assert!((outcome.loss_curve[0] - outcome.loss_curve[1]).abs() < 1e-12);
}

#[test]
fn same_seed_training_is_bit_identical() {
    let train = tiny_synth(10, 11);
    let cfg = PipelineConfig {
        epochs: 2,
        ..tiny_pipeline_config(11)
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let out_a = train_reader(&train, None, &cfg).unwrap();
    out_a.model.save(dir_a.path(), &out_a.loss_curve).unwrap();
    let out_b = train_reader(&train, None, &cfg).unwrap();
    out_b.model.save(dir_b.path(), &out_b.loss_curve).unwrap();
    let bytes_a = std::fs::read(dir_a.path().join("params.bin")).unwrap();
    let bytes_b = std::fs::read(dir_b.path().join("params.bin")).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn evaluate_accuracy_matches_independent_recount() {
    let samples = tiny_synth(12, 5);
    let vocab = reader_vocabulary(&samples, 300);
    let model = ReaderModel::init(tiny_reader_config(5), vocab);
    let report = evaluate(&model, &samples, 4).unwrap();
    let preds = predict_samples(&model, &samples, 4).unwrap();
    let recount = samples
        .iter()
        .zip(&preds)
        .filter(|(s, p)| s.label == Some(p.predicted))
        .count();
    assert_eq!(report.correct, recount);
    assert_eq!(report.total, samples.len());
    assert!((report.accuracy.unwrap() - recount as f64 / 12.0).abs() < 1e-15);
    let conf_total: usize = report.confusion.iter().flatten().sum();
    assert_eq!(conf_total, samples.len());
    // predictions agree with the argmax of the reported scores
    for p in &preds {
        assert_eq!(p.predicted, predict(&p.scores));
    }
}

#[test]
fn untrained_model_sits_at_chance_on_evidence_required_task() {
    let samples = tiny_synth(400, 13);
    let vocab = reader_vocabulary(&samples, 300);
    let model = ReaderModel::init(tiny_reader_config(13), vocab);
    let report = evaluate(&model, &samples, 16).unwrap();
    let acc = report.accuracy.unwrap();
    // binomial 3σ around chance level 0.25
    let sigma = (0.25 * 0.75 / 400.0f64).sqrt();
    assert!(
        (acc - 0.25).abs() < 3.0 * sigma + 1e-9,
        "untrained accuracy {acc}"
    );
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let train = tiny_synth(10, 17);
    let cfg = PipelineConfig {
        epochs: 1,
        ..tiny_pipeline_config(17)
    };
    let outcome = train_reader(&train, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    outcome.model.save(dir.path(), &outcome.loss_curve).unwrap();
    let (loaded, curve) = ReaderModel::load(dir.path()).unwrap();
    assert_eq!(curve, outcome.loss_curve);
    let before = predict_samples(&outcome.model, &train, 4).unwrap();
    let after = predict_samples(&loaded, &train, 4).unwrap();
    assert_eq!(before, after);
}

#[test]
fn maxpool_head_trains_and_checkpoints() {
    let train = tiny_synth(10, 19);
    let cfg = PipelineConfig {
        head: cegi_core::pipeline::HeadKind::Maxpool,
        epochs: 1,
        ..tiny_pipeline_config(19)
    };
    let outcome = train_reader(&train, None, &cfg).unwrap();
    assert!(outcome.model.params.contains("head.w_score"));
    assert!(!outcome.model.params.contains("cap.route.0"));
    let preds = predict_samples(&outcome.model, &train, 4).unwrap();
    for p in &preds {
        let sum: f64 = p.scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "maxpool scores are probabilities");
    }
}

#[test]
fn per_pair_attention_trains_nine_weight_matrices() {
    let train = tiny_synth(8, 29);
    let cfg = PipelineConfig {
        per_pair_attention: true,
        epochs: 1,
        ..tiny_pipeline_config(29)
    };
    let outcome = train_reader(&train, None, &cfg).unwrap();
    for pair in ["p_q", "p_o", "p_e", "q_p", "q_o", "q_e", "o_p", "o_q", "o_e"] {
        assert!(outcome.model.params.contains(&format!("inj.w_g.{pair}")));
    }
    assert!(!outcome.model.params.contains("inj.w_g"));
    // round-trips through a checkpoint like any other configuration
    let dir = tempfile::tempdir().unwrap();
    outcome.model.save(dir.path(), &outcome.loss_curve).unwrap();
    let (loaded, _) = ReaderModel::load(dir.path()).unwrap();
    assert!(loaded.cfg.per_pair_attention);
    assert_eq!(
        predict_samples(&loaded, &train, 4).unwrap(),
        predict_samples(&outcome.model, &train, 4).unwrap()
    );
}

#[test]
fn early_stopping_keeps_best_dev_params() {
    let train = tiny_synth(16, 23);
    let dev = tiny_synth(8, 24);
    let cfg = PipelineConfig {
        epochs: 6,
        patience: 2,
        ..tiny_pipeline_config(23)
    };
    let outcome = train_reader(&train, Some(&dev), &cfg).unwrap();
    assert!(!outcome.dev_accuracy_curve.is_empty());
    // restored parameters reproduce the best recorded dev accuracy
    let best = outcome
        .dev_accuracy_curve
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    let report = evaluate(&outcome.model, &dev, cfg.batch_size).unwrap();
    assert!((report.accuracy.unwrap() - best).abs() < 1e-12);
}
