//! Stand-in contextual encoder: stacked pre-norm self-attention blocks over
//! token + position embeddings, trained from scratch. Bidirectional mode
//! masks `[PAD]` keys; causal mode masks every key to the right.

use super::{EncoderConfig, PackedInput, PAD};
use crate::numerics::{Binder, ParamStore, Result, Scalar, Tape, Tensor, VarId};
use rand::Rng;

const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Bidirectional,
    Causal,
}

fn xavier<F: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::of(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("generated data matches shape")
}

fn uniform<F: Scalar>(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| F::of(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("generated data matches shape")
}

/// Create every encoder parameter under `prefix` in a fixed order.
pub fn init_params<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) {
    let d = cfg.d;
    let ff = cfg.ffn_dim();
    store.insert(
        format!("{prefix}.tok_emb"),
        uniform(cfg.vocab_size, d, 0.1, rng),
    );
    store.insert(
        format!("{prefix}.pos_emb"),
        uniform(cfg.max_seq_len, d, 0.1, rng),
    );
    for l in 0..cfg.layers {
        for gate in ["ln1", "ln2"] {
            store.insert(
                format!("{prefix}.l{l}.{gate}.g"),
                Tensor::filled(vec![d, 1], F::one()).unwrap(),
            );
            store.insert(
                format!("{prefix}.l{l}.{gate}.b"),
                Tensor::zeros(vec![d, 1]).unwrap(),
            );
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}.l{l}.attn.{w}"), xavier(d, d, rng));
        }
        store.insert(format!("{prefix}.l{l}.ffn.w1"), xavier(ff, d, rng));
        store.insert(
            format!("{prefix}.l{l}.ffn.b1"),
            Tensor::zeros(vec![ff, 1]).unwrap(),
        );
        store.insert(format!("{prefix}.l{l}.ffn.w2"), xavier(d, ff, rng));
        store.insert(
            format!("{prefix}.l{l}.ffn.b2"),
            Tensor::zeros(vec![d, 1]).unwrap(),
        );
    }
    store.insert(
        format!("{prefix}.lnf.g"),
        Tensor::filled(vec![d, 1], F::one()).unwrap(),
    );
    store.insert(
        format!("{prefix}.lnf.b"),
        Tensor::zeros(vec![d, 1]).unwrap(),
    );
}

/// Additive attention mask: `mask[i][j] = MASKED` forbids query i from
/// attending to key j.
fn attention_mask<F: Scalar>(ids: &[u32], mode: AttnMode) -> Tensor<F> {
    let t = ids.len();
    let mut data = vec![F::zero(); t * t];
    for i in 0..t {
        for j in 0..t {
            let forbidden = match mode {
                AttnMode::Bidirectional => ids[j] == PAD,
                AttnMode::Causal => j > i,
            };
            if forbidden {
                data[i * t + j] = F::of(MASKED);
            }
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("mask shape")
}

/// Run the encoder over a packed id sequence, returning the last-layer
/// feature block (d × len) with one column per input position.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    ids: &[u32],
    mode: AttnMode,
) -> Result<VarId> {
    let d = cfg.d;
    let heads = cfg.heads;
    let dh = d / heads;
    let t = ids.len();
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..t).collect();

    let tok_table = binder.get(tape, store, &format!("{prefix}.tok_emb"))?;
    let pos_table = binder.get(tape, store, &format!("{prefix}.pos_emb"))?;
    let tok = tape.embed(tok_table, &idx)?;
    let pos = tape.embed(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mask = tape.constant(attention_mask(ids, mode));
    let scale = F::of(1.0 / (dh as f64).sqrt());

    for l in 0..cfg.layers {
        let g1 = binder.get(tape, store, &format!("{prefix}.l{l}.ln1.g"))?;
        let b1 = binder.get(tape, store, &format!("{prefix}.l{l}.ln1.b"))?;
        let normed = tape.layer_norm_cols(x, g1, b1, F::of(LN_EPS))?;

        let wq = binder.get(tape, store, &format!("{prefix}.l{l}.attn.wq"))?;
        let wk = binder.get(tape, store, &format!("{prefix}.l{l}.attn.wk"))?;
        let wv = binder.get(tape, store, &format!("{prefix}.l{l}.attn.wv"))?;
        let wo = binder.get(tape, store, &format!("{prefix}.l{l}.attn.wo"))?;
        let q = tape.matmul(wq, normed)?;
        let k = tape.matmul(wk, normed)?;
        let v = tape.matmul(wv, normed)?;

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_rows(q, lo, hi)?;
            let kh = tape.slice_rows(k, lo, hi)?;
            let vh = tape.slice_rows(v, lo, hi)?;
            let qt = tape.transpose(qh)?;
            let scores = tape.matmul(qt, kh)?;
            let scaled = tape.scale(scores, scale);
            let masked = tape.add(scaled, mask)?;
            let att = tape.softmax(masked, 1)?;
            let att_t = tape.transpose(att)?;
            head_outs.push(tape.matmul(vh, att_t)?);
        }
        let merged = tape.concat_rows(&head_outs)?;
        let attn_out = tape.matmul(wo, merged)?;
        x = tape.add(x, attn_out)?;

        let g2 = binder.get(tape, store, &format!("{prefix}.l{l}.ln2.g"))?;
        let b2 = binder.get(tape, store, &format!("{prefix}.l{l}.ln2.b"))?;
        let normed2 = tape.layer_norm_cols(x, g2, b2, F::of(LN_EPS))?;
        let w1 = binder.get(tape, store, &format!("{prefix}.l{l}.ffn.w1"))?;
        let fb1 = binder.get(tape, store, &format!("{prefix}.l{l}.ffn.b1"))?;
        let w2 = binder.get(tape, store, &format!("{prefix}.l{l}.ffn.w2"))?;
        let fb2 = binder.get(tape, store, &format!("{prefix}.l{l}.ffn.b2"))?;
        let h1 = tape.matmul(w1, normed2)?;
        let h1 = tape.add_bias(h1, fb1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(w2, h1)?;
        let h2 = tape.add_bias(h2, fb2)?;
        x = tape.add(x, h2)?;
    }

    let gf = binder.get(tape, store, &format!("{prefix}.lnf.g"))?;
    let bf = binder.get(tape, store, &format!("{prefix}.lnf.b"))?;
    tape.layer_norm_cols(x, gf, bf, F::of(LN_EPS))
}

/// Causal variant: position i's feature depends only on positions ≤ i.
pub fn causal_encode<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<VarId> {
    encode(tape, binder, store, prefix, cfg, ids, AttnMode::Causal)
}

/// One packed input's last-layer features, sliced by segment.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub full: VarId,
    pub cls: VarId,
    pub p: VarId,
    pub q: VarId,
    pub o: VarId,
    /// Absent when the evidence segment is empty (k = 0).
    pub e: Option<VarId>,
}

/// Encode a packed sequence and slice out the per-segment feature blocks.
pub fn encode_segments<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    packed: &PackedInput,
) -> Result<EncoderOutput> {
    let full = encode(
        tape,
        binder,
        store,
        prefix,
        cfg,
        &packed.ids,
        AttnMode::Bidirectional,
    )?;
    let b = packed.bounds;
    Ok(EncoderOutput {
        full,
        cls: tape.slice_cols(full, 0, 1)?,
        p: tape.slice_cols(full, b.p.0, b.p.1)?,
        q: tape.slice_cols(full, b.q.0, b.q.1)?,
        o: tape.slice_cols(full, b.o.0, b.o.1)?,
        e: if b.k() > 0 {
            Some(tape.slice_cols(full, b.e.0, b.e.1)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pack_input, SegmentTargets};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            layers: 2,
            heads: 2,
            max_seq_len: 32,
            vocab_size: 24,
            seed: 0,
        }
    }

    fn init_store(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut store, "enc", cfg, &mut rng);
        store
    }

    fn run(store: &ParamStore<f64>, cfg: &EncoderConfig, ids: &[u32], mode: AttnMode) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let out = encode(&mut tape, &mut binder, store, "enc", cfg, ids, mode).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn pad_tail_length_never_changes_non_pad_columns() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 7);
        let ids = vec![1u32, 10, 11, 12];
        let short = run(&store, &cfg, &ids, AttnMode::Bidirectional);
        let mut padded = ids.clone();
        padded.extend([PAD; 5]);
        let long = run(&store, &cfg, &padded, AttnMode::Bidirectional);
        let (t_short, t_long) = (ids.len(), padded.len());
        for r in 0..cfg.d {
            for c in 0..t_short {
                assert_eq!(short[r * t_short + c], long[r * t_long + c]);
            }
        }
    }

    #[test]
    fn causal_columns_ignore_later_tokens() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 3);
        let a = run(&store, &cfg, &[5, 6, 7, 8], AttnMode::Causal);
        let b = run(&store, &cfg, &[5, 6, 7, 9], AttnMode::Causal);
        let t = 4;
        for r in 0..cfg.d {
            for c in 0..3 {
                assert_eq!(a[r * t + c], b[r * t + c], "column {c} saw the future");
            }
        }
        // the final column must actually react to an earlier change
        let c2 = run(&store, &cfg, &[5, 6, 9, 8], AttnMode::Causal);
        let last_differs = (0..cfg.d).any(|r| a[r * t + 3] != c2[r * t + 3]);
        assert!(last_differs);
    }

    #[test]
    fn causal_single_token_gives_one_column() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 3);
        let out = run(&store, &cfg, &[5], AttnMode::Causal);
        assert_eq!(out.len(), cfg.d);
    }

    #[test]
    fn causal_gradient_of_future_embedding_is_zero() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 11);
        let ids = [5u32, 6, 7, 8];
        let probe_col = 1usize;
        let mut tape = Tape::new();
        let mut binder = Binder::new(true);
        let out = causal_encode(&mut tape, &mut binder, &store, "enc", &cfg, &ids).unwrap();
        let col = tape.slice_cols(out, probe_col, probe_col + 1).unwrap();
        // weight the column so the reduction is not constant under layer norm
        let weights = Tensor::from_vec(
            vec![cfg.d, 1],
            (0..cfg.d).map(|i| 0.3 + 0.7 * i as f64).collect(),
        )
        .unwrap();
        let w = tape.constant(weights);
        let weighted = tape.mul(col, w).unwrap();
        let loss = tape.sum(weighted);
        tape.backward(loss).unwrap();
        let mut grads = ParamStore::new();
        for (name, t) in store.iter() {
            grads.insert(name.clone(), t.clone());
        }
        binder.harvest(&tape, &mut grads).unwrap();
        let emb_grad = grads.get("enc.tok_emb").unwrap().grad().unwrap();
        let d = cfg.d;
        // tokens 7 and 8 sit strictly after the probed column
        for future in [7usize, 8] {
            for c in 0..d {
                assert_eq!(emb_grad[future * d + c], 0.0);
            }
        }
        let any_past = (0..d).any(|c| emb_grad[5 * d + c] != 0.0);
        assert!(any_past);
    }

    #[test]
    fn segment_blocks_reconstruct_full_output() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 5);
        let packed = pack_input(
            &[10, 11, 12],
            &[13, 14],
            &[15],
            &[16, 17],
            32,
            Some(SegmentTargets {
                t: 4,
                n: 2,
                h: 2,
                k: 2,
            }),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let out =
            encode_segments(&mut tape, &mut binder, &store, "enc", &cfg, &packed).unwrap();
        assert_eq!(tape.value(out.p).cols(), 4);
        assert_eq!(tape.value(out.q).cols(), 2);
        assert_eq!(tape.value(out.o).cols(), 2);
        assert_eq!(tape.value(out.e.unwrap()).cols(), 2);
        // cls + p + sep + q + sep + o + sep + e columns = full width
        let b = packed.bounds;
        let full = tape.value(out.full).clone();
        let blocks = [
            (0, 1),
            (b.p.0, b.p.1),
            (b.p.1, b.p.1 + 1),
            (b.q.0, b.q.1),
            (b.q.1, b.q.1 + 1),
            (b.o.0, b.o.1),
            (b.o.1, b.o.1 + 1),
            (b.e.0, b.e.1),
        ];
        let total: usize = blocks.iter().map(|(s, e)| e - s).sum();
        assert_eq!(total, full.cols());
        let mut rebuilt = vec![0.0; full.numel()];
        let mut off = 0;
        for (s, e) in blocks {
            for r in 0..cfg.d {
                for c in s..e {
                    rebuilt[r * full.cols() + off + (c - s)] = full.at(r, c);
                }
            }
            off += e - s;
        }
        assert_eq!(rebuilt, full.data());
    }

    #[test]
    fn shared_prefix_embeddings_are_deterministic() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 9);
        let a = run(&store, &cfg, &[5, 6, 7], AttnMode::Bidirectional);
        let b = run(&store, &cfg, &[5, 6, 7], AttnMode::Bidirectional);
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = tiny_cfg();
        let a = init_store(&cfg, 42);
        let b = init_store(&cfg, 42);
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn out_of_range_id_rejected() {
        let cfg = tiny_cfg();
        let store = init_store(&cfg, 1);
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let err = encode(
            &mut tape,
            &mut binder,
            &store,
            "enc",
            &cfg,
            &[5, 9999],
            AttnMode::Bidirectional,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            crate::numerics::TensorError::IndexOutOfRange { .. }
        ));
    }
}
