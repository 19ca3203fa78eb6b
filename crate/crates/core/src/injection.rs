//! Evidence injection: bilinear attention between segment features,
//! co-matching fusion, and assembly of the final representation.

use crate::encoder::EncoderOutput;
use crate::numerics::{Result, Scalar, Tape, Tensor, TensorError, VarId};

/// Bilinear attention weights: one shared matrix, or one per
/// (anchor, partner) pair for ablation.
#[derive(Debug, Clone, Copy)]
pub enum AttentionWeights {
    Shared(VarId),
    PerPair {
        p_q: VarId,
        p_o: VarId,
        p_e: VarId,
        q_p: VarId,
        q_o: VarId,
        q_e: VarId,
        o_p: VarId,
        o_q: VarId,
        o_e: VarId,
    },
}

/// Names of the nine per-pair attention parameters, anchor-major.
pub const PAIR_NAMES: [&str; 9] = [
    "p_q", "p_o", "p_e", "q_p", "q_o", "q_e", "o_p", "o_q", "o_e",
];

/// Attend from each target column to the source columns:
/// `S = softmax(H_targetᵀ W_g H_source)` row-wise, `G = H_source Sᵀ`.
/// Returns `(S, G)` with `S` a×b row-stochastic and `G` d×a.
pub fn bilinear_attend<F: Scalar>(
    tape: &mut Tape<F>,
    h_target: VarId,
    h_source: VarId,
    w_g: VarId,
) -> Result<(VarId, VarId)> {
    let d = tape.value(h_target).rows();
    if tape.value(h_source).rows() != d
        || tape.value(w_g).rows() != d
        || tape.value(w_g).cols() != d
    {
        return Err(TensorError::ShapeMismatch {
            lhs: tape.value(h_target).shape().to_vec(),
            rhs: tape.value(h_source).shape().to_vec(),
        });
    }
    let mixed = tape.matmul(w_g, h_source)?;
    let target_t = tape.transpose(h_target)?;
    let scores = tape.matmul(target_t, mixed)?;
    let s = tape.softmax(scores, 1)?;
    let s_t = tape.transpose(s)?;
    let g = tape.matmul(h_source, s_t)?;
    Ok((s, g))
}

/// Co-matching fusion: `M = relu(W_m [G ⊖ H ; G ⊙ H] + b_m ⊗ 1)`.
pub fn co_match<F: Scalar>(
    tape: &mut Tape<F>,
    g: VarId,
    h: VarId,
    w_m: VarId,
    b_m: VarId,
) -> Result<VarId> {
    if tape.value(g).shape() != tape.value(h).shape() {
        return Err(TensorError::ShapeMismatch {
            lhs: tape.value(g).shape().to_vec(),
            rhs: tape.value(h).shape().to_vec(),
        });
    }
    let diff = tape.sub(g, h)?;
    let prod = tape.mul(g, h)?;
    let stacked = tape.concat_rows(&[diff, prod])?;
    let affine = tape.matmul(w_m, stacked)?;
    let shifted = tape.add_bias(affine, b_m)?;
    Ok(tape.relu(shifted))
}

/// The nine attention-mixed relation tensors, one triple per anchor.
/// Partner order is (other anchors in P, Q, O order, then E).
#[derive(Debug, Clone, Copy)]
pub struct RelationSet {
    /// G tensors for anchor P with partners (Q, O, E); each d×t.
    pub p: [VarId; 3],
    /// Anchor Q with partners (P, O, E); each d×n.
    pub q: [VarId; 3],
    /// Anchor O with partners (P, Q, E); each d×h.
    pub o: [VarId; 3],
}

fn evidence_relation<F: Scalar>(
    tape: &mut Tape<F>,
    anchor: VarId,
    evidence: Option<VarId>,
    w_g: VarId,
) -> Result<VarId> {
    match evidence {
        Some(e) => Ok(bilinear_attend(tape, anchor, e, w_g)?.1),
        // empty evidence: the relation degrades to a zero tensor of
        // anchor width, so co-matching sees [0 ⊖ H; 0 ⊙ H]
        None => {
            let d = tape.value(anchor).rows();
            let a = tape.value(anchor).cols();
            Ok(tape.constant(Tensor::zeros(vec![d, a])?))
        }
    }
}

/// Build all nine relations for one option's encoder output.
pub fn build_relations<F: Scalar>(
    tape: &mut Tape<F>,
    enc: &EncoderOutput,
    weights: AttentionWeights,
) -> Result<RelationSet> {
    let pick = |slot: usize| match weights {
        AttentionWeights::Shared(w) => w,
        AttentionWeights::PerPair {
            p_q,
            p_o,
            p_e,
            q_p,
            q_o,
            q_e,
            o_p,
            o_q,
            o_e,
        } => [p_q, p_o, p_e, q_p, q_o, q_e, o_p, o_q, o_e][slot],
    };
    let p = [
        bilinear_attend(tape, enc.p, enc.q, pick(0))?.1,
        bilinear_attend(tape, enc.p, enc.o, pick(1))?.1,
        evidence_relation(tape, enc.p, enc.e, pick(2))?,
    ];
    let q = [
        bilinear_attend(tape, enc.q, enc.p, pick(3))?.1,
        bilinear_attend(tape, enc.q, enc.o, pick(4))?.1,
        evidence_relation(tape, enc.q, enc.e, pick(5))?,
    ];
    let o = [
        bilinear_attend(tape, enc.o, enc.p, pick(6))?.1,
        bilinear_attend(tape, enc.o, enc.q, pick(7))?.1,
        evidence_relation(tape, enc.o, enc.e, pick(8))?,
    ];
    Ok(RelationSet { p, q, o })
}

/// One option's co-matching blocks and their concatenation.
#[derive(Debug, Clone, Copy)]
pub struct OptionBlock {
    pub c_p: VarId,
    pub c_q: VarId,
    pub c_o: VarId,
    /// Horizontal concatenation `[C_P, C_Q, C_O]`, 3d × (t+n+h).
    pub c: VarId,
}

/// Fuse relations with their anchors and stack into the option block.
pub fn option_block<F: Scalar>(
    tape: &mut Tape<F>,
    enc: &EncoderOutput,
    rel: &RelationSet,
    w_m: VarId,
    b_m: VarId,
) -> Result<OptionBlock> {
    let stack3 = |tape: &mut Tape<F>, rels: &[VarId; 3], anchor: VarId| -> Result<VarId> {
        let ms = [
            co_match(tape, rels[0], anchor, w_m, b_m)?,
            co_match(tape, rels[1], anchor, w_m, b_m)?,
            co_match(tape, rels[2], anchor, w_m, b_m)?,
        ];
        tape.concat_rows(&ms)
    };
    let c_p = stack3(tape, &rel.p, enc.p)?;
    let c_q = stack3(tape, &rel.q, enc.q)?;
    let c_o = stack3(tape, &rel.o, enc.o)?;
    let c = tape.concat_cols(&[c_p, c_q, c_o])?;
    Ok(OptionBlock { c_p, c_q, c_o, c })
}

/// Concatenate the m option blocks in option order into F, 3d × m(t+n+h).
pub fn assemble_final<F: Scalar>(tape: &mut Tape<F>, blocks: &[OptionBlock]) -> Result<VarId> {
    let first = tape.value(blocks[0].c).shape().to_vec();
    for b in blocks {
        if tape.value(b.c).shape() != first {
            return Err(TensorError::ShapeMismatch {
                lhs: first,
                rhs: tape.value(b.c).shape().to_vec(),
            });
        }
    }
    let cs: Vec<VarId> = blocks.iter().map(|b| b.c).collect();
    tape.concat_cols(&cs)
}
