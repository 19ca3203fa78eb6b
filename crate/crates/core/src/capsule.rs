//! Answer head: multi-grain convolutional features over the final
//! representation, capsule construction via routing-by-agreement, margin
//! loss, and answer selection. A max-pooling head is kept as the ablation
//! baseline.

use crate::numerics::{Result, Scalar, Tape, Tensor, TensorError, VarId};

/// Kernels and biases of the two phrase-width convolutions.
#[derive(Debug, Clone, Copy)]
pub struct MultiGrainKernels {
    /// 3d × 6d kernel for window width 2.
    pub conv2: VarId,
    pub conv2_bias: VarId,
    /// 3d × 12d kernel for window width 4.
    pub conv4: VarId,
    pub conv4_bias: VarId,
}

/// Phrase-level features: width-2 and width-4 windows, concatenated.
#[derive(Debug, Clone, Copy)]
pub struct MultiGrainFeatures {
    pub r1: VarId,
    pub r2: VarId,
    /// `[R1, R2]`, 3d × m(t+n+h)/2.
    pub l: VarId,
}

/// Width-2 conv + width-2 pool and width-4 conv + identity pool over F.
/// F's width must be divisible by 4; callers pad segment widths upstream.
pub fn multigrain<F: Scalar>(
    tape: &mut Tape<F>,
    f: VarId,
    kernels: &MultiGrainKernels,
) -> Result<MultiGrainFeatures> {
    let w = tape.value(f).cols();
    if w % 4 != 0 {
        return Err(TensorError::WindowIndivisible { w, stride: 4 });
    }
    let c2 = tape.windowed_conv(f, kernels.conv2, 2, 2)?;
    let c2 = tape.add_bias(c2, kernels.conv2_bias)?;
    let r1 = tape.max_pool(c2, 2, 2)?;
    let c4 = tape.windowed_conv(f, kernels.conv4, 4, 4)?;
    let c4 = tape.add_bias(c4, kernels.conv4_bias)?;
    let r2 = tape.max_pool(c4, 1, 1)?;
    let l = tape.concat_cols(&[r1, r2])?;
    Ok(MultiGrainFeatures { r1, r2, l })
}

/// Column ranges of each option's features inside L (which lays out the m
/// width-2 blocks first, then the m width-4 blocks).
pub fn option_spans(m: usize, tnh: usize) -> Vec<Vec<(usize, usize)>> {
    let w4 = tnh / 4;
    (0..m)
        .map(|j| {
            vec![
                (j * w4, (j + 1) * w4),
                (m * w4 + j * w4, m * w4 + (j + 1) * w4),
            ]
        })
        .collect()
}

/// Which columns of L vote for which option capsule.
#[derive(Debug, Clone)]
pub enum RoutingScope {
    /// Every column of L routes to every option capsule; the coupling
    /// softmax lets capsules compete for each phrase feature.
    AllColumns,
    /// Each option capsule sees only its own columns (given as L column
    /// ranges per option). With a single output per input the coupling
    /// softmax is constant, so iterations are inert in this mode.
    PerOption(Vec<Vec<(usize, usize)>>),
}

#[derive(Debug, Clone)]
pub struct RoutingConfig {
    pub iterations: usize,
    pub scope: RoutingScope,
}

/// Vote maps turning L columns into capsule votes.
#[derive(Debug, Clone)]
pub enum RoutingWeights {
    /// One `W_j` (d_c × 3d) per option, shared across input positions.
    PerOption(Vec<VarId>),
    /// The full per-pair form: `maps[j][i]` is the d_c × 3d map from input
    /// column i to option capsule j. Requires a fixed input-column count.
    PerPair(Vec<Vec<VarId>>),
}

impl RoutingWeights {
    fn num_options(&self) -> usize {
        match self {
            RoutingWeights::PerOption(ws) => ws.len(),
            RoutingWeights::PerPair(maps) => maps.len(),
        }
    }

    /// Votes of every input column for option `j`: a d_c × n_in block.
    fn votes_for<F: Scalar>(&self, tape: &mut Tape<F>, l: VarId, j: usize) -> Result<VarId> {
        match self {
            RoutingWeights::PerOption(ws) => tape.matmul(ws[j], l),
            RoutingWeights::PerPair(maps) => {
                let n_in = tape.value(l).cols();
                if maps[j].len() != n_in {
                    return Err(TensorError::ShapeMismatch {
                        lhs: vec![maps[j].len()],
                        rhs: vec![n_in],
                    });
                }
                let mut cols = Vec::with_capacity(n_in);
                for (i, &w) in maps[j].iter().enumerate() {
                    let col = tape.slice_cols(l, i, i + 1)?;
                    cols.push(tape.matmul(w, col)?);
                }
                tape.concat_cols(&cols)
            }
        }
    }
}

/// Routing results, with the coupling matrix of every iteration retained
/// for inspection.
#[derive(Debug, Clone)]
pub struct RoutingOutcome {
    /// Output capsules, d_c × m.
    pub capsules: VarId,
    /// Capsule norms, 1 × m.
    pub norms: VarId,
    /// Row-stochastic couplings (inputs × m), one per iteration.
    pub coupling_trace: Vec<VarId>,
}

/// Routing-by-agreement: couplings start uniform (zero logits) and shift
/// toward capsules whose output agrees with an input's vote.
pub fn route<F: Scalar>(
    tape: &mut Tape<F>,
    l: VarId,
    weights: &RoutingWeights,
    cfg: &RoutingConfig,
) -> Result<RoutingOutcome> {
    if cfg.iterations < 1 {
        return Err(TensorError::NoIterations);
    }
    let m = weights.num_options();
    match &cfg.scope {
        RoutingScope::AllColumns => {
            let n_in = tape.value(l).cols();
            let votes: Vec<VarId> = (0..m)
                .map(|j| weights.votes_for(tape, l, j))
                .collect::<Result<_>>()?;
            let mut logits = tape.constant(Tensor::zeros(vec![n_in, m])?);
            let mut trace = Vec::with_capacity(cfg.iterations);
            let mut capsules = None;
            for iter in 0..cfg.iterations {
                let coupling = tape.softmax(logits, 1)?;
                trace.push(coupling);
                let mut s_cols = Vec::with_capacity(m);
                for (j, &v) in votes.iter().enumerate() {
                    let c_j = tape.slice_cols(coupling, j, j + 1)?;
                    s_cols.push(tape.matmul(v, c_j)?);
                }
                let s = tape.concat_cols(&s_cols)?;
                let v_caps = tape.squash_cols(s)?;
                capsules = Some(v_caps);
                if iter + 1 < cfg.iterations {
                    let mut agree_cols = Vec::with_capacity(m);
                    for (j, &vt) in votes.iter().enumerate() {
                        let v_j = tape.slice_cols(v_caps, j, j + 1)?;
                        let vt_t = tape.transpose(vt)?;
                        agree_cols.push(tape.matmul(vt_t, v_j)?);
                    }
                    let agree = tape.concat_cols(&agree_cols)?;
                    logits = tape.add(logits, agree)?;
                }
            }
            let capsules = capsules.expect("at least one iteration");
            let norms = tape.col_norms(capsules)?;
            Ok(RoutingOutcome {
                capsules,
                norms,
                coupling_trace: trace,
            })
        }
        RoutingScope::PerOption(spans) => {
            let mut caps = Vec::with_capacity(m);
            for (j, ranges) in spans.iter().enumerate() {
                let slices: Vec<VarId> = ranges
                    .iter()
                    .map(|&(s, e)| tape.slice_cols(l, s, e))
                    .collect::<Result<_>>()?;
                let own = tape.concat_cols(&slices)?;
                let votes = weights.votes_for(tape, own, j)?;
                let n_own = tape.value(own).cols();
                let ones = tape.constant(Tensor::filled(vec![n_own, 1], F::one())?);
                let s_j = tape.matmul(votes, ones)?;
                caps.push(s_j);
            }
            let s = tape.concat_cols(&caps)?;
            let capsules = tape.squash_cols(s)?;
            let norms = tape.col_norms(capsules)?;
            Ok(RoutingOutcome {
                capsules,
                norms,
                coupling_trace: Vec::new(),
            })
        }
    }
}

/// Thresholds for the margin loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CapsuleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label must be one-hot over {expected} options, got {got:?}")]
    MalformedLabel { expected: usize, got: Vec<f64> },
}

/// Per-capsule hinge-squared loss: the correct capsule's norm is pushed
/// above `m_plus`, the rest below `m_minus` (down-weighted by `lambda`).
pub fn margin_loss<F: Scalar>(
    tape: &mut Tape<F>,
    capsules: VarId,
    label: &[f64],
    params: &MarginLossParams,
) -> std::result::Result<VarId, CapsuleError> {
    let m = tape.value(capsules).cols();
    let ones_count = label.iter().filter(|&&y| y == 1.0).count();
    if label.len() != m || ones_count != 1 || label.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(CapsuleError::MalformedLabel {
            expected: m,
            got: label.to_vec(),
        });
    }
    let norms = tape.col_norms(capsules)?;
    let y = tape.constant(Tensor::from_vec(
        vec![1, m],
        label.iter().map(|&v| F::of(v)).collect(),
    )?);
    let not_y = tape.constant(Tensor::from_vec(
        vec![1, m],
        label.iter().map(|&v| F::of(1.0 - v)).collect(),
    )?);
    let m_plus = tape.constant(Tensor::filled(vec![1, m], F::of(params.m_plus))?);
    let m_minus = tape.constant(Tensor::filled(vec![1, m], F::of(params.m_minus))?);

    let pos_gap = tape.sub(m_plus, norms)?;
    let pos = tape.relu(pos_gap);
    let pos_sq = tape.mul(pos, pos)?;
    let pos_masked = tape.mul(pos_sq, y)?;
    let pos_term = tape.sum(pos_masked);

    let neg_gap = tape.sub(norms, m_minus)?;
    let neg = tape.relu(neg_gap);
    let neg_sq = tape.mul(neg, neg)?;
    let neg_masked = tape.mul(neg_sq, not_y)?;
    let neg_sum = tape.sum(neg_masked);
    let neg_term = tape.scale(neg_sum, F::of(params.lambda));

    Ok(tape.add(pos_term, neg_term)?)
}

/// Index of the option with the largest capsule norm; ties break toward the
/// lowest index.
pub fn predict(norms: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in norms.iter().enumerate().skip(1) {
        if v > norms[best] {
            best = j;
        }
    }
    best
}

/// Ablation head: per-option score is the maximum of a learned linear score
/// over that option's L columns. Returns the 1×m logits row; training puts
/// a softmax over options via cross-entropy.
pub fn maxpool_head<F: Scalar>(
    tape: &mut Tape<F>,
    l: VarId,
    spans: &[Vec<(usize, usize)>],
    w_score: VarId,
) -> Result<VarId> {
    let scores = tape.matmul(w_score, l)?;
    let mut logits = Vec::with_capacity(spans.len());
    for ranges in spans {
        let slices: Vec<VarId> = ranges
            .iter()
            .map(|&(s, e)| tape.slice_cols(scores, s, e))
            .collect::<Result<_>>()?;
        let own = tape.concat_cols(&slices)?;
        logits.push(tape.max_all(own));
    }
    tape.concat_cols(&logits)
}
