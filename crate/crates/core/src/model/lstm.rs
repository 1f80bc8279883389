//! Single-layer LSTM with a logistic read-out head.
//!
//! Gate blocks are stacked `[input, forget, candidate, output]` along the
//! rows of the weight matrices. Sequences of equal length are processed
//! together: each time step is one matrix product over the whole group, and
//! the input projections and weight gradients of all steps are computed in a
//! single product each.
//!
//! Everything is generic over the element type; `f64` is the reference and
//! `f32` is available for faster training.

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::kernel::{PackedRhs, Real};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<F = f64> {
    input_dim: usize,
    hidden_dim: usize,
    /// `(4H, I)`
    pub w_input: Array2<F>,
    /// `(4H, H)`
    pub w_recurrent: Array2<F>,
    /// `4H`
    pub bias: Array1<F>,
    /// `H`
    pub head_weights: Array1<F>,
    pub head_bias: F,
}

impl<F: Real> LstmParams<F> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            w_input: Array2::from_elem((4 * hidden_dim, input_dim), F::from_f64(0.0)),
            w_recurrent: Array2::from_elem((4 * hidden_dim, hidden_dim), F::from_f64(0.0)),
            bias: Array1::from_elem(4 * hidden_dim, F::from_f64(0.0)),
            head_weights: Array1::from_elem(hidden_dim, F::from_f64(0.0)),
            head_bias: F::from_f64(0.0),
        }
    }

    /// Uniform in `±1/sqrt(hidden_dim)`, forget-gate bias set to 1.
    ///
    /// Values are drawn in `f64` and rounded, so both precisions start from
    /// the same point for a given generator state.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = LstmParams::zeros(input_dim, hidden_dim);
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        for slice in p.slices_mut() {
            for v in slice {
                *v = F::from_f64(rng.random_range(-bound..=bound));
            }
        }
        p.bias
            .slice_mut(s![hidden_dim..2 * hidden_dim])
            .fill(F::from_f64(1.0));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Every parameter block as a flat slice, in a fixed order.
    pub fn slices(&self) -> [&[F]; 5] {
        [
            self.w_input.as_slice().expect("standard layout"),
            self.w_recurrent.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
            self.head_weights.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.head_bias),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 5] {
        [
            self.w_input.as_slice_mut().expect("standard layout"),
            self.w_recurrent.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.head_weights.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.head_bias),
        ]
    }

    /// Same parameters in another element type.
    pub fn cast<G: Real>(&self) -> LstmParams<G> {
        let conv = |x: &F| G::from_f64(x.to_f64());
        LstmParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_input: self.w_input.map(conv),
            w_recurrent: self.w_recurrent.map(conv),
            bias: self.bias.map(conv),
            head_weights: self.head_weights.map(conv),
            head_bias: conv(&self.head_bias),
        }
    }

    /// `w_recurrent` transposed, for the per-step forward product.
    fn pack_forward(&self) -> PackedRhs<F> {
        let w = self.w_recurrent.t();
        PackedRhs::from_fn(self.hidden_dim, 4 * self.hidden_dim, |r, c| w[[r, c]])
    }

    /// `w_recurrent` as is, for the per-step backward product.
    fn pack_backward(&self) -> PackedRhs<F> {
        PackedRhs::from_fn(4 * self.hidden_dim, self.hidden_dim, |r, c| self.w_recurrent[[r, c]])
    }

    fn check_sequence(&self, seq: ArrayView2<F>) -> Result<()> {
        if seq.nrows() == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        if seq.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "sequence has {} features per step, model expects {}",
                seq.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

impl LstmParams<f64> {
    /// Rebuilds parameters from flat arrays, checking every shape.
    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        w_input: Vec<f64>,
        w_recurrent: Vec<f64>,
        bias: Vec<f64>,
        head_weights: Vec<f64>,
        head_bias: f64,
    ) -> Result<Self> {
        let shape_err = |what: &str| Error::invalid(format!("{what} has the wrong number of values"));
        let h4 = 4 * hidden_dim;
        let p = LstmParams {
            input_dim,
            hidden_dim,
            w_input: Array2::from_shape_vec((h4, input_dim), w_input)
                .map_err(|_| shape_err("w_input"))?,
            w_recurrent: Array2::from_shape_vec((h4, hidden_dim), w_recurrent)
                .map_err(|_| shape_err("w_recurrent"))?,
            bias: (bias.len() == h4)
                .then(|| Array1::from(bias))
                .ok_or_else(|| shape_err("bias"))?,
            head_weights: (head_weights.len() == hidden_dim)
                .then(|| Array1::from(head_weights))
                .ok_or_else(|| shape_err("head_weights"))?,
            head_bias,
        };
        if !p.is_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// One labelled training example: a `(steps, features)` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sequence: Array2<f64>,
    pub label: bool,
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    let one = F::from_f64(1.0);
    one / (one + (-x).exp())
}

/// Weighted binary cross-entropy of a single prediction.
pub fn weighted_bce(prob: f64, label: bool, pos_weight: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label {
        -pos_weight * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `(1 - p) / p` for the positive fraction `p` of `labels`.
pub fn balanced_pos_weight(labels: impl IntoIterator<Item = bool>) -> Result<f64> {
    let (mut pos, mut total) = (0usize, 0usize);
    for l in labels {
        pos += usize::from(l);
        total += 1;
    }
    if pos == 0 || pos == total {
        return Err(Error::invalid(
            "class weighting needs both labels in the training set",
        ));
    }
    let p = pos as f64 / total as f64;
    Ok((1.0 - p) / p)
}

/// Activations of one equal-length group, kept for the backward pass.
struct GroupTrace<F> {
    steps: usize,
    batch: usize,
    /// `(T*B, I)`, time-major.
    inputs: Array2<F>,
    /// Activated gates, `(T*B, 4H)`.
    gates: Array2<F>,
    /// Cell states, `(T*B, H)`.
    cells: Array2<F>,
    /// `tanh` of the cell states, `(T*B, H)`.
    cells_tanh: Array2<F>,
    /// Hidden states, `(T*B, H)`.
    hidden: Array2<F>,
    logits: Array1<F>,
}

fn stack_time_major<F: Real>(input_dim: usize, seqs: &[ArrayView2<F>]) -> Array2<F> {
    let steps = seqs[0].nrows();
    let batch = seqs.len();
    let mut inputs = Array2::from_elem((steps * batch, input_dim), F::from_f64(0.0));
    for (b, seq) in seqs.iter().enumerate() {
        for t in 0..steps {
            inputs.row_mut(t * batch + b).assign(&seq.row(t));
        }
    }
    inputs
}

/// Runs a group of sequences that all have the same number of steps.
///
/// With `keep_trace == false` only the logits are produced and per-step
/// activations are discarded as the recursion advances.
fn run_group<F: Real>(
    params: &LstmParams<F>,
    packed: &PackedRhs<F>,
    seqs: &[ArrayView2<F>],
    keep_trace: bool,
) -> GroupTrace<F> {
    let h = params.hidden_dim;
    let steps = seqs[0].nrows();
    let batch = seqs.len();
    let zero = F::from_f64(0.0);
    let inputs = stack_time_major(params.input_dim, seqs);

    let mut gates = inputs.dot(&params.w_input.t());
    gates += &params.bias;

    let trace_rows = if keep_trace { steps * batch } else { batch };
    let mut cells = Array2::from_elem((trace_rows, h), zero);
    let mut cells_tanh = Array2::from_elem((trace_rows, h), zero);
    let mut hidden = Array2::from_elem((trace_rows, h), zero);

    let mut h_prev = Array2::from_elem((batch, h), zero);
    let mut c_prev = Array2::from_elem((batch, h), zero);

    for t in 0..steps {
        let rows = t * batch..(t + 1) * batch;
        let mut z = gates.slice_mut(s![rows.clone(), ..]);
        if t > 0 {
            let z = z.as_slice_mut().expect("contiguous rows");
            let hp = h_prev.as_slice().expect("standard layout");
            F::matmul_packed(hp, batch, packed, z, true);
        }
        let out_rows = if keep_trace { rows } else { 0..batch };
        let mut c_out = cells.slice_mut(s![out_rows.clone(), ..]);
        let mut tc_out = cells_tanh.slice_mut(s![out_rows.clone(), ..]);
        let mut h_out = hidden.slice_mut(s![out_rows, ..]);

        for b in 0..batch {
            let mut z_row = z.row_mut(b);
            let zr = z_row.as_slice_mut().expect("contiguous row");
            let cp = c_prev.row(b);
            let cp = cp.as_slice().expect("contiguous row");
            let mut c_row = c_out.row_mut(b);
            let c_row = c_row.as_slice_mut().expect("contiguous row");
            let mut tc_row = tc_out.row_mut(b);
            let tc_row = tc_row.as_slice_mut().expect("contiguous row");
            let mut h_row = h_out.row_mut(b);
            let h_row = h_row.as_slice_mut().expect("contiguous row");
            for j in 0..h {
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[h + j]);
                let g_g = zr[2 * h + j].tanh();
                let o_g = sigmoid(zr[3 * h + j]);
                zr[j] = i_g;
                zr[h + j] = f_g;
                zr[2 * h + j] = g_g;
                zr[3 * h + j] = o_g;
                let c = f_g * cp[j] + i_g * g_g;
                let tc = c.tanh();
                c_row[j] = c;
                tc_row[j] = tc;
                h_row[j] = o_g * tc;
            }
        }
        h_prev.assign(&h_out);
        c_prev.assign(&c_out);
    }

    let logits = h_prev.dot(&params.head_weights) + params.head_bias;
    GroupTrace {
        steps,
        batch,
        inputs,
        gates,
        cells,
        cells_tanh,
        hidden,
        logits,
    }
}

/// Backpropagates `d_logits` through a traced group, adding into `grad`.
fn backward_group<F: Real>(
    params: &LstmParams<F>,
    packed: &PackedRhs<F>,
    trace: &GroupTrace<F>,
    d_logits: &Array1<F>,
    grad: &mut LstmParams<F>,
) {
    let h = params.hidden_dim;
    let (steps, batch) = (trace.steps, trace.batch);
    let (zero, one) = (F::from_f64(0.0), F::from_f64(1.0));
    let last = (steps - 1) * batch..steps * batch;

    let h_last = trace.hidden.slice(s![last, ..]);
    grad.head_weights += &h_last.t().dot(d_logits);
    grad.head_bias += d_logits.sum();

    // d_hidden starts as d_logit * head_weights for every sample
    let mut d_hidden = Array2::from_shape_fn((batch, h), |(b, j)| {
        d_logits[b] * params.head_weights[j]
    });
    let mut d_cell = Array2::from_elem((batch, h), zero);
    let mut d_gates = Array2::from_elem((steps * batch, 4 * h), zero);

    for t in (0..steps).rev() {
        let rows = t * batch..(t + 1) * batch;
        let gates = trace.gates.slice(s![rows.clone(), ..]);
        let cells_tanh = trace.cells_tanh.slice(s![rows.clone(), ..]);
        let mut dz = d_gates.slice_mut(s![rows, ..]);

        for b in 0..batch {
            let g = gates.row(b);
            let g = g.as_slice().expect("contiguous row");
            let tc = cells_tanh.row(b);
            let tc = tc.as_slice().expect("contiguous row");
            let c_prev = (t > 0).then(|| trace.cells.row((t - 1) * batch + b));
            let c_prev = c_prev.as_ref().map(|r| r.as_slice().expect("contiguous row"));
            let dh = d_hidden.row(b);
            let dh = dh.as_slice().expect("contiguous row");
            let mut dc_row = d_cell.row_mut(b);
            let dc_state = dc_row.as_slice_mut().expect("contiguous row");
            let mut dz_row = dz.row_mut(b);
            let dzr = dz_row.as_slice_mut().expect("contiguous row");
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let d_o = dh[j] * tc[j];
                let dc = dc_state[j] + dh[j] * o_g * (one - tc[j] * tc[j]);
                let cp = c_prev.map_or(zero, |r| r[j]);
                dzr[j] = dc * g_g * i_g * (one - i_g);
                dzr[h + j] = dc * cp * f_g * (one - f_g);
                dzr[2 * h + j] = dc * i_g * (one - g_g * g_g);
                dzr[3 * h + j] = d_o * o_g * (one - o_g);
                dc_state[j] = dc * f_g;
            }
        }
        if t > 0 {
            let dz = dz.as_slice().expect("contiguous rows");
            let dh = d_hidden.as_slice_mut().expect("standard layout");
            F::matmul_packed(dz, batch, packed, dh, false);
        }
    }

    general_mat_mul(one, &d_gates.t(), &trace.inputs, one, &mut grad.w_input);
    if steps > 1 {
        let dz_later = d_gates.slice(s![batch.., ..]);
        let h_earlier = trace.hidden.slice(s![..(steps - 1) * batch, ..]);
        general_mat_mul(one, &dz_later.t(), &h_earlier, one, &mut grad.w_recurrent);
    }
    grad.bias += &d_gates.sum_axis(Axis(0));
}

/// Groups sample indices by sequence length, shortest first.
fn group_by_length(lengths: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, len) in lengths.enumerate() {
        groups.entry(len).or_default().push(i);
    }
    groups
}

/// Probability that `sequence` (steps × features) is a positive example.
pub fn forward<F: Real>(params: &LstmParams<F>, sequence: ArrayView2<F>) -> Result<f64> {
    params.check_sequence(sequence)?;
    let trace = run_group(params, &params.pack_forward(), &[sequence], false);
    Ok(sigmoid(trace.logits[0].to_f64()))
}

/// Probabilities for many sequences, in input order.
pub fn predict<F: Real>(params: &LstmParams<F>, sequences: &[ArrayView2<F>]) -> Result<Vec<f64>> {
    /// Caps group size so the per-step matrices stay cache friendly.
    const CHUNK: usize = 256;
    for s in sequences {
        params.check_sequence(*s)?;
    }
    let packed = params.pack_forward();
    let mut probs = vec![0.0; sequences.len()];
    for idx in group_by_length(sequences.iter().map(|s| s.nrows())).into_values() {
        for chunk in idx.chunks(CHUNK) {
            let views: Vec<ArrayView2<F>> = chunk.iter().map(|&i| sequences[i]).collect();
            let trace = run_group(params, &packed, &views, false);
            for (&i, &z) in chunk.iter().zip(&trace.logits) {
                probs[i] = sigmoid(z.to_f64());
            }
        }
    }
    Ok(probs)
}

/// Mean weighted loss of a batch, its gradient, and the per-sample probabilities.
#[derive(Clone, Debug)]
pub struct BatchResult<F = f64> {
    pub loss: f64,
    pub gradient: LstmParams<F>,
    pub probs: Vec<f64>,
}

pub fn loss_and_gradient<F: Real>(
    params: &LstmParams<F>,
    batch: &[(ArrayView2<F>, bool)],
    pos_weight: f64,
) -> Result<BatchResult<F>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for (s, _) in batch {
        params.check_sequence(*s)?;
    }
    let packed_fwd = params.pack_forward();
    let packed_bwd = params.pack_backward();
    let scale = 1.0 / batch.len() as f64;
    let mut gradient = LstmParams::zeros(params.input_dim, params.hidden_dim);
    let mut probs = vec![0.0; batch.len()];
    let mut loss = 0.0;

    for idx in group_by_length(batch.iter().map(|(s, _)| s.nrows())).into_values() {
        let views: Vec<ArrayView2<F>> = idx.iter().map(|&i| batch[i].0).collect();
        let trace = run_group(params, &packed_fwd, &views, true);
        let mut d_logits = Array1::from_elem(idx.len(), F::from_f64(0.0));
        for (k, &i) in idx.iter().enumerate() {
            let p = sigmoid(trace.logits[k].to_f64());
            let label = batch[i].1;
            probs[i] = p;
            loss += weighted_bce(p, label, pos_weight);
            let d = if label { -pos_weight * (1.0 - p) } else { p };
            d_logits[k] = F::from_f64(scale * d);
        }
        backward_group(params, &packed_bwd, &trace, &d_logits, &mut gradient);
    }
    Ok(BatchResult {
        loss: loss * scale,
        gradient,
        probs,
    })
}

/// Exact gradient of the mean weighted loss over `batch`.
pub fn gradients<F: Real>(
    params: &LstmParams<F>,
    batch: &[(ArrayView2<F>, bool)],
    pos_weight: f64,
) -> Result<LstmParams<F>> {
    loss_and_gradient(params, batch, pos_weight).map(|r| r.gradient)
}

/// Mean weighted loss over `batch`, without gradients.
pub fn batch_loss<F: Real>(
    params: &LstmParams<F>,
    batch: &[(ArrayView2<F>, bool)],
    pos_weight: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let seqs: Vec<ArrayView2<F>> = batch.iter().map(|(s, _)| *s).collect();
    let probs = predict(params, &seqs)?;
    let total: f64 = probs
        .iter()
        .zip(batch)
        .map(|(&p, (_, l))| weighted_bce(p, *l, pos_weight))
        .sum();
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> LstmParams {
        // input 2, hidden 2; rows ordered [i0 i1 f0 f1 g0 g1 o0 o1]
        let w_input = vec![
            0.1, -0.2, //
            0.3, 0.05, //
            -0.1, 0.2, //
            0.15, 0.1, //
            0.4, -0.3, //
            -0.25, 0.35, //
            0.2, 0.1, //
            -0.05, 0.3,
        ];
        let w_recurrent = vec![
            0.05, 0.1, //
            -0.1, 0.2, //
            0.3, -0.05, //
            0.1, 0.1, //
            -0.2, 0.15, //
            0.25, -0.1, //
            0.05, 0.05, //
            0.1, -0.2,
        ];
        let bias = vec![0.0, 0.1, 1.0, 1.0, -0.1, 0.05, 0.2, -0.2];
        LstmParams::from_parts(2, 2, w_input, w_recurrent, bias, vec![0.7, -0.4], 0.1).unwrap()
    }

    /// Worst relative error of the analytic gradient against central
    /// differences over every parameter.
    fn worst_fd_error(input_dim: usize, hidden_dim: usize, steps: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LstmParams::init(input_dim, hidden_dim, &mut rng);
        p.head_bias = rng.random_range(-0.5..0.5);
        let seqs: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((steps, input_dim), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let batch = [(seqs[0].view(), true), (seqs[1].view(), false)];
        let analytic = gradients(&p, &batch, 2.5).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for block in 0..5 {
            for k in 0..p.slices()[block].len() {
                let orig = p.slices()[block][k];
                p.slices_mut()[block][k] = orig + h;
                let up = batch_loss(&p, &batch, 2.5).unwrap();
                p.slices_mut()[block][k] = orig - h;
                let down = batch_loss(&p, &batch, 2.5).unwrap();
                p.slices_mut()[block][k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.slices()[block][k];
                let denom = a.abs().max(numeric.abs()).max(FD_FLOOR);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }

    /// Denominator floor. Central differences at h = 1e-6 carry about 1e-10
    /// of rounding noise, which swamps components much smaller than this.
    const FD_FLOOR: f64 = 1e-5;

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, (i, h, t)) in [(1, (4, 8, 3)), (2, (3, 5, 7)), (3, (4, 8, 36))] {
            let err = worst_fd_error(i, h, t, seed);
            assert!(err < 1e-4, "seed {seed}: worst relative error {err:e}");
        }
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let p = LstmParams::zeros(3, 4);
        let seq = array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]];
        assert_eq!(forward(&p, seq.view()).unwrap(), 0.5);
    }

    #[test]
    fn matches_hand_unrolled_recursion() {
        // Frozen from an independent scalar unroll (python, float64) of the
        // same parameters and inputs.
        let p = small_params();
        let seq = array![[0.5, -1.0], [1.0, 0.25], [-0.5, 0.75]];
        let prob = forward(&p, seq.view()).unwrap();
        assert!((prob - EXPECTED_SMALL).abs() < 1e-14, "{prob}");
    }

    /// See `matches_hand_unrolled_recursion`.
    const EXPECTED_SMALL: f64 = 0.518_275_412_515_672_4;

    #[test]
    fn order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::init(3, 5, &mut rng);
        let seq = array![[1.0, 0.0, 0.2], [0.0, 1.0, -0.4], [0.3, 0.3, 0.9]];
        let rev = array![[0.3, 0.3, 0.9], [0.0, 1.0, -0.4], [1.0, 0.0, 0.2]];
        let a = forward(&p, seq.view()).unwrap();
        let b = forward(&p, rev.view()).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn input_errors() {
        let p = LstmParams::<f64>::zeros(3, 2);
        assert!(forward(&p, Array2::zeros((0, 3)).view()).is_err());
        assert!(forward(&p, Array2::zeros((2, 4)).view()).is_err());
        assert!(gradients(&p, &[], 1.0).is_err());
    }

    #[test]
    fn loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((weighted_bce(0.5, true, 1.0) - ln2).abs() < 1e-15);
        assert!((weighted_bce(0.5, false, 1.0) - ln2).abs() < 1e-15);
        // unit weight is plain cross-entropy
        for p in [0.1, 0.3, 0.9] {
            assert_eq!(weighted_bce(p, true, 1.0), -(p as f64).ln());
            assert_eq!(weighted_bce(p, false, 1.0), -(1.0 - p as f64).ln());
        }
        assert!(weighted_bce(0.0, true, 1.0).is_finite());
        assert!(weighted_bce(1.0, false, 1.0).is_finite());
        assert!((weighted_bce(0.5, true, 3.0) - 3.0 * ln2).abs() < 1e-15);
    }

    #[test]
    fn repair_positive_rate_weight() {
        let labels = (0..1000).map(|i| i < 272);
        let w = balanced_pos_weight(labels).unwrap();
        assert!((w - 0.728 / 0.272).abs() < 1e-12);
        assert!((w - 2.676).abs() < 1e-3);
        assert!(balanced_pos_weight([true, true]).is_err());
    }

    #[test]
    fn predict_preserves_order_across_length_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LstmParams::init(2, 3, &mut rng);
        let seqs: Vec<Array2<f64>> = [3usize, 1, 3, 2]
            .iter()
            .map(|&n| Array2::from_shape_fn((n, 2), |(t, j)| (t + j) as f64 * 0.3 - 0.2))
            .collect();
        let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
        let batch = predict(&p, &views).unwrap();
        for (s, &b) in seqs.iter().zip(&batch) {
            assert_eq!(forward(&p, s.view()).unwrap(), b);
        }
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(3, 4, &mut rng);
        let seq = Array2::from_shape_fn((5, 3), |(t, j)| ((t * 3 + j) as f64).sin());
        let one = gradients(&p, &[(seq.view(), true)], 2.0).unwrap();
        let two = gradients(&p, &[(seq.view(), true), (seq.view(), true)], 2.0).unwrap();
        for (a, b) in one.slices().iter().zip(two.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn saturated_prediction_has_no_head_gradient() {
        let mut p = LstmParams::zeros(2, 3);
        p.head_bias = 60.0;
        let seq = Array2::from_elem((4, 2), 0.5);
        let g = gradients(&p, &[(seq.view(), true)], 1.0).unwrap();
        assert_eq!(forward(&p, seq.view()).unwrap(), 1.0);
        let head_norm = g.head_weights.iter().map(|v| v * v).sum::<f64>().sqrt() + g.head_bias.abs();
        assert!(head_norm < 1e-9, "{head_norm}");
    }

    #[test]
    fn single_precision_tracks_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = LstmParams::<f64>::init(6, 20, &mut rng);
        let p32: LstmParams<f32> = p.cast();
        let seq = Array2::from_shape_fn((30, 6), |_| rng.random_range(0.0..1.0));
        let seq32 = seq.map(|&v| v as f32);
        let a = forward(&p, seq.view()).unwrap();
        let b = forward(&p32, seq32.view()).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");

        let g = gradients(&p, &[(seq.view(), true)], 1.5).unwrap();
        let g32 = gradients(&p32, &[(seq32.view(), true)], 1.5).unwrap();
        let scale = g.slices().iter().flat_map(|s| s.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in g.slices().iter().flat_map(|s| s.iter()).zip(g32.slices().iter().flat_map(|s| s.iter())) {
            assert!((x - f64::from(*y)).abs() < 1e-4 * scale);
        }
    }
}
