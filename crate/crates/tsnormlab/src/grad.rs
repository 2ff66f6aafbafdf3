//! Hand-derived backward pass through the encoder and heads, the two losses,
//! Adam, central-difference gradient verification, and the training loop.

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, RngStream};
use crate::model::{
    encoder_forward, init_weights, pooled_output, ForwardTrace, ModelConfig, ModelWeights,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One tensor per [`ModelWeights`] tensor, same shapes.
pub type Gradients = ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

/// A tokenized training example. Classification uses `label` (vocabulary
/// index), forecasting uses `target` (the values the head should emit).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Matrix,
    pub label: Option<usize>,
    pub target: Option<Vec<f64>>,
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|v| v / sum).collect()
}

/// Per-example loss and the gradient of the *batch mean* loss with respect
/// to this example's head output.
fn loss_and_dout(
    out: &[f64],
    example: &TrainExample,
    kind: LossKind,
    batch_len: usize,
    index: usize,
) -> Result<(f64, Vec<f64>)> {
    let b = batch_len as f64;
    match kind {
        LossKind::CrossEntropy => {
            let label = example.label.ok_or_else(|| {
                Error::Config(format!("cross-entropy needs a label (instance {index})"))
            })?;
            if label >= out.len() {
                return Err(Error::ShapeMismatch {
                    context: format!("label at instance {index}"),
                    left: label.to_string(),
                    right: format!("{} classes", out.len()),
                });
            }
            let p = softmax_vec(out);
            let loss = -p[label].max(f64::MIN_POSITIVE).ln();
            let mut dout = p;
            dout[label] -= 1.0;
            dout.iter_mut().for_each(|v| *v /= b);
            Ok((loss, dout))
        }
        LossKind::SquaredError => {
            let target = example.target.as_ref().ok_or_else(|| {
                Error::Config(format!("squared-error needs a target (instance {index})"))
            })?;
            if target.len() != out.len() {
                return Err(Error::ShapeMismatch {
                    context: format!("target at instance {index}"),
                    left: target.len().to_string(),
                    right: out.len().to_string(),
                });
            }
            let k = out.len() as f64;
            let mut loss = 0.0;
            let mut dout = vec![0.0; out.len()];
            for (j, (o, t)) in out.iter().zip(target).enumerate() {
                let diff = o - t;
                loss += diff * diff / k;
                dout[j] = 2.0 * diff / (k * b);
            }
            Ok((loss, dout))
        }
    }
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
        *d += s;
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            out.values_mut()[j] += v;
        }
    }
    out
}

/// Backward through one layer norm row block:
/// `dx = inv_std * (dy - mean(dy) - y * mean(dy . y))` per row.
fn layer_norm_backward(dy: &Matrix, y: &Matrix, inv_std: &[f64]) -> Matrix {
    let d = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for i in 0..dy.rows() {
        let dy_row = dy.row(i);
        let y_row = y.row(i);
        let m1: f64 = dy_row.iter().sum::<f64>() / d;
        let m2: f64 = dy_row.iter().zip(y_row).map(|(a, b)| a * b).sum::<f64>() / d;
        let s = inv_std[i];
        let dx_row = dx.row_mut(i);
        for j in 0..dy_row.len() {
            dx_row[j] = s * (dy_row[j] - m1 - y_row[j] * m2);
        }
    }
    dx
}

/// Backward through row-wise softmax: `ds = p . (dp - (dp . p))` per row.
fn softmax_backward(dp: &Matrix, p: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(dp.rows(), dp.cols());
    for i in 0..dp.rows() {
        let dp_row = dp.row(i);
        let p_row = p.row(i);
        let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
        let ds_row = ds.row_mut(i);
        for j in 0..dp_row.len() {
            ds_row[j] = p_row[j] * (dp_row[j] - dot);
        }
    }
    ds
}

/// Accumulate one example's weight gradients given the gradient of the loss
/// with respect to the head output.
fn backward_example(
    cfg: &ModelConfig,
    w: &ModelWeights,
    trace: &ForwardTrace,
    dout: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let n = cfg.n as f64;
    let dh = cfg.head_dim();
    let dout_m = Matrix::new(1, dout.len(), dout.to_vec())?;

    // head affine
    let pooled = Matrix::new(1, cfg.d, trace.output.column_means())?;
    add_into(&mut grads.head_w, &matmul(&pooled.transpose(), &dout_m)?);
    add_into(&mut grads.head_b, &dout_m);
    let dpooled = matmul(&dout_m, &w.head_w.transpose())?;

    // mean pooling broadcast
    let mut dz = Matrix::zeros(cfg.n, cfg.d);
    for i in 0..cfg.n {
        for j in 0..cfg.d {
            dz.set(i, j, dpooled.get(0, j) / n);
        }
    }

    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lw = &w.layers[li];
        let g = &mut grads.layers[li];

        // z = LN(y + ffn_out)
        let dr2 = layer_norm_backward(&dz, &lt.z, &lt.ln2_inv_std);
        let mut dy = dr2.clone();
        let dffn_out = dr2;

        // ffn_out = act(y w1 + b1) w2 + b2
        add_into(&mut g.w2, &matmul(&lt.ffn_act.transpose(), &dffn_out)?);
        add_into(&mut g.b2, &column_sums(&dffn_out));
        let dffn_act = matmul(&dffn_out, &lw.w2.transpose())?;
        let mut dffn_pre = dffn_act;
        for (v, pre) in dffn_pre.values_mut().iter_mut().zip(lt.ffn_pre.values()) {
            *v *= cfg.activation.derivative(*pre);
        }
        add_into(&mut g.w1, &matmul(&lt.y.transpose(), &dffn_pre)?);
        add_into(&mut g.b1, &column_sums(&dffn_pre));
        add_into(&mut dy, &matmul(&dffn_pre, &lw.w1.transpose())?);

        // y = LN(x + mh)
        let dr1 = layer_norm_backward(&dy, &lt.y, &lt.ln1_inv_std);
        let mut dx = dr1.clone();
        let dmh = dr1;

        // mh = concat wo
        add_into(&mut g.wo, &matmul(&lt.concat.transpose(), &dmh)?);
        let dconcat = matmul(&dmh, &lw.wo.transpose())?;

        for h in 0..cfg.heads {
            // slice this head's block out of dconcat
            let mut do_h = Matrix::zeros(cfg.n, dh);
            for i in 0..cfg.n {
                for j in 0..dh {
                    do_h.set(i, j, dconcat.get(i, h * dh + j));
                }
            }
            let v_h = matmul(&lt.x_in, &lw.wv[h])?;
            let q_h = matmul(&lt.x_in, &lw.wq[h])?;
            let k_h = matmul(&lt.x_in, &lw.wk[h])?;

            let dv = matmul(&lt.attn[h].transpose(), &do_h)?;
            let dattn = matmul(&do_h, &v_h.transpose())?;
            let dscores = softmax_backward(&dattn, &lt.attn[h]);
            let scale = 1.0 / (dh as f64).sqrt();
            let dq = matmul(&dscores, &k_h)?.scale(scale);
            let dk = matmul(&dscores.transpose(), &q_h)?.scale(scale);

            add_into(&mut g.wq[h], &matmul(&lt.x_in.transpose(), &dq)?);
            add_into(&mut g.wk[h], &matmul(&lt.x_in.transpose(), &dk)?);
            add_into(&mut g.wv[h], &matmul(&lt.x_in.transpose(), &dv)?);

            add_into(&mut dx, &matmul(&dq, &lw.wq[h].transpose())?);
            add_into(&mut dx, &matmul(&dk, &lw.wk[h].transpose())?);
            add_into(&mut dx, &matmul(&dv, &lw.wv[h].transpose())?);
        }
        dz = dx;
    }
    Ok(())
}

/// Mean loss over the batch plus exact analytic gradients of every weight
/// tensor through pooling, layer norms, attention (softmax Jacobian
/// included) and the FFN.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    w: &ModelWeights,
    batch: &[TrainExample],
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss_and_grad batch".into()));
    }
    let mut grads = ModelWeights::zeros(cfg);
    let mut total = 0.0;
    for (i, example) in batch.iter().enumerate() {
        let (_, trace) = encoder_forward(cfg, w, &example.tokens)?;
        let out = pooled_output(cfg, &trace, w)?;
        let (loss, dout) = loss_and_dout(&out, example, kind, batch.len(), i)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at instance {i}"),
            });
        }
        total += loss;
        backward_example(cfg, w, &trace, &dout, &mut grads)?;
    }
    Ok((total / batch.len() as f64, grads))
}

/// Mean loss only (used by the finite-difference oracle and validation).
pub fn loss_only(
    cfg: &ModelConfig,
    w: &ModelWeights,
    batch: &[TrainExample],
    kind: LossKind,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss_only batch".into()));
    }
    let mut total = 0.0;
    for (i, example) in batch.iter().enumerate() {
        let (_, trace) = encoder_forward(cfg, w, &example.tokens)?;
        let out = pooled_output(cfg, &trace, w)?;
        let (loss, _) = loss_and_dout(&out, example, kind, batch.len(), i)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at instance {i}"),
            });
        }
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

/// Central-difference gradients of the batch loss, step `h` per entry.
pub fn numeric_gradients(
    cfg: &ModelConfig,
    w: &ModelWeights,
    batch: &[TrainExample],
    kind: LossKind,
    h: f64,
) -> Result<Gradients> {
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut grads = ModelWeights::zeros(cfg);
    let mut probe = w.clone();
    let n_tensors = probe.tensors().len();
    for ti in 0..n_tensors {
        let n_entries = probe.tensors()[ti].1.values().len();
        for ei in 0..n_entries {
            let original = probe.tensors()[ti].1.values()[ei];
            probe.tensors_mut()[ti].1.values_mut()[ei] = original + h;
            let up = loss_only(cfg, &probe, batch, kind)?;
            probe.tensors_mut()[ti].1.values_mut()[ei] = original - h;
            let down = loss_only(cfg, &probe, batch, kind)?;
            probe.tensors_mut()[ti].1.values_mut()[ei] = original;
            grads.tensors_mut()[ti].1.values_mut()[ei] = (up - down) / (2.0 * h);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Tensors whose error exceeds the threshold.
    pub fn failing(&self) -> Vec<&str> {
        self.per_tensor
            .iter()
            .filter(|t| t.max_rel_err >= self.threshold)
            .map(|t| t.tensor.as_str())
            .collect()
    }
}

/// Relative error `|a - n| / (|a| + |n| + 1e-4)`; the additive floor keeps
/// near-zero gradient entries from amplifying finite-difference noise.
fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-4)
}

pub fn compare_gradients(analytic: &Gradients, numeric: &Gradients) -> GradCheckReport {
    let mut per_tensor = Vec::new();
    let mut overall = 0.0f64;
    for ((name, a), (_, n)) in analytic.tensors().iter().zip(numeric.tensors()) {
        let mut worst = 0.0f64;
        for (av, nv) in a.values().iter().zip(n.values()) {
            worst = worst.max(relative_error(*av, *nv));
        }
        overall = overall.max(worst);
        per_tensor.push(TensorCheck {
            tensor: name.clone(),
            max_rel_err: worst,
        });
    }
    GradCheckReport {
        per_tensor,
        max_rel_err: overall,
        threshold: 1e-4,
        pass: overall < 1e-4,
    }
}

/// Verify the analytic gradients against central differences.
pub fn grad_check(
    cfg: &ModelConfig,
    w: &ModelWeights,
    batch: &[TrainExample],
    kind: LossKind,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(cfg, w, batch, kind)?;
    let numeric = numeric_gradients(cfg, w, batch, kind, h)?;
    Ok(compare_gradients(&analytic, &numeric))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelWeights,
    pub v: ModelWeights,
}

impl AdamState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            m: ModelWeights::zeros(cfg),
            v: ModelWeights::zeros(cfg),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// None trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    pub init_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn new(loss: LossKind) -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            patience: 10,
            batch_size: None,
            seed: 0,
            loss,
            init_scale: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One Adam update with bias correction; step count `t` starts at 1.
pub fn adam_step(
    mut w: ModelWeights,
    g: &Gradients,
    mut state: AdamState,
    t: usize,
    tcfg: &TrainConfig,
) -> Result<(ModelWeights, AdamState)> {
    if t == 0 {
        return Err(Error::Config("adam step count starts at 1".into()));
    }
    let bc1 = 1.0 - tcfg.beta1.powi(t as i32);
    let bc2 = 1.0 - tcfg.beta2.powi(t as i32);
    let n_tensors = w.tensors().len();
    for ti in 0..n_tensors {
        let gt = g.tensors()[ti].1.values().to_vec();
        let m = &mut state.m.tensors_mut()[ti].1;
        for (mv, gv) in m.values_mut().iter_mut().zip(&gt) {
            *mv = tcfg.beta1 * *mv + (1.0 - tcfg.beta1) * gv;
        }
        let m_snapshot = state.m.tensors()[ti].1.values().to_vec();
        let v = &mut state.v.tensors_mut()[ti].1;
        for (vv, gv) in v.values_mut().iter_mut().zip(&gt) {
            *vv = tcfg.beta2 * *vv + (1.0 - tcfg.beta2) * gv * gv;
        }
        let v_snapshot = state.v.tensors()[ti].1.values().to_vec();
        let wt = &mut w.tensors_mut()[ti].1;
        for ((wv, mv), vv) in wt.values_mut().iter_mut().zip(&m_snapshot).zip(&v_snapshot) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *wv -= tcfg.learning_rate * mhat / (vhat.sqrt() + tcfg.adam_eps);
        }
    }
    Ok((w, state))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss; early stopping tracks its minimum.
    pub val_metric: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_metric,elapsed_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_metric, r.elapsed_ms
            ));
        }
        out
    }
}

/// Adam training with early stopping on the validation loss. Stops once the
/// validation loss has failed to improve for `patience` consecutive epochs
/// (patience 0 therefore runs exactly one epoch) and returns the weights
/// from the best validation epoch, not the last.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
) -> Result<(ModelWeights, TrainHistory)> {
    cfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("train/validation split".into()));
    }
    let mut w = init_weights(cfg, tcfg.seed, tcfg.init_scale)?;
    let mut state = AdamState::zeros(cfg);
    let mut shuffle_rng = RngStream::new(tcfg.seed, 0x7368_7566);
    let batch_size = tcfg.batch_size.unwrap_or(train_set.len()).max(1);

    let mut best_weights = w.clone();
    let mut best_val = f64::INFINITY;
    let mut since_improvement = 0usize;
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TrainExample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = loss_and_grad(cfg, &w, &batch, tcfg.loss).map_err(|e| match e {
                Error::NonFinite { context } => Error::Diverged {
                    epoch,
                    msg: context,
                },
                other => other,
            })?;
            step += 1;
            let (w2, s2) = adam_step(w, &grads, state, step, tcfg)?;
            w = w2;
            state = s2;
            epoch_loss += loss;
            batches += 1;
        }
        let val_loss = loss_only(cfg, &w, val_set, tcfg.loss).map_err(|e| match e {
            Error::NonFinite { context } => Error::Diverged {
                epoch,
                msg: context,
            },
            other => other,
        })?;
        history.rows.push(HistoryRow {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_metric: val_loss,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_weights = w.clone();
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        if since_improvement >= tcfg.patience {
            break;
        }
    }
    Ok((best_weights, history))
}

/// Fraction of examples whose argmax logit matches the label.
pub fn evaluate_accuracy(
    cfg: &ModelConfig,
    w: &ModelWeights,
    examples: &[TrainExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("accuracy evaluation".into()));
    }
    let mut hits = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        let (_, trace) = encoder_forward(cfg, w, &ex.tokens)?;
        let out = pooled_output(cfg, &trace, w)?;
        let label = ex
            .label
            .ok_or_else(|| Error::Config(format!("accuracy needs labels (instance {i})")))?;
        let pred = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if pred == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Mean absolute error of the head outputs against the stored targets.
pub fn evaluate_mae(cfg: &ModelConfig, w: &ModelWeights, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("mae evaluation".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        let (_, trace) = encoder_forward(cfg, w, &ex.tokens)?;
        let out = pooled_output(cfg, &trace, w)?;
        let target = ex
            .target
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mae needs targets (instance {i})")))?;
        for (o, t) in out.iter().zip(target) {
            total += (o - t).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, HeadKind};

    fn cfg(n: usize, d: usize, heads: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            n,
            d,
            heads,
            ffn_hidden: 8,
            layers: 1,
            positional_encoding: false,
            activation: Activation::Tanh,
            head,
        }
    }

    fn random_batch(cfg: &ModelConfig, size: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = RngStream::new(seed, 0);
        (0..size)
            .map(|i| {
                let tokens = Matrix::new(cfg.n, cfg.d, rng.gaussian_vec(cfg.n * cfg.d)).unwrap();
                match cfg.head {
                    HeadKind::Classification { classes } => TrainExample {
                        tokens,
                        label: Some(i % classes),
                        target: None,
                    },
                    HeadKind::Forecast { horizon } => TrainExample {
                        tokens,
                        label: None,
                        target: Some(rng.gaussian_vec(horizon)),
                    },
                }
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        let mut w = init_weights(&c, 1, 0.5).unwrap();
        w.head_w = Matrix::zeros(c.d, 2);
        w.head_b = Matrix::zeros(1, 2);
        let batch = random_batch(&c, 4, 2);
        let (loss, _) = loss_and_grad(&c, &w, &batch, LossKind::CrossEntropy).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_forecast_has_zero_loss_and_zero_head_grads() {
        let c = cfg(3, 4, 2, HeadKind::Forecast { horizon: 2 });
        let w = init_weights(&c, 3, 0.5).unwrap();
        let mut batch = random_batch(&c, 2, 4);
        for ex in batch.iter_mut() {
            let (_, trace) = encoder_forward(&c, &w, &ex.tokens).unwrap();
            ex.target = Some(pooled_output(&c, &trace, &w).unwrap());
        }
        let (loss, grads) = loss_and_grad(&c, &w, &batch, LossKind::SquaredError).unwrap();
        assert!(loss.abs() < 1e-20);
        assert!(grads.head_w.values().iter().all(|v| *v == 0.0));
        assert!(grads.head_b.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_central_differences_small_config() {
        for kind in [LossKind::CrossEntropy, LossKind::SquaredError] {
            let head = match kind {
                LossKind::CrossEntropy => HeadKind::Classification { classes: 3 },
                LossKind::SquaredError => HeadKind::Forecast { horizon: 3 },
            };
            let c = cfg(5, 4, 2, head);
            let w = init_weights(&c, 7, 0.6).unwrap();
            let batch = random_batch(&c, 3, 8);
            let report = grad_check(&c, &w, &batch, kind, 1e-5).unwrap();
            assert!(report.pass, "{kind:?}: max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn degenerate_linear_config_is_extra_tight() {
        let c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        let mut w = init_weights(&c, 9, 0.6).unwrap();
        for h in 0..c.heads {
            w.layers[0].wq[h] = Matrix::zeros(c.d, c.head_dim());
            w.layers[0].wk[h] = Matrix::zeros(c.d, c.head_dim());
        }
        let batch = random_batch(&c, 3, 10);
        let report = grad_check(&c, &w, &batch, LossKind::CrossEntropy, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn multi_layer_gradients_match() {
        let mut c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        c.layers = 2;
        c.positional_encoding = true;
        let w = init_weights(&c, 11, 0.6).unwrap();
        let batch = random_batch(&c, 2, 12);
        let report = grad_check(&c, &w, &batch, LossKind::CrossEntropy, 1e-5).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn relu_gradients_match_away_from_kinks() {
        let mut c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        c.activation = Activation::Relu;
        // seed chosen so no FFN pre-activation sits within 1e-4 of zero
        let w = init_weights(&c, 13, 0.8).unwrap();
        let batch = random_batch(&c, 2, 14);
        for ex in &batch {
            let (_, trace) = encoder_forward(&c, &w, &ex.tokens).unwrap();
            let min_abs = trace.layers[0]
                .ffn_pre
                .values()
                .iter()
                .map(|v| v.abs())
                .fold(f64::INFINITY, f64::min);
            assert!(min_abs > 1e-4, "kink too close for finite differences");
        }
        let report = grad_check(&c, &w, &batch, LossKind::CrossEntropy, 1e-5).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_flagged_on_exactly_that_tensor() {
        let c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        let w = init_weights(&c, 15, 0.6).unwrap();
        let batch = random_batch(&c, 2, 16);
        let (_, mut analytic) = loss_and_grad(&c, &w, &batch, LossKind::CrossEntropy).unwrap();
        let numeric = numeric_gradients(&c, &w, &batch, LossKind::CrossEntropy, 1e-5).unwrap();
        let target = "layer0.wv1";
        for (name, t) in analytic.tensors_mut() {
            if name == target {
                t.values_mut()[0] += 0.1;
            }
        }
        let report = compare_gradients(&analytic, &numeric);
        assert_eq!(report.failing(), vec![target]);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let c = cfg(3, 4, 2, HeadKind::Classification { classes: 2 });
        let w = init_weights(&c, 17, 0.6).unwrap();
        let g = ModelWeights::zeros(&c);
        let tcfg = TrainConfig::new(LossKind::CrossEntropy);
        let (w2, _) = adam_step(w.clone(), &g, AdamState::zeros(&c), 1, &tcfg).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn adam_hand_computed_first_step() {
        // scalar view: constant g=1, t=1, lr=1e-3 moves a weight by
        // -1e-3 * 1/(1 + 1e-8) = -0.000999999...
        let c = cfg(2, 2, 1, HeadKind::Classification { classes: 1 });
        let w = ModelWeights::zeros(&c);
        let mut g = ModelWeights::zeros(&c);
        for (_, t) in g.tensors_mut() {
            for v in t.values_mut() {
                *v = 1.0;
            }
        }
        let tcfg = TrainConfig::new(LossKind::CrossEntropy);
        let (w2, _) = adam_step(w, &g, AdamState::zeros(&c), 1, &tcfg).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        for (_, t) in w2.tensors() {
            for v in t.values() {
                assert!((v - expect).abs() < 1e-15, "{v} vs {expect}");
            }
        }
    }

    #[test]
    fn adam_trajectories_are_bitwise_identical() {
        let c = cfg(3, 4, 2, HeadKind::Classification { classes: 2 });
        let batch = random_batch(&c, 4, 18);
        let run = || {
            let mut w = init_weights(&c, 19, 0.6).unwrap();
            let mut state = AdamState::zeros(&c);
            let tcfg = TrainConfig::new(LossKind::CrossEntropy);
            for t in 1..=5 {
                let (_, g) = loss_and_grad(&c, &w, &batch, LossKind::CrossEntropy).unwrap();
                let (w2, s2) = adam_step(w, &g, state, t, &tcfg).unwrap();
                w = w2;
                state = s2;
            }
            w
        };
        assert_eq!(run(), run());
    }

    /// Linearly separable toy set: class means point in opposite directions.
    fn separable_toy_set(c: &ModelConfig, n: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = RngStream::new(seed, 0);
        (0..n)
            .map(|i| {
                let class = i % 2;
                let sign = if class == 0 { 1.0 } else { -1.0 };
                let mut values = Vec::with_capacity(c.n * c.d);
                for _ in 0..c.n {
                    for j in 0..c.d {
                        let mean = if j % 2 == 0 { 2.0 * sign } else { -2.0 * sign };
                        values.push(mean + 0.5 * rng.gaussian());
                    }
                }
                TrainExample {
                    tokens: Matrix::new(c.n, c.d, values).unwrap(),
                    label: Some(class),
                    target: None,
                }
            })
            .collect()
    }

    /// Plain logistic regression on pooled raw features, full-batch gradient
    /// descent. Independent check that the toy set is separable.
    fn logistic_probe_accuracy(examples: &[TrainExample], d: usize) -> f64 {
        let feats: Vec<Vec<f64>> = examples.iter().map(|e| e.tokens.column_means()).collect();
        let labels: Vec<f64> = examples
            .iter()
            .map(|e| if e.label == Some(0) { 0.0 } else { 1.0 })
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..500 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, y) in feats.iter().zip(&labels) {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                for j in 0..d {
                    gw[j] += (p - y) * x[j];
                }
                gb += p - y;
            }
            for j in 0..d {
                w[j] -= 0.1 * gw[j] / feats.len() as f64;
            }
            b -= 0.1 * gb / feats.len() as f64;
        }
        let mut hits = 0;
        for (x, y) in feats.iter().zip(&labels) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            if (z > 0.0) == (*y > 0.5) {
                hits += 1;
            }
        }
        hits as f64 / feats.len() as f64
    }

    #[test]
    fn training_reaches_full_accuracy_on_separable_toy_set() {
        let c = cfg(6, 4, 2, HeadKind::Classification { classes: 2 });
        let examples = separable_toy_set(&c, 20, 21);
        assert_eq!(logistic_probe_accuracy(&examples, c.d), 1.0);
        let tcfg = TrainConfig::new(LossKind::CrossEntropy);
        let (best, history) = train(&c, &tcfg, &examples, &examples).unwrap();
        assert!(history.rows.len() <= 100);
        let acc = evaluate_accuracy(&c, &best, &examples).unwrap();
        assert_eq!(acc, 1.0, "training accuracy {acc}");
    }

    #[test]
    fn full_batch_loss_non_increasing_early() {
        let c = cfg(6, 4, 2, HeadKind::Classification { classes: 2 });
        let examples = separable_toy_set(&c, 20, 22);
        let mut tcfg = TrainConfig::new(LossKind::CrossEntropy);
        tcfg.epochs = 5;
        tcfg.patience = 5;
        let (_, history) = train(&c, &tcfg, &examples, &examples).unwrap();
        for pair in history.rows.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-12,
                "loss increased: {} -> {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn patience_zero_runs_exactly_one_epoch() {
        let c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        let examples = separable_toy_set(&c, 8, 23);
        let mut tcfg = TrainConfig::new(LossKind::CrossEntropy);
        tcfg.patience = 0;
        let (_, history) = train(&c, &tcfg, &examples, &examples).unwrap();
        assert_eq!(history.rows.len(), 1);
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let c = cfg(4, 4, 2, HeadKind::Classification { classes: 2 });
        let examples = separable_toy_set(&c, 12, 24);
        let mut tcfg = TrainConfig::new(LossKind::CrossEntropy);
        tcfg.epochs = 8;
        tcfg.patience = 8;
        tcfg.batch_size = Some(4);
        let (_, h1) = train(&c, &tcfg, &examples, &examples).unwrap();
        let (_, h2) = train(&c, &tcfg, &examples, &examples).unwrap();
        let csv1 = h1.to_csv();
        let csv2 = h2.to_csv();
        // elapsed_ms may differ; compare loss columns
        for (a, b) in h1.rows.iter().zip(h2.rows.iter()) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_metric.to_bits(), b.val_metric.to_bits());
        }
        assert_eq!(csv1.lines().count(), csv2.lines().count());
    }

    #[test]
    fn early_stopping_returns_best_not_last() {
        // validation loss is recomputed from the returned weights and must
        // equal the minimum recorded in the history
        let c = cfg(6, 4, 2, HeadKind::Classification { classes: 2 });
        let train_set = separable_toy_set(&c, 16, 25);
        let val_set = separable_toy_set(&c, 8, 26);
        let mut tcfg = TrainConfig::new(LossKind::CrossEntropy);
        tcfg.epochs = 30;
        tcfg.patience = 30;
        let (best, history) = train(&c, &tcfg, &train_set, &val_set).unwrap();
        let best_recorded = history
            .rows
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::INFINITY, f64::min);
        let recomputed = loss_only(&c, &best, &val_set, LossKind::CrossEntropy).unwrap();
        assert!((recomputed - best_recorded).abs() < 1e-12);
    }

    #[test]
    fn history_csv_has_expected_header() {
        let mut h = TrainHistory::default();
        h.rows.push(HistoryRow {
            epoch: 1,
            train_loss: 0.5,
            val_metric: 0.25,
            elapsed_ms: 3,
        });
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_metric,elapsed_ms\n"));
        assert!(csv.contains("1,0.5,0.25,3"));
    }
}
