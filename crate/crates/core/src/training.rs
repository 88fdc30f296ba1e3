//! Cross-entropy pretraining with a coverage penalty.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{TaskMode, DEFAULT_MAX_PASSAGE_LEN};
use crate::decoder::StepOutput;
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{Instance, Model};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::{ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::text::Vocabulary;

/// Lower bound applied before taking logs of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_ce: f64,
    pub lr_rl: f64,
    pub epochs_ce: usize,
    pub epochs_rl: usize,
    /// Number of matching perspectives `l`.
    pub perspectives: usize,
    pub p_flip: f64,
    /// Coverage loss weight `η`.
    pub coverage_weight: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub max_decode_len: usize,
    pub seed: u64,
    pub mode: TaskMode,
    pub vocab_max_size: usize,
    pub vocab_min_count: usize,
    pub max_passage_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_ce: 0.005,
            lr_rl: 0.0001,
            epochs_ce: 15,
            epochs_rl: 15,
            perspectives: 5,
            p_flip: 0.1,
            coverage_weight: 0.1,
            embed_dim: 300,
            hidden: 100,
            batch_size: 16,
            grad_clip: 5.0,
            max_decode_len: 40,
            seed: 1,
            mode: TaskMode::Qg,
            vocab_max_size: 20000,
            vocab_min_count: 1,
            max_passage_len: DEFAULT_MAX_PASSAGE_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("invalid config: {m}")));
        if !(self.lr_ce > 0.0 && self.lr_ce.is_finite()) || !(self.lr_rl > 0.0 && self.lr_rl.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_flip) {
            return bad("p_flip must lie in [0, 1]");
        }
        if !(self.coverage_weight >= 0.0 && self.coverage_weight.is_finite()) {
            return bad("coverage_weight must be nonnegative");
        }
        if self.grad_clip < 0.0 || self.grad_clip.is_nan() {
            return bad("grad_clip must be nonnegative");
        }
        for (name, v) in [
            ("perspectives", self.perspectives),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("max_decode_len", self.max_decode_len),
            ("max_passage_len", self.max_passage_len),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.vocab_max_size < 5 {
            return bad("vocab_max_size must exceed the reserved tokens");
        }
        Ok(())
    }

    pub fn metric(&self) -> Metric {
        Metric::for_mode(self.mode)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_greedy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_sampled: Option<f64>,
}

/// `−Σ_t log P_final(y_t)` with the log floored at [`LOG_FLOOR`].
pub fn nll<T: Scalar>(tape: &mut Tape<T>, distributions: &[Var], targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::contract("empty target sequence"));
    }
    let lp = log_likelihood(tape, distributions, targets)?;
    Ok(tape.affine(lp, -T::one(), T::zero()))
}

/// `Σ_t log P(y_t)` with the log floored at [`LOG_FLOOR`].
pub fn log_likelihood<T: Scalar>(tape: &mut Tape<T>, distributions: &[Var], targets: &[usize]) -> Result<Var> {
    if distributions.len() != targets.len() {
        return Err(Error::dim("log_likelihood", &[distributions.len()], &[targets.len()]));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (&p, &y) in distributions.iter().zip(targets) {
        let py = tape.pick(p, y)?;
        terms.push(tape.log_floor(py, T::of(LOG_FLOOR)));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}

/// `Σ_t Σ_i min(α_t,i, u_{t−1},i)` where `coverages[t]` is `u_t` and `u_{−1} = 0`.
pub fn coverage_loss<T: Scalar>(tape: &mut Tape<T>, alphas: &[Var], coverages: &[Var]) -> Result<Var> {
    if alphas.len() != coverages.len() {
        return Err(Error::contract(format!(
            "coverage_loss: {} attention steps but {} coverage vectors",
            alphas.len(),
            coverages.len()
        )));
    }
    let mut terms = Vec::with_capacity(alphas.len());
    for t in 1..alphas.len() {
        let m = tape.min(alphas[t], coverages[t - 1])?;
        terms.push(tape.sum(m));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::vector(vec![T::zero()])));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts<T> {
    pub total: Var,
    pub ce: T,
    pub coverage: T,
}

/// Teacher-forced `l_ce + η·coverage` for one instance.
pub fn cross_entropy_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    pv: &ParamVars,
    inst: &Instance,
    coverage_weight: T,
) -> Result<LossParts<T>> {
    if inst.target_tokens.is_empty() {
        return Err(Error::contract(format!("example {}: empty target", inst.id)));
    }
    let steps = model.teacher_forced(tape, pv, inst, &inst.target_ids)?;
    let p: Vec<Var> = steps.iter().map(|s| s.p_final).collect();
    let ce = nll(tape, &p, &inst.target_ids)?;
    let (alphas, covs) = attention_trace(&steps);
    let cov = coverage_loss(tape, &alphas, &covs)?;
    let weighted = tape.affine(cov, coverage_weight, T::zero());
    let total = tape.add(ce, weighted)?;
    Ok(LossParts {
        total,
        ce: tape.value(ce).item(),
        coverage: tape.value(cov).item(),
    })
}

/// Attention distributions and post-step coverage vectors.
pub fn attention_trace(steps: &[StepOutput]) -> (Vec<Var>, Vec<Var>) {
    steps.iter().map(|s| (s.alpha, s.state.coverage)).unzip()
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: state for {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, g), m) in params.values().iter().zip(params.grads()).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((p, g), (m, v)) in params.pairs_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradient of one instance's loss, added into the store with weight `scale`.
pub(crate) fn backprop_into<T: Scalar>(
    params: &mut ParamStore<T>,
    tape: &Tape<T>,
    pv: &ParamVars,
    loss: Var,
    scale: T,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    params.accumulate(&mut grads, pv, scale);
    Ok(())
}

/// Clips (if configured) and steps the optimizer.
pub(crate) fn apply_update<T: Scalar>(params: &mut ParamStore<T>, opt: &mut Adam<T>, clip: f64) -> Result<()> {
    if clip > 0.0 {
        params.clip_grad_norm(T::of(clip));
    }
    opt.step(params)
}

/// Mean greedy-decode score against the gold targets.
pub fn mean_metric<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    instances: &[Instance],
    metric: Metric,
    max_len: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::contract("mean_metric: no instances"));
    }
    let mut total = 0.0;
    for inst in instances {
        let out = model.greedy_decode(inst, max_len)?;
        total += metric.score(&inst.surface(&out.ids, vocab), &inst.target_tokens)?;
    }
    Ok(total / instances.len() as f64)
}

/// Checkpoints from a training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
}

/// Seeded batch order for every epoch.
pub(crate) fn epoch_batches(rng: &mut Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Tracks the best epoch: highest dev metric if a dev set exists, else `fallback` (higher is better).
pub(crate) struct BestTracker<T> {
    score: Option<f64>,
    pub checkpoint: Option<Checkpoint<T>>,
}

impl<T: Scalar> BestTracker<T> {
    pub fn new() -> Self {
        Self {
            score: None,
            checkpoint: None,
        }
    }

    pub fn offer(&mut self, score: f64, make: impl FnOnce() -> Checkpoint<T>) {
        if self.score.is_none_or(|s| score > s) {
            self.score = Some(score);
            self.checkpoint = Some(make());
        }
    }
}

/// Cross-entropy training loop.
///
/// `on_epoch` sees each record as soon as the epoch finishes.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    vocab: &Vocabulary,
    train_set: &[Instance],
    dev_set: &[Instance],
    config: &TrainConfig,
    lr: f64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::contract("learning rate must be finite and nonnegative"));
    }
    let metric = config.metric();
    let eta = T::of(config.coverage_weight);
    let mut rng = Rng::new(config.seed);
    let mut opt = Adam::new(&model.params, lr);
    let mut history = Vec::new();
    let mut best = BestTracker::new();
    let mut step = 0u64;

    for epoch in 1..=config.epochs_ce {
        let mut loss_sum = 0.0;
        for batch in epoch_batches(&mut rng, train_set.len(), config.batch_size) {
            model.params.zero_grads();
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in &batch {
                let mut tape = Tape::new();
                let pv = model.params.bind(&mut tape, true);
                let parts = cross_entropy_loss(model, &mut tape, &pv, &train_set[i], eta)?;
                let loss = tape.value(parts.total).item().as_f64();
                if !loss.is_finite() {
                    return Err(Error::contract(format!("non-finite loss on example {}", train_set[i].id)));
                }
                loss_sum += loss;
                backprop_into(&mut model.params, &tape, &pv, parts.total, scale)?;
            }
            apply_update(&mut model.params, &mut opt, config.grad_clip)?;
            step += 1;
        }
        let loss = loss_sum / train_set.len() as f64;
        let dev_metric = if dev_set.is_empty() {
            None
        } else {
            Some(mean_metric(model, vocab, dev_set, metric, config.max_decode_len)?)
        };
        let record = EpochRecord {
            epoch,
            loss,
            dev_metric,
            reward_greedy: None,
            reward_sampled: None,
        };
        log::info!("epoch {epoch}: loss {loss:.6} dev {dev_metric:?}");
        on_epoch(&record);
        history.push(record);
        best.offer(dev_metric.unwrap_or(-loss), || {
            Checkpoint::capture(model, vocab, config, Some(&opt), epoch, step)
        });
    }
    let last = Checkpoint::capture(model, vocab, config, Some(&opt), config.epochs_ce, step);
    Ok(TrainOutcome {
        best: best.checkpoint.unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}
