//! Self-critical policy-gradient fine-tuning with scheduled sampling.

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{Instance, Model};
use crate::numerics::{Rng, Tape, Var};
use crate::params::ParamVars;
use crate::scalar::Scalar;
use crate::text::Vocabulary;
use crate::training::{
    apply_update, backprop_into, epoch_batches, log_likelihood, mean_metric, Adam, BestTracker, EpochRecord,
    TrainConfig, TrainOutcome,
};
use crate::checkpoint::Checkpoint;

/// Gold, greedy and mixed sequences with the positions that took the greedy token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledTriple {
    pub gold: Vec<usize>,
    pub greedy: Vec<usize>,
    pub sampled: Vec<usize>,
    pub flipped: Vec<bool>,
}

/// Builds `Y^s` from `Y*`, taking `Ŷ[i]` with probability `p_flip` while `i < |Ŷ|`.
pub fn scheduled_sample(gold: &[usize], greedy: &[usize], p_flip: f64, rng: &mut Rng) -> SampledTriple {
    let mut sampled = Vec::with_capacity(gold.len());
    let mut flipped = Vec::with_capacity(gold.len());
    for (i, &y) in gold.iter().enumerate() {
        let flip = i < greedy.len() && rng.next_f64() < p_flip;
        sampled.push(if flip { greedy[i] } else { y });
        flipped.push(flip);
    }
    SampledTriple {
        gold: gold.to_vec(),
        greedy: greedy.to_vec(),
        sampled,
        flipped,
    }
}

pub type RewardFn = fn(&[String], &[String]) -> Result<f64>;

/// Sequence reward `r(Y)` against the gold surface tokens.
#[derive(Clone, Copy, Debug)]
pub struct RewardSpec {
    pub mode: TaskMode,
    pub func: RewardFn,
}

fn bleu_reward(c: &[String], r: &[String]) -> Result<f64> {
    Metric::Bleu4.score(c, r)
}

fn rouge_reward(c: &[String], r: &[String]) -> Result<f64> {
    Metric::RougeL.score(c, r)
}

impl RewardSpec {
    /// BLEU-4 for QG, ROUGE-L for QA.
    pub fn for_mode(mode: TaskMode) -> Self {
        let func = match mode {
            TaskMode::Qg => bleu_reward as RewardFn,
            TaskMode::Qa => rouge_reward as RewardFn,
        };
        Self { mode, func }
    }

    pub fn with_fn(mode: TaskMode, func: RewardFn) -> Self {
        Self { mode, func }
    }

    pub fn reward(&self, candidate: &[String], reference: &[String]) -> Result<f64> {
        (self.func)(candidate, reference)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RlLoss {
    /// `None` when the rewards tie and the loss is identically zero.
    pub loss: Option<Var>,
    pub value: f64,
    pub reward_greedy: f64,
    pub reward_sampled: f64,
}

/// `(r(Ŷ) − r(Y^s)) · Σ_t log P_final(y^s_t)`, teacher-forced on `Y^s`.
#[allow(clippy::too_many_arguments)]
pub fn rl_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    pv: &ParamVars,
    inst: &Instance,
    vocab: &Vocabulary,
    sampled: &[usize],
    greedy: &[usize],
    reward: &RewardSpec,
) -> Result<RlLoss> {
    if sampled.is_empty() {
        return Err(Error::contract("rl_loss: empty sampled sequence"));
    }
    let reward_greedy = reward.reward(&inst.surface(greedy, vocab), &inst.target_tokens)?;
    let reward_sampled = reward.reward(&inst.surface(sampled, vocab), &inst.target_tokens)?;
    let coeff = reward_greedy - reward_sampled;
    if coeff == 0.0 {
        return Ok(RlLoss {
            loss: None,
            value: 0.0,
            reward_greedy,
            reward_sampled,
        });
    }
    let steps = model.teacher_forced(tape, pv, inst, sampled)?;
    let p: Vec<Var> = steps.iter().map(|s| s.p_final).collect();
    let lp = log_likelihood(tape, &p, sampled)?;
    let loss = tape.affine(lp, T::of(coeff), T::zero());
    Ok(RlLoss {
        loss: Some(loss),
        value: tape.value(loss).item().as_f64(),
        reward_greedy,
        reward_sampled,
    })
}

/// Policy-gradient fine-tuning with a fresh Adam at `config.lr_rl`.
///
/// Best epoch: highest dev metric, or highest mean greedy reward without a dev set.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    vocab: &Vocabulary,
    train_set: &[Instance],
    dev_set: &[Instance],
    config: &TrainConfig,
    reward: &RewardSpec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut rng = Rng::new(config.seed);
    let mut sample_rng = rng.fork();
    let mut opt = Adam::new(&model.params, config.lr_rl);
    let mut history = Vec::new();
    let mut best = BestTracker::new();
    let mut step = 0u64;

    for epoch in 1..=config.epochs_rl {
        let (mut loss_sum, mut rg_sum, mut rs_sum) = (0.0, 0.0, 0.0);
        for batch in epoch_batches(&mut rng, train_set.len(), config.batch_size) {
            model.params.zero_grads();
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in &batch {
                let inst = &train_set[i];
                let greedy = model.greedy_decode(inst, config.max_decode_len)?.with_eos();
                let triple = scheduled_sample(&inst.target_ids, &greedy, config.p_flip, &mut sample_rng);
                let mut tape = Tape::new();
                let pv = model.params.bind(&mut tape, true);
                let out = rl_loss(model, &mut tape, &pv, inst, vocab, &triple.sampled, &greedy, reward)?;
                loss_sum += out.value;
                rg_sum += out.reward_greedy;
                rs_sum += out.reward_sampled;
                if let Some(loss) = out.loss {
                    backprop_into(&mut model.params, &tape, &pv, loss, scale)?;
                }
            }
            apply_update(&mut model.params, &mut opt, config.grad_clip)?;
            step += 1;
        }
        let n = train_set.len() as f64;
        let dev_metric = if dev_set.is_empty() {
            None
        } else {
            Some(mean_metric(model, vocab, dev_set, config.metric(), config.max_decode_len)?)
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            dev_metric,
            reward_greedy: Some(rg_sum / n),
            reward_sampled: Some(rs_sum / n),
        };
        log::info!(
            "rl epoch {epoch}: loss {:.6} greedy {:.4} sampled {:.4} dev {dev_metric:?}",
            record.loss,
            rg_sum / n,
            rs_sum / n
        );
        on_epoch(&record);
        history.push(record);
        best.offer(dev_metric.unwrap_or(rg_sum / n), || {
            Checkpoint::capture(model, vocab, config, Some(&opt), epoch, step)
        });
    }
    let last = Checkpoint::capture(model, vocab, config, Some(&opt), config.epochs_rl, step);
    Ok(TrainOutcome {
        best: best.checkpoint.unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}
