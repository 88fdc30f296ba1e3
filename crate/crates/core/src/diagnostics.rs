//! End-to-end gradient checks on a small seeded model.

use serde::{Deserialize, Serialize};

use crate::data::{TaskMode, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{Instance, Model, ModelDims};
use crate::numerics::{GradCheck, Rng, Tape, Tensor, Var};
use crate::params::{ParamId, ParamVars};
use crate::rl::{rl_loss, RewardSpec};
use crate::text::{EmbeddingTable, Vocabulary, EOS, SOS, UNK};
use crate::training::cross_entropy_loss;

pub const BLOCKS: [&str; 4] = ["encoder", "decoder_step", "ce_coverage", "rl"];

/// A tiny model with one instance: h = 8, d = 6, l = 2, N = 5, M = 3.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub model: Model<f64>,
    pub vocab: Vocabulary,
    pub instance: Instance,
}

pub fn toy_problem(seed: u64) -> Result<ToyProblem> {
    let words = ["the", "river", "flows", "north", "where", "does", "it", "?"];
    let vocab = Vocabulary::build(&[words.to_vec()], 100, 1);
    let example = TrainingExample::from_text("toy", "the zambezi river flows north", "flows north .", "where does zambezi flow");
    let instance = Instance::new(&example, &vocab)?;
    let mut rng = Rng::new(seed);
    let dims = ModelDims::uniform(vocab.len(), 6, 8, 2);
    let embeddings = EmbeddingTable::random(vocab.len(), 6, &mut rng);
    let model = Model::new(dims, embeddings, &mut rng)?;
    Ok(ToyProblem {
        model,
        vocab,
        instance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Parameter vars where `checked` come from the checker and the rest are constants.
fn bind_subset(model: &Model<f64>, tape: &mut Tape<f64>, checked: &[ParamId], vars: &[Var]) -> ParamVars {
    let all = model
        .params
        .ids()
        .map(|id| match checked.iter().position(|&c| c == id) {
            Some(k) => vars[k],
            None => tape.constant(model.params.value(id).clone()),
        })
        .collect();
    ParamVars::from_vars(all)
}

fn weighted_sum(tape: &mut Tape<f64>, x: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let r = tape.constant(Tensor::new(shape, rng.uniform_vec(n, -1.0, 1.0))?);
    let m = tape.mul(x, r)?;
    Ok(tape.sum(m))
}

fn check_block(
    toy: &ToyProblem,
    checker: &GradCheck,
    name: &str,
    prefix: Option<&str>,
    seed: u64,
    head: impl Fn(&mut Tape<f64>, &ParamVars, &mut Rng) -> Result<Var>,
) -> Result<BlockReport> {
    let params = &toy.model.params;
    let ids: Vec<ParamId> = params
        .ids()
        .filter(|&id| prefix.is_none_or(|p| params.name(id).starts_with(p)))
        .collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| params.value(id).clone()).collect();
    let report = checker.run(&inputs, |tape, vars| {
        let pv = bind_subset(&toy.model, tape, &ids, vars);
        head(tape, &pv, &mut Rng::new(seed))
    })?;
    Ok(BlockReport {
        block: name.to_string(),
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        passed: report.passed,
    })
}

/// Checks the four blocks against central differences at `checker.tol`.
pub fn model_gradcheck(seed: u64, checker: &GradCheck) -> Result<Vec<BlockReport>> {
    let toy = toy_problem(seed)?;
    let model = &toy.model;
    let inst = &toy.instance;
    let mut reports = Vec::with_capacity(BLOCKS.len());

    reports.push(check_block(&toy, checker, BLOCKS[0], Some("encoder."), seed, |tape, pv, rng| {
        let enc = model.encode(tape, pv, inst)?;
        weighted_sum(tape, enc.memory.matrix, rng)
    })?);

    reports.push(check_block(&toy, checker, BLOCKS[1], Some("decoder."), seed, |tape, pv, rng| {
        let (ctx, mut state) = model.start(tape, pv, inst)?;
        let mut terms = Vec::new();
        for prev in [SOS, inst.target_ids[0]] {
            let x = model.embed(tape, inst.ext_map.input_id(prev));
            let out = model.decoder.step(tape, pv, &state, x, &ctx)?;
            terms.push(weighted_sum(tape, out.p_final, rng)?);
            terms.push(weighted_sum(tape, out.alpha, rng)?);
            state = out.state;
        }
        let stacked = tape.concat(&terms)?;
        Ok(tape.sum(stacked))
    })?);

    reports.push(check_block(&toy, checker, BLOCKS[2], None, seed, |tape, pv, _| {
        Ok(cross_entropy_loss(model, tape, pv, inst, 0.1)?.total)
    })?);

    let mut sampled = inst.target_ids.clone();
    sampled[0] = UNK;
    let greedy = vec![UNK, UNK, EOS];
    // ROUGE-L keeps the reward gap near 0.5; toy BLEU is epsilon-dominated
    let reward = RewardSpec::for_mode(TaskMode::Qa);
    reports.push(check_block(&toy, checker, BLOCKS[3], None, seed, |tape, pv, _| {
        rl_loss(model, tape, pv, inst, &toy.vocab, &sampled, &greedy, &reward)?
            .loss
            .ok_or_else(|| Error::contract("toy rewards tie; RL loss is identically zero"))
    })?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let toy = toy_problem(1).unwrap();
        assert_eq!(toy.instance.passage_ids.len(), 5);
        assert_eq!(toy.instance.query_ids.len(), 3);
        // "zambezi" is copied from the passage
        assert!(toy.instance.target_ids.contains(&toy.vocab.len()));
    }
}
