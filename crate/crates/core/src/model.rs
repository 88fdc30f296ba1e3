use serde::{Deserialize, Serialize};

use crate::data::TrainingExample;
use crate::decoder::{argmax, DecodeContext, Decoder, DecoderState, StepOutput};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Var};
use crate::params::{ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::text::{EmbeddingTable, ExtendedVocabMap, Vocabulary, EOS, SOS};

/// Layer sizes. `vocab_size` is the base vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub smoother_hidden: usize,
    pub perspectives: usize,
    pub attention_dim: usize,
    pub proj_dim: usize,
}

impl ModelDims {
    /// Smoother, attention and projection sizes all equal to `hidden`.
    pub fn uniform(vocab_size: usize, embed_dim: usize, hidden: usize, perspectives: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden,
            smoother_hidden: hidden,
            perspectives,
            attention_dim: hidden,
            proj_dim: hidden,
        }
    }

    pub fn memory_width(&self) -> usize {
        2 * self.hidden + 2 * self.smoother_hidden
    }
}

/// A training example resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    /// Base ids fed to the encoder (OOV → UNK).
    pub passage_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    /// Extended ids of the passage tokens, the copy targets.
    pub passage_ext_ids: Vec<usize>,
    pub ext_map: ExtendedVocabMap,
    /// Gold output in extended ids, EOS appended.
    pub target_ids: Vec<usize>,
    /// Gold output tokens (no EOS), used for rewards and metrics.
    pub target_tokens: Vec<String>,
}

impl Instance {
    pub fn new(ex: &TrainingExample, vocab: &Vocabulary) -> Result<Self> {
        if ex.passage.is_empty() || ex.query.is_empty() {
            return Err(Error::contract(format!(
                "example {}: passage and query must be nonempty",
                ex.id
            )));
        }
        let ext_map = ExtendedVocabMap::from_passage(&ex.passage, vocab);
        let passage_ext_ids = ex.passage.iter().map(|t| ext_map.id(t, vocab)).collect();
        let mut target_ids: Vec<usize> = ex.target.iter().map(|t| ext_map.id(t, vocab)).collect();
        target_ids.push(EOS);
        Ok(Self {
            id: ex.id.clone(),
            passage_ids: vocab.encode(&ex.passage),
            query_ids: vocab.encode(&ex.query),
            passage_ext_ids,
            ext_map,
            target_ids,
            target_tokens: ex.target.clone(),
        })
    }

    /// Surface tokens of extended ids, cut at the first EOS.
    pub fn surface(&self, ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| {
                self.ext_map
                    .token(i, vocab)
                    .unwrap_or(crate::text::UNK_TOKEN)
                    .to_string()
            })
            .collect()
    }
}

/// Greedy decoding result; `ids` excludes the EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    pub stopped_at_eos: bool,
}

impl Decoded {
    /// `ids` with EOS re-appended when decoding stopped on it.
    pub fn with_eos(&self) -> Vec<usize> {
        let mut v = self.ids.clone();
        if self.stopped_at_eos {
            v.push(EOS);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub embeddings: EmbeddingTable<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(dims: ModelDims, embeddings: EmbeddingTable<T>, rng: &mut Rng) -> Result<Self> {
        if embeddings.dim() != dims.embed_dim || embeddings.vocab_size() != dims.vocab_size {
            return Err(Error::dim(
                "embedding table",
                &[embeddings.vocab_size(), embeddings.dim()],
                &[dims.vocab_size, dims.embed_dim],
            ));
        }
        if dims.vocab_size < 4 || dims.perspectives == 0 || dims.hidden == 0 {
            return Err(Error::contract("degenerate model dimensions"));
        }
        let mut params = ParamStore::new();
        let encoder = Encoder::register(
            &mut params,
            rng,
            dims.embed_dim,
            dims.hidden,
            dims.smoother_hidden,
            dims.perspectives,
        );
        let decoder = Decoder::register(
            &mut params,
            rng,
            dims.embed_dim,
            dims.hidden,
            dims.memory_width(),
            dims.attention_dim,
            dims.proj_dim,
            dims.vocab_size,
        );
        Ok(Self {
            dims,
            params,
            encoder,
            decoder,
            embeddings,
        })
    }

    /// Frozen embedding of a base id as a tape constant.
    pub fn embed(&self, tape: &mut Tape<T>, id: usize) -> Var {
        tape.constant(self.embeddings.vector(id))
    }

    pub fn encode(&self, tape: &mut Tape<T>, pv: &ParamVars, inst: &Instance) -> Result<EncoderOutput> {
        let p: Vec<Var> = inst.passage_ids.iter().map(|&i| self.embed(tape, i)).collect();
        let q: Vec<Var> = inst.query_ids.iter().map(|&i| self.embed(tape, i)).collect();
        self.encoder.encode(tape, pv, &p, &q)
    }

    /// Encodes and returns the decoding context with the zero initial state.
    pub fn start(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        inst: &Instance,
    ) -> Result<(DecodeContext, DecoderState)> {
        let enc = self.encode(tape, pv, inst)?;
        let n = enc.memory.len();
        let ctx = self.decoder.prepare(
            tape,
            pv,
            enc.memory,
            inst.passage_ext_ids.clone(),
            inst.ext_map.extended_size(),
        )?;
        let state = self.decoder.initial_state(tape, n);
        Ok((ctx, state))
    }

    /// Runs the decoder with `outputs[t-1]` (SOS at t = 0) fed as the previous word.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        inst: &Instance,
        outputs: &[usize],
    ) -> Result<Vec<StepOutput>> {
        let (ctx, mut state) = self.start(tape, pv, inst)?;
        let mut prev = SOS;
        let mut steps = Vec::with_capacity(outputs.len());
        for &y in outputs {
            let x = self.embed(tape, inst.ext_map.input_id(prev));
            let out = self.decoder.step(tape, pv, &state, x, &ctx)?;
            state = out.state;
            steps.push(out);
            prev = y;
        }
        Ok(steps)
    }

    /// Argmax decoding from SOS until EOS or `max_len` tokens.
    pub fn greedy_decode(&self, inst: &Instance, max_len: usize) -> Result<Decoded> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape, false);
        let (ctx, mut state) = self.start(&mut tape, &pv, inst)?;
        let mut prev = SOS;
        let mut ids = Vec::new();
        for _ in 0..max_len {
            let x = self.embed(&mut tape, inst.ext_map.input_id(prev));
            let out = self.decoder.step(&mut tape, &pv, &state, x, &ctx)?;
            let next = argmax(tape.value(out.p_final).data());
            if next == EOS {
                return Ok(Decoded {
                    ids,
                    stopped_at_eos: true,
                });
            }
            ids.push(next);
            state = out.state;
            prev = next;
        }
        Ok(Decoded {
            ids,
            stopped_at_eos: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::UNK;

    fn setup() -> (Model<f64>, Vocabulary, Instance) {
        let vocab = Vocabulary::build(&[vec!["a", "b", "c"]], 100, 1);
        let ex = TrainingExample::from_text("x", "a b zeta c", "b c", "a zeta");
        let inst = Instance::new(&ex, &vocab).unwrap();
        let mut rng = Rng::new(4);
        let dims = ModelDims::uniform(vocab.len(), 4, 5, 2);
        let model = Model::new(dims, EmbeddingTable::random(vocab.len(), 4, &mut rng), &mut rng).unwrap();
        (model, vocab, inst)
    }

    fn set(model: &mut Model<f64>, name: &str, index: usize, value: f64) {
        let id = model.params.find(name).unwrap();
        model.params.value_mut(id).data_mut()[index] = value;
    }

    #[test]
    fn instance_ids() {
        let (_, vocab, inst) = setup();
        let zeta = vocab.len();
        assert_eq!(inst.passage_ext_ids[2], zeta);
        assert_eq!(inst.passage_ids[2], UNK);
        assert_eq!(inst.target_ids, vec![vocab.lookup("a"), zeta, EOS]);
        assert_eq!(inst.surface(&inst.target_ids, &vocab), vec!["a", "zeta"]);
        let empty = TrainingExample::from_text("e", "a", "", "a");
        assert!(Instance::new(&empty, &vocab).is_err());
    }

    #[test]
    fn greedy_stops_at_eos() {
        let (mut model, _, inst) = setup();
        set(&mut model, "decoder.gate.bias", 0, 1000.0);
        set(&mut model, "decoder.out.b2", EOS, 1000.0);
        let out = model.greedy_decode(&inst, 5).unwrap();
        assert_eq!(out, Decoded { ids: vec![], stopped_at_eos: true });
        assert_eq!(out.with_eos(), vec![EOS]);
    }

    #[test]
    fn greedy_respects_length_cap() {
        let (mut model, _, inst) = setup();
        set(&mut model, "decoder.gate.bias", 0, 1000.0);
        set(&mut model, "decoder.out.b2", EOS, -1000.0);
        let out = model.greedy_decode(&inst, 3).unwrap();
        assert_eq!(out.ids.len(), 3);
        assert!(!out.stopped_at_eos);
        assert!(model.greedy_decode(&inst, 0).is_err());
    }

    #[test]
    fn greedy_copies_extended_tokens() {
        let (mut model, vocab, inst) = setup();
        // gate closed: every emitted id must come from the passage
        set(&mut model, "decoder.gate.bias", 0, -1000.0);
        let out = model.greedy_decode(&inst, 4).unwrap();
        assert!(out.ids.iter().all(|id| inst.passage_ext_ids.contains(id)));
        let again = model.greedy_decode(&inst, 4).unwrap();
        assert_eq!(out, again);
        assert_eq!(inst.surface(&out.ids, &vocab).len(), out.ids.len());
    }

    #[test]
    fn teacher_forcing_step_count() {
        let (model, _, inst) = setup();
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape, false);
        let steps = model.teacher_forced(&mut tape, &pv, &inst, &inst.target_ids).unwrap();
        assert_eq!(steps.len(), 3);
        assert_eq!(tape.value(steps[0].p_final).len(), inst.ext_map.extended_size());
    }
}
