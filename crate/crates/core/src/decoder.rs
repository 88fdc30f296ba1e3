//! Attention LSTM decoder with coverage and copy.
//!
//! One step, given the previous word embedding `x` and state
//! `(s, cell, c, u)`:
//!
//! ```text
//! s'      = LSTM(s, [x; c])
//! e_i     = v_eᵀ tanh(W_h h_i + W_s s' + w_u u_i + b_e)
//! α       = softmax(e)
//! u'      = u + α
//! c'      = Σ_i α_i h_i
//! P_vocab = softmax(V_2 (V_1 [s'; c'] + b_1) + b_2)
//! g       = σ(w_cᵀ c' + w_sᵀ s' + w_xᵀ x + b_g)
//! P_attn  = α merged onto each position's (extended) token id
//! P_final = g P_vocab + (1 − g) P_attn
//! ```

use crate::encoder::MultiPerspectiveMemory;
use crate::error::{Error, Result};
use crate::lstm::LstmCell;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// `a × width`
    pub w_memory: ParamId,
    /// `a × h`
    pub w_state: ParamId,
    /// `a`; scales each position's scalar coverage.
    pub w_coverage: ParamId,
    pub bias: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputProjection {
    pub v1: ParamId,
    pub b1: ParamId,
    /// One row per vocabulary word.
    pub v2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CopyGate {
    pub w_context: ParamId,
    pub w_state: ParamId,
    pub w_input: ParamId,
    pub bias: ParamId,
}

/// `(s_t, cell_t, c_t, u_t)` after `step + 1` decoder steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    pub context: Var,
    pub coverage: Var,
    /// −1 before the first step.
    pub step: i64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub alpha: Var,
    pub gate: Var,
    pub p_vocab: Var,
    pub p_attn: Var,
    pub p_final: Var,
}

/// Per-example decoding inputs derived once from the memory.
#[derive(Clone, Debug)]
pub struct DecodeContext {
    pub memory: MultiPerspectiveMemory,
    /// `N × a`, the memory projected by `W_h`.
    pub memory_proj: Var,
    /// Extended-vocabulary id of every passage position.
    pub passage_ids: Vec<usize>,
    pub extended_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub lstm: LstmCell,
    pub attention: AttentionParams,
    pub output: OutputProjection,
    pub gate: CopyGate,
    pub vocab_size: usize,
    pub memory_width: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        embed_dim: usize,
        hidden: usize,
        memory_width: usize,
        attention_dim: usize,
        proj_dim: usize,
        vocab_size: usize,
    ) -> Self {
        let lstm = LstmCell::register(store, rng, "decoder.lstm", embed_dim + memory_width, hidden);
        let attention = AttentionParams {
            w_memory: store.add_uniform("decoder.attn.w_memory", &[attention_dim, memory_width], rng),
            w_state: store.add_uniform("decoder.attn.w_state", &[attention_dim, hidden], rng),
            w_coverage: store.add_uniform("decoder.attn.w_coverage", &[attention_dim], rng),
            bias: store.add_uniform("decoder.attn.bias", &[attention_dim], rng),
            v: store.add_uniform("decoder.attn.v", &[attention_dim], rng),
        };
        let output = OutputProjection {
            v1: store.add_uniform("decoder.out.v1", &[proj_dim, hidden + memory_width], rng),
            b1: store.add_uniform("decoder.out.b1", &[proj_dim], rng),
            v2: store.add_uniform("decoder.out.v2", &[vocab_size, proj_dim], rng),
            b2: store.add_uniform("decoder.out.b2", &[vocab_size], rng),
        };
        let gate = CopyGate {
            w_context: store.add_uniform("decoder.gate.w_context", &[memory_width], rng),
            w_state: store.add_uniform("decoder.gate.w_state", &[hidden], rng),
            w_input: store.add_uniform("decoder.gate.w_input", &[embed_dim], rng),
            bias: store.add_uniform("decoder.gate.bias", &[1], rng),
        };
        Self {
            lstm,
            attention,
            output,
            gate,
            vocab_size,
            memory_width,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    /// Zero `s`, `cell`, `c`, `u`.
    pub fn initial_state<T: Scalar>(&self, tape: &mut Tape<T>, positions: usize) -> DecoderState {
        let (hidden, cell) = self.lstm.zero_state(tape);
        DecoderState {
            hidden,
            cell,
            context: tape.constant(Tensor::zeros(&[self.memory_width])),
            coverage: tape.constant(Tensor::zeros(&[positions])),
            step: -1,
        }
    }

    pub fn prepare<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        memory: MultiPerspectiveMemory,
        passage_ids: Vec<usize>,
        extended_size: usize,
    ) -> Result<DecodeContext> {
        if memory.is_empty() {
            return Err(Error::contract("decoding over an empty memory"));
        }
        if passage_ids.len() != memory.len() {
            return Err(Error::contract(format!(
                "{} passage ids for {} memory rows",
                passage_ids.len(),
                memory.len()
            )));
        }
        if extended_size < self.vocab_size || passage_ids.iter().any(|&i| i >= extended_size) {
            return Err(Error::contract("passage id outside the extended vocabulary"));
        }
        let wt = tape.transpose(pv.get(self.attention.w_memory))?;
        let memory_proj = tape.matmul(memory.matrix, wt)?;
        Ok(DecodeContext {
            memory,
            memory_proj,
            passage_ids,
            extended_size,
        })
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        state: &DecoderState,
        prev_embedding: Var,
        ctx: &DecodeContext,
    ) -> Result<StepOutput> {
        let a = &self.attention;
        let lstm_in = tape.concat(&[prev_embedding, state.context])?;
        let (s, cell) = self.lstm.step(tape, pv, lstm_in, state.hidden, state.cell)?;

        let ws = tape.matvec(pv.get(a.w_state), s)?;
        let query = tape.add(ws, pv.get(a.bias))?;
        let cov = tape.outer(state.coverage, pv.get(a.w_coverage))?;
        let pre = tape.add(ctx.memory_proj, cov)?;
        let pre = tape.add_row(pre, query)?;
        let act = tape.tanh(pre);
        let scores = tape.matvec(act, pv.get(a.v))?;
        let alpha = tape.softmax(scores)?;
        let coverage = tape.add(state.coverage, alpha)?;
        let context = tape.vecmat(alpha, ctx.memory.matrix)?;

        let o = &self.output;
        let sc = tape.concat(&[s, context])?;
        let hid = tape.matvec(pv.get(o.v1), sc)?;
        let hid = tape.add(hid, pv.get(o.b1))?;
        let logits = tape.matvec(pv.get(o.v2), hid)?;
        let logits = tape.add(logits, pv.get(o.b2))?;
        let p_vocab = tape.softmax(logits)?;

        let g = &self.gate;
        let gc = tape.dot(pv.get(g.w_context), context)?;
        let gs = tape.dot(pv.get(g.w_state), s)?;
        let gx = tape.dot(pv.get(g.w_input), prev_embedding)?;
        let z = tape.add(gc, gs)?;
        let z = tape.add(z, gx)?;
        let z = tape.add(z, pv.get(g.bias))?;
        let gate = tape.sigmoid(z);

        let p_attn = tape.scatter_add(alpha, &ctx.passage_ids, ctx.extended_size)?;
        let p_gen = tape.pad(p_vocab, ctx.extended_size)?;
        let gen = tape.scale(p_gen, gate)?;
        let copy_weight = tape.affine(gate, -T::one(), T::one());
        let copy = tape.scale(p_attn, copy_weight)?;
        let p_final = tape.add(gen, copy)?;

        Ok(StepOutput {
            state: DecoderState {
                hidden: s,
                cell,
                context,
                coverage,
                step: state.step + 1,
            },
            alpha,
            gate,
            p_vocab,
            p_attn,
            p_final,
        })
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
