//! Multi-perspective matching encoder.
//!
//! Passage and query are encoded by a shared BiLSTM. Every passage position is
//! then matched against the query with four strategies, each in both
//! directions, through the multi-perspective cosine `f_m`. The concatenated
//! matching vectors are smoothed by a second BiLSTM and appended to the
//! passage contextual vectors to form the attention memory.

use crate::error::{Error, Result};
use crate::lstm::LstmCell;
use crate::numerics::{cosine, Axis, Rng, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

/// Added to the attentive-matching weight sum.
pub const ATTENTIVE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Full,
    Maxpooling,
    Attentive,
    MaxAttentive,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Full,
        Strategy::Maxpooling,
        Strategy::Attentive,
        Strategy::MaxAttentive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Maxpooling => "maxpooling",
            Strategy::Attentive => "attentive",
            Strategy::MaxAttentive => "max_attentive",
        }
    }
}

/// Per-position BiLSTM states; `forward[i]` has seen tokens `..=i`,
/// `backward[i]` tokens `i..`.
#[derive(Clone, Debug)]
pub struct ContextualEncoding {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

impl ContextualEncoding {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// `[backward_i ; forward_i]`.
    pub fn concat<T: Scalar>(&self, tape: &mut Tape<T>, i: usize) -> Result<Var> {
        tape.concat(&[self.backward[i], self.forward[i]])
    }
}

pub fn encode_contextual<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    embeds: &[Var],
    fwd: &LstmCell,
    bwd: &LstmCell,
) -> Result<ContextualEncoding> {
    if embeds.is_empty() {
        return Err(Error::contract("contextual encoding of an empty sequence"));
    }
    Ok(ContextualEncoding {
        forward: fwd.run(tape, pv, embeds, false)?,
        backward: bwd.run(tape, pv, embeds, true)?,
    })
}

/// `m_k = cos(W_k ∘ v1, W_k ∘ v2)` for every row `W_k` of `w: l×d`.
pub fn f_m<T: Scalar>(tape: &mut Tape<T>, v1: Var, v2: Var, w: Var) -> Result<Var> {
    let a = tape.mul_row(w, v1)?;
    let b = tape.mul_row(w, v2)?;
    tape.row_cosine(a, b)
}

/// Matching weights for one strategy.
#[derive(Clone, Copy, Debug)]
pub struct DirectionalWeights {
    pub forward: Var,
    pub backward: Var,
}

fn check_query(query: &ContextualEncoding) -> Result<()> {
    if query.is_empty() {
        return Err(Error::contract("matching against an empty query"));
    }
    Ok(())
}

/// Each passage state against the query's final state in the same direction
/// (forward: last token; backward: first token).
pub fn full_matching<T: Scalar>(
    tape: &mut Tape<T>,
    passage: &ContextualEncoding,
    query: &ContextualEncoding,
    w: DirectionalWeights,
) -> Result<Vec<Var>> {
    check_query(query)?;
    let q_fwd = *query.forward.last().expect("nonempty");
    let q_bwd = query.backward[0];
    (0..passage.len())
        .map(|j| {
            let f = f_m(tape, passage.forward[j], q_fwd, w.forward)?;
            let b = f_m(tape, passage.backward[j], q_bwd, w.backward)?;
            tape.concat(&[f, b])
        })
        .collect()
}

/// Per dimension, the maximum of `f_m` against every query state.
pub fn maxpooling_matching<T: Scalar>(
    tape: &mut Tape<T>,
    passage: &ContextualEncoding,
    query: &ContextualEncoding,
    w: DirectionalWeights,
) -> Result<Vec<Var>> {
    check_query(query)?;
    let wq_f = weighted_all(tape, &query.forward, w.forward)?;
    let wq_b = weighted_all(tape, &query.backward, w.backward)?;
    (0..passage.len())
        .map(|j| {
            let f = max_over(tape, passage.forward[j], &wq_f, w.forward)?;
            let b = max_over(tape, passage.backward[j], &wq_b, w.backward)?;
            tape.concat(&[f, b])
        })
        .collect()
}

fn weighted_all<T: Scalar>(tape: &mut Tape<T>, states: &[Var], w: Var) -> Result<Vec<Var>> {
    states.iter().map(|&q| tape.mul_row(w, q)).collect()
}

fn max_over<T: Scalar>(tape: &mut Tape<T>, p: Var, wq: &[Var], w: Var) -> Result<Var> {
    let wp = tape.mul_row(w, p)?;
    let rows = wq
        .iter()
        .map(|&q| tape.row_cosine(wp, q))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&rows)?;
    tape.max_axis(stacked, Axis::Rows)
}

/// `f_m` against the cosine-weighted mean of the query states,
/// normalized by the raw weight sum plus [`ATTENTIVE_EPS`].
pub fn attentive_matching<T: Scalar>(
    tape: &mut Tape<T>,
    passage: &ContextualEncoding,
    query: &ContextualEncoding,
    w: DirectionalWeights,
) -> Result<Vec<Var>> {
    check_query(query)?;
    let qm_f = tape.stack_rows(&query.forward)?;
    let qm_b = tape.stack_rows(&query.backward)?;
    (0..passage.len())
        .map(|j| {
            let f = attentive_one(tape, passage.forward[j], &query.forward, qm_f, w.forward)?;
            let b = attentive_one(tape, passage.backward[j], &query.backward, qm_b, w.backward)?;
            tape.concat(&[f, b])
        })
        .collect()
}

fn attentive_one<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    qs: &[Var],
    q_matrix: Var,
    w: Var,
) -> Result<Var> {
    let weights = qs
        .iter()
        .map(|&q| tape.cosine(p, q))
        .collect::<Result<Vec<_>>>()?;
    let weights = tape.concat(&weights)?;
    let weighted = tape.vecmat(weights, q_matrix)?;
    let total = tape.sum(weights);
    let denom = tape.affine(total, T::one(), T::of(ATTENTIVE_EPS));
    let attended = tape.div_scalar(weighted, denom)?;
    f_m(tape, p, attended, w)
}

/// Index of the query state most cosine-similar to `p` (ties: smallest index).
pub fn most_similar<T: Scalar>(tape: &Tape<T>, p: Var, qs: &[Var]) -> Result<usize> {
    let pv = tape.value(p);
    let mut best = 0;
    let mut best_sim = T::neg_infinity();
    for (i, &q) in qs.iter().enumerate() {
        let s = cosine(pv, tape.value(q))?;
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    Ok(best)
}

/// `f_m` against the single most similar query state.
pub fn max_attentive_matching<T: Scalar>(
    tape: &mut Tape<T>,
    passage: &ContextualEncoding,
    query: &ContextualEncoding,
    w: DirectionalWeights,
) -> Result<Vec<Var>> {
    check_query(query)?;
    (0..passage.len())
        .map(|j| {
            let i_f = most_similar(tape, passage.forward[j], &query.forward)?;
            let i_b = most_similar(tape, passage.backward[j], &query.backward)?;
            let f = f_m(tape, passage.forward[j], query.forward[i_f], w.forward)?;
            let b = f_m(tape, passage.backward[j], query.backward[i_b], w.backward)?;
            tape.concat(&[f, b])
        })
        .collect()
}

pub fn apply_strategy<T: Scalar>(
    strategy: Strategy,
    tape: &mut Tape<T>,
    passage: &ContextualEncoding,
    query: &ContextualEncoding,
    w: DirectionalWeights,
) -> Result<Vec<Var>> {
    match strategy {
        Strategy::Full => full_matching(tape, passage, query, w),
        Strategy::Maxpooling => maxpooling_matching(tape, passage, query, w),
        Strategy::Attentive => attentive_matching(tape, passage, query, w),
        Strategy::MaxAttentive => max_attentive_matching(tape, passage, query, w),
    }
}

/// Per-position attention memory `[h^p_j ; smoothed m_j]`.
#[derive(Clone, Debug)]
pub struct MultiPerspectiveMemory {
    pub rows: Vec<Var>,
    /// The rows stacked as an `N × width` matrix.
    pub matrix: Var,
    pub width: usize,
}

impl MultiPerspectiveMemory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn build_memory<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    passage: &ContextualEncoding,
    matching: &[Var],
    smooth_fwd: &LstmCell,
    smooth_bwd: &LstmCell,
) -> Result<MultiPerspectiveMemory> {
    if matching.len() != passage.len() {
        return Err(Error::contract(format!(
            "passage has {} positions but matching has {}",
            passage.len(),
            matching.len()
        )));
    }
    let smoothed = encode_contextual(tape, pv, matching, smooth_fwd, smooth_bwd)?;
    let rows = (0..passage.len())
        .map(|j| {
            let h = passage.concat(tape, j)?;
            let m = smoothed.concat(tape, j)?;
            tape.concat(&[h, m])
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = tape.stack_rows(&rows)?;
    let width = tape.shape(rows[0])[0];
    Ok(MultiPerspectiveMemory {
        rows,
        matrix,
        width,
    })
}

/// Everything the encoder produces for one (passage, query) pair.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub passage: ContextualEncoding,
    pub query: ContextualEncoding,
    /// Per passage position, the `8l` raw matching values.
    pub matching: Vec<Var>,
    pub memory: MultiPerspectiveMemory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub context_fwd: LstmCell,
    pub context_bwd: LstmCell,
    /// `[strategy][direction]`, each `l × h`.
    pub matching: [[ParamId; 2]; 4],
    pub smooth_fwd: LstmCell,
    pub smooth_bwd: LstmCell,
    pub perspectives: usize,
}

impl Encoder {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        embed_dim: usize,
        hidden: usize,
        smoother_hidden: usize,
        perspectives: usize,
    ) -> Self {
        let context_fwd = LstmCell::register(store, rng, "encoder.context.fwd", embed_dim, hidden);
        let context_bwd = LstmCell::register(store, rng, "encoder.context.bwd", embed_dim, hidden);
        let matching = Strategy::ALL.map(|s| {
            ["fwd", "bwd"].map(|d| {
                store.add_uniform(
                    format!("encoder.match.{}.{d}", s.name()),
                    &[perspectives, hidden],
                    rng,
                )
            })
        });
        let match_width = 8 * perspectives;
        let smooth_fwd =
            LstmCell::register(store, rng, "encoder.smooth.fwd", match_width, smoother_hidden);
        let smooth_bwd =
            LstmCell::register(store, rng, "encoder.smooth.bwd", match_width, smoother_hidden);
        Self {
            context_fwd,
            context_bwd,
            matching,
            smooth_fwd,
            smooth_bwd,
            perspectives,
        }
    }

    pub fn memory_width(&self) -> usize {
        2 * self.context_fwd.hidden + 2 * self.smooth_fwd.hidden
    }

    pub fn weights(&self, pv: &ParamVars, strategy: Strategy) -> DirectionalWeights {
        let [f, b] = self.matching[strategy as usize];
        DirectionalWeights {
            forward: pv.get(f),
            backward: pv.get(b),
        }
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        passage_embeds: &[Var],
        query_embeds: &[Var],
    ) -> Result<EncoderOutput> {
        let passage = encode_contextual(tape, pv, passage_embeds, &self.context_fwd, &self.context_bwd)?;
        let query = encode_contextual(tape, pv, query_embeds, &self.context_fwd, &self.context_bwd)?;
        let per_strategy = Strategy::ALL
            .iter()
            .map(|&s| apply_strategy(s, tape, &passage, &query, self.weights(pv, s)))
            .collect::<Result<Vec<_>>>()?;
        let matching = (0..passage.len())
            .map(|j| {
                let parts: Vec<Var> = per_strategy.iter().map(|m| m[j]).collect();
                tape.concat(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        let memory = build_memory(tape, pv, &passage, &matching, &self.smooth_fwd, &self.smooth_bwd)?;
        Ok(EncoderOutput {
            passage,
            query,
            matching,
            memory,
        })
    }
}

/// Puts raw vectors on a tape as constants; handy for probing the strategies.
pub fn constant_encoding<T: Scalar>(
    tape: &mut Tape<T>,
    forward: &[Vec<T>],
    backward: &[Vec<T>],
) -> ContextualEncoding {
    let mut put = |vs: &[Vec<T>]| {
        vs.iter()
            .map(|v| tape.constant(Tensor::vector(v.clone())))
            .collect()
    };
    let forward = put(forward);
    let backward = put(backward);
    ContextualEncoding { forward, backward }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradCheck;

    fn vals(t: &Tape<f64>, v: Var) -> Vec<f64> {
        t.value(v).data().to_vec()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            0.0
        } else {
            d / (na * nb)
        }
    }

    fn had(w: &[f64], v: &[f64]) -> Vec<f64> {
        w.iter().zip(v).map(|(a, b)| a * b).collect()
    }

    /// Reference f_m from plain slices.
    fn f_m_ref(v1: &[f64], v2: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
        w.iter().map(|row| cos(&had(row, v1), &had(row, v2))).collect()
    }

    fn wvar(t: &mut Tape<f64>, rows: &[Vec<f64>]) -> Var {
        t.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn f_m_examples() {
        let mut t = Tape::<f64>::new();
        let v1 = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let v2 = t.constant(Tensor::vector(vec![2.0, 1.0]));
        let ones = wvar(&mut t, &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let m = f_m(&mut t, v1, v2, ones).unwrap();
        for x in vals(&t, m) {
            assert!((x - 0.8).abs() < 1e-15);
        }
        let w = wvar(&mut t, &[vec![0.3, -2.0], vec![1.5, 0.1]]);
        let m = f_m(&mut t, v1, v1, w).unwrap();
        for x in vals(&t, m) {
            assert!((x - 1.0).abs() < 1e-15);
        }
        let w = wvar(&mut t, &[vec![1.0, 0.0]]);
        let m = f_m(&mut t, v1, v2, w).unwrap();
        assert_eq!(vals(&t, m), vec![1.0]);
        let short = t.constant(Tensor::vector(vec![1.0]));
        assert!(f_m(&mut t, v1, short, w).is_err());
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let pf = vec![vec![1.0, 0.5], vec![-0.3, 0.8]];
        let pb = vec![vec![0.2, -1.0], vec![0.7, 0.7]];
        let qf = vec![vec![0.9, 0.1], vec![-0.4, 0.6], vec![0.5, -0.5]];
        let qb = vec![vec![0.1, 1.0], vec![1.0, -0.2], vec![-0.6, 0.3]];
        let wf = vec![vec![1.0, 0.5], vec![0.2, 2.0]];
        let wb = vec![vec![-1.0, 1.0], vec![0.4, 0.4]];
        (pf, pb, qf, qb, wf, wb)
    }

    fn setup(t: &mut Tape<f64>, q_len: usize) -> (ContextualEncoding, ContextualEncoding, DirectionalWeights) {
        let (pf, pb, qf, qb, wf, wb) = toy();
        let p = constant_encoding(t, &pf, &pb);
        let q = constant_encoding(t, &qf[..q_len], &qb[..q_len]);
        let w = DirectionalWeights {
            forward: wvar(t, &wf),
            backward: wvar(t, &wb),
        };
        (p, q, w)
    }

    #[test]
    fn full_matching_hand_values() {
        let mut t = Tape::new();
        let (p, q, w) = setup(&mut t, 2);
        let (pf, pb, qf, qb, wf, wb) = toy();
        let out = full_matching(&mut t, &p, &q, w).unwrap();
        for j in 0..2 {
            let mut expect = f_m_ref(&pf[j], &qf[1], &wf);
            expect.extend(f_m_ref(&pb[j], &qb[0], &wb));
            let got = vals(&t, out[j]);
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn maxpooling_enumerates_query() {
        let mut t = Tape::new();
        let (p, q, w) = setup(&mut t, 3);
        let (pf, pb, qf, qb, wf, wb) = toy();
        let out = maxpooling_matching(&mut t, &p, &q, w).unwrap();
        let full = full_matching(&mut t, &p, &q, w).unwrap();
        for j in 0..2 {
            let mut expect = vec![f64::NEG_INFINITY; 4];
            for i in 0..3 {
                let f = f_m_ref(&pf[j], &qf[i], &wf);
                let b = f_m_ref(&pb[j], &qb[i], &wb);
                for k in 0..2 {
                    expect[k] = expect[k].max(f[k]);
                    expect[2 + k] = expect[2 + k].max(b[k]);
                }
            }
            let got = vals(&t, out[j]);
            let fv = vals(&t, full[j]);
            for k in 0..4 {
                assert!((got[k] - expect[k]).abs() < 1e-14);
                assert!(got[k] >= fv[k]);
            }
        }
    }

    #[test]
    fn attentive_weighted_sum() {
        let mut t = Tape::new();
        let (p, q, w) = setup(&mut t, 2);
        let (pf, pb, qf, qb, wf, wb) = toy();
        let out = attentive_matching(&mut t, &p, &q, w).unwrap();
        let attend = |pj: &[f64], qs: &[Vec<f64>]| -> Vec<f64> {
            let ws: Vec<f64> = qs.iter().map(|q| cos(pj, q)).collect();
            let total: f64 = ws.iter().sum::<f64>() + 1e-8;
            (0..2)
                .map(|d| qs.iter().zip(&ws).map(|(q, w)| w * q[d]).sum::<f64>() / total)
                .collect()
        };
        for j in 0..2 {
            let mut expect = f_m_ref(&pf[j], &attend(&pf[j], &qf[..2]), &wf);
            expect.extend(f_m_ref(&pb[j], &attend(&pb[j], &qb[..2]), &wb));
            let got = vals(&t, out[j]);
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{got:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn attentive_with_identical_query_rows() {
        let mut t = Tape::new();
        let v = vec![0.4, -0.9];
        let p = constant_encoding(&mut t, &[vec![1.0, 0.3]], &[vec![0.2, 0.5]]);
        let q = constant_encoding(&mut t, &[v.clone(), v.clone(), v.clone()], &[v.clone(), v.clone(), v.clone()]);
        let w = DirectionalWeights {
            forward: wvar(&mut t, &[vec![1.0, 2.0]]),
            backward: wvar(&mut t, &[vec![0.5, 1.0]]),
        };
        let out = attentive_matching(&mut t, &p, &q, w).unwrap();
        let got = vals(&t, out[0]);
        assert!((got[0] - f_m_ref(&[1.0, 0.3], &v, &[vec![1.0, 2.0]])[0]).abs() < 1e-12);
        assert!((got[1] - f_m_ref(&[0.2, 0.5], &v, &[vec![0.5, 1.0]])[0]).abs() < 1e-12);
    }

    #[test]
    fn max_attentive_selects_equal_vector() {
        let mut t = Tape::new();
        let pj = vec![1.0, 0.0];
        let p = constant_encoding(&mut t, &[pj.clone()], &[pj.clone()]);
        let q = constant_encoding(
            &mut t,
            &[vec![0.0, 1.0], pj.clone(), vec![0.0, -2.0]],
            &[vec![0.0, 1.0], vec![0.0, 3.0], pj.clone()],
        );
        let w = DirectionalWeights {
            forward: wvar(&mut t, &[vec![1.0, 0.5], vec![2.0, 1.0]]),
            backward: wvar(&mut t, &[vec![1.0, 1.0], vec![0.3, 1.0]]),
        };
        assert_eq!(most_similar(&t, p.forward[0], &q.forward).unwrap(), 1);
        let out = max_attentive_matching(&mut t, &p, &q, w).unwrap();
        for x in vals(&t, out[0]) {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_query_collapses_strategies() {
        let mut t = Tape::new();
        let (p, q, w) = setup(&mut t, 1);
        let outs: Vec<Vec<Vec<f64>>> = Strategy::ALL
            .iter()
            .map(|&s| {
                let o = apply_strategy(s, &mut t, &p, &q, w).unwrap();
                o.iter().map(|&v| vals(&t, v)).collect()
            })
            .collect();
        for s in &outs[1..] {
            for (a, b) in s.iter().flatten().zip(outs[0].iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_query_rejected() {
        let mut t = Tape::new();
        let (p, _, w) = setup(&mut t, 1);
        let q = ContextualEncoding {
            forward: vec![],
            backward: vec![],
        };
        for s in Strategy::ALL {
            assert!(matches!(apply_strategy(s, &mut t, &p, &q, w), Err(Error::Contract(_))));
        }
    }

    fn cell(store: &mut ParamStore<f64>, rng: &mut Rng, name: &str, i: usize, h: usize) -> LstmCell {
        LstmCell::register(store, rng, name, i, h)
    }

    #[test]
    fn contextual_zero_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0);
        let f = cell(&mut store, &mut rng, "f", 3, 2);
        let b = cell(&mut store, &mut rng, "b", 3, 2);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let pv = store.bind(&mut t, false);
        let xs: Vec<Var> = (0..4).map(|_| t.constant(Tensor::zeros(&[3]))).collect();
        let enc = encode_contextual(&mut t, &pv, &xs, &f, &b).unwrap();
        for v in enc.forward.iter().chain(&enc.backward) {
            assert!(t.value(*v).data().iter().all(|&x| x == 0.0));
        }
        assert!(encode_contextual(&mut t, &pv, &[], &f, &b).is_err());
    }

    #[test]
    fn contextual_directionality() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(2);
        let f = cell(&mut store, &mut rng, "f", 3, 4);
        let b = cell(&mut store, &mut rng, "b", 3, 4);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| rng.uniform_vec(3, -1.0, 1.0)).collect();
        let run = |inputs: &[Vec<f64>]| {
            let mut t = Tape::new();
            let pv = store.bind(&mut t, false);
            let xs: Vec<Var> = inputs.iter().map(|x| t.constant(Tensor::vector(x.clone()))).collect();
            let enc = encode_contextual(&mut t, &pv, &xs, &f, &b).unwrap();
            let fw: Vec<Vec<f64>> = enc.forward.iter().map(|&v| vals(&t, v)).collect();
            let bw: Vec<Vec<f64>> = enc.backward.iter().map(|&v| vals(&t, v)).collect();
            (fw, bw)
        };
        let (f0, b0) = run(&inputs);
        let mut first = inputs.clone();
        first[0] = vec![0.9, -0.9, 0.5];
        let (f1, b1) = run(&first);
        assert_ne!(f0[2], f1[2]);
        assert_eq!(b0[1], b1[1]);
        assert_eq!(b0[2], b1[2]);
        let mut last = inputs.clone();
        last[2] = vec![0.9, -0.9, 0.5];
        let (f2, b2) = run(&last);
        assert_ne!(b0[0], b2[0]);
        assert_eq!(f0[0], f2[0]);
        assert_eq!(f0[1], f2[1]);
    }

    #[test]
    fn shared_cell_single_token_symmetry() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(8);
        let c = cell(&mut store, &mut rng, "c", 3, 4);
        let mut t = Tape::new();
        let pv = store.bind(&mut t, false);
        let x = t.constant(Tensor::vector(vec![0.1, 0.2, -0.3]));
        let enc = encode_contextual(&mut t, &pv, &[x], &c, &c).unwrap();
        assert_eq!(vals(&t, enc.forward[0]), vals(&t, enc.backward[0]));
    }

    #[test]
    fn memory_shapes_and_zero_smoother() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let (d, h, hs, l) = (3, 4, 5, 2);
        let enc = Encoder::register(&mut store, &mut rng, d, h, hs, l);
        for cell in [enc.smooth_fwd, enc.smooth_bwd] {
            store.value_mut(cell.weight).data_mut().fill(0.0);
            store.value_mut(cell.bias).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let pv = store.bind(&mut t, false);
        let p: Vec<Var> = (0..4).map(|_| t.constant(Tensor::vector(rng.uniform_vec(d, -1.0, 1.0)))).collect();
        let q: Vec<Var> = (0..2).map(|_| t.constant(Tensor::vector(rng.uniform_vec(d, -1.0, 1.0)))).collect();
        let out = enc.encode(&mut t, &pv, &p, &q).unwrap();
        assert_eq!(out.memory.len(), 4);
        assert_eq!(out.memory.width, 2 * h + 2 * hs);
        assert_eq!(enc.memory_width(), out.memory.width);
        for j in 0..4 {
            let row = vals(&t, out.memory.rows[j]);
            let ctx = out.passage.concat(&mut t, j).unwrap();
            assert_eq!(&row[..2 * h], &vals(&t, ctx)[..]);
            assert!(row[2 * h..].iter().all(|&x| x == 0.0));
            assert_eq!(t.shape(out.matching[j]), &[8 * l]);
            assert!(vals(&t, out.matching[j]).iter().all(|x| x.abs() <= 1.0));
        }
        let short = &out.matching[..3];
        assert!(build_memory(&mut t, &pv, &out.passage, short, &enc.smooth_fwd, &enc.smooth_bwd).is_err());
    }

    #[test]
    fn encoder_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(21);
        let (d, h, l) = (3, 3, 2);
        let enc = Encoder::register(&mut store, &mut rng, d, h, h, l);
        let p: Vec<Vec<f64>> = (0..3).map(|_| rng.uniform_vec(d, -1.0, 1.0)).collect();
        let q: Vec<Vec<f64>> = (0..2).map(|_| rng.uniform_vec(d, -1.0, 1.0)).collect();
        let probe: Vec<f64> = rng.uniform_vec(3 * enc.memory_width(), -1.0, 1.0);
        let rep = GradCheck::default()
            .run(store.values(), |t, v| {
                let pv = ParamVars::from_vars(v.to_vec());
                let pe: Vec<Var> = p.iter().map(|x| t.constant(Tensor::vector(x.clone()))).collect();
                let qe: Vec<Var> = q.iter().map(|x| t.constant(Tensor::vector(x.clone()))).collect();
                let out = enc.encode(t, &pv, &pe, &qe)?;
                let flat = t.concat(&out.memory.rows)?;
                let pr = t.constant(Tensor::vector(probe.clone()));
                t.dot(flat, pr)
            })
            .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
