//! Standard gated LSTM cell over the kernel tape.
//!
//! Gate blocks are stacked in one `4h × (input + h)` matrix in the order
//! input, forget, output, candidate:
//!
//! ```text
//! z = W [x; h] + b
//! i = σ(z_i)   f = σ(z_f)   o = σ(z_o)   g = tanh(z_g)
//! c' = f ∘ c + i ∘ g
//! h' = o ∘ tanh(c')
//! ```

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Registers `<name>.weight` and `<name>.bias`; forget-gate bias starts at 1.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[4 * hidden, input + hidden], rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[4 * hidden], rng);
        store.value_mut(bias).data_mut()[hidden..2 * hidden].fill(T::one());
        Self {
            weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>) -> (Var, Var) {
        let h = tape.constant(Tensor::zeros(&[self.hidden]));
        let c = tape.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    /// One step; returns `(hidden, cell)`.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let n = self.hidden;
        let xh = tape.concat(&[x, h])?;
        let z = tape.matvec(pv.get(self.weight), xh)?;
        let z = tape.add(z, pv.get(self.bias))?;
        let zi = tape.slice(z, 0, n)?;
        let zf = tape.slice(z, n, n)?;
        let zo = tape.slice(z, 2 * n, n)?;
        let zg = tape.slice(z, 3 * n, n)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let o = tape.sigmoid(zo);
        let g = tape.tanh(zg);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Runs over `xs` from a zero state, left-to-right or right-to-left.
    /// Hidden states are returned in position order either way.
    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        xs: &[Var],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::contract("LSTM over an empty sequence"));
        }
        let (mut h, mut c) = self.zero_state(tape);
        let mut out = vec![h; xs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..xs.len()).rev())
        } else {
            Box::new(0..xs.len())
        };
        for i in order {
            (h, c) = self.step(tape, pv, xs[i], h, c)?;
            out[i] = h;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GradCheck;

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::register(&mut store, &mut Rng::new(0), "cell", 3, 2);
        let b = store.value(cell.bias).data();
        assert_eq!(&b[2..4], &[1.0, 1.0]);
        assert!(b[..2].iter().chain(&b[4..]).all(|v| v.abs() < 0.1));
        assert_eq!(store.value(cell.weight).shape(), &[8, 5]);
    }

    #[test]
    fn single_step_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        let cell = LstmCell::register(&mut store, &mut rng, "cell", 3, 4);
        let x = Tensor::vector(rng.uniform_vec(3, -1.0, 1.0));
        let h = Tensor::vector(rng.uniform_vec(4, -1.0, 1.0));
        let c = Tensor::vector(rng.uniform_vec(4, -1.0, 1.0));
        let probe = Tensor::vector(rng.uniform_vec(8, -1.0, 1.0));
        let mut inputs = store.values().to_vec();
        inputs.extend([x, h, c]);
        let rep = GradCheck::default()
            .run(&inputs, |t, v| {
                let pv = ParamVars::from_vars(v[..2].to_vec());
                let (h2, c2) = cell.step(t, &pv, v[2], v[3], v[4])?;
                let both = t.concat(&[h2, c2])?;
                let p = t.constant(probe.clone());
                t.dot(both, p)
            })
            .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
