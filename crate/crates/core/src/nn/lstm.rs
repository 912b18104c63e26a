//! LSTM cell with truncation-free backpropagation through time.
//!
//! Gate layout along the `4H` axis is `[input, forget, cell, output]`.

use rand::Rng;

use super::params::{uniform, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
}

/// Hidden and cell state, each `[batch, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.h.all_finite() && self.c.all_finite()
    }
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    h_prev: Tensor<T>,
    c_prev: Tensor<T>,
    /// Activated gates `[batch, 4H]`.
    gates: Tensor<T>,
    tanh_c: Tensor<T>,
}

/// Recorded sequence pass.
#[derive(Debug, Clone, Default)]
pub struct LstmTape<T> {
    xs: Option<Tensor<T>>,
    steps: Vec<StepCache<T>>,
}

impl Lstm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = params.add(format!("{name}.w_x"), uniform(&[4 * hidden, input], bound, rng));
        let w_h = params.add(format!("{name}.w_h"), uniform(&[4 * hidden, hidden], bound, rng));
        let mut b = Tensor::zeros(&[4 * hidden]);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        let bias = params.add(format!("{name}.bias"), b);
        Self {
            input,
            hidden,
            w_x,
            w_h,
            bias,
        }
    }

    pub fn input_weight(&self) -> ParamId {
        self.w_x
    }

    fn check_state<T: Scalar>(&self, state: &LstmState<T>, batch: usize) -> Result<()> {
        let want = [batch, self.hidden];
        if state.h.shape() != want || state.c.shape() != want {
            return Err(Error::shape("lstm state", &want, state.h.shape()));
        }
        Ok(())
    }

    fn cell<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x_proj: &[T],
        state: &LstmState<T>,
    ) -> (Tensor<T>, LstmState<T>, Tensor<T>) {
        let (n, hd) = (state.h.rows(), self.hidden);
        let mut gates = Tensor::zeros(&[n, 4 * hd]);
        gates.data_mut().copy_from_slice(x_proj);
        matmul_bt(
            state.h.data(),
            params.get(self.w_h).data(),
            n,
            hd,
            4 * hd,
            T::one(),
            gates.data_mut(),
        );
        let mut h = Tensor::zeros(&[n, hd]);
        let mut c = Tensor::zeros(&[n, hd]);
        let mut tanh_c = Tensor::zeros(&[n, hd]);
        for r in 0..n {
            let g = gates.row_mut(r);
            for j in 0..hd {
                g[j] = sigmoid(g[j]);
                g[hd + j] = sigmoid(g[hd + j]);
                g[2 * hd + j] = g[2 * hd + j].tanh();
                g[3 * hd + j] = sigmoid(g[3 * hd + j]);
            }
            let g = gates.row(r);
            let c_prev = state.c.row(r);
            for j in 0..hd {
                let cj = g[hd + j] * c_prev[j] + g[j] * g[2 * hd + j];
                let tc = cj.tanh();
                c.row_mut(r)[j] = cj;
                tanh_c.row_mut(r)[j] = tc;
                h.row_mut(r)[j] = g[3 * hd + j] * tc;
            }
        }
        (gates, LstmState { h, c }, tanh_c)
    }

    fn project_inputs<T: Scalar>(&self, params: &ParamSet<T>, xs: &[T], rows: usize) -> Vec<T> {
        let four_h = 4 * self.hidden;
        let mut proj = vec![T::zero(); rows * four_h];
        let b = params.get(self.bias).data();
        for r in proj.chunks_exact_mut(four_h) {
            r.copy_from_slice(b);
        }
        matmul_bt(xs, params.get(self.w_x).data(), rows, self.input, four_h, T::one(), &mut proj);
        proj
    }

    /// Single step, no recording. `x` is `[batch, input]`.
    pub fn step<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        state: &LstmState<T>,
    ) -> Result<LstmState<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.input {
            return Err(Error::shape("lstm step", &[x.rows(), self.input], x.shape()));
        }
        self.check_state(state, x.rows())?;
        let proj = self.project_inputs(params, x.data(), x.rows());
        Ok(self.cell(params, &proj, state).1)
    }

    /// Runs a whole sequence `xs [steps, batch, input]`; returns `[steps, batch, hidden]`
    /// and the final state.
    pub fn forward_seq<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        xs: &Tensor<T>,
        init: &LstmState<T>,
        mut tape: Option<&mut LstmTape<T>>,
    ) -> Result<(Tensor<T>, LstmState<T>)> {
        let s = xs.shape();
        if s.len() != 3 || s[2] != self.input {
            return Err(Error::shape("lstm sequence", &[0, 0, self.input], s));
        }
        let (steps, n) = (s[0], s[1]);
        self.check_state(init, n)?;
        let proj = self.project_inputs(params, xs.data(), steps * n);
        let four_h = 4 * self.hidden;
        let mut out = Tensor::zeros(&[steps, n, self.hidden]);
        let mut state = init.clone();
        if let Some(t) = tape.as_deref_mut() {
            t.xs = Some(xs.clone());
            t.steps.clear();
        }
        for t in 0..steps {
            let (gates, next, tanh_c) =
                self.cell(params, &proj[t * n * four_h..(t + 1) * n * four_h], &state);
            out.row_mut(t).copy_from_slice(next.h.data());
            let prev = std::mem::replace(&mut state, next);
            if let Some(tp) = tape.as_deref_mut() {
                tp.steps.push(StepCache {
                    h_prev: prev.h,
                    c_prev: prev.c,
                    gates,
                    tanh_c,
                });
            }
        }
        Ok((out, state))
    }

    /// BPTT from per-step hidden-output gradients `dh [steps, batch, hidden]`.
    /// Returns `dL/dxs`.
    pub fn backward_seq<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        tape: &LstmTape<T>,
        dh_out: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let xs = tape.xs.as_ref().ok_or_else(|| {
            Error::ContractViolation("lstm backward without a recorded sequence".into())
        })?;
        let (steps, n) = (xs.shape()[0], xs.shape()[1]);
        if dh_out.shape() != [steps, n, self.hidden] {
            return Err(Error::shape("lstm backward", &[steps, n, self.hidden], dh_out.shape()));
        }
        let hd = self.hidden;
        let four_h = 4 * hd;
        let mut d_gates_all = vec![T::zero(); steps * n * four_h];
        let mut dh_next = vec![T::zero(); n * hd];
        let mut dc_next = vec![T::zero(); n * hd];
        let w_h = params.get(self.w_h).data();

        for t in (0..steps).rev() {
            let cache = &tape.steps[t];
            let dg = &mut d_gates_all[t * n * four_h..(t + 1) * n * four_h];
            let dh_t = dh_out.row(t);
            for r in 0..n {
                let g = cache.gates.row(r);
                let tc = cache.tanh_c.row(r);
                let c_prev = cache.c_prev.row(r);
                let dgr = &mut dg[r * four_h..(r + 1) * four_h];
                for j in 0..hd {
                    let idx = r * hd + j;
                    let (ig, fg, cg, og) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let dh = dh_t[idx] + dh_next[idx];
                    let d_o = dh * tc[j];
                    let dc = dc_next[idx] + dh * og * (T::one() - tc[j] * tc[j]);
                    dgr[j] = dc * cg * ig * (T::one() - ig);
                    dgr[hd + j] = dc * c_prev[j] * fg * (T::one() - fg);
                    dgr[2 * hd + j] = dc * ig * (T::one() - cg * cg);
                    dgr[3 * hd + j] = d_o * og * (T::one() - og);
                    dc_next[idx] = dc * fg;
                }
            }
            matmul_at(dg, cache.h_prev.data(), n, four_h, hd, T::one(), grads.get_mut(self.w_h).data_mut());
            matmul(dg, w_h, n, four_h, hd, T::zero(), &mut dh_next);
        }

        let rows = steps * n;
        matmul_at(&d_gates_all, xs.data(), rows, four_h, self.input, T::one(), grads.get_mut(self.w_x).data_mut());
        let db = grads.get_mut(self.bias).data_mut();
        for r in d_gates_all.chunks_exact(four_h) {
            for (d, &g) in db.iter_mut().zip(r) {
                *d = *d + g;
            }
        }
        let mut dxs = Tensor::zeros(xs.shape());
        matmul(&d_gates_all, params.get(self.w_x).data(), rows, four_h, self.input, T::zero(), dxs.data_mut());
        Ok(dxs)
    }
}
