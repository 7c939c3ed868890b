//! Stacked LSTM over a batch of equal-length sequences, gate order `i, f, g, o`.

use crate::scalar::Scalar;

pub struct LstmWeights<'a, T> {
    pub input: usize,
    pub hidden: usize,
    /// `[input x 4h]`
    pub w_ih: &'a [T],
    /// `[h x 4h]`
    pub w_hh: &'a [T],
    /// `[4h]`
    pub bias: &'a [T],
}

pub struct LstmGrads<'a, T> {
    pub w_ih: &'a mut [T],
    pub w_hh: &'a mut [T],
    pub bias: &'a mut [T],
}

/// Activations of one layer kept for backpropagation through time.
/// Every sequence-valued buffer is step-major: row `t * batch + b`.
pub struct LayerTape<T> {
    batch: usize,
    steps: usize,
    /// `[steps*B x input]`
    inputs: Vec<T>,
    /// Activated gates, `[steps*B x 4h]`.
    gates: Vec<T>,
    /// Cell states, `[(steps+1)*B x h]`, starting with the zero state.
    cells: Vec<T>,
    /// Hidden states, `[(steps+1)*B x h]`, starting with the zero state.
    hiddens: Vec<T>,
}

impl<T: Scalar> LayerTape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden states of every step, `[steps*B x h]`.
    pub fn outputs(&self) -> &[T] {
        let h = self.hiddens.len() / ((self.steps + 1) * self.batch);
        &self.hiddens[self.batch * h..]
    }

    /// Hidden state of the last step, `[B x h]`.
    pub fn last_output(&self) -> &[T] {
        let out = self.outputs();
        &out[out.len() - out.len() / self.steps..]
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Runs one layer over `inputs` (`[steps*B x input]`, step-major) from zero initial state.
pub fn layer_forward<T: Scalar>(w: &LstmWeights<'_, T>, batch: usize, steps: usize, inputs: Vec<T>) -> LayerTape<T> {
    let h = w.hidden;
    let g4 = 4 * h;
    let rows = steps * batch;
    assert_eq!(inputs.len(), rows * w.input, "lstm input size");
    let mut gates = Vec::with_capacity(rows * g4);
    for _ in 0..rows {
        gates.extend_from_slice(w.bias);
    }
    T::gemm(
        rows, w.input, g4, T::one(), &inputs, w.input as isize, 1, w.w_ih, g4 as isize, 1,
        T::one(), &mut gates, g4 as isize, 1,
    );
    let mut cells = vec![T::zero(); (steps + 1) * batch * h];
    let mut hiddens = vec![T::zero(); (steps + 1) * batch * h];
    let bh = batch * h;
    for t in 0..steps {
        let gate = &mut gates[t * batch * g4..(t + 1) * batch * g4];
        let (h_done, h_next) = hiddens.split_at_mut((t + 1) * bh);
        let h_prev = &h_done[t * bh..];
        T::gemm(
            batch, h, g4, T::one(), h_prev, h as isize, 1, w.w_hh, g4 as isize, 1, T::one(),
            gate, g4 as isize, 1,
        );
        let (c_done, c_next) = cells.split_at_mut((t + 1) * bh);
        let c_prev = &c_done[t * bh..];
        for b in 0..batch {
            let gb = &mut gate[b * g4..(b + 1) * g4];
            for j in 0..h {
                let i = sigmoid(gb[j]);
                let f = sigmoid(gb[h + j]);
                let g = gb[2 * h + j].tanh();
                let o = sigmoid(gb[3 * h + j]);
                gb[j] = i;
                gb[h + j] = f;
                gb[2 * h + j] = g;
                gb[3 * h + j] = o;
                let c = f * c_prev[b * h + j] + i * g;
                c_next[b * h + j] = c;
                h_next[b * h + j] = o * c.tanh();
            }
        }
    }
    LayerTape {
        batch,
        steps,
        inputs,
        gates,
        cells,
        hiddens,
    }
}

/// Backpropagates `grad_hidden` (∂L/∂h, `[steps*B x h]`) through one layer.
/// Accumulates parameter gradients and returns ∂L/∂x, `[steps*B x input]`.
pub fn layer_backward<T: Scalar>(
    w: &LstmWeights<'_, T>,
    grads: &mut LstmGrads<'_, T>,
    tape: &LayerTape<T>,
    grad_hidden: &[T],
) -> Vec<T> {
    let h = w.hidden;
    let g4 = 4 * h;
    let batch = tape.batch;
    let steps = tape.steps;
    let bh = batch * h;
    let rows = steps * batch;
    assert_eq!(grad_hidden.len(), rows * h, "lstm gradient size");
    let mut dh_rec = vec![T::zero(); bh];
    let mut dc_next = vec![T::zero(); bh];
    let mut dgates_all = vec![T::zero(); rows * g4];
    for t in (0..steps).rev() {
        let gates = &tape.gates[t * batch * g4..(t + 1) * batch * g4];
        let c_prev = &tape.cells[t * bh..(t + 1) * bh];
        let c = &tape.cells[(t + 1) * bh..(t + 2) * bh];
        let gh = &grad_hidden[t * bh..(t + 1) * bh];
        let dgates = &mut dgates_all[t * batch * g4..(t + 1) * batch * g4];
        for b in 0..batch {
            for j in 0..h {
                let k = b * h + j;
                let gb = b * g4;
                let (i, f, g, o) = (
                    gates[gb + j],
                    gates[gb + h + j],
                    gates[gb + 2 * h + j],
                    gates[gb + 3 * h + j],
                );
                let tc = c[k].tanh();
                let dh = gh[k] + dh_rec[k];
                let dc = dc_next[k] + dh * o * (T::one() - tc * tc);
                dgates[gb + j] = dc * g * i * (T::one() - i);
                dgates[gb + h + j] = dc * c_prev[k] * f * (T::one() - f);
                dgates[gb + 2 * h + j] = dc * i * (T::one() - g * g);
                dgates[gb + 3 * h + j] = dh * tc * o * (T::one() - o);
                dc_next[k] = dc * f;
            }
        }
        if t > 0 {
            // dh_{t-1} = dG · W_hhᵀ
            T::gemm(
                batch, g4, h, T::one(), dgates, g4 as isize, 1, w.w_hh, 1, g4 as isize, T::zero(),
                &mut dh_rec, h as isize, 1,
            );
        }
    }
    for row in dgates_all.chunks_exact(g4) {
        for (bg, &d) in grads.bias.iter_mut().zip(row) {
            *bg += d;
        }
    }
    // dW_ih += Xᵀ · dG ; dW_hh += H_prevᵀ · dG
    T::gemm(
        w.input, rows, g4, T::one(), &tape.inputs, 1, w.input as isize, &dgates_all, g4 as isize, 1,
        T::one(), grads.w_ih, g4 as isize, 1,
    );
    T::gemm(
        h, rows, g4, T::one(), &tape.hiddens[..rows * h], 1, h as isize, &dgates_all, g4 as isize, 1,
        T::one(), grads.w_hh, g4 as isize, 1,
    );
    let mut dx = vec![T::zero(); rows * w.input];
    T::gemm(
        rows, g4, w.input, T::one(), &dgates_all, g4 as isize, 1, w.w_ih, 1, g4 as isize,
        T::zero(), &mut dx, w.input as isize, 1,
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Owned {
        input: usize,
        hidden: usize,
        w_ih: Vec<f64>,
        w_hh: Vec<f64>,
        bias: Vec<f64>,
    }

    impl Owned {
        fn new(input: usize, hidden: usize) -> Self {
            let n = 4 * hidden;
            Self {
                input,
                hidden,
                w_ih: (0..n * input).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect(),
                w_hh: (0..n * hidden).map(|i| ((i as f64) * 0.91).cos() * 0.5).collect(),
                bias: (0..n).map(|i| (i as f64) * 0.05 - 0.2).collect(),
            }
        }

        fn view(&self) -> LstmWeights<'_, f64> {
            LstmWeights {
                input: self.input,
                hidden: self.hidden,
                w_ih: &self.w_ih,
                w_hh: &self.w_hh,
                bias: &self.bias,
            }
        }
    }

    // Loss = Σ_t Σ c_t · h_t for fixed coefficients.
    fn loss(net: &Owned, xs: &[f64], coef: &[f64]) -> f64 {
        let tape = layer_forward(&net.view(), 2, 4, xs.to_vec());
        tape.outputs().iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let net = Owned::new(3, 2);
        let xs: Vec<f64> = (0..24).map(|i| (i as f64 * 0.71).sin()).collect();
        let coef: Vec<f64> = (0..16).map(|i| (i as f64 * 1.3).cos()).collect();
        let tape = layer_forward(&net.view(), 2, 4, xs.clone());
        let mut gw = vec![0.0; net.w_ih.len()];
        let mut gh = vec![0.0; net.w_hh.len()];
        let mut gb = vec![0.0; net.bias.len()];
        let dx = {
            let mut grads = LstmGrads {
                w_ih: &mut gw,
                w_hh: &mut gh,
                bias: &mut gb,
            };
            layer_backward(&net.view(), &mut grads, &tape, &coef)
        };
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-7 * (1.0 + fd.abs()), "{fd} vs {analytic}");
        };
        for i in 0..net.w_ih.len() {
            let mut p = Owned::new(3, 2);
            p.w_ih[i] += h;
            let mut m = Owned::new(3, 2);
            m.w_ih[i] -= h;
            check(gw[i], loss(&p, &xs, &coef), loss(&m, &xs, &coef));
        }
        for i in 0..net.w_hh.len() {
            let mut p = Owned::new(3, 2);
            p.w_hh[i] += h;
            let mut m = Owned::new(3, 2);
            m.w_hh[i] -= h;
            check(gh[i], loss(&p, &xs, &coef), loss(&m, &xs, &coef));
        }
        for i in 0..net.bias.len() {
            let mut p = Owned::new(3, 2);
            p.bias[i] += h;
            let mut m = Owned::new(3, 2);
            m.bias[i] -= h;
            check(gb[i], loss(&p, &xs, &coef), loss(&m, &xs, &coef));
        }
        for i in 0..xs.len() {
            let mut xp = xs.clone();
            xp[i] += h;
            let mut xm = xs.clone();
            xm[i] -= h;
            check(dx[i], loss(&net, &xp, &coef), loss(&net, &xm, &coef));
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let net = Owned::new(3, 2);
        let xs: Vec<f64> = (0..18).map(|i| (i as f64 * 0.2).cos()).collect();
        let both = layer_forward(&net.view(), 2, 3, xs.clone());
        let first: Vec<f64> = xs.chunks(6).flat_map(|x| x[..3].to_vec()).collect();
        let alone = layer_forward(&net.view(), 1, 3, first);
        for t in 0..3 {
            for j in 0..2 {
                assert!((both.outputs()[t * 4 + j] - alone.outputs()[t * 2 + j]).abs() < 1e-14);
            }
        }
    }
}
