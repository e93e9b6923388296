//! Standard LSTM cell (no peepholes). Gate blocks are stacked in the order
//! input, forget, output, candidate: rows `[0,h)` of `w`, `u` and `b` belong to
//! the input gate, `[h,2h)` to the forget gate, and so on.

use rand::Rng;

use crate::error::{Error, Result};

use super::ops::sigmoid;
use super::{matvec_acc, matvec_t_acc, outer_acc, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams<T> {
    /// `[4h, d_in]`
    pub w: Tensor<T>,
    /// `[4h, h]`
    pub u: Tensor<T>,
    /// `[4h]`
    pub b: Tensor<T>,
}

impl<T: Real> LstmCellParams<T> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: Tensor::zeros(&[4 * hidden, input_dim]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Xavier-uniform weights per gate block, zero biases except the forget
    /// gate bias, which starts at 1.
    pub fn xavier<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let wa = (6.0 / (input_dim + hidden) as f64).sqrt();
        let ua = (6.0 / (2 * hidden) as f64).sqrt();
        for v in p.w.data_mut() {
            *v = T::lit(rng.gen_range(-wa..wa));
        }
        for v in p.u.data_mut() {
            *v = T::lit(rng.gen_range(-ua..ua));
        }
        for v in &mut p.b.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn check(&self) -> Result<()> {
        let h = self.hidden();
        let ok = self.b.shape() == [4 * h]
            && self.w.shape().len() == 2
            && self.w.shape()[0] == 4 * h
            && self.u.shape() == [4 * h, h];
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "lstm params w{:?} u{:?} b{:?}",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )))
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden())
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct LstmStep<T> {
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// Post-activation gates `[i | f | o | g]`.
    pub gates: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

pub fn lstm_cell_forward<T: Real>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LstmCellParams<T>,
) -> Result<LstmStep<T>> {
    let h = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::ShapeMismatch(format!(
            "lstm_cell: x={} h={} c={} for d_in={} d_h={h}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.input_dim()
        )));
    }
    let mut z = p.b.data().to_vec();
    matvec_acc(&mut z, p.w.data(), x);
    matvec_acc(&mut z, p.u.data(), h_prev);
    for v in &mut z[..3 * h] {
        *v = sigmoid(*v);
    }
    for v in &mut z[3 * h..] {
        *v = v.tanh();
    }
    let mut c = vec![T::zero(); h];
    let mut tanh_c = vec![T::zero(); h];
    let mut hn = vec![T::zero(); h];
    for k in 0..h {
        let (i, f, o, g) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
        c[k] = f * c_prev[k] + i * g;
        tanh_c[k] = c[k].tanh();
        hn[k] = o * tanh_c[k];
    }
    Ok(LstmStep {
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates: z,
        c,
        tanh_c,
        h: hn,
    })
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_cell<T: Real>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LstmCellParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let s = lstm_cell_forward(x, h_prev, c_prev, p)?;
    Ok((s.h, s.c))
}

/// Backward through one step. `dh`/`dc` are gradients w.r.t. the step's
/// outputs; parameter gradients accumulate into `grads`, the input gradient
/// into `dx`. Returns `(dh_prev, dc_prev)`.
pub fn lstm_cell_backward<T: Real>(
    step: &LstmStep<T>,
    x: &[T],
    dh: &[T],
    dc: &[T],
    p: &LstmCellParams<T>,
    grads: &mut LstmCellParams<T>,
    dx: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let h = p.hidden();
    let one = T::one();
    let mut dz = vec![T::zero(); 4 * h];
    let mut dc_prev = vec![T::zero(); h];
    for k in 0..h {
        let (i, f, o, g) = (
            step.gates[k],
            step.gates[h + k],
            step.gates[2 * h + k],
            step.gates[3 * h + k],
        );
        let tc = step.tanh_c[k];
        let d_o = dh[k] * tc;
        let dct = dc[k] + dh[k] * o * (one - tc * tc);
        let di = dct * g;
        let dg = dct * i;
        let df = dct * step.c_prev[k];
        dc_prev[k] = dct * f;
        dz[k] = di * i * (one - i);
        dz[h + k] = df * f * (one - f);
        dz[2 * h + k] = d_o * o * (one - o);
        dz[3 * h + k] = dg * (one - g * g);
    }
    outer_acc(grads.w.data_mut(), &dz, x);
    outer_acc(grads.u.data_mut(), &dz, &step.h_prev);
    for (gb, d) in grads.b.data_mut().iter_mut().zip(&dz) {
        *gb += *d;
    }
    matvec_t_acc(dx, p.w.data(), &dz);
    let mut dh_prev = vec![T::zero(); h];
    matvec_t_acc(&mut dh_prev, p.u.data(), &dz);
    (dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_params_zero_state_gives_zero_output() {
        let p = LstmCellParams::<f64>::zeros(3, 4);
        let (h, c) = lstm_cell(&[0.3, -1.0, 2.0], &[0.5; 4], &[0.0; 4], &p).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn zero_params_halve_the_cell_state() {
        let p = LstmCellParams::<f64>::zeros(2, 3);
        let v = [1.0, -2.0, 0.5];
        let (h, c) = lstm_cell(&[0.7, 0.1], &[0.0; 3], &v, &p).unwrap();
        for k in 0..3 {
            assert_eq!(c[k], 0.5 * v[k]);
            assert_eq!(h[k], 0.5 * (0.5 * v[k]).tanh());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = LstmCellParams::<f64>::zeros(3, 4);
        let err = lstm_cell(&[0.0; 2], &[0.0; 4], &[0.0; 4], &p).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn xavier_sets_forget_bias() {
        let p = LstmCellParams::<f64>::xavier(3, 2, &mut seeded(1));
        assert_eq!(p.b.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        p.check().unwrap();
    }
}
