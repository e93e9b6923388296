use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Square binary grid over an `n × n` map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(n: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "mask of side {n} needs {} cells, got {}",
                n * n,
                cells.len()
            )));
        }
        Ok(Mask { n, cells })
    }

    pub fn full(n: usize) -> Self {
        Mask {
            n,
            cells: vec![true; n * n],
        }
    }

    pub fn empty(n: usize) -> Self {
        Mask {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// 0-based row/column lookup.
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.n + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

fn check_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    mask: &Mask,
) -> Result<(usize, usize, usize, usize)> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 3 || is[0] != is[1] || is[0] != mask.n() {
        return Err(Error::ShapeMismatch(format!(
            "conv input {is:?} vs mask side {}",
            mask.n()
        )));
    }
    if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 || ks[2] != is[2] {
        return Err(Error::ShapeMismatch(format!(
            "conv kernel {ks:?} for input channels {}",
            is[2]
        )));
    }
    if bias.shape() != [ks[3]] {
        return Err(Error::ShapeMismatch(format!(
            "conv bias {:?} for {} output channels",
            bias.shape(),
            ks[3]
        )));
    }
    Ok((is[0], ks[0], ks[2], ks[3]))
}

/// Zero-padded "same" convolution over an `[n, n, c_in]` map with a
/// `[k, k, c_in, c_out]` kernel, followed by masking: every cell where `mask`
/// is false is exactly zero in the output.
pub fn conv2d_masked<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    mask: &Mask,
) -> Result<Tensor<T>> {
    let (n, k, cin, cout) = check_shapes(input, kernel, bias, mask)?;
    let r = k / 2;
    let x = input.data();
    let kd = kernel.data();
    let mut out = Tensor::zeros(&[n, n, cout]);
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..n {
            if !mask.get(i, j) {
                continue;
            }
            let acc = &mut od[(i * n + j) * cout..(i * n + j + 1) * cout];
            acc.copy_from_slice(bias.data());
            for di in 0..k {
                let Some(ii) = (i + di).checked_sub(r).filter(|v| *v < n) else {
                    continue;
                };
                for dj in 0..k {
                    let Some(jj) = (j + dj).checked_sub(r).filter(|v| *v < n) else {
                        continue;
                    };
                    let xin = &x[(ii * n + jj) * cin..(ii * n + jj + 1) * cin];
                    let tap = &kd[(di * k + dj) * cin * cout..(di * k + dj + 1) * cin * cout];
                    for (c, &xv) in xin.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        for (a, w) in acc.iter_mut().zip(&tap[c * cout..(c + 1) * cout]) {
                            *a += xv * *w;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv2d_masked`]. Gradients at masked output cells are
/// dropped. Kernel and bias gradients accumulate; the input gradient is
/// returned.
pub fn conv2d_masked_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    mask: &Mask,
    grad_out: &Tensor<T>,
    grad_kernel: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, k, cin, cout) = check_shapes(input, kernel, grad_bias, mask)?;
    if grad_out.shape() != [n, n, cout] || grad_kernel.shape() != kernel.shape() {
        return Err(Error::ShapeMismatch(format!(
            "conv backward grad_out {:?} grad_kernel {:?}",
            grad_out.shape(),
            grad_kernel.shape()
        )));
    }
    let r = k / 2;
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let gk = grad_kernel.data_mut();
    let mut grad_in = Tensor::zeros(&[n, n, cin]);
    let gi = grad_in.data_mut();
    let gb = grad_bias.data_mut();
    for i in 0..n {
        for j in 0..n {
            if !mask.get(i, j) {
                continue;
            }
            let gz = &go[(i * n + j) * cout..(i * n + j + 1) * cout];
            for (b, g) in gb.iter_mut().zip(gz) {
                *b += *g;
            }
            for di in 0..k {
                let Some(ii) = (i + di).checked_sub(r).filter(|v| *v < n) else {
                    continue;
                };
                for dj in 0..k {
                    let Some(jj) = (j + dj).checked_sub(r).filter(|v| *v < n) else {
                        continue;
                    };
                    let base = (ii * n + jj) * cin;
                    let tap_off = (di * k + dj) * cin * cout;
                    for c in 0..cin {
                        let w = &kd[tap_off + c * cout..tap_off + (c + 1) * cout];
                        let mut dot = T::zero();
                        for (a, b) in w.iter().zip(gz) {
                            dot += *a * *b;
                        }
                        gi[base + c] += dot;
                        let xv = x[base + c];
                        if xv != T::zero() {
                            let gw = &mut gk[tap_off + c * cout..tap_off + (c + 1) * cout];
                            for (a, b) in gw.iter_mut().zip(gz) {
                                *a += xv * *b;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
