//! Convolution and dense kernels with hand-written backward passes.
//!
//! Tensors are plain row-major slices: feature maps are `[channels][rows][cols]`,
//! conv weights `[out][in][ky][kx]`, dense weights `[in][out]`.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_rows: usize,
    pub in_cols: usize,
}

impl ConvGeometry {
    pub fn out_rows(&self) -> usize {
        (self.in_rows - self.kernel) / self.stride + 1
    }

    pub fn out_cols(&self) -> usize {
        (self.in_cols - self.kernel) / self.stride + 1
    }

    /// Length of one im2col column (one output pixel's receptive field).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_rows() * self.out_cols()
    }
}

/// Unfolds `input` into a `[patch_len x out_pixels]` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut Vec<T>) {
    let (oh, ow) = (g.out_rows(), g.out_cols());
    let p = oh * ow;
    cols.clear();
    cols.resize(g.patch_len() * p, T::zero());
    let plane = g.in_rows * g.in_cols;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &input[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &chan[(oy * g.stride + ky) * g.in_cols + kx..];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        *o = src[ox * g.stride];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input map.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let (oh, ow) = (g.out_rows(), g.out_cols());
    let p = oh * ow;
    let plane = g.in_rows * g.in_cols;
    input_grad.iter_mut().for_each(|x| *x = T::zero());
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut input_grad[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let base = (oy * g.stride + ky) * g.in_cols + kx;
                    for ox in 0..ow {
                        chan[base + ox * g.stride] += src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out = relu(W · cols + b)`. Only the activation is kept.
pub fn conv_forward<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    bias: &[T],
    cols: &[T],
    out: &mut Vec<T>,
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    out.clear();
    out.resize(g.out_channels * p, T::zero());
    for (o, &b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|x| *x = b);
    }
    T::gemm(
        g.out_channels,
        k,
        p,
        T::one(),
        weight,
        k as isize,
        1,
        cols,
        p as isize,
        1,
        T::one(),
        out,
        p as isize,
        1,
    );
    relu_in_place(out);
}

/// Backward of [`conv_forward`]. `grad_out` holds ∂L/∂activation and is masked in place.
/// Returns ∂L/∂cols when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    weight: &[T],
    cols: &[T],
    activation: &[T],
    grad_out: &mut [T],
    weight_grad: &mut [T],
    bias_grad: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let k = g.patch_len();
    let p = g.out_pixels();
    relu_backward(activation, grad_out);
    for (o, bg) in bias_grad.iter_mut().enumerate() {
        *bg += grad_out[o * p..(o + 1) * p].iter().copied().sum::<T>();
    }
    // dW += dY · colsᵀ
    T::gemm(
        g.out_channels,
        p,
        k,
        T::one(),
        grad_out,
        p as isize,
        1,
        cols,
        1,
        p as isize,
        T::one(),
        weight_grad,
        k as isize,
        1,
    );
    if !want_input {
        return None;
    }
    // dcols = Wᵀ · dY
    let mut dcols = vec![T::zero(); k * p];
    T::gemm(
        k,
        g.out_channels,
        p,
        T::one(),
        weight,
        1,
        k as isize,
        grad_out,
        p as isize,
        1,
        T::zero(),
        &mut dcols,
        p as isize,
        1,
    );
    Some(dcols)
}

/// Row-batched affine map: `out[r] = x[r] · W + b` for `rows` inputs of width `inp`.
pub fn dense_forward<T: Scalar>(
    rows: usize,
    inp: usize,
    outp: usize,
    weight: &[T],
    bias: &[T],
    x: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * outp);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    T::gemm(
        rows,
        inp,
        outp,
        T::one(),
        x,
        inp as isize,
        1,
        weight,
        outp as isize,
        1,
        T::one(),
        &mut out,
        outp as isize,
        1,
    );
    out
}

/// Accumulates weight/bias gradients of [`dense_forward`] and returns ∂L/∂x.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    rows: usize,
    inp: usize,
    outp: usize,
    weight: &[T],
    x: &[T],
    grad_out: &[T],
    weight_grad: &mut [T],
    bias_grad: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    for r in 0..rows {
        for (bg, &g) in bias_grad.iter_mut().zip(&grad_out[r * outp..(r + 1) * outp]) {
            *bg += g;
        }
    }
    // dW += Xᵀ · dY
    T::gemm(
        inp,
        rows,
        outp,
        T::one(),
        x,
        1,
        inp as isize,
        grad_out,
        outp as isize,
        1,
        T::one(),
        weight_grad,
        outp as isize,
        1,
    );
    if !want_input {
        return None;
    }
    let mut dx = vec![T::zero(); rows * inp];
    T::gemm(
        rows,
        outp,
        inp,
        T::one(),
        grad_out,
        outp as isize,
        1,
        weight,
        1,
        outp as isize,
        T::zero(),
        &mut dx,
        inp as isize,
        1,
    );
    Some(dx)
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward<T: Scalar>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &ConvGeometry, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_rows(), g.out_cols());
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let wi = ((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
                                let xi = (c * g.in_rows + oy * g.stride + ky) * g.in_cols
                                    + ox * g.stride
                                    + kx;
                                acc += w[wi] * x[xi];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        out
    }

    fn geometry() -> ConvGeometry {
        ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            in_rows: 7,
            in_cols: 9,
        }
    }

    #[test]
    fn output_size_is_valid_padding_arithmetic() {
        let g = geometry();
        assert_eq!((g.out_rows(), g.out_cols()), (3, 4));
    }

    #[test]
    fn im2col_convolution_matches_direct_loop() {
        let g = geometry();
        let x: Vec<f64> = (0..2 * 7 * 9).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..3 * g.patch_len()).map(|i| ((i as f64) * 0.13).sin()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let mut cols = Vec::new();
        im2col(&g, &x, &mut cols);
        let mut out = Vec::new();
        conv_forward(&g, &w, &b, &cols, &mut out);
        let want = direct_conv(&g, &w, &b, &x);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = geometry();
        let x: Vec<f64> = (0..2 * 7 * 9).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = Vec::new();
        im2col(&g, &x, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn dense_matches_naive() {
        let w = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3 x 2
        let b = vec![0.5, -0.5];
        let x = vec![1.0, 0.0, -1.0, 2.0, 2.0, 2.0];
        let y = dense_forward(2, 3, 2, &w, &b, &x);
        assert_eq!(y, vec![-1.5, -2.5, 12.5, 29.5]);
    }

    #[test]
    fn dense_backward_matches_finite_difference() {
        let w = vec![0.3, -0.2, 0.1, 0.7, 0.5, -0.4];
        let b = vec![0.0, 0.1];
        let x = vec![1.0, -2.0, 0.5];
        // L = sum(y * c)
        let c = [0.9, -1.3];
        let loss = |w: &[f64], x: &[f64]| -> f64 {
            dense_forward(1, 3, 2, w, &b, x).iter().zip(&c).map(|(y, c)| y * c).sum()
        };
        let mut wg = vec![0.0; 6];
        let mut bg = vec![0.0; 2];
        let dx = dense_backward(1, 3, 2, &w, &x, &c, &mut wg, &mut bg, true).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h);
            assert!((fd - wg[i]).abs() < 1e-8);
        }
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        assert_eq!(bg, c.to_vec());
    }
}
