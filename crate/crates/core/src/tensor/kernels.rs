use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Transpose {
    No,
    Yes,
}

/// `c[m x n] = op(a)[m x k] * op(b)[k x n]`, added onto `c` when `accumulate`.
///
/// `a` is stored `m x k` (or `k x m` when transposed); likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs storage");
    assert_eq!(b.len(), k * n, "gemm: rhs storage");
    assert_eq!(c.len(), m * n, "gemm: output storage");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: storage lengths were checked against the strides above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a[m x k]` and `b[k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        Transpose::No,
        b.data(),
        Transpose::No,
        out.data_mut(),
        false,
    );
    Ok(out)
}

/// Normalizes `[C,H,W]` or `[N,C,H,W]` to `(n, c, h, w)`.
fn image_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(op, shape, &[0, 0, 0])),
    }
}

fn with_batch_shape(input_shape: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if input_shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

/// Unfolds one `[c, h, w]` image into `[c*9, h*w]` patch columns for a
/// 3x3 kernel with zero padding 1.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(
    op: &'static str,
    input: &[usize],
    kernels: &[usize],
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = image_dims(input, op)?;
    match *kernels {
        [cout, cin, 3, 3] if cin == c => Ok((n, c, h, w, cout)),
        _ => Err(Error::dim(op, input, kernels)),
    }
}

/// 3x3 cross-correlation (no kernel flip), stride 1, zero padding 1, plus a
/// per-output-channel bias. Accepts `[C,H,W]` or `[N,C,H,W]` input.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w, cout) = check_conv_shapes("conv2d", input.shape(), kernels.shape())?;
    if bias.shape() != [cout] {
        return Err(Error::dim("conv2d bias", bias.shape(), &[cout]));
    }
    let mut out = Tensor::zeros(&with_batch_shape(input.shape(), n, cout, h, w));
    conv2d_forward_into(
        input.data(),
        (n, c, h, w),
        kernels.data(),
        cout,
        bias.data(),
        out.data_mut(),
    );
    Ok(out)
}

pub(crate) fn conv2d_forward_into<T: Scalar>(
    input: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    kernels: &[T],
    cout: usize,
    bias: &[T],
    out: &mut [T],
) {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for b in 0..n {
        im2col(&input[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
        let out_img = &mut out[b * cout * hw..(b + 1) * cout * hw];
        gemm(
            cout,
            c * 9,
            hw,
            kernels,
            Transpose::No,
            &cols,
            Transpose::No,
            out_img,
            false,
        );
        for (co, plane) in out_img.chunks_exact_mut(hw).enumerate() {
            let bv = bias[co];
            for v in plane {
                *v = *v + bv;
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its three operands.
#[derive(Clone, Debug)]
pub struct Conv2dGrads<T = f32> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (n, c, h, w, cout) = check_conv_shapes("conv2d_backward", input.shape(), kernels.shape())?;
    let expected = with_batch_shape(input.shape(), n, cout, h, w);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::dim("conv2d_backward", grad_out.shape(), &expected));
    }
    let mut grads = Conv2dGrads {
        input: Tensor::zeros(input.shape()),
        kernels: Tensor::zeros(kernels.shape()),
        bias: Tensor::zeros(&[cout]),
    };
    conv2d_backward_into(
        input.data(),
        (n, c, h, w),
        kernels.data(),
        cout,
        grad_out.data(),
        Some((grads.kernels.data_mut(), grads.bias.data_mut())),
        Some(grads.input.data_mut()),
    );
    Ok(grads)
}

/// Backward pass of a batched 3x3 convolution. Parameter gradients are
/// accumulated into `params`, the input gradient overwrites `grad_input`;
/// either may be skipped.
pub(crate) fn conv2d_backward_into<T: Scalar>(
    input: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    kernels: &[T],
    cout: usize,
    grad_out: &[T],
    mut params: Option<(&mut [T], &mut [T])>,
    mut grad_input: Option<&mut [T]>,
) {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.fill(T::zero());
    }
    for b in 0..n {
        let go = &grad_out[b * cout * hw..(b + 1) * cout * hw];
        if let Some((gk, gb)) = params.as_mut() {
            im2col(&input[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
            gemm(
                cout,
                hw,
                c * 9,
                go,
                Transpose::No,
                &cols,
                Transpose::Yes,
                gk,
                true,
            );
            for (co, plane) in go.chunks_exact(hw).enumerate() {
                gb[co] = gb[co] + plane.iter().copied().sum::<T>();
            }
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                c * 9,
                cout,
                hw,
                kernels,
                Transpose::Yes,
                go,
                Transpose::No,
                &mut cols,
                false,
            );
            col2im_add(&cols, c, h, w, &mut gi[b * c * hw..(b + 1) * c * hw]);
        }
    }
}

/// Window-local argmax (0..4, row-major within the 2x2 window) per pooled
/// output element, plus the pre-pool shape for routing gradients back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u8>,
}

/// 2x2 max pooling with stride 2; ties resolve to the first window cell.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = image_dims(input.shape(), "maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "maxpool2 (odd spatial dims)",
            input.shape(),
            &[2, 2],
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&with_batch_shape(input.shape(), n, c, oh, ow));
    let mut argmax = vec![0u8; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let ip = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let cells = [ip[base], ip[base + 1], ip[base + w], ip[base + w + 1]];
                let mut best = 0usize;
                for (i, &v) in cells.iter().enumerate().skip(1) {
                    if v > cells[best] {
                        best = i;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                dst[o] = cells[best];
                argmax[o] = best as u8;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream gradient to the single cell that won its window.
pub fn maxpool2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &PoolIndices,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = image_dims(&indices.input_shape, "maxpool2_backward")?;
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.len() != n * c * oh * ow || indices.argmax.len() != grad_out.len() {
        return Err(Error::dim(
            "maxpool2_backward",
            grad_out.shape(),
            &with_batch_shape(&indices.input_shape, n, c, oh, ow),
        ));
    }
    let mut grad_in = Tensor::zeros(&indices.input_shape);
    let gi = grad_in.data_mut();
    for (o, (&g, &a)) in grad_out.data().iter().zip(&indices.argmax).enumerate() {
        let plane = o / (oh * ow);
        let rem = o % (oh * ow);
        let (oy, ox) = (rem / ow, rem % ow);
        let (dy, dx) = ((a / 2) as usize, (a % 2) as usize);
        gi[plane * h * w + (2 * oy + dy) * w + 2 * ox + dx] = g;
    }
    Ok(grad_in)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Masks `grad_out` by `input > 0`; the derivative at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::dim("relu_backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}
