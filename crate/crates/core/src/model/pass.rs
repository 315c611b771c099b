use super::{LayerGrad, LayerSpec, Network, ParamStore, SparseGrad};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward_into, conv2d_forward_into, gemm, Scalar, Tensor, Transpose};

/// Activations recorded by a forward pass, consumed by one backward pass.
#[derive(Debug)]
pub struct ActivationTape<T = f32> {
    batch: usize,
    /// Input to each op, flat `[batch, ..shape]`.
    inputs: Vec<Vec<T>>,
    /// Per-sample input shape of each op.
    shapes: Vec<Vec<usize>>,
    /// Window-local argmax for each pooling op.
    pools: Vec<Option<Vec<u8>>>,
    fingerprint: u64,
    generation: u64,
}

impl<T> ActivationTape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn batch_size<T: Scalar>(net: &Network, batch: &Tensor<T>) -> Result<usize> {
    let per = net.input_len();
    let n = batch.shape().first().copied().unwrap_or(0);
    if batch.rank() < 2 || n * per != batch.len() {
        let mut want = vec![n];
        want.extend_from_slice(net.input_shape());
        return Err(Error::dim("network input", batch.shape(), &want));
    }
    Ok(n)
}

fn first_shape(net: &Network) -> Vec<usize> {
    if matches!(net.layers().first(), Some(LayerSpec::Dense { .. })) {
        vec![net.input_len()]
    } else {
        net.input_shape().to_vec()
    }
}

fn next_shape(spec: &LayerSpec, s: &[usize]) -> Vec<usize> {
    match *spec {
        LayerSpec::Dense { fan_out, .. } => vec![fan_out],
        LayerSpec::Conv3x3 { out_channels, .. } => vec![out_channels, s[1], s[2]],
        LayerSpec::Relu => s.to_vec(),
        LayerSpec::MaxPool2 => vec![s[0], s[1] / 2, s[2] / 2],
        LayerSpec::Flatten => vec![s.iter().product()],
    }
}

fn dense_forward<T: Scalar>(
    x: &[T],
    n: usize,
    w: &[T],
    b: &[T],
    fan_in: usize,
    fan_out: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(
        n,
        fan_in,
        fan_out,
        x,
        Transpose::No,
        w,
        Transpose::Yes,
        &mut y,
        true,
    );
    y
}

fn pool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let ip = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let cells = [ip[base], ip[base + 1], ip[base + w], ip[base + w + 1]];
                let mut best = 0u8;
                for (i, &v) in cells.iter().enumerate().skip(1) {
                    if v > cells[best as usize] {
                        best = i as u8;
                    }
                }
                out.push(cells[best as usize]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn run_forward<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Option<ActivationTape<T>>)> {
    params.check_network(net)?;
    let n = batch_size(net, batch)?;
    let ops = net.layers();
    let mut shape = first_shape(net);
    let mut x = batch.data().to_vec();
    let mut tape = keep.then(|| ActivationTape {
        batch: n,
        inputs: Vec::with_capacity(ops.len()),
        shapes: Vec::with_capacity(ops.len()),
        pools: Vec::with_capacity(ops.len()),
        fingerprint: net.fingerprint(),
        generation: params.generation(),
    });
    let mut layer = 0;
    for spec in ops {
        let mut pool = None;
        let y = match *spec {
            LayerSpec::Dense { fan_in, fan_out } => {
                layer += 1;
                let (w, b) = params.weights_and_bias(layer)?;
                dense_forward(&x, n, w, b, fan_in, fan_out)
            }
            LayerSpec::Conv3x3 { out_channels, .. } => {
                layer += 1;
                let (w, b) = params.weights_and_bias(layer)?;
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let mut y = vec![T::zero(); n * out_channels * h * wd];
                conv2d_forward_into(&x, (n, c, h, wd), w, out_channels, b, &mut y);
                y
            }
            LayerSpec::Relu => x
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            LayerSpec::MaxPool2 => {
                let (y, arg) = pool_forward(&x, n * shape[0], shape[1], shape[2]);
                pool = Some(arg);
                y
            }
            LayerSpec::Flatten => x.clone(),
        };
        let next = next_shape(spec, &shape);
        if let Some(t) = tape.as_mut() {
            t.inputs.push(std::mem::replace(&mut x, y));
            t.shapes.push(std::mem::replace(&mut shape, next));
            t.pools.push(pool);
        } else {
            x = y;
            shape = next;
        }
    }
    let logits = Tensor::new(vec![n, net.classes()], x)?;
    Ok((logits, tape))
}

/// Logits `[N, classes]` for a batch `[N, ..]`.
pub fn forward<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    run_forward(net, params, batch, false).map(|(y, _)| y)
}

/// Like [`forward`], also recording what the backward pass needs.
pub fn forward_with_tape<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ActivationTape<T>)> {
    run_forward(net, params, batch, true).map(|(y, t)| (y, t.expect("tape requested")))
}

/// Gradient for layers `stop_layer..=L`.
pub fn backward<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    tape: ActivationTape<T>,
    grad_logits: &Tensor<T>,
    stop_layer: usize,
) -> Result<SparseGrad<T>> {
    let l = net.num_parametric();
    if stop_layer == 0 || stop_layer > l {
        return Err(Error::Input(format!(
            "stop layer {stop_layer} out of range 1..={l}"
        )));
    }
    let selected: Vec<usize> = (stop_layer..=l).collect();
    backward_selected(net, params, tape, grad_logits, &selected)
}

/// Truncated backward pass: propagates from the logits down to the lowest
/// selected layer and computes parameter gradients only for `selected`.
///
/// Nothing below the lowest selected layer is touched, so cost scales with
/// how deep the selection reaches.
pub fn backward_selected<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    tape: ActivationTape<T>,
    grad_logits: &Tensor<T>,
    selected: &[usize],
) -> Result<SparseGrad<T>> {
    params.check_network(net)?;
    if tape.fingerprint != net.fingerprint() {
        return Err(Error::State(
            "activation tape belongs to a different network".into(),
        ));
    }
    if tape.generation != params.generation() {
        return Err(Error::State(
            "parameters changed since the forward pass that produced this tape".into(),
        ));
    }
    let l = net.num_parametric();
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    match (sel.first(), sel.last()) {
        (Some(&lo), Some(&hi)) if lo >= 1 && hi <= l => {}
        _ => {
            return Err(Error::Input(format!(
                "selection {selected:?} must be a non-empty subset of 1..={l}"
            )))
        }
    }
    let n = tape.batch;
    if grad_logits.shape() != [n, net.classes()] {
        return Err(Error::dim(
            "backward grad_logits",
            grad_logits.shape(),
            &[n, net.classes()],
        ));
    }
    let stop_op = net.parametric_ops()[sel[0] - 1];
    let ops = net.layers();
    let mut g = grad_logits.data().to_vec();
    let mut layer = l;
    let mut grads = Vec::with_capacity(sel.len());
    for i in (stop_op..ops.len()).rev() {
        let x = &tape.inputs[i];
        let shape = &tape.shapes[i];
        let need_input = i > stop_op;
        match ops[i] {
            LayerSpec::Dense { fan_in, fan_out } => {
                let seg = params.segment(layer)?;
                let (w, _) = params.weights_and_bias(layer)?;
                if sel.binary_search(&layer).is_ok() {
                    let mut values = vec![T::zero(); seg.len];
                    let (gw, gb) = values.split_at_mut(seg.weight_len());
                    gemm(
                        fan_out,
                        n,
                        fan_in,
                        &g,
                        Transpose::Yes,
                        x,
                        Transpose::No,
                        gw,
                        false,
                    );
                    for row in g.chunks_exact(fan_out) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    grads.push(LayerGrad {
                        layer,
                        offset: seg.offset,
                        values,
                    });
                }
                if need_input {
                    let mut gx = vec![T::zero(); n * fan_in];
                    gemm(
                        n,
                        fan_out,
                        fan_in,
                        &g,
                        Transpose::No,
                        w,
                        Transpose::No,
                        &mut gx,
                        false,
                    );
                    g = gx;
                }
                layer -= 1;
            }
            LayerSpec::Conv3x3 { out_channels, .. } => {
                let seg = params.segment(layer)?;
                let (w, _) = params.weights_and_bias(layer)?;
                let dims = (n, shape[0], shape[1], shape[2]);
                let mut values = sel
                    .binary_search(&layer)
                    .is_ok()
                    .then(|| vec![T::zero(); seg.len]);
                let mut gx = need_input.then(|| vec![T::zero(); x.len()]);
                conv2d_backward_into(
                    x,
                    dims,
                    w,
                    out_channels,
                    &g,
                    values.as_mut().map(|v| v.split_at_mut(seg.weight_len())),
                    gx.as_deref_mut(),
                );
                if let Some(values) = values {
                    grads.push(LayerGrad {
                        layer,
                        offset: seg.offset,
                        values,
                    });
                }
                if let Some(gx) = gx {
                    g = gx;
                }
                layer -= 1;
            }
            LayerSpec::Relu => {
                for (gv, &xv) in g.iter_mut().zip(x) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            LayerSpec::MaxPool2 => {
                let arg = tape.pools[i].as_ref().expect("pool indices recorded");
                let (h, w) = (shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![T::zero(); x.len()];
                for (o, (&gv, &a)) in g.iter().zip(arg).enumerate() {
                    let plane = o / (oh * ow);
                    let rem = o % (oh * ow);
                    let (oy, ox) = (rem / ow, rem % ow);
                    let (dy, dx) = ((a / 2) as usize, (a % 2) as usize);
                    gx[plane * h * w + (2 * oy + dy) * w + 2 * ox + dx] = gv;
                }
                g = gx;
            }
            LayerSpec::Flatten => {}
        }
    }
    grads.reverse();
    Ok(SparseGrad {
        p: net.param_count(),
        layers: grads,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dim(
            "softmax_cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let inv_n = T::one() / T::from_usize(n).expect("batch size fits");
    let mut grad = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::Input(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total = total + (log_sum - row[y]);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - log_sum).exp();
            let t = if j == y { T::one() } else { T::zero() };
            grad.push((p - t) * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Class with the largest logit per row; ties go to the lower class.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Mean loss and accuracy over `images` (`[N, ..]`), `batch_size` at a time.
pub fn evaluate<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    let n = batch_size_of(images, labels)?;
    let bs = batch_size.max(1);
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let x = images.slice_rows(start, end)?;
        let logits = forward(net, params, &x)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels[start..end])?;
        loss += l.as_f64() * (end - start) as f64;
        correct += predict(&logits)
            .iter()
            .zip(&labels[start..end])
            .filter(|(a, b)| a == b)
            .count();
        start = end;
    }
    Ok(Evaluation {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        count: n,
    })
}

fn batch_size_of<T: Scalar>(images: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n != labels.len() || n == 0 {
        return Err(Error::dim("evaluate", images.shape(), &[labels.len()]));
    }
    Ok(n)
}
