use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, maxpool, ConvGeom};
use super::{Gradients, LayerSpec, ParamId, ParamStore, Parameter, Result, Tensor, TensorError};
use crate::par;

/// Lower clamp applied to probabilities before the logarithm in cross-entropy.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-12;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
        // Unfolded inputs per sample, kept only when the weight needs a gradient.
        cols: Option<Vec<Vec<f64>>>,
    },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Relu { input: NodeId },
    Reshape { input: NodeId },
    Dense { input: NodeId, weight: NodeId, bias: NodeId },
    Softmax { input: NodeId },
    CrossEntropy { probs: NodeId, labels: Vec<f64>, epsilon: f64 },
    SquaredError { pred: NodeId, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Values are computed eagerly as nodes are added; a node is
/// tracked when any of its inputs is.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.tracked()
    }

    fn push(&mut self, mut value: Tensor, op: Op, tracked: bool) -> NodeId {
        value.set_tracked(tracked);
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Untracked leaf (images, labels).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Leaf holding a copy of a parameter; tracked unless the parameter is frozen.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        let mut t = p.tensor().clone();
        t.clear_grad();
        self.push(t, Op::Param(p.id), !p.frozen())
    }

    fn check_shape(&self, id: NodeId, want: &[usize], what: &str) -> Result<()> {
        let got = self.value(id).shape();
        if got != want {
            return Err(TensorError::ShapeMismatch(format!("{what}: expected {want:?}, got {got:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let &[batch, channels, height, width] = x.shape() else {
            return Err(TensorError::ShapeMismatch(format!("conv2d input must be [B, C, H, W], got {:?}", x.shape())));
        };
        let &[out_c, in_c, kernel, kernel2] = w.shape() else {
            return Err(TensorError::ShapeMismatch(format!("conv2d weight must be 4-d, got {:?}", w.shape())));
        };
        if in_c != channels || kernel != kernel2 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        self.check_shape(bias, &[out_c], "conv2d bias")?;
        let spec = LayerSpec::Conv2d { in_channels: in_c, out_channels: out_c, kernel, stride, padding };
        let out_shape = spec.output_shape(&[channels, height, width])?;
        let geom = ConvGeom { channels, height, width, kernel, stride, padding, out_h: out_shape[1], out_w: out_shape[2] };

        let plane = channels * height * width;
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.tracked(weight);
        let (xv, wv, bv) = (x.values(), w.values(), self.value(bias).values());
        let per_sample = par::map_range(batch, |b| {
            let cols = im2col(&xv[b * plane..(b + 1) * plane], &geom);
            let mut y = vec![0.0; out_c * ncols];
            for (o, row) in y.chunks_mut(ncols).enumerate() {
                row.fill(bv[o]);
            }
            gemm_nn(wv, &cols, &mut y, out_c, rows, ncols);
            (y, keep_cols.then_some(cols))
        });
        let mut out = Vec::with_capacity(batch * out_c * ncols);
        let mut saved = keep_cols.then(|| Vec::with_capacity(batch));
        for (y, cols) in per_sample {
            out.extend_from_slice(&y);
            if let (Some(s), Some(c)) = (saved.as_mut(), cols) {
                s.push(c);
            }
        }
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        let value = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, cols: saved }, tracked))
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        let &[batch, c, h, w] = x.shape() else {
            return Err(TensorError::ShapeMismatch(format!("maxpool2d input must be [B, C, H, W], got {:?}", x.shape())));
        };
        let out_shape = LayerSpec::MaxPool2d { kernel, stride }.output_shape(&[c, h, w])?;
        let plane = c * h * w;
        let xv = x.values();
        let per_sample = par::map_range(batch, |b| maxpool(&xv[b * plane..(b + 1) * plane], c, h, w, kernel, stride));
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for (b, (v, idx)) in per_sample.into_iter().enumerate() {
            out.extend(v);
            argmax.extend(idx.into_iter().map(|i| i + b * plane));
        }
        let tracked = self.tracked(input);
        let value = Tensor::new(vec![batch, out_shape[0], out_shape[1], out_shape[2]], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, tracked))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let v = x.values().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), v).expect("same shape");
        let tracked = self.tracked(input);
        self.push(value, Op::Relu { input }, tracked)
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let batch = x.shape()[0];
        let features = x.numel() / batch;
        let value = x.clone().reshape(vec![batch, features]).expect("same numel");
        let tracked = self.tracked(input);
        self.push(value, Op::Reshape { input }, tracked)
    }

    /// `y = x·Wᵀ + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let (&[batch, inf], &[outf, inw]) = (x.shape(), w.shape()) else {
            return Err(TensorError::ShapeMismatch(format!("dense expects [B, in] and [out, in], got {:?} and {:?}", x.shape(), w.shape())));
        };
        if inf != inw {
            return Err(TensorError::ShapeMismatch(format!("dense input has {inf} features, weight expects {inw}")));
        }
        self.check_shape(bias, &[outf], "dense bias")?;
        let bv = self.value(bias).values();
        let mut y: Vec<f64> = (0..batch).flat_map(|_| bv.iter().copied()).collect();
        gemm_nt(x.values(), w.values(), &mut y, batch, inf, outf);
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        let value = Tensor::new(vec![batch, outf], y)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }, tracked))
    }

    /// Row-wise softmax over `[B, N]`.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let &[batch, n] = x.shape() else {
            return Err(TensorError::ShapeMismatch(format!("softmax expects [B, N], got {:?}", x.shape())));
        };
        let mut out = vec![0.0; batch * n];
        for (row, dst) in x.values().chunks(n).zip(out.chunks_mut(n)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        let tracked = self.tracked(input);
        let value = Tensor::new(vec![batch, n], out)?;
        Ok(self.push(value, Op::Softmax { input }, tracked))
    }

    /// Batch mean of `-Σ y·log(max(p, ε))`.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &Tensor, epsilon: f64) -> Result<NodeId> {
        let p = self.value(probs);
        let &[batch, n] = p.shape() else {
            return Err(TensorError::ShapeMismatch(format!("cross_entropy expects [B, N], got {:?}", p.shape())));
        };
        if n < 2 {
            return Err(TensorError::ShapeMismatch("cross_entropy needs at least two classes".into()));
        }
        if labels.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch(format!("labels {:?} vs probabilities {:?}", labels.shape(), p.shape())));
        }
        for (row, (pr, yr)) in p.values().chunks(n).zip(labels.values().chunks(n)).enumerate() {
            let sum: f64 = pr.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || pr.iter().any(|&v| v < 0.0) {
                return Err(TensorError::NotNormalized { row, sum });
            }
            let ones = yr.iter().filter(|&&v| v == 1.0).count();
            let zeros = yr.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != n {
                return Err(TensorError::NotOneHot { row });
            }
        }
        let total: f64 = p
            .values()
            .iter()
            .zip(labels.values())
            .filter(|(_, &y)| y != 0.0)
            .map(|(&pv, &y)| -y * pv.max(epsilon).ln())
            .sum();
        let tracked = self.tracked(probs);
        let op = Op::CrossEntropy { probs, labels: labels.values().to_vec(), epsilon };
        Ok(self.push(Tensor::scalar(total / batch as f64), op, tracked))
    }

    /// Mean squared difference between `pred` and a constant target.
    pub fn squared_error(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch(format!("target {:?} vs prediction {:?}", target.shape(), p.shape())));
        }
        let n = p.numel() as f64;
        let loss = p.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let tracked = self.tracked(pred);
        let op = Op::SquaredError { pred, target: target.values().to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, tracked))
    }

    /// Applies one layer. `params` are the layer's weight and bias nodes, if any.
    pub fn layer(&mut self, spec: &LayerSpec, input: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let shape = self.value(input).shape();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!("layer input must carry a batch axis, got {shape:?}")));
        }
        spec.output_shape(&shape[1..])?;
        if params.len() != spec.param_shapes().len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} takes {} parameter tensors, got {}",
                spec.kind(),
                spec.param_shapes().len(),
                params.len()
            )));
        }
        match *spec {
            LayerSpec::Conv2d { stride, padding, .. } => self.conv2d(input, params[0], params[1], stride, padding),
            LayerSpec::MaxPool2d { kernel, stride } => self.maxpool2d(input, kernel, stride),
            LayerSpec::Relu => Ok(self.relu(input)),
            LayerSpec::Flatten => Ok(self.flatten(input)),
            LayerSpec::Dense { .. } => self.dense(input, params[0], params[1]),
            LayerSpec::Softmax => self.softmax(input),
        }
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every tracked
    /// parameter leaf; frozen parameters never appear.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.nodes.get(loss.0).ok_or(TensorError::NoGraph)?;
        if matches!(root.op, Op::Input | Op::Param(_)) || root.value.numel() != 1 {
            return Err(TensorError::NoGraph);
        }
        let mut grads = Gradients::default();
        if !root.value.tracked() {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match grads.0.get_mut(pid) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.0.insert(*pid, g);
                    }
                },
                Op::Relu { input } => {
                    if self.tracked(*input) {
                        let x = self.value(*input).values();
                        let gx: Vec<f64> = g.iter().zip(x).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                        accumulate(&mut adj, *input, gx);
                    }
                }
                Op::Reshape { input } => {
                    if self.tracked(*input) {
                        accumulate(&mut adj, *input, g);
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    if self.tracked(*input) {
                        let mut gx = vec![0.0; self.value(*input).numel()];
                        for (&src, &d) in argmax.iter().zip(&g) {
                            gx[src] += d;
                        }
                        accumulate(&mut adj, *input, gx);
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (batch, inf) = (x.shape()[0], x.shape()[1]);
                    let outf = w.shape()[0];
                    if self.tracked(*weight) {
                        let mut gw = vec![0.0; outf * inf];
                        gemm_tn(&g, x.values(), &mut gw, outf, batch, inf);
                        accumulate(&mut adj, *weight, gw);
                    }
                    if self.tracked(*bias) {
                        let mut gb = vec![0.0; outf];
                        for row in g.chunks(outf) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut adj, *bias, gb);
                    }
                    if self.tracked(*input) {
                        let mut gx = vec![0.0; batch * inf];
                        gemm_nn(&g, w.values(), &mut gx, batch, outf, inf);
                        accumulate(&mut adj, *input, gx);
                    }
                }
                Op::Conv2d { input, weight, bias, geom, cols } => {
                    let w = self.value(*weight);
                    let out_c = w.shape()[0];
                    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                    let batch = g.len() / (out_c * ncols);
                    if self.tracked(*bias) {
                        let mut gb = vec![0.0; out_c];
                        for sample in g.chunks(out_c * ncols) {
                            for (o, row) in sample.chunks(ncols).enumerate() {
                                gb[o] += row.iter().sum::<f64>();
                            }
                        }
                        accumulate(&mut adj, *bias, gb);
                    }
                    if let (true, Some(cols)) = (self.tracked(*weight), cols) {
                        let partial = par::map_range(batch, |b| {
                            let mut gw = vec![0.0; out_c * rows];
                            let gy = &g[b * out_c * ncols..(b + 1) * out_c * ncols];
                            gemm_nt(gy, &cols[b], &mut gw, out_c, ncols, rows);
                            gw
                        });
                        let mut gw = vec![0.0; out_c * rows];
                        for p in partial {
                            gw.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut adj, *weight, gw);
                    }
                    if self.tracked(*input) {
                        let wv = w.values();
                        let per_sample = par::map_range(batch, |b| {
                            let gy = &g[b * out_c * ncols..(b + 1) * out_c * ncols];
                            let mut gcols = vec![0.0; rows * ncols];
                            gemm_tn(wv, gy, &mut gcols, rows, out_c, ncols);
                            col2im(&gcols, geom)
                        });
                        accumulate(&mut adj, *input, per_sample.concat());
                    }
                }
                Op::Softmax { input } => {
                    if self.tracked(*input) {
                        let p = node.value.values();
                        let n = node.value.shape()[1];
                        let mut gx = vec![0.0; p.len()];
                        for ((pr, gr), dst) in p.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((d, &pv), &gv) in dst.iter_mut().zip(pr).zip(gr) {
                                *d = pv * (gv - dot);
                            }
                        }
                        accumulate(&mut adj, *input, gx);
                    }
                }
                Op::CrossEntropy { probs, labels, epsilon } => {
                    if self.tracked(*probs) {
                        let p = self.value(*probs);
                        let batch = p.shape()[0] as f64;
                        let gx = p
                            .values()
                            .iter()
                            .zip(labels)
                            .map(|(&pv, &y)| if y != 0.0 && pv > *epsilon { -g[0] * y / (pv * batch) } else { 0.0 })
                            .collect();
                        accumulate(&mut adj, *probs, gx);
                    }
                }
                Op::SquaredError { pred, target } => {
                    if self.tracked(*pred) {
                        let p = self.value(*pred).values();
                        let n = p.len() as f64;
                        let gx = p.iter().zip(target).map(|(a, b)| g[0] * 2.0 * (a - b) / n).collect();
                        accumulate(&mut adj, *pred, gx);
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Runs [`backward`](Self::backward) and accumulates into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)?;
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Applies a single layer to a batched input without recording gradients.
pub fn forward_layer(spec: &LayerSpec, params: &[&Tensor], input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let p: Vec<NodeId> = params.iter().map(|&t| g.input(t.clone())).collect();
    for (node, want) in p.iter().zip(spec.param_shapes()) {
        g.check_shape(*node, &want, spec.kind())?;
    }
    let y = g.layer(spec, x, &p)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let y = forward_layer(&LayerSpec::Relu, &[], &t(&[1, 3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_one_by_one_conv() {
        let img: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = t(&[1, 2, 3, 4], &img);
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let spec = LayerSpec::conv(2, 2, 1);
        let y = forward_layer(&spec, &[&w, &b], &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let y = forward_layer(&LayerSpec::pool(2), &[], &t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.values(), &[4.0]);
    }

    #[test]
    fn layer_rejects_wrong_input() {
        let x = t(&[1, 3], &[0.0; 3]);
        let w = t(&[2, 4], &[0.0; 8]);
        let b = t(&[2], &[0.0; 2]);
        assert!(matches!(forward_layer(&LayerSpec::dense(4, 2), &[&w, &b], &x), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |p: &[f64], y: &[f64], n: usize| {
            let mut g = Graph::new();
            let pn = g.input(t(&[p.len() / n, n], p));
            let l = g.cross_entropy(pn, &t(&[y.len() / n, n], y), DEFAULT_LOG_EPSILON)?;
            Ok::<f64, TensorError>(g.value(l).values()[0])
        };
        assert_eq!(ce(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 3).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        assert!((ce(&[third; 3], &[0.0, 1.0, 0.0], 3).unwrap() - 3f64.ln()).abs() < 1e-12);
        let want = (-(0.7f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((ce(&[0.7, 0.3, 0.2, 0.8], &[1.0, 0.0, 0.0, 1.0], 2).unwrap() - want).abs() < 1e-15);
        // confident and wrong stays finite
        assert!(ce(&[0.0, 1.0], &[1.0, 0.0], 2).unwrap().is_finite());
        assert!(matches!(ce(&[0.5, 0.6], &[1.0, 0.0], 2), Err(TensorError::NotNormalized { row: 0, .. })));
        assert!(matches!(ce(&[0.5, 0.5], &[1.0, 1.0], 2), Err(TensorError::NotOneHot { row: 0 })));
        assert!(matches!(ce(&[0.5, 0.5], &[0.5, 0.5], 2), Err(TensorError::NotOneHot { row: 0 })));
    }

    #[test]
    fn backward_needs_recorded_loss() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        assert_eq!(g.backward(x), Err(TensorError::NoGraph));
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[1, 2], &[1.0, 2.0]), false);
        let w = g.param(store.get(id));
        let y = g.flatten(w);
        // not a scalar
        assert_eq!(g.backward(y), Err(TensorError::NoGraph));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let mut store = ParamStore::new();
        let id = store.add("logits", t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]), false);
        let labels = t(&[2, 3], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let z = g.param(store.get(id));
        let p = g.softmax(z).unwrap();
        let loss = g.cross_entropy(p, &labels, DEFAULT_LOG_EPSILON).unwrap();
        let grads = g.backward(loss).unwrap();
        let probs = g.value(p).values();
        for (i, gv) in grads.get(id).unwrap().iter().enumerate() {
            let want = (probs[i] - labels.values()[i]) / 2.0;
            assert!((gv - want).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = store.add("b", t(&[2], &[0.0, 0.0]), false);
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, -1.0]));
        let (wn, bn) = (g.param(store.get(w)), g.param(store.get(b)));
        let y = g.dense(x, wn, bn).unwrap();
        let loss = g.squared_error(y, &t(&[1, 2], &[0.0, 0.0])).unwrap();
        let before = store.get(w).tensor().values().to_vec();
        let grads = g.backward_into(loss, &mut store).unwrap();
        assert!(!grads.contains(w));
        assert!(grads.contains(b));
        assert!(store.get(w).grad().is_none());
        assert_eq!(store.get(w).tensor().values(), &before[..]);
    }

    #[test]
    fn all_frozen_gives_empty_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1, 1], &[1.0]), true);
        let b = store.add("b", t(&[1], &[0.0]), true);
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1], &[2.0]));
        let (wn, bn) = (g.param(store.get(w)), g.param(store.get(b)));
        let y = g.dense(x, wn, bn).unwrap();
        let loss = g.squared_error(y, &t(&[1, 1], &[0.0])).unwrap();
        assert!(g.backward(loss).unwrap().is_empty());
    }
}
