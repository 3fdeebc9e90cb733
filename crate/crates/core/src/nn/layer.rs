use rand::Rng;

use super::LayerSpec;
use crate::error::{Error, Result};
use crate::linalg::conv::{self, ConvGeometry};
use crate::linalg::{ConvOperator, LinearOperator, MatrixOperator, PowerState};
use crate::tensor::{Scalar, Tensor, Tensor64};

#[derive(Clone, Debug, PartialEq)]
pub enum LinearKind {
    Dense { input: usize, output: usize },
    Conv(ConvGeometry),
}

/// Affine layer `W u + b`: dense matrix or convolution. Carries the persisted
/// power-iteration vectors used by the spectral regularizer.
#[derive(Clone, Debug)]
pub struct Linear {
    kind: LinearKind,
    weight: Tensor,
    bias: Tensor,
    pub power: Option<PowerState>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    LeakyRelu { slope: f32 },
    MaxPool { window: usize, in_shape: [usize; 3] },
    AvgPool { window: usize, in_shape: [usize; 3] },
    Flatten,
    Residual(Vec<Layer>),
}

#[derive(Debug)]
pub(super) enum LayerCache {
    Linear { input: Tensor },
    LeakyRelu { input: Tensor },
    MaxPool { argmax: Vec<u32> },
    AvgPool,
    Flatten { in_shape: Vec<usize> },
    Residual { inner: Vec<LayerCache> },
}

impl Linear {
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[output, input] = weight.shape() else {
            return Err(Error::shape("dense weight must be (out, in)"));
        };
        if bias.shape() != [output] {
            return Err(Error::shape(format!("dense bias must be [{output}]")));
        }
        Ok(Self {
            kind: LinearKind::Dense { input, output },
            weight,
            bias,
            power: None,
        })
    }

    pub fn conv(geom: ConvGeometry, weight: Tensor, bias: Tensor) -> Result<Self> {
        geom.validate()?;
        if weight.shape() != [geom.out_ch, geom.in_ch, geom.kh, geom.kw] {
            return Err(Error::shape(format!(
                "conv weight {:?} does not match geometry",
                weight.shape()
            )));
        }
        if bias.shape() != [geom.out_ch] {
            return Err(Error::shape(format!("conv bias must be [{}]", geom.out_ch)));
        }
        Ok(Self {
            kind: LinearKind::Conv(geom),
            weight,
            bias,
            power: None,
        })
    }

    pub fn kind(&self) -> &LinearKind {
        &self.kind
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weight, &mut self.bias)
    }

    /// Multiplies the weights (not the bias) by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        for w in self.weight.data_mut() {
            *w = (*w as f64 * factor) as f32;
        }
    }

    /// The bias-free linear map in `f64`, as seen by power iteration.
    pub fn operator(&self) -> Box<dyn LinearOperator> {
        match &self.kind {
            LinearKind::Dense { .. } => {
                Box::new(MatrixOperator::new(self.weight.to_f64()).expect("dense weight is rank 2"))
            }
            LinearKind::Conv(g) => Box::new(
                ConvOperator::new(*g, self.weight.to_f64().into_data())
                    .expect("conv geometry validated at construction"),
            ),
        }
    }

    /// Explicit matrix of the linear map, for the exact-norm oracle.
    pub fn materialize(&self) -> Result<Tensor64> {
        match &self.kind {
            LinearKind::Dense { .. } => Ok(self.weight.to_f64()),
            LinearKind::Conv(g) => crate::linalg::materialize_conv_matrix(
                &self.weight.to_f64(),
                [g.in_ch, g.in_h, g.in_w],
                g.stride,
                g.pad,
            ),
        }
    }

    fn spec(&self) -> LayerSpec {
        match &self.kind {
            LinearKind::Dense { input, output } => LayerSpec::Dense {
                input: *input,
                output: *output,
            },
            LinearKind::Conv(g) => LayerSpec::Conv {
                out_ch: g.out_ch,
                in_ch: g.in_ch,
                kh: g.kh,
                kw: g.kw,
                stride: g.stride,
                pad: g.pad,
            },
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.batch();
        match &self.kind {
            LinearKind::Dense { input, output } => {
                let mut y = Tensor::zeros(vec![b, *output]);
                for row in y.data_mut().chunks_mut(*output) {
                    row.copy_from_slice(self.bias.data());
                }
                f32::gemm(
                    b,
                    *input,
                    *output,
                    1.0,
                    x.data(),
                    false,
                    self.weight.data(),
                    true,
                    1.0,
                    y.data_mut(),
                );
                y
            }
            LinearKind::Conv(g) => {
                let mut y = Tensor::zeros(vec![b, g.out_ch, g.out_h(), g.out_w()]);
                let mut cols = vec![0.0f32; g.patch_len() * g.positions()];
                for s in 0..b {
                    conv::conv_forward_sample(
                        g,
                        self.weight.data(),
                        Some(self.bias.data()),
                        x.row(s),
                        y.row_mut(s),
                        &mut cols,
                    );
                }
                y
            }
        }
    }

    /// Returns the input gradient; pushes `(db, dW)` when `params` is given.
    fn backward(&self, x: &Tensor, g: &Tensor, params: Option<&mut Vec<Tensor>>) -> Tensor {
        let b = x.batch();
        match &self.kind {
            LinearKind::Dense { input, output } => {
                if let Some(params) = params {
                    let mut dw = Tensor::zeros(vec![*output, *input]);
                    f32::gemm(
                        *output,
                        b,
                        *input,
                        1.0,
                        g.data(),
                        true,
                        x.data(),
                        false,
                        0.0,
                        dw.data_mut(),
                    );
                    let mut db = Tensor::zeros(vec![*output]);
                    for row in g.data().chunks(*output) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    params.push(db);
                    params.push(dw);
                }
                let mut dx = Tensor::zeros(x.shape().to_vec());
                f32::gemm(
                    b,
                    *output,
                    *input,
                    1.0,
                    g.data(),
                    false,
                    self.weight.data(),
                    false,
                    0.0,
                    dx.data_mut(),
                );
                dx
            }
            LinearKind::Conv(geom) => {
                let (k, p) = (geom.patch_len(), geom.positions());
                let mut cols = vec![0.0f32; k * p];
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let want_params = params.is_some();
                let mut dw = Tensor::zeros(self.weight.shape().to_vec());
                let mut db = Tensor::zeros(vec![geom.out_ch]);
                for s in 0..b {
                    let gs = g.row(s);
                    if want_params {
                        conv::im2col(geom, x.row(s), &mut cols);
                        f32::gemm(
                            geom.out_ch,
                            p,
                            k,
                            1.0,
                            gs,
                            false,
                            &cols,
                            true,
                            1.0,
                            dw.data_mut(),
                        );
                        for (oc, chunk) in gs.chunks(p).enumerate() {
                            db.data_mut()[oc] += chunk.iter().sum::<f32>();
                        }
                    }
                    conv::conv_adjoint_sample(
                        geom,
                        self.weight.data(),
                        gs,
                        dx.row_mut(s),
                        &mut cols,
                    );
                }
                if let Some(params) = params {
                    params.push(db);
                    params.push(dw);
                }
                dx
            }
        }
    }
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear(l) => l.spec(),
            Layer::LeakyRelu { slope } => LayerSpec::LeakyRelu { slope: *slope },
            Layer::MaxPool { window, .. } => LayerSpec::MaxPool { window: *window },
            Layer::AvgPool { window, .. } => LayerSpec::AvgPool { window: *window },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Residual(branch) => LayerSpec::Residual {
                branch: branch.iter().map(Layer::spec).collect(),
            },
        }
    }
}

fn glorot<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit) as f32)
}

fn pool_shape(shape: &[usize], window: usize) -> Result<[usize; 3]> {
    let &[c, h, w] = shape else {
        return Err(Error::shape(format!(
            "pooling needs (C, H, W) input, got {shape:?}"
        )));
    };
    if window == 0 || window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} does not fit {h}x{w}"
        )));
    }
    Ok([c, h, w])
}

pub(super) fn build_stack<R: Rng + ?Sized>(
    input: &[usize],
    specs: &[LayerSpec],
    rng: &mut R,
) -> Result<(Vec<Layer>, Vec<usize>)> {
    let mut shape = input.to_vec();
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let (layer, next) = match spec {
            LayerSpec::Dense { input, output } => {
                if shape != [*input] {
                    return Err(Error::shape(format!(
                        "dense layer expects [{input}], previous layer yields {shape:?}"
                    )));
                }
                if *output == 0 {
                    return Err(Error::shape("dense layer with zero outputs"));
                }
                let w = glorot(vec![*output, *input], *input, *output, rng);
                let l = Linear::dense(w, Tensor::zeros(vec![*output]))?;
                (Layer::Linear(l), vec![*output])
            }
            LayerSpec::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad,
            } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(Error::shape(format!(
                        "conv needs (C, H, W) input, got {shape:?}"
                    )));
                };
                if c != *in_ch {
                    return Err(Error::shape(format!(
                        "conv expects {in_ch} channels, previous layer yields {c}"
                    )));
                }
                let geom = ConvGeometry {
                    in_ch: c,
                    in_h: h,
                    in_w: w,
                    out_ch: *out_ch,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                };
                geom.validate()?;
                let wt = glorot(
                    vec![*out_ch, c, *kh, *kw],
                    c * kh * kw,
                    out_ch * kh * kw,
                    rng,
                );
                let out = vec![*out_ch, geom.out_h(), geom.out_w()];
                (
                    Layer::Linear(Linear::conv(geom, wt, Tensor::zeros(vec![*out_ch]))?),
                    out,
                )
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(*slope > 0.0 && *slope <= 1.0) {
                    return Err(Error::Config(format!(
                        "leaky ReLU slope must lie in (0, 1], got {slope}"
                    )));
                }
                (Layer::LeakyRelu { slope: *slope }, shape.clone())
            }
            LayerSpec::MaxPool { window } => {
                let s = pool_shape(&shape, *window)?;
                let out = vec![s[0], s[1] / window, s[2] / window];
                (
                    Layer::MaxPool {
                        window: *window,
                        in_shape: s,
                    },
                    out,
                )
            }
            LayerSpec::AvgPool { window } => {
                let s = pool_shape(&shape, *window)?;
                let out = vec![s[0], s[1] / window, s[2] / window];
                (
                    Layer::AvgPool {
                        window: *window,
                        in_shape: s,
                    },
                    out,
                )
            }
            LayerSpec::Flatten => (Layer::Flatten, vec![shape.iter().product()]),
            LayerSpec::Residual { branch } => {
                let (inner, out) = build_stack(&shape, branch, rng)?;
                if out != shape {
                    return Err(Error::shape(format!(
                        "residual branch maps {shape:?} to {out:?}; skip connection needs equal shapes"
                    )));
                }
                (Layer::Residual(inner), out)
            }
        };
        layers.push(layer);
        shape = next;
    }
    Ok((layers, shape))
}

pub(super) fn collect_linears<'a>(layers: &'a [Layer], out: &mut Vec<&'a Linear>) {
    for l in layers {
        match l {
            Layer::Linear(lin) => out.push(lin),
            Layer::Residual(inner) => collect_linears(inner, out),
            _ => {}
        }
    }
}

pub(super) fn collect_linears_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Linear>) {
    for l in layers {
        match l {
            Layer::Linear(lin) => out.push(lin),
            Layer::Residual(inner) => collect_linears_mut(inner, out),
            _ => {}
        }
    }
}

fn with_shape(t: Tensor, batch: usize, tail: &[usize]) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(tail);
    t.reshape(shape).expect("element count preserved")
}

pub(super) fn forward_stack(
    layers: &[Layer],
    mut x: Tensor,
    mut caches: Option<&mut Vec<LayerCache>>,
) -> Result<Tensor> {
    for layer in layers {
        let b = x.batch();
        let (y, cache) = match layer {
            Layer::Linear(lin) => {
                let y = lin.forward(&x);
                (y, LayerCache::Linear { input: x })
            }
            Layer::LeakyRelu { slope } => {
                let a = *slope;
                let y = x.map(|v| if v > 0.0 { v } else { a * v });
                (y, LayerCache::LeakyRelu { input: x })
            }
            Layer::MaxPool { window, in_shape } => {
                let [c, h, w] = *in_shape;
                let (oh, ow) = (h / window, w / window);
                let mut y = Tensor::zeros(vec![b, c, oh, ow]);
                let mut argmax = vec![0u32; b * c * oh * ow];
                for s in 0..b {
                    let xs = x.row(s);
                    let base = s * c * oh * ow;
                    let ys = y.row_mut(s);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = usize::MAX;
                                let mut best_v = f32::NEG_INFINITY;
                                for dy in 0..*window {
                                    for dx in 0..*window {
                                        let idx =
                                            (ch * h + oy * window + dy) * w + ox * window + dx;
                                        if best == usize::MAX || xs[idx] > best_v {
                                            best = idx;
                                            best_v = xs[idx];
                                        }
                                    }
                                }
                                let o = (ch * oh + oy) * ow + ox;
                                ys[o] = best_v;
                                argmax[base + o] = best as u32;
                            }
                        }
                    }
                }
                (y, LayerCache::MaxPool { argmax })
            }
            Layer::AvgPool { window, in_shape } => {
                let [c, h, w] = *in_shape;
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f32;
                let mut y = Tensor::zeros(vec![b, c, oh, ow]);
                for s in 0..b {
                    let xs = x.row(s);
                    let ys = y.row_mut(s);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0.0f32;
                                for dy in 0..*window {
                                    for dx in 0..*window {
                                        acc +=
                                            xs[(ch * h + oy * window + dy) * w + ox * window + dx];
                                    }
                                }
                                ys[(ch * oh + oy) * ow + ox] = acc * inv;
                            }
                        }
                    }
                }
                (y, LayerCache::AvgPool)
            }
            Layer::Flatten => {
                let in_shape = x.shape()[1..].to_vec();
                let n = x.row_len();
                (with_shape(x, b, &[n]), LayerCache::Flatten { in_shape })
            }
            Layer::Residual(inner) => {
                let mut inner_caches = Vec::new();
                let fx =
                    forward_stack(inner, x.clone(), caches.as_ref().map(|_| &mut inner_caches))?;
                let mut y = x;
                for (a, f) in y.data_mut().iter_mut().zip(fx.data()) {
                    *a += f;
                }
                (
                    y,
                    LayerCache::Residual {
                        inner: inner_caches,
                    },
                )
            }
        };
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        x = y;
    }
    x.check_finite()?;
    Ok(x)
}

pub(super) fn backward_stack(
    layers: &[Layer],
    caches: &[LayerCache],
    mut g: Tensor,
    mut params: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let b = g.batch();
        g = match (layer, cache) {
            (Layer::Linear(lin), LayerCache::Linear { input }) => {
                lin.backward(input, &g, params.as_deref_mut())
            }
            (Layer::LeakyRelu { slope }, LayerCache::LeakyRelu { input }) => {
                let mut g = g;
                for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *gv *= slope;
                    }
                }
                g
            }
            (Layer::MaxPool { in_shape, .. }, LayerCache::MaxPool { argmax }) => {
                let mut dx = Tensor::zeros(vec![b, in_shape[0], in_shape[1], in_shape[2]]);
                let per = g.row_len();
                for s in 0..b {
                    let gs = g.row(s);
                    let dxs = dx.row_mut(s);
                    for (o, &gv) in gs.iter().enumerate() {
                        dxs[argmax[s * per + o] as usize] += gv;
                    }
                }
                dx
            }
            (Layer::AvgPool { window, in_shape }, LayerCache::AvgPool) => {
                let [c, h, w] = *in_shape;
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f32;
                let mut dx = Tensor::zeros(vec![b, c, h, w]);
                for s in 0..b {
                    let gs = g.row(s);
                    let dxs = dx.row_mut(s);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gs[(ch * oh + oy) * ow + ox] * inv;
                                for dy in 0..*window {
                                    for ddx in 0..*window {
                                        dxs[(ch * h + oy * window + dy) * w + ox * window + ddx] +=
                                            gv;
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            (Layer::Flatten, LayerCache::Flatten { in_shape }) => with_shape(g, b, in_shape),
            (
                Layer::Residual(inner),
                LayerCache::Residual {
                    inner: inner_caches,
                },
            ) => {
                let branch = backward_stack(inner, inner_caches, g.clone(), params.as_deref_mut())?;
                let mut g = g;
                for (a, v) in g.data_mut().iter_mut().zip(branch.data()) {
                    *a += v;
                }
                g
            }
            _ => {
                return Err(Error::Contract(
                    "forward cache does not match layer stack".into(),
                ))
            }
        };
    }
    Ok(g)
}
