//! Minimal CPU training engine: plain layers, explicit forward traces, and
//! reverse-mode gradients. Deterministic given the init seed and batch order.

mod conv;

pub use conv::Conv2d;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A batch flowing through the network: image-shaped or flattened.
#[derive(Debug, Clone)]
pub enum Batch {
    Im(Array4<f32>),
    Flat(Array2<f32>),
}

impl Batch {
    pub fn expect_im(self) -> Array4<f32> {
        match self {
            Batch::Im(x) => x,
            Batch::Flat(_) => panic!("expected image batch"),
        }
    }

    pub fn expect_flat(self) -> Array2<f32> {
        match self {
            Batch::Flat(x) => x,
            Batch::Im(_) => panic!("expected flat batch"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    /// `(in_features, out_features)`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn new(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_f as f32).sqrt();
        let weight = Array2::from_shape_simple_fn((in_f, out_f), || rng.random_range(-limit..limit));
        Dense {
            name: name.to_string(),
            weight,
            bias: Array1::zeros(out_f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub main: Vec<Layer>,
    /// `None` means identity skip; a 1x1 conv otherwise.
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Dense(Dense),
    Relu,
    Tanh,
    /// 2x2 max pooling, stride 2.
    MaxPool2,
    /// 2x nearest-neighbour upsampling.
    Upsample2,
    Flatten,
    Residual(ResidualBlock),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// `(channels, height, width)` of a single input sample.
    pub input_shape: (usize, usize, usize),
}

// ---------------------------------------------------------------------------
// Forward / backward

pub enum LayerCache {
    Conv {
        col: Array2<f32>,
        in_dim: (usize, usize, usize, usize),
    },
    Dense {
        input: Array2<f32>,
    },
    /// Output of an activation (mask for relu, derivative base for tanh).
    Act {
        output: Batch,
    },
    MaxPool {
        /// position of the max within each 2x2 window, 0..4
        arg: Vec<u8>,
        in_dim: (usize, usize, usize, usize),
    },
    Upsample,
    Flatten {
        in_dim: (usize, usize, usize, usize),
    },
    Residual {
        main: Vec<LayerCache>,
        shortcut: Option<Box<LayerCache>>,
    },
}

pub struct Trace {
    caches: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
pub enum LayerGrad {
    Conv { dw: Array4<f32>, db: Array1<f32> },
    Dense { dw: Array2<f32>, db: Array1<f32> },
    None,
    Residual {
        main: Vec<LayerGrad>,
        shortcut: Option<Box<LayerGrad>>,
    },
}

#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<LayerGrad>);

fn zero_grad_for(layer: &Layer) -> LayerGrad {
    match layer {
        Layer::Conv(c) => LayerGrad::Conv {
            dw: Array4::zeros(c.weight.dim()),
            db: Array1::zeros(c.bias.len()),
        },
        Layer::Dense(d) => LayerGrad::Dense {
            dw: Array2::zeros(d.weight.dim()),
            db: Array1::zeros(d.bias.len()),
        },
        Layer::Residual(b) => LayerGrad::Residual {
            main: b.main.iter().map(zero_grad_for).collect(),
            shortcut: b.shortcut.as_ref().map(|c| {
                Box::new(LayerGrad::Conv {
                    dw: Array4::zeros(c.weight.dim()),
                    db: Array1::zeros(c.bias.len()),
                })
            }),
        },
        _ => LayerGrad::None,
    }
}

fn relu_forward(x: Batch) -> Batch {
    match x {
        Batch::Im(mut a) => {
            a.mapv_inplace(|v| v.max(0.0));
            Batch::Im(a)
        }
        Batch::Flat(mut a) => {
            a.mapv_inplace(|v| v.max(0.0));
            Batch::Flat(a)
        }
    }
}

fn tanh_forward(x: Batch) -> Batch {
    match x {
        Batch::Im(mut a) => {
            a.mapv_inplace(f32::tanh);
            Batch::Im(a)
        }
        Batch::Flat(mut a) => {
            a.mapv_inplace(f32::tanh);
            Batch::Flat(a)
        }
    }
}

fn maxpool2_forward(x: &Array4<f32>) -> (Array4<f32>, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let mut arg = vec![0u8; n * c * oh * ow];
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oi in 0..oh {
            for oj in 0..ow {
                let i0 = in_base + (2 * oi) * w + 2 * oj;
                let cand = [xs[i0], xs[i0 + 1], xs[i0 + w], xs[i0 + w + 1]];
                let mut best = 0usize;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = out_base + oi * ow + oj;
                os[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

fn maxpool2_backward(
    dout: &Array4<f32>,
    arg: &[u8],
    in_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = in_dim;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::<f32>::zeros(in_dim);
    let ds = dout.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oi in 0..oh {
            for oj in 0..ow {
                let o = out_base + oi * ow + oj;
                let k = arg[o] as usize;
                let i0 = in_base + (2 * oi + k / 2) * w + 2 * oj + k % 2;
                xs[i0] += ds[o];
            }
        }
    }
    dx
}

fn upsample2_forward(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(ni, ci, i, j)];
                    out[(ni, ci, 2 * i, 2 * j)] = v;
                    out[(ni, ci, 2 * i, 2 * j + 1)] = v;
                    out[(ni, ci, 2 * i + 1, 2 * j)] = v;
                    out[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    out
}

fn upsample2_backward(dout: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[(ni, ci, i, j)] = dout[(ni, ci, 2 * i, 2 * j)]
                        + dout[(ni, ci, 2 * i, 2 * j + 1)]
                        + dout[(ni, ci, 2 * i + 1, 2 * j)]
                        + dout[(ni, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    dx
}

fn forward_layers(layers: &[Layer], x: Batch, caches: Option<&mut Vec<LayerCache>>) -> Batch {
    let mut cur = x;
    let mut caches = caches;
    for layer in layers {
        let (next, cache) = match layer {
            Layer::Conv(c) => {
                let im = cur.expect_im();
                let in_dim = im.dim();
                let (out, col) = c.forward(&im);
                (Batch::Im(out), LayerCache::Conv { col, in_dim })
            }
            Layer::Dense(d) => {
                let flat = cur.expect_flat();
                let out = flat.dot(&d.weight) + &d.bias;
                (Batch::Flat(out), LayerCache::Dense { input: flat })
            }
            Layer::Relu => {
                let out = relu_forward(cur);
                let cache = LayerCache::Act { output: out.clone() };
                (out, cache)
            }
            Layer::Tanh => {
                let out = tanh_forward(cur);
                let cache = LayerCache::Act { output: out.clone() };
                (out, cache)
            }
            Layer::MaxPool2 => {
                let im = cur.expect_im();
                let in_dim = im.dim();
                let (out, arg) = maxpool2_forward(&im);
                (Batch::Im(out), LayerCache::MaxPool { arg, in_dim })
            }
            Layer::Upsample2 => {
                let im = cur.expect_im();
                (Batch::Im(upsample2_forward(&im)), LayerCache::Upsample)
            }
            Layer::Flatten => {
                let im = cur.expect_im();
                let in_dim = im.dim();
                let (n, c, h, w) = in_dim;
                let flat = im
                    .into_shape_with_order((n, c * h * w))
                    .expect("image batch is contiguous");
                (Batch::Flat(flat), LayerCache::Flatten { in_dim })
            }
            Layer::Residual(block) => {
                let im = cur.expect_im();
                let mut sub = Vec::new();
                let main_out = forward_layers(&block.main, Batch::Im(im.clone()), Some(&mut sub))
                    .expect_im();
                let (skip_out, skip_cache) = match &block.shortcut {
                    Some(conv) => {
                        let in_dim = im.dim();
                        let (out, col) = conv.forward(&im);
                        (out, Some(Box::new(LayerCache::Conv { col, in_dim })))
                    }
                    None => (im, None),
                };
                (
                    Batch::Im(main_out + &skip_out),
                    LayerCache::Residual {
                        main: sub,
                        shortcut: skip_cache,
                    },
                )
            }
        };
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        cur = next;
    }
    cur
}

fn backward_layers(
    layers: &[Layer],
    caches: &[LayerCache],
    dout: Batch,
    mut grads: Option<&mut [LayerGrad]>,
) -> Batch {
    let mut cur = dout;
    for idx in (0..layers.len()).rev() {
        let cache = &caches[idx];
        let grad_slot = grads.as_deref_mut().map(|g| &mut g[idx]);
        cur = match (&layers[idx], cache) {
            (Layer::Conv(c), LayerCache::Conv { col, in_dim }) => {
                let d = cur.expect_im();
                let pg = grad_slot.and_then(|g| match g {
                    LayerGrad::Conv { dw, db } => Some((dw, db)),
                    _ => None,
                });
                Batch::Im(c.backward(col, *in_dim, &d, pg))
            }
            (Layer::Dense(dz), LayerCache::Dense { input }) => {
                let d = cur.expect_flat();
                if let Some(LayerGrad::Dense { dw, db }) = grad_slot {
                    *dw += &input.t().dot(&d);
                    *db += &d.sum_axis(Axis(0));
                }
                Batch::Flat(d.dot(&dz.weight.t()))
            }
            (Layer::Relu, LayerCache::Act { output }) => match (cur, output) {
                (Batch::Im(mut d), Batch::Im(y)) => {
                    d.zip_mut_with(y, |dv, yv| {
                        if *yv <= 0.0 {
                            *dv = 0.0;
                        }
                    });
                    Batch::Im(d)
                }
                (Batch::Flat(mut d), Batch::Flat(y)) => {
                    d.zip_mut_with(y, |dv, yv| {
                        if *yv <= 0.0 {
                            *dv = 0.0;
                        }
                    });
                    Batch::Flat(d)
                }
                _ => panic!("relu cache shape mismatch"),
            },
            (Layer::Tanh, LayerCache::Act { output }) => match (cur, output) {
                (Batch::Im(mut d), Batch::Im(y)) => {
                    d.zip_mut_with(y, |dv, yv| *dv *= 1.0 - yv * yv);
                    Batch::Im(d)
                }
                (Batch::Flat(mut d), Batch::Flat(y)) => {
                    d.zip_mut_with(y, |dv, yv| *dv *= 1.0 - yv * yv);
                    Batch::Flat(d)
                }
                _ => panic!("tanh cache shape mismatch"),
            },
            (Layer::MaxPool2, LayerCache::MaxPool { arg, in_dim }) => {
                let d = cur.expect_im();
                Batch::Im(maxpool2_backward(&d, arg, *in_dim))
            }
            (Layer::Upsample2, LayerCache::Upsample) => {
                let d = cur.expect_im();
                Batch::Im(upsample2_backward(&d))
            }
            (Layer::Flatten, LayerCache::Flatten { in_dim }) => {
                let d = cur.expect_flat();
                Batch::Im(
                    d.into_shape_with_order(*in_dim)
                        .expect("flat batch is contiguous"),
                )
            }
            (Layer::Residual(block), LayerCache::Residual { main, shortcut }) => {
                let d = cur.expect_im();
                let (main_grads, skip_grad) = match grad_slot {
                    Some(LayerGrad::Residual { main, shortcut }) => {
                        (Some(main.as_mut_slice()), shortcut.as_deref_mut())
                    }
                    _ => (None, None),
                };
                let d_main =
                    backward_layers(&block.main, main, Batch::Im(d.clone()), main_grads)
                        .expect_im();
                let d_skip = match (&block.shortcut, shortcut) {
                    (Some(conv), Some(cache)) => {
                        let LayerCache::Conv { col, in_dim } = cache.as_ref() else {
                            panic!("residual shortcut cache mismatch");
                        };
                        let pg = skip_grad.and_then(|g| match g {
                            LayerGrad::Conv { dw, db } => Some((dw, db)),
                            _ => None,
                        });
                        conv.backward(col, *in_dim, &d, pg)
                    }
                    (None, None) => d,
                    _ => panic!("residual shortcut cache mismatch"),
                };
                Batch::Im(d_main + &d_skip)
            }
            _ => panic!("layer/cache mismatch in backward"),
        };
    }
    cur
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: (usize, usize, usize)) -> Self {
        Network { layers, input_shape }
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: Batch) -> Batch {
        forward_layers(&self.layers, x, None)
    }

    /// Forward pass on an image batch.
    pub fn forward_im(&self, x: &Array4<f32>) -> Batch {
        self.forward(Batch::Im(x.clone()))
    }

    /// Forward pass recording the per-layer caches needed by [`Self::backward`].
    pub fn forward_trace(&self, x: Batch) -> (Batch, Trace) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = forward_layers(&self.layers, x, Some(&mut caches));
        (out, Trace { caches })
    }

    /// Backpropagate `dout`, accumulating parameter gradients into `grads`.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&self, trace: &Trace, dout: Batch, grads: &mut Gradients) -> Batch {
        backward_layers(&self.layers, &trace.caches, dout, Some(&mut grads.0))
    }

    /// Backpropagate to the input only, leaving all parameters untouched.
    pub fn backward_input(&self, trace: &Trace, dout: Batch) -> Batch {
        backward_layers(&self.layers, &trace.caches, dout, None)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.layers.iter().map(zero_grad_for).collect())
    }

    /// Visit every parameter tensor in order as `(name, shape, values)`.
    pub fn visit_params<F: FnMut(&str, &[usize], &[f32])>(&self, f: &mut F) {
        fn walk<F: FnMut(&str, &[usize], &[f32])>(layers: &[Layer], f: &mut F) {
            for layer in layers {
                match layer {
                    Layer::Conv(c) => {
                        f(
                            &format!("{}.weight", c.name),
                            c.weight.shape(),
                            c.weight.as_slice().unwrap(),
                        );
                        f(
                            &format!("{}.bias", c.name),
                            c.bias.shape(),
                            c.bias.as_slice().unwrap(),
                        );
                    }
                    Layer::Dense(d) => {
                        f(
                            &format!("{}.weight", d.name),
                            d.weight.shape(),
                            d.weight.as_slice().unwrap(),
                        );
                        f(
                            &format!("{}.bias", d.name),
                            d.bias.shape(),
                            d.bias.as_slice().unwrap(),
                        );
                    }
                    Layer::Residual(b) => {
                        walk(&b.main, f);
                        if let Some(c) = &b.shortcut {
                            f(
                                &format!("{}.weight", c.name),
                                c.weight.shape(),
                                c.weight.as_slice().unwrap(),
                            );
                            f(
                                &format!("{}.bias", c.name),
                                c.bias.shape(),
                                c.bias.as_slice().unwrap(),
                            );
                        }
                    }
                    _ => {}
                }
            }
        }
        walk(&self.layers, f);
    }

    /// Visit every parameter tensor mutably, in the same order as
    /// [`Self::visit_params`].
    pub fn visit_params_mut<F: FnMut(&str, &mut [f32])>(&mut self, f: &mut F) {
        fn walk_mut<F: FnMut(&str, &mut [f32])>(layers: &mut [Layer], f: &mut F) {
            for layer in layers.iter_mut() {
                match layer {
                    Layer::Conv(c) => {
                        let name = c.name.clone();
                        f(&format!("{name}.weight"), c.weight.as_slice_mut().unwrap());
                        f(&format!("{name}.bias"), c.bias.as_slice_mut().unwrap());
                    }
                    Layer::Dense(d) => {
                        let name = d.name.clone();
                        f(&format!("{name}.weight"), d.weight.as_slice_mut().unwrap());
                        f(&format!("{name}.bias"), d.bias.as_slice_mut().unwrap());
                    }
                    Layer::Residual(b) => {
                        walk_mut(&mut b.main, f);
                        if let Some(c) = &mut b.shortcut {
                            let name = c.name.clone();
                            f(&format!("{name}.weight"), c.weight.as_slice_mut().unwrap());
                            f(&format!("{name}.bias"), c.bias.as_slice_mut().unwrap());
                        }
                    }
                    _ => {}
                }
            }
        }
        walk_mut(&mut self.layers, f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, shape, _| n += shape.iter().product::<usize>());
        n
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// SGD with optional momentum. Velocity state is kept per parameter tensor.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        if self.momentum == 0.0 {
            apply_sgd(&mut net.layers, &grads.0, self.lr);
            return;
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| net.zero_grads());
        update_velocity(&mut velocity.0, &grads.0, self.momentum);
        apply_sgd(&mut net.layers, &velocity.0, self.lr);
    }
}

fn axpy(dst: &mut [f32], src: &[f32], scale: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn apply_sgd(layers: &mut [Layer], grads: &[LayerGrad], lr: f32) {
    for (layer, grad) in layers.iter_mut().zip(grads) {
        match (layer, grad) {
            (Layer::Conv(c), LayerGrad::Conv { dw, db }) => {
                axpy(c.weight.as_slice_mut().unwrap(), dw.as_slice().unwrap(), -lr);
                axpy(c.bias.as_slice_mut().unwrap(), db.as_slice().unwrap(), -lr);
            }
            (Layer::Dense(d), LayerGrad::Dense { dw, db }) => {
                axpy(d.weight.as_slice_mut().unwrap(), dw.as_slice().unwrap(), -lr);
                axpy(d.bias.as_slice_mut().unwrap(), db.as_slice().unwrap(), -lr);
            }
            (Layer::Residual(b), LayerGrad::Residual { main, shortcut }) => {
                apply_sgd(&mut b.main, main, lr);
                if let (Some(c), Some(g)) = (&mut b.shortcut, shortcut) {
                    if let LayerGrad::Conv { dw, db } = g.as_ref() {
                        axpy(c.weight.as_slice_mut().unwrap(), dw.as_slice().unwrap(), -lr);
                        axpy(c.bias.as_slice_mut().unwrap(), db.as_slice().unwrap(), -lr);
                    }
                }
            }
            _ => {}
        }
    }
}

fn update_velocity(velocity: &mut [LayerGrad], grads: &[LayerGrad], momentum: f32) {
    fn blend(v: &mut [f32], g: &[f32], m: f32) {
        for (vv, gg) in v.iter_mut().zip(g) {
            *vv = m * *vv + gg;
        }
    }
    for (v, g) in velocity.iter_mut().zip(grads) {
        match (v, g) {
            (LayerGrad::Conv { dw: vw, db: vb }, LayerGrad::Conv { dw, db }) => {
                blend(vw.as_slice_mut().unwrap(), dw.as_slice().unwrap(), momentum);
                blend(vb.as_slice_mut().unwrap(), db.as_slice().unwrap(), momentum);
            }
            (LayerGrad::Dense { dw: vw, db: vb }, LayerGrad::Dense { dw, db }) => {
                blend(vw.as_slice_mut().unwrap(), dw.as_slice().unwrap(), momentum);
                blend(vb.as_slice_mut().unwrap(), db.as_slice().unwrap(), momentum);
            }
            (
                LayerGrad::Residual { main: vm, shortcut: vs },
                LayerGrad::Residual { main, shortcut },
            ) => {
                update_velocity(vm, main, momentum);
                if let (Some(v), Some(g)) = (vs, shortcut) {
                    if let (
                        LayerGrad::Conv { dw: vw, db: vb },
                        LayerGrad::Conv { dw, db },
                    ) = (v.as_mut(), g.as_ref())
                    {
                        blend(vw.as_slice_mut().unwrap(), dw.as_slice().unwrap(), momentum);
                        blend(vb.as_slice_mut().unwrap(), db.as_slice().unwrap(), momentum);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Global L2 norm across every gradient tensor.
pub fn grad_global_norm(grads: &Gradients) -> f64 {
    fn walk(grads: &[LayerGrad], acc: &mut f64) {
        for g in grads {
            match g {
                LayerGrad::Conv { dw, db } => {
                    *acc += dw.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                    *acc += db.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                }
                LayerGrad::Dense { dw, db } => {
                    *acc += dw.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                    *acc += db.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                }
                LayerGrad::Residual { main, shortcut } => {
                    walk(main, acc);
                    if let Some(s) = shortcut {
                        walk(std::slice::from_ref(s.as_ref()), acc);
                    }
                }
                LayerGrad::None => {}
            }
        }
    }
    let mut acc = 0.0;
    walk(&grads.0, &mut acc);
    acc.sqrt()
}

/// Scale every gradient tensor in place.
pub fn scale_grads(grads: &mut Gradients, factor: f32) {
    fn walk(grads: &mut [LayerGrad], factor: f32) {
        for g in grads {
            match g {
                LayerGrad::Conv { dw, db } => {
                    dw.mapv_inplace(|v| v * factor);
                    db.mapv_inplace(|v| v * factor);
                }
                LayerGrad::Dense { dw, db } => {
                    dw.mapv_inplace(|v| v * factor);
                    db.mapv_inplace(|v| v * factor);
                }
                LayerGrad::Residual { main, shortcut } => {
                    walk(main, factor);
                    if let Some(s) = shortcut {
                        walk(std::slice::from_mut(s.as_mut()), factor);
                    }
                }
                LayerGrad::None => {}
            }
        }
    }
    walk(&mut grads.0, factor);
}

/// Rescale gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) {
    let norm = grad_global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        scale_grads(grads, (max_norm / norm) as f32);
    }
}

// ---------------------------------------------------------------------------
// Loss

/// Numerically stable softmax cross-entropy.
///
/// Returns the mean loss (f64) and `d(loss)/d(logits)` already divided by the
/// batch size. Uses max-subtraction so degenerate all-equal logits evaluate
/// exactly.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let n = logits.nrows();
    debug_assert_eq!(n, labels.len());
    let mut dlogits = logits.clone();
    let mut total = 0.0f64;
    for (mut row, &label) in dlogits.rows_mut().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for v in row.iter() {
            sum += ((*v as f64) - max).exp();
        }
        let log_sum = sum.ln();
        total += log_sum - ((row[label] as f64) - max);
        let inv_n = 1.0 / n as f64;
        for (k, v) in row.iter_mut().enumerate() {
            let p = ((*v as f64) - max).exp() / sum;
            let target = if k == label { 1.0 } else { 0.0 };
            *v = ((p - target) * inv_n) as f32;
        }
    }
    (total / n as f64, dlogits)
}

/// Row-wise argmax of a logits matrix.
pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
