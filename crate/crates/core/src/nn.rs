//! Minimal dense/conv layers with explicit forward and backward passes.
//!
//! Just enough machinery to train the small convolutional backbone and the
//! projection head on CPU: conv via im2col + matmul, max pooling, global
//! average pooling, linear layers, ReLU, and SGD with momentum. Single
//! precision, single threaded, deterministic. Every layer caches what its
//! backward pass needs when called with `train = true`.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// A named parameter tensor paired with its gradient accumulator.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: ArrayViewMutD<'a, f32>,
    pub grad: ArrayViewMutD<'a, f32>,
}

/// Kaiming-uniform init over the fan-in.
fn kaiming_uniform(rng: &mut ChaCha20Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub struct Conv2d {
    pub weight: Array4<f32>, // (out_c, in_c, kh, kw)
    pub bias: Array1<f32>,
    pub grad_weight: Array4<f32>,
    pub grad_bias: Array1<f32>,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

struct ConvCache {
    cols: Vec<Array2<f32>>, // per-sample im2col matrices
    input_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let w = kaiming_uniform(rng, fan_in, out_c * fan_in);
        Self {
            weight: Array4::from_shape_vec((out_c, in_c, kernel, kernel), w).unwrap(),
            bias: Array1::zeros(out_c),
            grad_weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            grad_bias: Array1::zeros(out_c),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, img: ndarray::ArrayView3<f32>) -> Array2<f32> {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
        let p = self.padding as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = img[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&mut self, input: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let out_c = self.weight.shape()[0];
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, c * k * k))
            .unwrap()
            .to_owned();
        let mut out = Array4::<f32>::zeros((n, out_c, oh, ow));
        let mut cols_cache = Vec::with_capacity(if train { n } else { 0 });
        for i in 0..n {
            let cols = self.im2col(input.index_axis(ndarray::Axis(0), i));
            let prod = w_mat.dot(&cols); // (out_c, oh*ow)
            for oc in 0..out_c {
                let b = self.bias[oc];
                for j in 0..oh * ow {
                    out[[i, oc, j / ow, j % ow]] = prod[[oc, j]] + b;
                }
            }
            if train {
                cols_cache.push(cols);
            }
        }
        if train {
            self.cache = Some(ConvCache {
                cols: cols_cache,
                input_shape: (n, c, h, w),
            });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("forward(train=true) before backward");
        let (n, c, h, w) = cache.input_shape;
        let out_c = self.weight.shape()[0];
        let k = self.weight.shape()[2];
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, c * k * k))
            .unwrap()
            .to_owned();
        let mut grad_in = Array4::<f32>::zeros((n, c, h, w));
        let mut grad_w_mat = Array2::<f32>::zeros((out_c, c * k * k));
        let p = self.padding as isize;
        for i in 0..n {
            let mut go = Array2::<f32>::zeros((out_c, oh * ow));
            for oc in 0..out_c {
                for j in 0..oh * ow {
                    let g = grad_out[[i, oc, j / ow, j % ow]];
                    go[[oc, j]] = g;
                    self.grad_bias[oc] += g;
                }
            }
            grad_w_mat += &go.dot(&cache.cols[i].t());
            let dcols = w_mat.t().dot(&go); // (c*k*k, oh*ow)
            // col2im accumulation
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        for oy in 0..oh {
                            let iy = (oy * self.stride) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride) as isize + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                grad_in[[i, ci, iy as usize, ix as usize]] +=
                                    dcols[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
        let gw = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((out_c, c * k * k))
            .unwrap()
            .to_owned()
            + grad_w_mat;
        self.grad_weight
            .assign(&gw.into_shape_with_order((out_c, c, k, k)).unwrap());
        grad_in
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot)) {
        f(ParamSlot {
            name: format!("{prefix}.weight"),
            value: self.weight.view_mut().into_dyn(),
            grad: self.grad_weight.view_mut().into_dyn(),
        });
        f(ParamSlot {
            name: format!("{prefix}.bias"),
            value: self.bias.view_mut().into_dyn(),
            grad: self.grad_bias.view_mut().into_dyn(),
        });
    }
}

pub struct Linear {
    pub weight: Array2<f32>, // (out, in)
    pub bias: Option<Array1<f32>>,
    pub grad_weight: Array2<f32>,
    pub grad_bias: Option<Array1<f32>>,
    cache: Option<Array2<f32>>, // input
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha20Rng) -> Self {
        let w = kaiming_uniform(rng, in_dim, in_dim * out_dim);
        Self {
            weight: Array2::from_shape_vec((out_dim, in_dim), w).unwrap(),
            bias: bias.then(|| Array1::zeros(out_dim)),
            grad_weight: Array2::zeros((out_dim, in_dim)),
            grad_bias: bias.then(|| Array1::zeros(out_dim)),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let mut out = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            out += b;
        }
        if train {
            self.cache = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.take().expect("forward(train=true) before backward");
        self.grad_weight += &grad_out.t().dot(&x);
        if let Some(gb) = &mut self.grad_bias {
            *gb += &grad_out.sum_axis(ndarray::Axis(0));
        }
        grad_out.dot(&self.weight)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot)) {
        f(ParamSlot {
            name: format!("{prefix}.weight"),
            value: self.weight.view_mut().into_dyn(),
            grad: self.grad_weight.view_mut().into_dyn(),
        });
        if let (Some(b), Some(gb)) = (&mut self.bias, &mut self.grad_bias) {
            f(ParamSlot {
                name: format!("{prefix}.bias"),
                value: b.view_mut().into_dyn(),
                grad: gb.view_mut().into_dyn(),
            });
        }
    }
}

/// Elementwise ReLU over any dimensionality.
pub struct Relu {
    mask: Option<ArrayD<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { mask: None }
    }

    pub fn forward_d(&mut self, x: &ArrayD<f32>, train: bool) -> ArrayD<f32> {
        if train {
            self.mask = Some(x.mapv(|v| v > 0.0));
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward_d(&mut self, grad_out: &ArrayD<f32>) -> ArrayD<f32> {
        let mask = self.mask.take().expect("forward(train=true) before backward");
        let mut g = grad_out.clone();
        g.zip_mut_with(&mask, |v, &m| {
            if !m {
                *v = 0.0;
            }
        });
        g
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub struct MaxPool2 {
    argmax: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self { argmax: None }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        let mut arg = if train {
            Vec::with_capacity(n * c * oh * ow)
        } else {
            Vec::new()
        };
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (y, xx) = (oy * 2 + dy, ox * 2 + dx);
                                let v = x[[i, ci, y, xx]];
                                if v > best {
                                    best = v;
                                    best_idx = (y * w + xx) as u32;
                                }
                            }
                        }
                        out[[i, ci, oy, ox]] = best;
                        if train {
                            arg.push(best_idx);
                        }
                    }
                }
            }
        }
        if train {
            self.argmax = Some((arg, (n, c, h, w)));
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f32>) -> Array4<f32> {
        let (arg, (n, c, h, w)) = self.argmax.take().expect("forward(train=true) before backward");
        let (oh, ow) = (h / 2, w / 2);
        let mut grad_in = Array4::<f32>::zeros((n, c, h, w));
        let mut k = 0;
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = arg[k] as usize;
                        grad_in[[i, ci, flat / w, flat % w]] += grad_out[[i, ci, oy, ox]];
                        k += 1;
                    }
                }
            }
        }
        grad_in
    }
}

impl Default for MaxPool2 {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean over the spatial grid: (n, c, h, w) -> (n, c).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array2::<f32>::zeros((n, c));
    let scale = 1.0 / (h * w) as f32;
    for i in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[[i, ci, y, xx]];
                }
            }
            out[[i, ci]] = s * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    grad_out: &Array2<f32>,
    shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = shape;
    let scale = 1.0 / (h * w) as f32;
    let mut grad_in = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            let g = grad_out[[i, ci]] * scale;
            for y in 0..h {
                for xx in 0..w {
                    grad_in[[i, ci, y, xx]] = g;
                }
            }
        }
    }
    grad_in
}

/// SGD with classical momentum: v <- m v + g; p <- p - lr v.
/// Velocity buffers key off parameter order, which is stable per network.
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Apply one update over the parameters yielded by `visit`, then zero the
    /// gradients. `visit` must yield parameters in a stable order.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(ParamSlot))) {
        let lr = self.lr;
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        let mut idx = 0usize;
        visit(&mut |mut slot: ParamSlot| {
            if velocity.len() == idx {
                velocity.push(ArrayD::zeros(slot.value.raw_dim()));
            }
            let v = &mut velocity[idx];
            v.zip_mut_with(&slot.grad, |v, &g| *v = momentum * *v + g);
            slot.value.zip_mut_with(v, |p, &v| *p -= lr * v);
            slot.grad.fill(0.0);
            idx += 1;
        });
    }

    pub fn velocity_tensors(&self) -> &[ArrayD<f32>] {
        &self.velocity
    }

    pub fn load_velocity(&mut self, tensors: Vec<ArrayD<f32>>) {
        self.velocity = tensors;
    }
}
