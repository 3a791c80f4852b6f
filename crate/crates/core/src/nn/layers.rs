use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm, Buffer, Param, Slot, Tensor};

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
}

fn push_param<'a>(out: &mut Vec<(String, Slot<'a>)>, prefix: &str, name: &str, p: &'a mut Param) {
    out.push((format!("{prefix}.{name}"), Slot::Param(p)));
}

/// Zero-padded copy of `x` with planes of `(h + 2) × (w + 2)`, plus two
/// trailing elements so every shifted window stays in bounds.
fn pad_input(x: &Tensor) -> Vec<f32> {
    let (h, w) = (x.h, x.w);
    let wp = w + 2;
    let pl = (h + 2) * wp;
    let mut pad = vec![0.0f32; x.c * x.n * pl + 2];
    for c in 0..x.c {
        for s in 0..x.n {
            let src = x.plane(c, s);
            let dst = &mut pad[(c * x.n + s) * pl..][..pl];
            for y in 0..h {
                dst[(y + 1) * wp + 1..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    pad
}

#[derive(Debug, Clone)]
struct PaddedInput {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

/// Same-padded 3×3 convolution.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    /// `[cout, cin, 3, 3]`
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<PaddedInput>,
}

impl Conv3x3 {
    pub fn new(cin: usize, cout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let k = cin * 9;
        let weight = Param::new(vec![cout, cin, 3, 3], glorot(rng, k, cout * 9, cout * k));
        Self {
            cin,
            cout,
            weight,
            bias: bias.then(|| Param::new(vec![cout], vec![0.0; cout])),
            input: None,
        }
    }

    /// Each of the nine taps is one GEMM against a shifted window of the
    /// padded input. Outputs are computed on a `h × (w + 2)` grid whose two
    /// extra columns per row are discarded.
    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (n, h, w) = (x.n, x.h, x.w);
        let wp = w + 2;
        let pl = (h + 2) * wp;
        let g = h * wp;
        let k9 = self.cin * 9;
        let pad = pad_input(x);
        let mut grid = vec![0.0f32; self.cout * n * g];
        for s in 0..n {
            for tap in 0..9 {
                let off = (tap / 3) * wp + tap % 3;
                gemm(
                    self.cout,
                    self.cin,
                    g,
                    1.0,
                    &self.weight.value[tap..],
                    k9,
                    9,
                    &pad[s * pl + off..],
                    n * pl,
                    1,
                    if tap == 0 { 0.0 } else { 1.0 },
                    &mut grid[s * g..],
                    n * g,
                    1,
                );
            }
        }
        let mut out = Tensor::zeros(self.cout, n, h, w);
        for co in 0..self.cout {
            let bias = self.bias.as_ref().map_or(0.0, |b| b.value[co]);
            for s in 0..n {
                let src = &grid[(co * n + s) * g..][..g];
                let dst = out.plane_mut(co, s);
                for y in 0..h {
                    for (d, v) in dst[y * w..(y + 1) * w].iter_mut().zip(&src[y * wp..y * wp + w]) {
                        *d = v + bias;
                    }
                }
            }
        }
        self.input = cache.then_some(PaddedInput { n, h, w, data: pad });
        out
    }

    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let xpad = self.input.take().expect("conv backward without cached forward");
        let (n, h, w) = (xpad.n, xpad.h, xpad.w);
        let wp = w + 2;
        let pl = (h + 2) * wp;
        let g = h * wp;
        let k9 = self.cin * 9;
        // dY on the output grid, zero in the discarded columns.
        let mut dgrid = vec![0.0f32; self.cout * n * g];
        for co in 0..self.cout {
            for s in 0..n {
                let src = dy.plane(co, s);
                let dst = &mut dgrid[(co * n + s) * g..][..g];
                for y in 0..h {
                    dst[y * wp..y * wp + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
        let mut dpad = if need_dx { vec![0.0f32; self.cin * n * pl + 2] } else { Vec::new() };
        for s in 0..n {
            for tap in 0..9 {
                let off = (tap / 3) * wp + tap % 3;
                // dW[:, :, tap] += dY_s · X_s(shifted)^T
                gemm(
                    self.cout,
                    g,
                    self.cin,
                    1.0,
                    &dgrid[s * g..],
                    n * g,
                    1,
                    &xpad.data[s * pl + off..],
                    1,
                    n * pl,
                    1.0,
                    &mut self.weight.grad[tap..],
                    k9,
                    9,
                );
                if need_dx {
                    // dX(shifted) += W[:, :, tap]^T · dY_s
                    gemm(
                        self.cin,
                        self.cout,
                        g,
                        1.0,
                        &self.weight.value[tap..],
                        9,
                        k9,
                        &dgrid[s * g..],
                        n * g,
                        1,
                        1.0,
                        &mut dpad[s * pl + off..],
                        n * pl,
                        1,
                    );
                }
            }
        }
        if let Some(b) = self.bias.as_mut() {
            for (co, gb) in b.grad.iter_mut().enumerate() {
                *gb += dy.channel(co).iter().sum::<f32>();
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(self.cin, n, h, w);
            for ci in 0..self.cin {
                for s in 0..n {
                    let src = &dpad[(ci * n + s) * pl..][..pl];
                    let dst = dx.plane_mut(ci, s);
                    for y in 0..h {
                        dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + 1) * wp + 1..][..w]);
                    }
                }
            }
            dx
        })
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        push_param(out, prefix, "weight", &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            push_param(out, prefix, "bias", b);
        }
    }
}

/// Pointwise (1×1) convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub cin: usize,
    pub cout: usize,
    /// `[cout, cin]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv1x1 {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cin,
            cout,
            weight: Param::new(vec![cout, cin], glorot(rng, cin, cout, cin * cout)),
            bias: Param::new(vec![cout], vec![0.0; cout]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c, self.cin, "1x1 conv input channels");
        let len = x.n * x.plane_len();
        let mut out = Tensor::zeros(self.cout, x.n, x.h, x.w);
        gemm(
            self.cout,
            self.cin,
            len,
            1.0,
            &self.weight.value,
            self.cin,
            1,
            &x.data,
            len,
            1,
            0.0,
            &mut out.data,
            len,
            1,
        );
        for (co, &bv) in self.bias.value.iter().enumerate() {
            out.channel_mut(co).iter_mut().for_each(|v| *v += bv);
        }
        self.input = cache.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("1x1 conv backward without cached forward");
        let len = x.n * x.plane_len();
        gemm(
            self.cout,
            len,
            self.cin,
            1.0,
            &dy.data,
            len,
            1,
            &x.data,
            1,
            len,
            1.0,
            &mut self.weight.grad,
            self.cin,
            1,
        );
        for (co, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.channel(co).iter().sum::<f32>();
        }
        let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
        gemm(
            self.cin,
            self.cout,
            len,
            1.0,
            &self.weight.value,
            1,
            self.cin,
            &dy.data,
            len,
            1,
            0.0,
            &mut dx.data,
            len,
            1,
        );
        dx
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        push_param(out, prefix, "weight", &mut self.weight);
        push_param(out, prefix, "bias", &mut self.bias);
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(vec![c], vec![1.0; c]),
            beta: Param::new(vec![c], vec![0.0; c]),
            running_mean: Buffer {
                shape: vec![c],
                value: vec![0.0; c],
            },
            running_var: Buffer {
                shape: vec![c],
                value: vec![1.0; c],
            },
            momentum: 0.1,
            eps: 1e-3,
            cache: None,
        }
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut y = x.clone();
        let m = x.n * x.plane_len();
        if !train {
            for c in 0..x.c {
                let inv = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
                let (g, b, mu) = (self.gamma.value[c], self.beta.value[c], self.running_mean.value[c]);
                y.channel_mut(c)
                    .iter_mut()
                    .for_each(|v| *v = g * (*v - mu) * inv + b);
            }
            self.cache = None;
            return y;
        }
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; x.c];
        for c in 0..x.c {
            let ch = x.channel(c);
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = inv as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let xh = &mut xhat[c * m..(c + 1) * m];
            for ((o, xh), &v) in y.channel_mut(c).iter_mut().zip(xh).zip(ch) {
                *xh = ((v as f64 - mean) * inv) as f32;
                *o = g * *xh + b;
            }
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            let mom = self.momentum;
            self.running_mean.value[c] = (1.0 - mom) * self.running_mean.value[c] + mom * mean as f32;
            self.running_var.value[c] = (1.0 - mom) * self.running_var.value[c] + mom * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without training forward");
        let m = dy.n * dy.plane_len();
        let mut dx = Tensor::zeros(dy.c, dy.n, dy.h, dy.w);
        for c in 0..dy.c {
            let g = dy.channel(c);
            let xh = &xhat[c * m..(c + 1) * m];
            let sum_dy: f64 = g.iter().map(|&v| v as f64).sum();
            let sum_dy_xh: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
            self.gamma.grad[c] += sum_dy_xh as f32;
            self.beta.grad[c] += sum_dy as f32;
            let scale = self.gamma.value[c] * inv_std[c] / m as f32;
            let (sd, sdx) = (sum_dy as f32, sum_dy_xh as f32);
            for ((o, &gv), &xv) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
                *o = scale * (m as f32 * gv - sd - xv * sdx);
            }
        }
        dx
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        push_param(out, prefix, "gamma", &mut self.gamma);
        push_param(out, prefix, "beta", &mut self.beta);
        out.push((format!("{prefix}.running_mean"), Slot::Buffer(&mut self.running_mean)));
        out.push((format!("{prefix}.running_var"), Slot::Buffer(&mut self.running_var)));
    }
}

/// Two (3×3 conv → optional batch norm → ReLU) stages.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub convs: [Conv3x3; 2],
    pub norms: Option<[BatchNorm; 2]>,
    relu_out: [Option<Tensor>; 2],
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, batch_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let a = Conv3x3::new(cin, cout, !batch_norm, rng);
        let b = Conv3x3::new(cout, cout, !batch_norm, rng);
        Self {
            convs: [a, b],
            norms: batch_norm.then(|| [BatchNorm::new(cout), BatchNorm::new(cout)]),
            relu_out: [None, None],
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut cur = x.clone();
        for i in 0..2 {
            cur = self.convs[i].forward(&cur, train);
            if let Some(norms) = self.norms.as_mut() {
                cur = norms[i].forward(&cur, train);
            }
            cur.data.iter_mut().for_each(|v| *v = v.max(0.0));
            self.relu_out[i] = train.then(|| cur.clone());
        }
        cur
    }

    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let mut grad = dy.clone();
        for i in (0..2).rev() {
            let out = self.relu_out[i].take().expect("block backward without training forward");
            grad.data
                .iter_mut()
                .zip(&out.data)
                .for_each(|(g, &o)| if o <= 0.0 { *g = 0.0 });
            if let Some(norms) = self.norms.as_mut() {
                grad = norms[i].backward(&grad);
            }
            {
                let g = self.convs[i].backward(&grad, i == 1 || need_dx)?;
                grad = g
            }
        }
        Some(grad)
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        let [c0, c1] = &mut self.convs;
        match self.norms.as_mut() {
            Some([n0, n1]) => {
                c0.collect(&format!("{prefix}.conv0"), out);
                n0.collect(&format!("{prefix}.bn0"), out);
                c1.collect(&format!("{prefix}.conv1"), out);
                n1.collect(&format!("{prefix}.bn1"), out);
            }
            None => {
                c0.collect(&format!("{prefix}.conv0"), out);
                c1.collect(&format!("{prefix}.conv1"), out);
            }
        }
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<u8>, usize, usize)>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "max pool needs even spatial size");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.c, x.n, oh, ow);
        let mut arg = vec![0u8; x.c * x.n * oh * ow];
        for c in 0..x.c {
            for s in 0..x.n {
                let src = x.plane(c, s);
                let base = (c * x.n + s) * oh * ow;
                let dst = out.plane_mut(c, s);
                for y in 0..oh {
                    for xx in 0..ow {
                        let i0 = 2 * y * x.w + 2 * xx;
                        let cand = [src[i0], src[i0 + 1], src[i0 + x.w], src[i0 + x.w + 1]];
                        let mut best = 0;
                        for j in 1..4 {
                            if cand[j] > cand[best] {
                                best = j;
                            }
                        }
                        dst[y * ow + xx] = cand[best];
                        arg[base + y * ow + xx] = best as u8;
                    }
                }
            }
        }
        self.argmax = cache.then_some((arg, x.h, x.w));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (arg, h, w) = self.argmax.take().expect("pool backward without cached forward");
        let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
        let (oh, ow) = (dy.h, dy.w);
        for c in 0..dy.c {
            for s in 0..dy.n {
                let g = dy.plane(c, s);
                let base = (c * dy.n + s) * oh * ow;
                let dst = dx.plane_mut(c, s);
                for y in 0..oh {
                    for xx in 0..ow {
                        let a = arg[base + y * ow + xx] as usize;
                        dst[(2 * y + a / 2) * w + 2 * xx + a % 2] += g[y * ow + xx];
                    }
                }
            }
        }
        dx
    }
}

/// Transposed 2×2 convolution with stride 2 (learned upsampling).
#[derive(Debug, Clone)]
pub struct UpConv2 {
    pub cin: usize,
    pub cout: usize,
    /// `[cout, 2, 2, cin]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl UpConv2 {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cin,
            cout,
            weight: Param::new(
                vec![cout, 2, 2, cin],
                glorot(rng, cin * 4, cout * 4, cout * 4 * cin),
            ),
            bias: Param::new(vec![cout], vec![0.0; cout]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.c, self.cin, "up-conv input channels");
        let hw = x.plane_len();
        let rows = self.cout * 4;
        let mut z = vec![0.0f32; rows * hw];
        let mut out = Tensor::zeros(self.cout, x.n, x.h * 2, x.w * 2);
        let ow = x.w * 2;
        for s in 0..x.n {
            gemm(
                rows,
                self.cin,
                hw,
                1.0,
                &self.weight.value,
                self.cin,
                1,
                &x.data[s * hw..],
                x.n * hw,
                1,
                0.0,
                &mut z,
                hw,
                1,
            );
            for co in 0..self.cout {
                let b = self.bias.value[co];
                let dst = out.plane_mut(co, s);
                for q in 0..4 {
                    let (dy, dx) = (q / 2, q % 2);
                    let zr = &z[(co * 4 + q) * hw..][..hw];
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            dst[(2 * y + dy) * ow + 2 * xx + dx] = zr[y * x.w + xx] + b;
                        }
                    }
                }
            }
        }
        self.input = cache.then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("up-conv backward without cached forward");
        let hw = x.plane_len();
        let rows = self.cout * 4;
        let ow = x.w * 2;
        let mut dz = vec![0.0f32; rows * hw];
        let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
        for s in 0..x.n {
            for co in 0..self.cout {
                let g = dy.plane(co, s);
                self.bias.grad[co] += g.iter().sum::<f32>();
                for q in 0..4 {
                    let (qy, qx) = (q / 2, q % 2);
                    let zr = &mut dz[(co * 4 + q) * hw..][..hw];
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            zr[y * x.w + xx] = g[(2 * y + qy) * ow + 2 * xx + qx];
                        }
                    }
                }
            }
            gemm(
                rows,
                hw,
                self.cin,
                1.0,
                &dz,
                hw,
                1,
                &x.data[s * hw..],
                1,
                x.n * hw,
                1.0,
                &mut self.weight.grad,
                self.cin,
                1,
            );
            gemm(
                self.cin,
                rows,
                hw,
                1.0,
                &self.weight.value,
                1,
                self.cin,
                &dz,
                hw,
                1,
                0.0,
                &mut dx.data[s * hw..],
                x.n * hw,
                1,
            );
        }
        dx
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a>)>) {
        push_param(out, prefix, "weight", &mut self.weight);
        push_param(out, prefix, "bias", &mut self.bias);
    }
}
