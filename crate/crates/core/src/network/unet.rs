use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Head, NetworkSpec};
use crate::nn::{Conv1x1, ConvBlock, MaxPool2, Param, Slot, Tensor, UpConv2};
use crate::{Error, Result};

/// U-Net with same-padded convolutions, 2×2 max pooling, learned 2×2
/// up-convolutions and skip concatenations. The forward pass returns raw
/// head outputs; activations are applied by losses and inference.
#[derive(Debug, Clone)]
pub struct UNet {
    spec: NetworkSpec,
    enc: Vec<ConvBlock>,
    pools: Vec<MaxPool2>,
    bottom: ConvBlock,
    ups: Vec<UpConv2>,
    dec: Vec<ConvBlock>,
    head: Conv1x1,
}

impl UNet {
    /// Builds a network with deterministic Glorot-uniform initialization.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = spec.base_features;
        let bn = spec.batch_norm;
        let feat = |level: usize| f << level;
        let mut enc = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let cin = if i == 0 { 1 } else { feat(i - 1) };
            enc.push(ConvBlock::new(cin, feat(i), bn, &mut rng));
        }
        let bottom = ConvBlock::new(feat(spec.depth - 1), feat(spec.depth), bn, &mut rng);
        let mut ups: Vec<Option<UpConv2>> = (0..spec.depth).map(|_| None).collect();
        let mut dec: Vec<Option<ConvBlock>> = (0..spec.depth).map(|_| None).collect();
        for i in (0..spec.depth).rev() {
            ups[i] = Some(UpConv2::new(feat(i + 1), feat(i), &mut rng));
            dec[i] = Some(ConvBlock::new(2 * feat(i), feat(i), bn, &mut rng));
        }
        let head = Conv1x1::new(f, spec.head.channels(), &mut rng);
        Ok(Self {
            spec,
            enc,
            pools: vec![MaxPool2::default(); spec.depth],
            bottom,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn head_kind(&self) -> Head {
        self.spec.head
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spec.size_multiple();
        if h < m || w < m || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be a positive multiple of {m} for depth {}",
                self.spec.depth
            )));
        }
        Ok(())
    }

    /// Raw head output `(channels, N, H, W)`. With `train` set, batch norm
    /// uses batch statistics and activations are cached for [`UNet::backward`].
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if x.c != 1 {
            return Err(Error::invalid(format!("expected 1 input channel, got {}", x.c)));
        }
        self.check_input(x.h, x.w)?;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for i in 0..depth {
            cur = self.enc[i].forward(&cur, train);
            let pooled = self.pools[i].forward(&cur, train);
            skips.push(cur);
            cur = pooled;
        }
        cur = self.bottom.forward(&cur, train);
        for i in (0..depth).rev() {
            let up = self.ups[i].forward(&cur, train);
            let cat = Tensor::concat(&up, &skips[i]);
            cur = self.dec[i].forward(&cat, train);
        }
        Ok(self.head.forward(&cur, train))
    }

    /// Accumulates parameter gradients for `d_out = ∂loss/∂output` of the last
    /// training forward pass.
    pub fn backward(&mut self, d_out: &Tensor) {
        let depth = self.spec.depth;
        let mut g = self.head.backward(d_out);
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for i in 0..depth {
            g = self.dec[i].backward(&g, true).expect("decoder needs input grad");
            let (g_up, g_skip) = g.split(self.ups[i].cout);
            skip_grads[i] = Some(g_skip);
            g = self.ups[i].backward(&g_up);
        }
        g = self.bottom.backward(&g, true).expect("bottom needs input grad");
        for i in (0..depth).rev() {
            g = self.pools[i].backward(&g);
            let skip = skip_grads[i].take().expect("skip gradient");
            g.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b);
            match self.enc[i].backward(&g, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Every named parameter and buffer, body first, head last.
    pub fn slots(&mut self) -> Vec<(String, Slot<'_>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.collect(&format!("enc{i}"), &mut out);
        }
        self.bottom.collect("bottom", &mut out);
        for (i, (u, d)) in self.ups.iter_mut().zip(self.dec.iter_mut()).enumerate() {
            u.collect(&format!("up{i}"), &mut out);
            d.collect(&format!("dec{i}"), &mut out);
        }
        self.head.collect("head", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.slots()
            .into_iter()
            .filter_map(|(_, s)| match s {
                Slot::Param(p) => Some(p),
                Slot::Buffer(_) => None,
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }
}

pub(crate) fn is_head_key(key: &str) -> bool {
    key.starts_with("head.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn input(n: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tensor::zeros(1, n, h, w);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        t
    }

    #[test]
    fn output_shapes_per_head() {
        for (head, ch) in [(Head::Joint, 4), (Head::Star, 33), (Head::Denoise, 1)] {
            let spec = NetworkSpec {
                depth: 2,
                base_features: 32,
                batch_norm: true,
                head,
            };
            let mut net = UNet::new(spec, 0).unwrap();
            let out = net.forward(&input(1, 128, 128), false).unwrap();
            assert_eq!((out.c, out.n, out.h, out.w), (ch, 1, 128, 128));
        }
    }

    #[test]
    fn rejects_incompatible_input() {
        let mut net = UNet::new(NetworkSpec::new(Head::Denoise), 0).unwrap();
        assert!(net.forward(&input(1, 130, 128), false).is_err());
        assert!(net.forward(&input(1, 2, 2), false).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetworkSpec::new(Head::Joint);
        let mut a = UNet::new(spec, 9).unwrap();
        let mut b = UNet::new(spec, 9).unwrap();
        let mut c = UNet::new(spec, 10).unwrap();
        let va: Vec<Vec<f32>> = a.params_mut().iter().map(|p| p.value.clone()).collect();
        let vb: Vec<Vec<f32>> = b.params_mut().iter().map(|p| p.value.clone()).collect();
        let vc: Vec<Vec<f32>> = c.params_mut().iter().map(|p| p.value.clone()).collect();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn parameter_count_depends_only_on_spec() {
        let spec = NetworkSpec {
            depth: 1,
            base_features: 2,
            batch_norm: false,
            head: Head::Denoise,
        };
        // enc0: 1->2 (18+2) + 2->2 (36+2); bottom: 2->4 (72+4) + 4->4 (144+4);
        // up0: 4->2 (32+2); dec0: 4->2 (72+2) + 2->2 (36+2); head: 2->1 (2+1)
        let expected = 20 + 38 + 76 + 148 + 34 + 74 + 38 + 3;
        assert_eq!(UNet::new(spec, 0).unwrap().param_count(), expected);
        assert_eq!(UNet::new(spec, 7).unwrap().param_count(), expected);
    }

    #[test]
    fn whole_network_gradient() {
        for (depth, bn) in [(1, false), (2, false), (1, true), (2, true)] {
            network_gradient(NetworkSpec {
                depth,
                base_features: 2,
                batch_norm: bn,
                head: Head::Joint,
            });
        }
    }

    fn network_gradient(spec: NetworkSpec) {
        let mut net = UNet::new(spec, 3).unwrap();
        let x = input(2, 8, 8);
        let probe = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut t = Tensor::zeros(4, 2, 8, 8);
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            t
        };
        let loss = |net: &mut UNet| -> f64 {
            let y = net.forward(&x, true).unwrap();
            y.data.iter().zip(&probe.data).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        net.forward(&x, true).unwrap();
        net.backward(&probe);
        let grads: Vec<(String, Vec<f32>)> = net
            .slots()
            .into_iter()
            .filter_map(|(n, s)| match s {
                Slot::Param(p) => Some((n, p.grad.clone())),
                Slot::Buffer(_) => None,
            })
            .collect();
        let eps = 2e-4f32;
        let mut checked = 0;
        let mut bad = 0;
        for (name, grad) in &grads {
            for i in (0..grad.len()).step_by(5) {
                let mut plus = net.clone();
                let mut minus = net.clone();
                for (n, s) in plus.slots() {
                    if &n == name {
                        if let Slot::Param(p) = s {
                            p.value[i] += eps;
                        }
                    }
                }
                for (n, s) in minus.slots() {
                    if &n == name {
                        if let Slot::Param(p) = s {
                            p.value[i] -= eps;
                        }
                    }
                }
                let base = loss(&mut net.clone());
                let lp = loss(&mut plus);
                let lm = loss(&mut minus);
                let num = (lp - lm) / (2.0 * eps as f64);
                let right = (lp - base) / eps as f64;
                let left = (base - lm) / eps as f64;
                let ana = grad[i] as f64;
                // ReLU and max-pool kinks make the loss piecewise smooth; near a
                // kink the analytic gradient lies between the one-sided slopes.
                let tol = 2e-2 * (1.0 + num.abs());
                let (lo, hi) = (left.min(right) - tol, left.max(right) + tol);
                if !(lo..=hi).contains(&ana) {
                    eprintln!("{name}[{i}]: numeric {num} (left {left}, right {right}) vs analytic {ana}");
                    bad += 1;
                }
                checked += 1;
            }
        }
        assert!(checked > 50);
        assert_eq!(bad, 0, "{bad} of {checked} gradients off");
    }
}
