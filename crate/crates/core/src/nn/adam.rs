use super::Param;

/// Adam with bias correction; state is matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed under Adam");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr * bc2.sqrt() / bc1;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= step * *m / (v.sqrt() + self.eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g: Vec<f32> = p.value.iter().map(|w| 2.0 * (w - 1.0)).collect();
            p.grad.copy_from_slice(&g);
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|w| (w - 1.0).abs() < 1e-3), "{:?}", p.value);
    }

    #[test]
    fn zero_gradient_leaves_weights_untouched() {
        let mut p = Param::new(vec![3], vec![0.5, -1.5, 2.0]);
        let before = p.value.clone();
        let mut opt = Adam::new(0.1);
        for _ in 0..10 {
            opt.step(&mut [&mut p]);
        }
        assert_eq!(p.value, before);
    }
}
