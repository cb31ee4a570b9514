//! Adam optimizer over a flat parameter vector.

/// Adam state; `step` performs gradient ascent when `ascend` is set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, first: vec![0.0; dim], second: vec![0.0; dim], t: 0 }
    }

    /// Moves `params` by one bias-corrected Adam step of size `lr` along
    /// `grad` (ascent) or against it (descent).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ascend: bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let sign = if ascend { 1.0 } else { -1.0 };
        for i in 0..params.len() {
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * grad[i];
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] += sign * lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_size_lr() {
        let mut a = Adam::new(2);
        let mut p = [0.0, 0.0];
        a.step(&mut p, &[3.0, -0.5], 0.1, true);
        assert!((p[0] - 0.1).abs() < 1e-8);
        assert!((p[1] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(1);
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            a.step(&mut p, &g, 0.05, false);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
