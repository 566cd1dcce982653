//! Adam optimizer over flat parameter vectors.

/// Adam with the standard (0.9, 0.999, 1e-8) moment/epsilon constants and
/// bias-corrected moment estimates. State is per-parameter, matching the
/// flat layout used by [`crate::Mlp::flatten`].
#[derive(Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update in place. Returns the Euclidean norm of the applied step,
    /// which callers use for convergence checks.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> f64 {
        assert_eq!(params.len(), self.m.len(), "param count differs from optimizer state");
        assert_eq!(grads.len(), self.m.len(), "grad count differs from optimizer state");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut norm2 = 0.0;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let step = self.lr * mhat / (vhat.sqrt() + self.eps);
            params[i] -= step;
            norm2 += step * step;
        }
        norm2.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_steps() {
        // single parameter, constant gradient g = 2
        let mut a = Adam::new(1, 0.1);
        let mut p = [1.0];
        a.step(&mut p, &[2.0]);
        // t=1: m=0.2, v=0.004, mhat=2, vhat=4, step=0.1*2/(2+1e-8)
        let want1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - want1).abs() < 1e-15, "{} vs {}", p[0], want1);
        a.step(&mut p, &[2.0]);
        let m = 0.9 * 0.2 + 0.1 * 2.0;
        let v = 0.999 * 0.004 + 0.001 * 4.0;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let want2 = want1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - want2).abs() < 1e-15, "{} vs {}", p[0], want2);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(2, 0.05);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            a.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "did not converge: {p:?}");
    }

    #[test]
    fn step_norm_reported() {
        let mut a = Adam::new(1, 0.1);
        let mut p = [0.0];
        let n = a.step(&mut p, &[1.0]);
        assert!((n - 0.1).abs() < 1e-9); // first step is ~lr in each coord
    }
}
