//! Adam moments with a propose/commit split so a step can be rejected.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// A candidate step; becomes the optimiser state only through [`Adam::commit`].
#[derive(Debug, Clone)]
pub struct AdamProposal {
    pub params: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn propose(&self, params: &[f64], grad: &[f64], lr: f64) -> AdamProposal {
        let t = (self.t + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut out = AdamProposal { params: params.to_vec(), m: self.m.clone(), v: self.v.clone() };
        for k in 0..params.len() {
            let g = grad[k];
            out.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            out.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            out.params[k] -= lr * (out.m[k] / c1) / ((out.v[k] / c2).sqrt() + self.eps);
        }
        out
    }

    pub fn commit(&mut self, p: AdamProposal) -> Vec<f64> {
        self.m = p.m;
        self.v = p.v;
        self.t += 1;
        p.params
    }

    /// Propose and commit in one call.
    pub fn step(&mut self, params: &mut Vec<f64>, grad: &[f64], lr: f64) {
        let p = self.propose(params, grad, lr);
        *params = self.commit(p);
    }
}
