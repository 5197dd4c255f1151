//! Brute-force reference implementation of the Ind-KNN loop, written without
//! any of the library's engine code. It shares only the noise stream, so a
//! replayed seed must give the same answers.

#![allow(dead_code)]

use indknn::NoiseSource;

#[derive(Debug, Clone, Copy)]
pub enum RefKernel {
    Cosine,
    Rbf(f64),
}

impl RefKernel {
    pub fn eval(&self, x: &[f64], q: &[f64]) -> f64 {
        match *self {
            RefKernel::Cosine => {
                let mut s = 0.0;
                for i in 0..x.len() {
                    s += x[i] * q[i];
                }
                if s < 0.0 {
                    0.0
                } else if s > 1.0 {
                    1.0
                } else {
                    s
                }
            }
            RefKernel::Rbf(nu) => {
                let mut s = 0.0;
                for i in 0..x.len() {
                    s += (x[i] - q[i]) * (x[i] - q[i]);
                }
                (-s / (nu * nu)).exp()
            }
        }
    }
}

pub struct Reference {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<u32>,
    /// `None` for public (reused) rows.
    pub z: Vec<Option<f64>>,
    pub classes: usize,
    pub kernel: RefKernel,
    pub tau: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub floor: f64,
    pub reuse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefStep {
    pub answer: u32,
    pub k: f64,
    /// Row indices.
    pub selected: Vec<usize>,
    pub votes: Vec<f64>,
}

impl Reference {
    pub fn new(
        rows: &[(Vec<f64>, u32)],
        classes: usize,
        budget: f64,
        kernel: RefKernel,
        tau: f64,
        sigma1: f64,
        sigma2: f64,
    ) -> Self {
        Reference {
            xs: rows.iter().map(|r| r.0.clone()).collect(),
            ys: rows.iter().map(|r| r.1).collect(),
            z: vec![Some(budget); rows.len()],
            classes,
            kernel,
            tau,
            sigma1,
            sigma2,
            floor: 30.0,
            reuse: false,
        }
    }

    pub fn query(&mut self, q: &[f64], src: &mut NoiseSource) -> RefStep {
        let per_count = 1.0 / (2.0 * self.sigma1 * self.sigma1);
        let mut selected = Vec::new();
        for i in 0..self.xs.len() {
            let active = match self.z[i] {
                None => true,
                Some(z) => z >= per_count,
            };
            if active && self.kernel.eval(&self.xs[i], q) >= self.tau {
                selected.push(i);
            }
        }
        let mut k = selected.len() as f64 + self.sigma1 * src.standard_normal();
        if k < self.floor {
            k = self.floor;
        }
        let mut votes = vec![0.0; self.classes];
        for &i in &selected {
            let w = self.kernel.eval(&self.xs[i], q);
            let y = self.ys[i] as usize;
            match self.z[i] {
                None => votes[y] += w,
                Some(z) => {
                    let z = z - per_count;
                    let bound = self.sigma2 * (2.0 * k * z).sqrt();
                    if w >= bound {
                        votes[y] += bound;
                        self.z[i] = Some(0.0);
                    } else {
                        votes[y] += w;
                        let left = z - w * w / (2.0 * self.sigma2 * self.sigma2 * k);
                        self.z[i] = Some(if left < 0.0 { 0.0 } else { left });
                    }
                }
            }
        }
        let sd = (self.sigma2 * self.sigma2 * k).sqrt();
        let mut answer = 0;
        let mut best = f64::NEG_INFINITY;
        for (j, v) in votes.iter().enumerate() {
            let noisy = v + sd * src.standard_normal();
            if noisy > best {
                best = noisy;
                answer = j as u32;
            }
        }
        if self.reuse {
            self.xs.push(q.to_vec());
            self.ys.push(answer);
            self.z.push(None);
        }
        RefStep { answer, k, selected, votes }
    }
}

/// Label with the largest total kernel weight among rows with weight
/// `>= tau`; `None` when no row qualifies.
pub fn exact_threshold_vote(
    rows: &[(Vec<f64>, u32)],
    classes: usize,
    kernel: RefKernel,
    tau: f64,
    q: &[f64],
) -> Option<u32> {
    let mut votes = vec![0.0; classes];
    let mut any = false;
    for (x, y) in rows {
        let w = kernel.eval(x, q);
        if w >= tau {
            votes[*y as usize] += w;
            any = true;
        }
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for j in 1..classes {
        if votes[j] > votes[best] {
            best = j;
        }
    }
    Some(best as u32)
}
