#![allow(dead_code)]

use nalgebra::DMatrix;
use zipdl_core::accountant::PrivacyParams;
use zipdl_core::topology::GossipMatrix;

/// Explicit n²×n² virtual matrices built straight from their definitions.
pub struct Dense {
    pub n: usize,
    pub mw: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl Dense {
    pub fn new(w: &GossipMatrix, p: &PrivacyParams, identity_c: bool) -> Self {
        let n = w.n();
        let nn = n * n;
        let wd = w.to_dmatrix();
        let mut w_hat = DMatrix::zeros(nn, nn);
        let mut m = DMatrix::zeros(nn, nn);
        let mut c = DMatrix::zeros(nn, nn);
        let mut sigma = DMatrix::zeros(nn, nn);
        for i in 0..n {
            let d = (0..n).filter(|&j| wd[(i, j)] != 0.0).count() as f64;
            for j in 0..n {
                w_hat[(n * i + j, n * j + i)] = wd[(i, j)];
                sigma[(n * i + j, n * i + j)] = (p.eta * p.sigma[i]).powi(2);
                for k in 0..n {
                    m[(n * i + j, n * i + k)] = 1.0;
                    if identity_c {
                        continue;
                    }
                    if wd[(i, j)] != 0.0 && wd[(i, k)] != 0.0 {
                        c[(n * i + j, n * i + k)] = if j == k { (d - 1.0) / d } else { -wd[(i, k)] / (d * wd[(i, j)]) };
                    }
                }
            }
        }
        if identity_c {
            c = DMatrix::identity(nn, nn);
        }
        Self { n, mw: m * w_hat, c, sigma, w: wd }
    }

    /// `(MŴ)^h` for h = 1..=t.
    fn powers(&self, t: usize) -> Vec<DMatrix<f64>> {
        let mut out = vec![];
        let mut p = self.mw.clone();
        for _ in 0..t {
            out.push(p.clone());
            p = &self.mw * p;
        }
        out
    }

    /// `Σ_{s=1}^{h} decay^s diag((MŴ)^s C Σ Cᵀ (MŴ)^sᵀ)` for h = 1..=t.
    pub fn denominators(&self, t: usize, decay: f64) -> Vec<Vec<f64>> {
        let base = &self.c * &self.sigma * self.c.transpose();
        let mut acc = vec![0.0; self.n * self.n];
        let mut out = vec![];
        for (s, p) in self.powers(t).iter().enumerate() {
            let k = p * &base * p.transpose();
            for (i, a) in acc.iter_mut().enumerate() {
                *a += decay.powi(s as i32 + 1) * k[(i, i)];
            }
            out.push(acc.clone());
        }
        out
    }

    fn numerator(&self, p: &DMatrix<f64>, w_hat: usize, a: usize) -> f64 {
        (0..self.n).map(|j| p[(w_hat, self.n * a + j)]).sum()
    }

    fn ratio(num: f64, den: f64) -> f64 {
        if num == 0.0 {
            0.0
        } else if den <= 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    }

    pub fn averaging(&self, a: usize, colluders: &[usize], p: &PrivacyParams, t: usize, final_power: bool) -> f64 {
        let n = self.n;
        let dens = self.denominators(t, 1.0);
        let pows = self.powers(t);
        let mut total = 0.0;
        for step in 0..t {
            for &v in colluders {
                for w in 0..n {
                    if self.w[(v, w)] == 0.0 {
                        continue;
                    }
                    let wh = n * w + v;
                    let pw = if final_power { &pows[t - 1] } else { &pows[step] };
                    total += Self::ratio(self.numerator(pw, wh, a), dens[step][wh]);
                }
            }
        }
        0.5 * p.alpha * p.delta * p.delta * total
    }

    pub fn sgd(&self, a: usize, colluders: &[usize], p: &PrivacyParams, t: usize) -> f64 {
        let n = self.n;
        let (eta, l) = (p.eta, p.smoothness);
        let dens = self.denominators(t, 1.0 - eta * l);
        let mut total = 0.0;
        for step in 0..t {
            let num = (2.0 + 4.0 * eta * eta * l).powi(step as i32) - 1.0;
            for &v in colluders {
                for w in 0..n {
                    if self.w[(v, w)] == 0.0 {
                        continue;
                    }
                    let den = if step == 0 { 0.0 } else { dens[step - 1][n * w + v] };
                    total += Self::ratio(num, den);
                }
            }
        }
        let _ = a;
        2.0 * p.alpha * eta * eta * p.delta * p.delta / (l + 4.0 * eta * eta * l * l) * total
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}
