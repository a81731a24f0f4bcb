//! Two-component Gaussian mixture with diagonal covariance, fit by EM.
//! Scalar data is the one-dimensional case.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub var_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            var_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub means: [Vec<f64>; 2],
    pub variances: [Vec<f64>; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

fn dim_variances<P: AsRef<[f64]>>(points: &[P], floor: f64) -> Vec<f64> {
    let d = points[0].as_ref().len();
    let n = points.len() as f64;
    (0..d)
        .map(|j| {
            let mean = points.iter().map(|p| p.as_ref()[j]).sum::<f64>() / n;
            let var = points
                .iter()
                .map(|p| (p.as_ref()[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            var.max(floor)
        })
        .collect()
}

impl Gmm {
    /// Fits from explicit initial means; variances start at the pooled
    /// per-dimension variance and weights at one half. `points` must be
    /// non-empty and share one dimension.
    pub fn fit_from<P: AsRef<[f64]>>(points: &[P], init: [Vec<f64>; 2], cfg: &EmConfig) -> Gmm {
        assert!(!points.is_empty(), "EM needs at least one point");
        let pooled = dim_variances(points, cfg.var_floor);
        let mut gmm = Gmm {
            means: init,
            variances: [pooled.clone(), pooled],
            weights: [0.5, 0.5],
            iterations: 0,
            converged: false,
            log_likelihood: f64::NEG_INFINITY,
        };
        let n = points.len();
        let d = points[0].as_ref().len();
        let mut resp = vec![[0.0f64; 2]; n];
        for iter in 0..cfg.max_iter {
            let ll = gmm.e_step(points, &mut resp);
            gmm.iterations = iter + 1;
            for k in 0..2 {
                let nk: f64 = resp.iter().map(|r| r[k]).sum();
                if nk <= 0.0 {
                    gmm.weights[k] = 0.0;
                    continue;
                }
                gmm.weights[k] = nk / n as f64;
                for j in 0..d {
                    let m = points
                        .iter()
                        .zip(&resp)
                        .map(|(p, r)| r[k] * p.as_ref()[j])
                        .sum::<f64>()
                        / nk;
                    let v = points
                        .iter()
                        .zip(&resp)
                        .map(|(p, r)| r[k] * (p.as_ref()[j] - m).powi(2))
                        .sum::<f64>()
                        / nk;
                    gmm.means[k][j] = m;
                    gmm.variances[k][j] = v.max(cfg.var_floor);
                }
            }
            let prev = gmm.log_likelihood;
            gmm.log_likelihood = ll;
            if (ll - prev).abs() <= cfg.tol * (1.0 + ll.abs()) {
                gmm.converged = true;
                break;
            }
        }
        gmm
    }

    /// Seeds the two means at the points with the smallest and largest
    /// coordinate average.
    pub fn fit<P: AsRef<[f64]>>(points: &[P], cfg: &EmConfig) -> Gmm {
        let avg = |p: &P| p.as_ref().iter().sum::<f64>() / p.as_ref().len().max(1) as f64;
        let mut lo = 0;
        let mut hi = 0;
        for (i, p) in points.iter().enumerate() {
            if avg(p) < avg(&points[lo]) {
                lo = i;
            }
            if avg(p) > avg(&points[hi]) {
                hi = i;
            }
        }
        Self::fit_from(
            points,
            [points[lo].as_ref().to_vec(), points[hi].as_ref().to_vec()],
            cfg,
        )
    }

    pub fn fit_scalar(values: &[f64], cfg: &EmConfig) -> Gmm {
        let pts: Vec<[f64; 1]> = values.iter().map(|&v| [v]).collect();
        Self::fit(&pts, cfg)
    }

    fn log_joint(&self, x: &[f64], k: usize) -> f64 {
        if self.weights[k] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let mut lp = self.weights[k].ln();
        for ((&xj, &m), &v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            lp -= 0.5 * (2.0 * PI * v).ln() + (xj - m).powi(2) / (2.0 * v);
        }
        lp
    }

    fn e_step<P: AsRef<[f64]>>(&self, points: &[P], resp: &mut [[f64; 2]]) -> f64 {
        let mut ll = 0.0;
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            *r = self.responsibilities(p.as_ref());
            let a = self.log_joint(p.as_ref(), 0);
            let b = self.log_joint(p.as_ref(), 1);
            let m = a.max(b);
            ll += m + ((a - m).exp() + (b - m).exp()).ln();
        }
        ll
    }

    pub fn responsibilities(&self, x: &[f64]) -> [f64; 2] {
        let a = self.log_joint(x, 0);
        let b = self.log_joint(x, 1);
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return [0.5, 0.5];
        }
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        [ea / (ea + eb), eb / (ea + eb)]
    }

    /// Component with the lower average mean.
    pub fn low_component(&self) -> usize {
        let avg = |k: usize| self.means[k].iter().sum::<f64>() / self.means[k].len().max(1) as f64;
        if avg(1) < avg(0) {
            1
        } else {
            0
        }
    }

    /// Higher-responsibility component, ties to the low component.
    pub fn assign(&self, x: &[f64]) -> usize {
        let r = self.responsibilities(x);
        let low = self.low_component();
        if r[1 - low] > r[low] {
            1 - low
        } else {
            low
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_two_scalar_clusters() {
        let xs = [0.0, 0.05, 0.1, 9.9, 10.0, 10.1];
        let g = Gmm::fit_scalar(&xs, &EmConfig::default());
        let low = g.low_component();
        assert!((g.means[low][0] - 0.05).abs() < 0.1);
        assert!((g.means[1 - low][0] - 10.0).abs() < 0.1);
        for (i, &x) in xs.iter().enumerate() {
            assert_eq!(g.assign(&[x]) == low, i < 3);
        }
        assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_split() {
        let g = Gmm::fit_scalar(&[3.0, 1.0], &EmConfig::default());
        let low = g.low_component();
        assert_eq!(g.assign(&[1.0]), low);
        assert_ne!(g.assign(&[3.0]), low);
        assert!(g.variances.iter().all(|v| v[0] >= 1e-12));
    }

    #[test]
    fn permuted_init_same_assignment() {
        let xs: Vec<[f64; 1]> = [0.2, 0.3, 0.25, 0.9, 1.1, 1.0, 0.35]
            .iter()
            .map(|&v| [v])
            .collect();
        let cfg = EmConfig::default();
        let a = Gmm::fit_from(&xs, [vec![0.2], vec![1.1]], &cfg);
        let b = Gmm::fit_from(&xs, [vec![1.1], vec![0.2]], &cfg);
        for x in &xs {
            assert_eq!(
                a.assign(x) == a.low_component(),
                b.assign(x) == b.low_component()
            );
        }
    }

    #[test]
    fn diagonal_vectors() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![0.1 * i as f64 / 10.0, 0.2]);
            pts.push(vec![5.0 + 0.1 * i as f64 / 10.0, 6.0]);
        }
        let g = Gmm::fit(&pts, &EmConfig::default());
        let low = g.low_component();
        for p in &pts {
            assert_eq!(g.assign(p) == low, p[0] < 1.0);
        }
    }
}
