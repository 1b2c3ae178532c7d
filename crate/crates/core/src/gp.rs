//! Squared-exponential Gaussian processes over simplex locations.

use crate::circular::{arctan_star, Angle};
use crate::error::{domain, Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A point of the 2-simplex: three nonnegative proportions summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint([f64; 3]);

impl SimplexPoint {
    pub fn new(x: [f64; 3]) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return domain(format!("simplex coordinates must be finite and nonnegative: {x:?}"));
        }
        let s: f64 = x.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return domain(format!("simplex coordinates sum to {s}, not 1"));
        }
        Ok(SimplexPoint(x))
    }

    pub fn coords(&self) -> [f64; 3] {
        self.0
    }

    pub fn sq_dist(&self, other: &SimplexPoint) -> f64 {
        (0..3).map(|i| (self.0[i] - other.0[i]).powi(2)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSpec {
    pub omega: f64,
    pub sigma: f64,
    /// `None` selects the escalating default `1e-8·σ²` … `1e-4·σ²`.
    pub jitter: Option<f64>,
}

impl Default for GpSpec {
    fn default() -> Self {
        GpSpec { omega: 0.1, sigma: 1.0, jitter: None }
    }
}

impl GpSpec {
    pub fn new(omega: f64, sigma: f64) -> Result<Self> {
        let s = GpSpec { omega, sigma, jitter: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.sigma > 0.0) {
            return domain("GP length scale and scale must be positive");
        }
        if let Some(j) = self.jitter {
            if !(j >= 0.0) {
                return domain("GP jitter must be nonnegative");
            }
        }
        Ok(())
    }

    fn jitter_ladder(&self) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let top = 1e-4 * s2;
        match self.jitter {
            Some(j) if j == 0.0 => vec![0.0],
            Some(j) => {
                let mut v = vec![j];
                while *v.last().unwrap() * 10.0 <= top * (1.0 + 1e-12) {
                    v.push(v.last().unwrap() * 10.0);
                }
                v
            }
            None => (0..5).map(|i| 1e-8 * s2 * 10f64.powi(i)).collect(),
        }
    }
}

pub fn sqexp_kernel(x: &SimplexPoint, x2: &SimplexPoint, spec: &GpSpec) -> f64 {
    spec.sigma * spec.sigma * (-x.sq_dist(x2) / (2.0 * spec.omega * spec.omega)).exp()
}

pub fn cross_cov(a: &[SimplexPoint], b: &[SimplexPoint], spec: &GpSpec) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| sqexp_kernel(&a[i], &b[j], spec))
}

/// Covariance matrix with its cached lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct CovMatrix {
    /// Entries including the jitter actually used.
    pub entries: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub jitter: f64,
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let ev = m.clone().symmetric_eigenvalues();
    let max = ev.iter().cloned().fold(f64::MIN, f64::max);
    let min = ev.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn factor_with_ladder(base: &DMatrix<f64>, ladder: &[f64]) -> Result<CovMatrix> {
    for &j in ladder {
        let mut m = base.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
        if let Some(c) = m.clone().cholesky() {
            return Ok(CovMatrix { entries: m, chol: c.l(), jitter: j });
        }
    }
    Err(Error::Numeric(format!(
        "Cholesky failed after jitter up to {:e}; condition estimate {:e}",
        ladder.last().copied().unwrap_or(0.0),
        condition_estimate(base)
    )))
}

impl CovMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// `L v`: maps whitened latents to correlated ones.
    pub fn mul_l(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..=i {
                s += self.chol[(i, j)] * v[j];
            }
            out[i] = s;
        }
        out
    }

    /// `Lᵀ v`: pulls a gradient back through `L`.
    pub fn mul_lt(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in j..n {
                s += self.chol[(i, j)] * v[i];
            }
            out[j] = s;
        }
        out
    }

    /// `L⁻¹ v`: whitens a correlated vector.
    pub fn solve_l(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = v[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
        }
        y
    }

    /// `Σ⁻¹ v` through two triangular solves.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = v[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.chol[(j, i)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
        }
        y
    }

    /// `ln det Σ`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n()).map(|i| self.chol[(i, i)].ln()).sum::<f64>()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let e: Vec<f64> = (0..self.n()).map(|_| rng.sample(StandardNormal)).collect();
        self.mul_l(&e)
    }
}

pub fn build_cov(locs: &[SimplexPoint], spec: &GpSpec) -> Result<CovMatrix> {
    spec.validate()?;
    if locs.is_empty() {
        return domain("covariance needs at least one location");
    }
    let k = cross_cov(locs, locs, spec);
    factor_with_ladder(&k, &spec.jitter_ladder())
}

/// Conditional mean and covariance of the latent process at `test` given values at `train`.
pub fn gp_conditional(
    train_locs: &[SimplexPoint],
    test_locs: &[SimplexPoint],
    train_vals: &[f64],
    train_mean: &[f64],
    test_mean: &[f64],
    spec: &GpSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if train_vals.len() != train_locs.len() || train_mean.len() != train_locs.len() {
        return domain("training values and locations differ in length");
    }
    if test_mean.len() != test_locs.len() {
        return domain("test mean and locations differ in length");
    }
    let kss = cross_cov(test_locs, test_locs, spec);
    if train_locs.is_empty() {
        return Ok((DVector::from_column_slice(test_mean), kss));
    }
    let cov = build_cov(train_locs, spec)?;
    let ks = cross_cov(train_locs, test_locs, spec);
    let dev: Vec<f64> = train_vals.iter().zip(train_mean).map(|(v, m)| v - m).collect();
    let alpha = DVector::from_vec(cov.solve(&dev));
    let mean = DVector::from_column_slice(test_mean) + ks.transpose() * alpha;
    let mut w = DMatrix::zeros(train_locs.len(), test_locs.len());
    for j in 0..test_locs.len() {
        let col: Vec<f64> = ks.column(j).iter().cloned().collect();
        w.set_column(j, &DVector::from_vec(cov.solve(&col)));
    }
    let c = kss - ks.transpose() * w;
    Ok((mean, 0.5 * (&c + c.transpose())))
}

/// Repeated conditional draws at fixed test locations.
#[derive(Clone, Debug)]
pub struct GpPredictor {
    /// `K_*ᵀ Σ⁻¹`, shape test × train.
    weights: DMatrix<f64>,
    cond: CovMatrix,
}

impl GpPredictor {
    pub fn new(
        train_cov: &CovMatrix,
        train_locs: &[SimplexPoint],
        test_locs: &[SimplexPoint],
        spec: &GpSpec,
    ) -> Result<Self> {
        let ks = cross_cov(train_locs, test_locs, spec);
        let mut weights = DMatrix::zeros(test_locs.len(), train_locs.len());
        for j in 0..test_locs.len() {
            let col: Vec<f64> = ks.column(j).iter().cloned().collect();
            let w = train_cov.solve(&col);
            for (i, wi) in w.into_iter().enumerate() {
                weights[(j, i)] = wi;
            }
        }
        let kss = cross_cov(test_locs, test_locs, spec);
        let c = &kss - &weights * &ks;
        let c = 0.5 * (&c + c.transpose());
        let s2 = spec.sigma * spec.sigma;
        let ladder: Vec<f64> = (0..7).map(|i| 1e-10 * s2 * 10f64.powi(i)).collect();
        let cond = factor_with_ladder(&c, &ladder)?;
        Ok(GpPredictor { weights, cond })
    }

    /// Deviation from the prior mean at the test locations, given the training deviation.
    pub fn draw<R: Rng + ?Sized>(&self, train_dev: &[f64], rng: &mut R) -> Vec<f64> {
        let m = &self.weights * DVector::from_column_slice(train_dev);
        let e = self.cond.draw(rng);
        m.iter().zip(e).map(|(a, b)| a + b).collect()
    }

    pub fn mean(&self, train_dev: &[f64]) -> Vec<f64> {
        (&self.weights * DVector::from_column_slice(train_dev)).iter().cloned().collect()
    }
}

/// Latent pair and their angles from a projected GP with shared covariance.
#[derive(Clone, Debug)]
pub struct ProjectedDraw {
    pub angles: Vec<Angle>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

pub fn projected_gp_sample<R: Rng + ?Sized>(
    spec: &GpSpec,
    locs: &[SimplexPoint],
    mean1: &[f64],
    mean2: &[f64],
    rng: &mut R,
) -> Result<ProjectedDraw> {
    let cov = build_cov(locs, spec)?;
    projected_from_cov(&cov, mean1, mean2, rng)
}

pub fn projected_from_cov<R: Rng + ?Sized>(
    cov: &CovMatrix,
    mean1: &[f64],
    mean2: &[f64],
    rng: &mut R,
) -> Result<ProjectedDraw> {
    let n = cov.n();
    if mean1.len() != n || mean2.len() != n {
        return domain("GP mean length differs from the number of locations");
    }
    loop {
        let e1 = cov.draw(rng);
        let e2 = cov.draw(rng);
        let z1: Vec<f64> = e1.iter().zip(mean1).map(|(e, m)| e + m).collect();
        let z2: Vec<f64> = e2.iter().zip(mean2).map(|(e, m)| e + m).collect();
        let angles: Result<Vec<Angle>> =
            z1.iter().zip(&z2).map(|(a, b)| arctan_star(*a, *b)).collect();
        if let Ok(angles) = angles {
            return Ok(ProjectedDraw { angles, z1, z2 });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circular::{circ_dist, pn2_circular_variance, pn2_density, summary_of, Pn2Params};
    use crate::numeric::stream_rng;
    use rand_distr::{Dirichlet, Distribution};
    use std::f64::consts::TAU;

    fn random_points(n: usize, seed: u64) -> Vec<SimplexPoint> {
        let mut rng = stream_rng(seed, 0);
        let d = Dirichlet::new([1.0, 1.0, 1.0]).unwrap();
        (0..n).map(|_| SimplexPoint::new(d.sample(&mut rng)).unwrap()).collect()
    }

    #[test]
    fn kernel_examples() {
        let spec = GpSpec::new(0.1, 1.5).unwrap();
        let p = SimplexPoint::new([0.2, 0.3, 0.5]).unwrap();
        assert_eq!(sqexp_kernel(&p, &p, &spec), 2.25);
        let unit = GpSpec::new(0.1, 1.0).unwrap();
        let d = 0.1 / 2f64.sqrt();
        let q = SimplexPoint::new([0.2 + d, 0.3 - d, 0.5]).unwrap();
        assert!((sqexp_kernel(&p, &q, &unit) - (-0.5f64).exp()).abs() < 1e-12);
        let far = SimplexPoint::new([1.0, 0.0, 0.0]).unwrap();
        let near = SimplexPoint::new([0.3, 0.3, 0.4]).unwrap();
        assert!(sqexp_kernel(&p, &far, &unit) < sqexp_kernel(&p, &near, &unit));
    }

    #[test]
    fn single_point_matrix() {
        let spec = GpSpec { omega: 0.1, sigma: 2.0, jitter: Some(1e-3) };
        let c = build_cov(&[SimplexPoint::new([1.0, 0.0, 0.0]).unwrap()], &spec).unwrap();
        assert_eq!(c.entries[(0, 0)], 4.0 + 1e-3);
    }

    #[test]
    fn duplicates_without_jitter_fail() {
        let p = SimplexPoint::new([0.2, 0.3, 0.5]).unwrap();
        let spec = GpSpec { omega: 0.1, sigma: 1.0, jitter: Some(0.0) };
        let e = build_cov(&[p, p], &spec).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
        assert!(build_cov(&[p, p], &GpSpec::default()).is_ok());
    }

    #[test]
    fn reconstruction_and_symmetry() {
        let locs = random_points(10, 1);
        let c = build_cov(&locs, &GpSpec::default()).unwrap();
        let back = &c.chol * c.chol.transpose();
        assert!((back - &c.entries).abs().max() < 1e-10);
        assert_eq!(c.entries, c.entries.transpose());
    }

    #[test]
    fn solve_and_products_agree_with_dense() {
        let locs = random_points(12, 2);
        let c = build_cov(&locs, &GpSpec::new(0.3, 1.2).unwrap()).unwrap();
        let v: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = c.solve(&v);
        let back = &c.entries * DVector::from_vec(x);
        for i in 0..12 {
            assert!((back[i] - v[i]).abs() < 1e-8);
        }
        let lv = DVector::from_vec(c.mul_l(&v));
        assert!((lv - &c.chol * DVector::from_column_slice(&v)).abs().max() < 1e-13);
        let ltv = DVector::from_vec(c.mul_lt(&v));
        assert!((ltv - c.chol.transpose() * DVector::from_column_slice(&v)).abs().max() < 1e-13);
    }

    // Oracle: explicit block partition of the joint covariance, inverted densely.
    #[test]
    fn conditional_matches_block_formula() {
        let spec = GpSpec { omega: 0.3, sigma: 1.0, jitter: Some(1e-8) };
        let all = random_points(7, 3);
        let (train, test) = all.split_at(5);
        let vals = [0.3, -0.2, 1.1, 0.4, -0.7];
        let tm = [0.1; 5];
        let sm = [-0.2; 2];
        let (m, c) = gp_conditional(train, test, &vals, &tm, &sm, &spec).unwrap();
        let mut k = cross_cov(&all, &all, &spec);
        for i in 0..7 {
            k[(i, i)] += if i < 5 { 1e-8 } else { 0.0 };
        }
        let k11 = k.view((0, 0), (5, 5)).into_owned();
        let k12 = k.view((0, 5), (5, 2)).into_owned();
        let k22 = k.view((5, 5), (2, 2)).into_owned();
        let inv = k11.try_inverse().unwrap();
        let dev = DVector::from_iterator(5, vals.iter().zip(&tm).map(|(a, b)| a - b));
        let want_m = DVector::from_column_slice(&sm) + k12.transpose() * &inv * dev;
        let want_c = k22 - k12.transpose() * &inv * &k12;
        assert!((m - want_m).abs().max() < 1e-8);
        assert!((c - want_c).abs().max() < 1e-8);
    }

    #[test]
    fn conditional_interpolates_and_decays() {
        let spec = GpSpec { omega: 0.1, sigma: 1.0, jitter: Some(1e-12) };
        let train = [
            SimplexPoint::new([0.2, 0.3, 0.5]).unwrap(),
            SimplexPoint::new([0.6, 0.3, 0.1]).unwrap(),
        ];
        let (m, c) =
            gp_conditional(&train, &train[..1], &[0.8, -0.4], &[0.0; 2], &[0.0], &spec).unwrap();
        assert!((m[0] - 0.8).abs() < 1e-6 && c[(0, 0)].abs() < 1e-6);
        let far = [SimplexPoint::new([0.0, 0.0, 1.0]).unwrap()];
        let (m, c) = gp_conditional(&train[..1], &far, &[0.8], &[0.0], &[0.5], &spec).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-6 && (c[(0, 0)] - 1.0).abs() < 1e-6);
        let (m, c) = gp_conditional(&[], &far, &[], &[], &[0.5], &spec).unwrap();
        assert_eq!(m[0], 0.5);
        assert_eq!(c[(0, 0)], 1.0);
    }

    #[test]
    fn predictor_matches_conditional_mean() {
        let spec = GpSpec::new(0.2, 1.0).unwrap();
        let all = random_points(9, 4);
        let (train, test) = all.split_at(6);
        let cov = build_cov(train, &spec).unwrap();
        let p = GpPredictor::new(&cov, train, test, &spec).unwrap();
        let vals = [0.1, 0.5, -0.3, 0.9, 0.0, -1.2];
        let (m, _) = gp_conditional(train, test, &vals, &[0.0; 6], &[0.0; 3], &spec).unwrap();
        let pm = p.mean(&vals);
        for i in 0..3 {
            assert!((pm[i] - m[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn projected_uniform_when_centred() {
        let mut rng = stream_rng(9, 0);
        let loc = [SimplexPoint::new([0.3, 0.3, 0.4]).unwrap()];
        let spec = GpSpec { omega: 0.1, sigma: 1.0, jitter: Some(0.0) };
        let mut xs: Vec<f64> = (0..100_000)
            .map(|_| projected_gp_sample(&spec, &loc, &[0.0], &[0.0], &mut rng).unwrap().angles[0].value() / TAU)
            .collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks = {ks}");
    }

    #[test]
    fn projected_marginal_matches_pn2() {
        let mut rng = stream_rng(10, 0);
        let loc = [SimplexPoint::new([0.3, 0.3, 0.4]).unwrap()];
        let spec = GpSpec { omega: 0.1, sigma: 0.8, jitter: Some(0.0) };
        let (mu0, alpha) = (1.2, 2.0);
        let m1 = [mu0 * f64::cos(alpha)];
        let m2 = [mu0 * f64::sin(alpha)];
        let cov = build_cov(&loc, &spec).unwrap();
        let ys: Vec<f64> = (0..100_000)
            .map(|_| projected_from_cov(&cov, &m1, &m2, &mut rng).unwrap().angles[0].value())
            .collect();
        let p = Pn2Params::from_polar(mu0, alpha, 0.8).unwrap();
        assert!((summary_of(&ys).unwrap().variance - pn2_circular_variance(&p)).abs() < 0.01);

        // chi-square against the closed-form density on 32 equal bins
        let bins = 32;
        let mut counts = vec![0.0; bins];
        for y in &ys {
            counts[((y / TAU * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        let n = ys.len() as f64;
        let chi2: f64 = (0..bins)
            .map(|b| {
                let lo = b as f64 * TAU / bins as f64;
                let hi = lo + TAU / bins as f64;
                let pr = crate::numeric::integrate(|y| pn2_density(Angle::new(y), &p), lo, hi, 1e-12);
                (counts[b] - n * pr).powi(2) / (n * pr)
            })
            .sum();
        // 31 degrees of freedom: upper 0.001 quantile is 61.1
        assert!(chi2 < 61.1, "chi2 = {chi2}");
    }

    #[test]
    fn nearby_locations_move_together() {
        let mut rng = stream_rng(12, 0);
        let locs = [
            SimplexPoint::new([0.30, 0.30, 0.40]).unwrap(),
            SimplexPoint::new([0.31, 0.30, 0.39]).unwrap(),
        ];
        let spec = GpSpec::new(1.0, 1.0).unwrap();
        let close = (0..2000)
            .filter(|_| {
                let d = projected_gp_sample(&spec, &locs, &[0.0; 2], &[0.0; 2], &mut rng).unwrap();
                circ_dist(d.angles[0].value(), d.angles[1].value()) < 0.05
            })
            .count();
        assert!(close as f64 / 2000.0 > 0.95);
    }
}
