//! Exact moment matching for sums of squared-exponential basis functions
//! under a Gaussian input, plus the reverse-mode derivative of the moments.
//!
//! A head computes `f_a(x) = sum_i beta_ai * sf2_a * exp(-1/2 |x - c_i|^2_{L_a})`.
//! GP posterior means are heads with `beta = K^-1 y`; the RBF policy is a
//! single head with unit signal variance. GP heads also carry the latent
//! variance term `sf2 - tr(K^-1 Q) + sn2` on the diagonal of the covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, frobenius_dot, scale_cols, scale_rows, symmetrize_mut};

#[derive(Debug, Clone)]
pub struct BasisHead<'a> {
    pub beta: &'a DVector<f64>,
    /// `1 / lengthscale^2` per input dimension.
    pub inv_lengthsq: DVector<f64>,
    pub signal_variance: f64,
    /// `(K^-1, noise variance)` for GP heads; `None` for deterministic expansions.
    pub latent: Option<(&'a DMatrix<f64>, f64)>,
}

#[derive(Debug, Clone)]
pub struct BasisExpansion<'a> {
    /// One center per row.
    pub centers: &'a DMatrix<f64>,
    pub heads: Vec<BasisHead<'a>>,
}

/// Output moments of an expansion under `x ~ N(m, S)`. Also used as the
/// adjoint (seed) type for [`BasisExpansion::moments_vjp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `Cov[x, f]`, input dimension by number of heads.
    pub cross: DMatrix<f64>,
}

impl Moments {
    pub fn zeros(input_dim: usize, outputs: usize) -> Self {
        Self {
            mean: DVector::zeros(outputs),
            cov: DMatrix::zeros(outputs, outputs),
            cross: DMatrix::zeros(input_dim, outputs),
        }
    }
}

/// Gradient of a scalar functional of the moments. The covariance gradient
/// is symmetric. Center and weight gradients treat `K^-1` as fixed.
#[derive(Debug, Clone)]
pub struct ExpansionGradient {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub centers: DMatrix<f64>,
    pub beta: Vec<DVector<f64>>,
}

struct Linear {
    q: DVector<f64>,
    binv: DMatrix<f64>,
    nub: DMatrix<f64>,
    t: DVector<f64>,
}

struct Pair {
    q: DMatrix<f64>,
    rinv: DMatrix<f64>,
    a: DMatrix<f64>,
    za: DMatrix<f64>,
    zb: DMatrix<f64>,
    p: DVector<f64>,
}

impl<'a> BasisExpansion<'a> {
    fn check(&self, m: &DVector<f64>, s: &DMatrix<f64>) -> Result<()> {
        let d = self.centers.ncols();
        if m.len() != d || s.nrows() != d || s.ncols() != d {
            return Err(Error::Shape(format!(
                "input mean {} / covariance {}x{} for a {d}-dimensional expansion",
                m.len(),
                s.nrows(),
                s.ncols()
            )));
        }
        for h in &self.heads {
            if h.beta.len() != self.centers.nrows() || h.inv_lengthsq.len() != d {
                return Err(Error::Shape("head weights or lengthscales do not match the centers".into()));
            }
        }
        if !m.iter().chain(s.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite input moments".into()));
        }
        Ok(())
    }

    fn nu(&self, m: &DVector<f64>) -> DMatrix<f64> {
        let mut nu = self.centers.clone();
        for mut row in nu.row_iter_mut() {
            row -= m.transpose();
        }
        nu
    }

    fn linear(h: &BasisHead, nu: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Linear> {
        let d = s.nrows();
        let mut b = s.clone();
        for k in 0..d {
            b[(k, k)] += 1.0 / h.inv_lengthsq[k];
        }
        let ch = b
            .cholesky()
            .ok_or_else(|| Error::Conditioning("input covariance plus lengthscales is not positive definite".into()))?;
        let logdet_b = chol_logdet(&ch);
        let binv = ch.inverse();
        let nub = nu * &binv;
        let logc = h.signal_variance.ln() - 0.5 * logdet_b - 0.5 * h.inv_lengthsq.iter().map(|v| v.ln()).sum::<f64>();
        let q = DVector::from_iterator(
            nu.nrows(),
            (0..nu.nrows()).map(|i| (logc - 0.5 * nub.row(i).dot(&nu.row(i))).exp()),
        );
        let bq = h.beta.component_mul(&q);
        let t = nu.tr_mul(&bq);
        Ok(Linear { q, binv, nub, t })
    }

    fn pair(ha: &BasisHead, hb: &BasisHead, nu: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Pair> {
        let d = s.nrows();
        let n = nu.nrows();
        let p = &ha.inv_lengthsq + &hb.inv_lengthsq;
        let sp = p.map(f64::sqrt);
        // R = S P + I handled through the symmetric C = I + P^1/2 S P^1/2
        let t1 = scale_cols(s, &sp);
        let mut c = scale_rows(&t1, &sp);
        for k in 0..d {
            c[(k, k)] += 1.0;
        }
        let ch = c
            .cholesky()
            .ok_or_else(|| Error::Conditioning("pairwise moment matrix is not positive definite".into()))?;
        let logdet_r = chol_logdet(&ch);
        let cinv_t1t = ch.solve(&t1.transpose());
        let mut a = s - &t1 * &cinv_t1t;
        symmetrize_mut(&mut a);
        let rinv = DMatrix::identity(d, d) - scale_cols(&(&t1 * ch.inverse()), &sp);

        let za = scale_cols(nu, &ha.inv_lengthsq);
        let zb = scale_cols(nu, &hb.inv_lengthsq);
        let za_a = &za * &a;
        let zb_a = &zb * &a;
        let (lsa, lsb) = (ha.signal_variance.ln(), hb.signal_variance.ln());
        let ua: Vec<f64> = (0..n)
            .map(|i| lsa - 0.5 * nu.row(i).dot(&za.row(i)) + 0.5 * za_a.row(i).dot(&za.row(i)))
            .collect();
        let ub: Vec<f64> = (0..n)
            .map(|j| lsb - 0.5 * nu.row(j).dot(&zb.row(j)) + 0.5 * zb_a.row(j).dot(&zb.row(j)))
            .collect();
        let mut q = za_a * zb.transpose();
        for j in 0..n {
            for i in 0..n {
                q[(i, j)] = (q[(i, j)] + ua[i] + ub[j] - 0.5 * logdet_r).exp();
            }
        }
        Ok(Pair { q, rinv, a, za, zb, p })
    }

    /// Mean, covariance and input-output cross-covariance of `f(x)` for
    /// `x ~ N(m, s)`.
    pub fn moments(&self, m: &DVector<f64>, s: &DMatrix<f64>) -> Result<Moments> {
        self.check(m, s)?;
        let e = self.heads.len();
        let nu = self.nu(m);
        let mut out = Moments::zeros(m.len(), e);
        for (a, h) in self.heads.iter().enumerate() {
            let lin = Self::linear(h, &nu, s)?;
            out.mean[a] = h.beta.dot(&lin.q);
            out.cross.set_column(a, &(s * (&lin.binv * &lin.t)));
        }
        for a in 0..e {
            for b in a..e {
                let (ha, hb) = (&self.heads[a], &self.heads[b]);
                let pr = Self::pair(ha, hb, &nu, s)?;
                let mut e2 = ha.beta.dot(&(&pr.q * hb.beta));
                if a == b {
                    if let Some((kinv, noise)) = ha.latent {
                        e2 += ha.signal_variance - frobenius_dot(kinv, &pr.q) + noise;
                    }
                }
                let c = e2 - out.mean[a] * out.mean[b];
                out.cov[(a, b)] = c;
                out.cov[(b, a)] = c;
            }
        }
        Ok(out)
    }

    /// Pull the adjoint `adj` of the moments back to the input moments,
    /// the centers and the weights.
    pub fn moments_vjp(&self, m: &DVector<f64>, s: &DMatrix<f64>, adj: &Moments) -> Result<ExpansionGradient> {
        self.check(m, s)?;
        let (n, d, e) = (self.centers.nrows(), m.len(), self.heads.len());
        let nu = self.nu(m);
        let mut g_nu = DMatrix::zeros(n, d);
        let mut g_s = DMatrix::zeros(d, d);
        let mut g_beta: Vec<DVector<f64>> = vec![DVector::zeros(n); e];

        let lins = self.heads.iter().map(|h| Self::linear(h, &nu, s)).collect::<Result<Vec<_>>>()?;
        let mean: Vec<f64> = self.heads.iter().zip(&lins).map(|(h, l)| h.beta.dot(&l.q)).collect();

        for (a, (h, lin)) in self.heads.iter().zip(&lins).enumerate() {
            let lam_m = adj.mean[a] - (0..e).map(|b| (adj.cov[(a, b)] + adj.cov[(b, a)]) * mean[b]).sum::<f64>();
            let lam_v = adj.cross.column(a).into_owned();
            let lam_scaled = lam_v.component_div(&h.inv_lengthsq);
            let bl = &lin.binv * &lam_scaled;
            let rho = &lam_v - &bl;
            let inner = DVector::from_element(n, lam_m) + &nu * &rho;
            let bq = h.beta.component_mul(&lin.q);
            let w = bq.component_mul(&inner);
            g_nu -= scale_rows(&lin.nub, &w);
            g_nu += &bq * rho.transpose();
            g_s += &bl * (&lin.binv * &lin.t).transpose();
            g_s -= &lin.binv * (0.5 * w.sum());
            g_s += lin.nub.tr_mul(&scale_rows(&lin.nub, &w)) * 0.5;
            g_beta[a] += lin.q.component_mul(&inner);
        }

        for a in 0..e {
            for b in a..e {
                let lam = if a == b { adj.cov[(a, a)] } else { adj.cov[(a, b)] + adj.cov[(b, a)] };
                if lam == 0.0 {
                    continue;
                }
                let (ha, hb) = (&self.heads[a], &self.heads[b]);
                let pr = Self::pair(ha, hb, &nu, s)?;
                let mut gamma = ha.beta * hb.beta.transpose() * lam;
                if a == b {
                    if let Some((kinv, _)) = ha.latent {
                        gamma -= kinv * lam;
                    }
                }
                let w = gamma.component_mul(&pr.q);
                let r = DVector::from_iterator(n, w.row_iter().map(|row| row.sum()));
                let c = DVector::from_iterator(n, w.column_iter().map(|col| col.sum()));
                let ga = &pr.za * &pr.rinv;
                let hbm = &pr.zb * &pr.rinv;
                let rtp = scale_cols(&pr.rinv.transpose(), &pr.p);
                g_s -= rtp * (0.5 * w.sum());
                let ga_w_hb = ga.tr_mul(&(&w * &hbm));
                g_s += (ga.tr_mul(&scale_rows(&ga, &r))
                    + hbm.tr_mul(&scale_rows(&hbm, &c))
                    + &ga_w_hb
                    + ga_w_hb.transpose())
                    * 0.5;
                let ra = scale_rows(&pr.za, &r);
                let cb = scale_rows(&pr.zb, &c);
                g_nu += scale_cols(&((&ra + &w * &pr.zb) * &pr.a), &ha.inv_lengthsq) - &ra;
                g_nu += scale_cols(&((&cb + w.tr_mul(&pr.za)) * &pr.a), &hb.inv_lengthsq) - &cb;
                g_beta[a] += &pr.q * hb.beta * lam;
                g_beta[b] += pr.q.tr_mul(ha.beta) * lam;
            }
        }

        let g_m = -DVector::from_iterator(d, g_nu.column_iter().map(|col| col.sum()));
        symmetrize_mut(&mut g_s);
        Ok(ExpansionGradient { mean: g_m, cov: g_s, centers: g_nu, beta: g_beta })
    }
}
