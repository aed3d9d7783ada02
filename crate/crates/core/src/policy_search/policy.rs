//! Radial-basis-function policy with a smooth sine saturator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{BasisExpansion, BasisHead, Moments};
use crate::plant::{PlantState, STATE_DIM};

/// How a fresh random policy is drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyInit {
    pub n_basis: usize,
    /// Standard deviation of the initial weights.
    pub weight_std: f64,
    /// Per-state standard deviation of the initial centers around the origin.
    pub center_std: [f64; STATE_DIM],
    pub lengthscales: [f64; STATE_DIM],
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            n_basis: 50,
            weight_std: 0.1,
            center_std: [0.5, 1.0, 0.3, 1.0],
            lengthscales: [1.0, 2.0, 0.5, 2.0],
        }
    }
}

/// `u = u_max * squash(sum_i w_i exp(-1/2 |(s - c_i) / l|^2))` for a single
/// control input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct PolicyParams {
    /// One center per row, `n_basis x 4`.
    pub centers: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub lengthscales: DVector<f64>,
    pub u_max: f64,
}

/// On-disk layout of a policy checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyFile {
    centers: Vec<Vec<f64>>,
    weights: Vec<f64>,
    lengthscales: Vec<f64>,
    u_max: f64,
}

impl From<PolicyParams> for PolicyFile {
    fn from(p: PolicyParams) -> Self {
        Self {
            centers: p.centers.row_iter().map(|r| r.iter().copied().collect()).collect(),
            weights: p.weights.iter().copied().collect(),
            lengthscales: p.lengthscales.iter().copied().collect(),
            u_max: p.u_max,
        }
    }
}

impl TryFrom<PolicyFile> for PolicyParams {
    type Error = Error;

    fn try_from(f: PolicyFile) -> Result<Self> {
        if f.centers.iter().any(|r| r.len() != STATE_DIM) {
            return Err(Error::Shape("policy centers must have 4 columns".into()));
        }
        let p = Self {
            centers: DMatrix::from_row_iterator(f.centers.len(), STATE_DIM, f.centers.iter().flatten().copied()),
            weights: DVector::from_vec(f.weights),
            lengthscales: DVector::from_vec(f.lengthscales),
            u_max: f.u_max,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `u(z) / u_max`.
pub fn squash(z: f64) -> f64 {
    9.0 / 8.0 * z.sin() + 1.0 / 8.0 * (3.0 * z).sin()
}

/// Moments of `u = u_max * squash(z)` for `z ~ N(m, v)` and their partial
/// derivatives. `gain` is `E[du/dz]`, so `Cov[x, u] = Cov[x, z] * gain` for
/// jointly Gaussian `(x, z)`.
#[derive(Debug, Clone, Copy)]
pub struct SquashMoments {
    pub mean: f64,
    pub var: f64,
    pub gain: f64,
    /// `d(mean, var, gain) / dm`
    pub d_m: [f64; 3],
    /// `d(mean, var, gain) / dv`
    pub d_v: [f64; 3],
}

pub fn squash_moments(m: f64, v: f64, u_max: f64) -> SquashMoments {
    let u = u_max;
    let a1 = (-0.5 * v).exp();
    let a9 = (-4.5 * v).exp();
    let e2 = (-2.0 * v).exp();
    let e8 = (-8.0 * v).exp();
    let e18 = (-18.0 * v).exp();
    let (s1, c1) = m.sin_cos();
    let (s3, c3) = (3.0 * m).sin_cos();
    let (s2, c2) = (2.0 * m).sin_cos();
    let (s4, c4) = (4.0 * m).sin_cos();
    let (s6, c6) = (6.0 * m).sin_cos();

    let mean = u * (9.0 / 8.0 * a1 * s1 + 1.0 / 8.0 * a9 * s3);
    let mean_m = u * (9.0 / 8.0 * a1 * c1 + 3.0 / 8.0 * a9 * c3);
    let mean_v = -u * 9.0 / 16.0 * (a1 * s1 + a9 * s3);

    // E[sin^2 z], E[sin z sin 3z], E[sin^2 3z]
    let a = 0.5 * (1.0 - e2 * c2);
    let b = 0.5 * (e2 * c2 - e8 * c4);
    let c = 0.5 * (1.0 - e18 * c6);
    let (a_m, a_v) = (e2 * s2, e2 * c2);
    let (b_m, b_v) = (-e2 * s2 + 2.0 * e8 * s4, -e2 * c2 + 4.0 * e8 * c4);
    let (c_m, c_v) = (3.0 * e18 * s6, 9.0 * e18 * c6);
    let u2 = u * u / 64.0;
    let second = u2 * (81.0 * a + 18.0 * b + c);
    let second_m = u2 * (81.0 * a_m + 18.0 * b_m + c_m);
    let second_v = u2 * (81.0 * a_v + 18.0 * b_v + c_v);

    let gain = mean_m;
    let gain_m = -u * 9.0 / 8.0 * (a1 * s1 + a9 * s3);
    let gain_v = -u * (9.0 / 16.0 * a1 * c1 + 27.0 / 16.0 * a9 * c3);

    SquashMoments {
        mean,
        var: second - mean * mean,
        gain,
        d_m: [mean_m, second_m - 2.0 * mean * mean_m, gain_m],
        d_v: [mean_v, second_v - 2.0 * mean * mean_v, gain_v],
    }
}

/// Gaussian moments of the control under a Gaussian state.
#[derive(Debug, Clone)]
pub struct ControlMoments {
    pub mean: f64,
    pub var: f64,
    /// `Cov[s, u]`.
    pub cross: DVector<f64>,
}

/// Gradient of a scalar functional of [`ControlMoments`].
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub state_mean: DVector<f64>,
    pub state_cov: DMatrix<f64>,
    /// Flattened like [`PolicyParams::to_flat`].
    pub params: DVector<f64>,
}

impl PolicyParams {
    pub fn random<R: Rng + ?Sized>(init: &PolicyInit, u_max: f64, rng: &mut R) -> Result<Self> {
        if init.n_basis == 0 || !(init.weight_std >= 0.0) {
            return Err(Error::Config("policy needs at least one basis function and a non-negative weight spread".into()));
        }
        let w = Normal::new(0.0, init.weight_std).map_err(|e| Error::Config(e.to_string()))?;
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let centers = DMatrix::from_fn(init.n_basis, STATE_DIM, |_, j| init.center_std[j] * std_normal.sample(rng));
        let weights = DVector::from_fn(init.n_basis, |_, _| w.sample(rng));
        let p = Self { centers, weights, lengthscales: DVector::from_row_slice(&init.lengthscales), u_max };
        p.validate()?;
        Ok(p)
    }

    pub fn n_basis(&self) -> usize {
        self.centers.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_basis() == 0
            || self.centers.ncols() != STATE_DIM
            || self.weights.len() != self.n_basis()
            || self.lengthscales.len() != STATE_DIM
        {
            return Err(Error::Shape("policy needs n_basis >= 1 centers of dimension 4 and matching weights".into()));
        }
        if !self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0) || !(self.u_max > 0.0) {
            return Err(Error::Config("policy lengthscales and u_max must be positive".into()));
        }
        if !self.centers.iter().chain(self.weights.iter()).all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite policy parameters".into()));
        }
        Ok(())
    }

    /// Unsquashed network output.
    pub fn raw(&self, s: &[f64; STATE_DIM]) -> f64 {
        (0..self.n_basis())
            .map(|i| {
                let r2: f64 = (0..STATE_DIM).map(|d| ((s[d] - self.centers[(i, d)]) / self.lengthscales[d]).powi(2)).sum();
                self.weights[i] * (-0.5 * r2).exp()
            })
            .sum()
    }

    pub fn eval(&self, s: &PlantState) -> f64 {
        self.u_max * squash(self.raw(&s.to_array()))
    }

    /// `[centers row-major, weights, log lengthscales]`.
    pub fn to_flat(&self) -> DVector<f64> {
        let nb = self.n_basis();
        let mut v = Vec::with_capacity(nb * (STATE_DIM + 1) + STATE_DIM);
        for r in self.centers.row_iter() {
            v.extend(r.iter());
        }
        v.extend(self.weights.iter());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        DVector::from_vec(v)
    }

    /// Inverse of [`to_flat`](Self::to_flat), keeping `u_max` and the basis count of `self`.
    pub fn with_flat(&self, v: &DVector<f64>) -> Self {
        let nb = self.n_basis();
        assert_eq!(v.len(), nb * (STATE_DIM + 1) + STATE_DIM, "flat policy length");
        Self {
            centers: DMatrix::from_row_slice(nb, STATE_DIM, &v.as_slice()[..nb * STATE_DIM]),
            weights: DVector::from_column_slice(&v.as_slice()[nb * STATE_DIM..nb * (STATE_DIM + 1)]),
            lengthscales: v.rows(nb * (STATE_DIM + 1), STATE_DIM).map(f64::exp),
            u_max: self.u_max,
        }
    }

    fn expansion(&self) -> BasisExpansion<'_> {
        BasisExpansion {
            centers: &self.centers,
            heads: vec![BasisHead {
                beta: &self.weights,
                inv_lengthsq: self.lengthscales.map(|l| 1.0 / (l * l)),
                signal_variance: 1.0,
                latent: None,
            }],
        }
    }

    /// Moments of the control for `s ~ N(m, cov)`: exact for the network
    /// output, then exact for the squash under a Gaussian output.
    pub fn control_moments(&self, m: &DVector<f64>, cov: &DMatrix<f64>) -> Result<ControlMoments> {
        let z = self.expansion().moments(m, cov)?;
        let sq = squash_moments(z.mean[0], z.cov[(0, 0)].max(0.0), self.u_max);
        Ok(ControlMoments { mean: sq.mean, var: sq.var, cross: z.cross.column(0) * sq.gain })
    }

    /// Pull `(d/d mean, d/d var, d/d cross)` of a scalar functional back to the
    /// state moments and the policy parameters. Lengthscale derivatives use
    /// central differences of the linearized functional.
    pub fn control_moments_vjp(
        &self,
        m: &DVector<f64>,
        cov: &DMatrix<f64>,
        adj_mean: f64,
        adj_var: f64,
        adj_cross: &DVector<f64>,
    ) -> Result<PolicyGradient> {
        let ex = self.expansion();
        let z = ex.moments(m, cov)?;
        let zv = z.cov[(0, 0)];
        let sq = squash_moments(z.mean[0], zv.max(0.0), self.u_max);
        let cxz = z.cross.column(0).into_owned();
        let adj_gain = adj_cross.dot(&cxz);
        let lam = [adj_mean, adj_var, adj_gain];
        let adj_zm: f64 = (0..3).map(|k| lam[k] * sq.d_m[k]).sum();
        let adj_zv: f64 = if zv > 0.0 { (0..3).map(|k| lam[k] * sq.d_v[k]).sum() } else { 0.0 };
        let seed = Moments {
            mean: DVector::from_element(1, adj_zm),
            cov: DMatrix::from_element(1, 1, adj_zv),
            cross: DMatrix::from_column_slice(STATE_DIM, 1, (adj_cross * sq.gain).as_slice()),
        };
        let g = ex.moments_vjp(m, cov, &seed)?;

        let nb = self.n_basis();
        let mut params = DVector::zeros(nb * (STATE_DIM + 1) + STATE_DIM);
        for i in 0..nb {
            for d in 0..STATE_DIM {
                params[i * STATE_DIM + d] = g.centers[(i, d)];
            }
            params[nb * STATE_DIM + i] = g.beta[0][i];
        }
        let functional = |p: &PolicyParams| -> Result<f64> {
            let c = p.control_moments(m, cov)?;
            Ok(adj_mean * c.mean + adj_var * c.var + adj_cross.dot(&c.cross))
        };
        let h: f64 = 1e-5;
        for d in 0..STATE_DIM {
            let mut hi = self.clone();
            let mut lo = self.clone();
            hi.lengthscales[d] *= h.exp();
            lo.lengthscales[d] *= (-h).exp();
            params[nb * (STATE_DIM + 1) + d] = (functional(&hi)? - functional(&lo)?) / (2.0 * h);
        }
        Ok(PolicyGradient { state_mean: g.mean, state_cov: g.cov, params })
    }
}
