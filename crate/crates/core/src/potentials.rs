//! Model potentials and the coefficient data of the generator.
//!
//! A [`PotentialSpec`] couples an energy landscape `V` (with its gradient and
//! diffusion field `a`) to an inverse temperature `beta`. The built-in
//! landscapes used throughout the tests and the CLI are the planar three-well
//! potential [`V2`], its high-dimensional extension [`Vd`], an isotropic
//! quadratic well and the zero potential.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("angle {0} outside [-pi, pi)")]
    AngleOutOfRange(f64),
    #[error("dimension mismatch: potential has dimension {expected}, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown potential id '{0}'")]
    UnknownPotential(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Energy landscape with gradient and diffusion-field evaluators.
///
/// All evaluators must be pure; they are called concurrently without
/// synchronization. `diffusion` writes the symmetric `d x d` matrix `a(x)`
/// row-major and defaults to the identity.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);

    fn diffusion(&self, _x: &[f64], a: &mut [f64]) {
        let d = self.dim();
        a.fill(0.0);
        for i in 0..d {
            a[i * d + i] = 1.0;
        }
    }

    /// True when `diffusion` is the identity everywhere. Enables the fast
    /// paths in the sampler and the estimators.
    fn has_identity_diffusion(&self) -> bool {
        true
    }
}

/// A potential together with the inverse temperature of the dynamics.
#[derive(Clone)]
pub struct PotentialSpec {
    potential: Arc<dyn Potential>,
    beta: f64,
}

impl PotentialSpec {
    pub fn new(potential: impl Potential + 'static, beta: f64) -> Result<Self, PotentialError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(PotentialError::InvalidParameter(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        Ok(Self { potential: Arc::new(potential), beta })
    }

    /// Look up a built-in potential by its CLI identifier.
    ///
    /// Known ids: `"v2"`, `"vd"` (requires `dim`), `"quadratic2d"`, `"zero2d"`.
    pub fn builtin(id: &str, dim: Option<usize>, beta: f64) -> Result<Self, PotentialError> {
        match id {
            "v2" => Self::new(V2, beta),
            "vd" => {
                let d = dim.ok_or_else(|| {
                    PotentialError::InvalidParameter("potential 'vd' requires dim".into())
                })?;
                Self::new(Vd::new(d)?, beta)
            }
            "quadratic2d" => Self::new(Quadratic2d, beta),
            "zero2d" => Self::new(Zero2d, beta),
            other => Err(PotentialError::UnknownPotential(other.to_string())),
        }
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, PotentialError> {
        self.check_dim(x)?;
        Ok(self.potential.value(x))
    }

    pub fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<(), PotentialError> {
        self.check_dim(x)?;
        self.check_dim(grad)?;
        self.potential.gradient(x, grad);
        Ok(())
    }

    pub fn gradient_vec(&self, x: &[f64]) -> Result<Vec<f64>, PotentialError> {
        let mut g = vec![0.0; self.dim()];
        self.gradient(x, &mut g)?;
        Ok(g)
    }

    pub fn diffusion(&self, x: &[f64], a: &mut [f64]) -> Result<(), PotentialError> {
        self.check_dim(x)?;
        if a.len() != self.dim() * self.dim() {
            return Err(PotentialError::DimensionMismatch {
                expected: self.dim() * self.dim(),
                got: a.len(),
            });
        }
        self.potential.diffusion(x, a);
        Ok(())
    }

    pub fn has_identity_diffusion(&self) -> bool {
        self.potential.has_identity_diffusion()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), PotentialError> {
        if x.len() != self.dim() {
            return Err(PotentialError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }
}

/// Three-branch angular double well on `[-pi, pi)`.
///
/// Rejects angles outside the interval; callers that hold a free angle
/// should reduce it with [`wrap_angle`] first.
pub fn eval_v_angle(theta: f64) -> Result<f64, PotentialError> {
    if !((-PI..PI).contains(&theta)) {
        return Err(PotentialError::AngleOutOfRange(theta));
    }
    Ok(v_angle_unchecked(theta))
}

/// Reduce an angle to `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t >= PI {
        t -= 2.0 * PI;
    }
    t
}

fn v_angle_unchecked(theta: f64) -> f64 {
    if theta < -PI / 3.0 {
        let u = 3.0 * theta / PI + 1.0;
        let s = 1.0 - u * u;
        s * s
    } else if theta < PI / 3.0 {
        (3.0 - 2.0 * (3.0 * theta).cos()) / 5.0
    } else {
        let u = 3.0 * theta / PI - 1.0;
        let s = 1.0 - u * u;
        s * s
    }
}

/// dV/dtheta of the angular double well, matching the branch layout of
/// [`eval_v_angle`].
fn v_angle_deriv_unchecked(theta: f64) -> f64 {
    if theta < -PI / 3.0 {
        let u = 3.0 * theta / PI + 1.0;
        -12.0 * u * (1.0 - u * u) / PI
    } else if theta < PI / 3.0 {
        1.2 * (3.0 * theta).sin()
    } else {
        let u = 3.0 * theta / PI - 1.0;
        -12.0 * u * (1.0 - u * u) / PI
    }
}

/// Polar angle of a planar point in `[-pi, pi)`, with the convention
/// `theta(0, 0) = 0`.
fn polar_angle(x1: f64, x2: f64) -> f64 {
    let t = x2.atan2(x1);
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Planar three-well potential `V(theta) + 2(r-1)^2 + 5 exp(-5 r^2)`.
#[derive(Debug, Clone, Copy)]
pub struct V2;

/// Value of [`V2`] at a planar point.
pub fn eval_v2(x: [f64; 2]) -> f64 {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let r = r2.sqrt();
    let theta = polar_angle(x[0], x[1]);
    v_angle_unchecked(theta) + 2.0 * (r - 1.0) * (r - 1.0) + 5.0 * (-5.0 * r2).exp()
}

/// Analytic gradient of [`V2`]; zero at the origin where the angular term is
/// not differentiable.
pub fn grad_v2(x: [f64; 2]) -> [f64; 2] {
    let r2 = x[0] * x[0] + x[1] * x[1];
    if r2 == 0.0 {
        return [0.0, 0.0];
    }
    let r = r2.sqrt();
    let theta = polar_angle(x[0], x[1]);
    // radial part: d/dr [2(r-1)^2 + 5 e^{-5 r^2}] = 4(r-1) - 50 r e^{-5 r^2}
    let dr = 4.0 * (r - 1.0) - 50.0 * r * (-5.0 * r2).exp();
    // angular part: dV/dtheta * grad(theta), grad(theta) = (-x2, x1)/r^2
    let dth = v_angle_deriv_unchecked(theta);
    [dr * x[0] / r - dth * x[1] / r2, dr * x[1] / r + dth * x[0] / r2]
}

impl Potential for V2 {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &[f64]) -> f64 {
        eval_v2([x[0], x[1]])
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let g = grad_v2([x[0], x[1]]);
        grad[0] = g[0];
        grad[1] = g[1];
    }
}

/// `V2` in the first two coordinates plus the quadratic term
/// `2 sum_{i>=3} x_i^2` in the remaining ones.
#[derive(Debug, Clone, Copy)]
pub struct Vd {
    dim: usize,
}

impl Vd {
    pub fn new(dim: usize) -> Result<Self, PotentialError> {
        if dim < 2 {
            return Err(PotentialError::InvalidParameter(format!(
                "vd requires dim >= 2, got {dim}"
            )));
        }
        Ok(Self { dim })
    }
}

impl Potential for Vd {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let tail: f64 = x[2..].iter().map(|&xi| xi * xi).sum();
        eval_v2([x[0], x[1]]) + 2.0 * tail
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let g = grad_v2([x[0], x[1]]);
        grad[0] = g[0];
        grad[1] = g[1];
        for i in 2..self.dim {
            grad[i] = 4.0 * x[i];
        }
    }
}

/// Isotropic planar well `V = 2(x1^2 + x2^2)`. The associated diffusion has
/// the analytically known spectrum used by the oracle tests.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic2d;

impl Potential for Quadratic2d {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &[f64]) -> f64 {
        2.0 * (x[0] * x[0] + x[1] * x[1])
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad[0] = 4.0 * x[0];
        grad[1] = 4.0 * x[1];
    }
}

/// Flat potential on the plane.
#[derive(Debug, Clone, Copy)]
pub struct Zero2d;

impl Potential for Zero2d {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
    }
}

/// Potential defined by closures, for user-supplied landscapes.
pub struct CustomPotential<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    dim: usize,
    value: V,
    gradient: G,
}

impl<V, G> CustomPotential<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, value: V, gradient: G) -> Self {
        Self { dim, value, gradient }
    }
}

impl<V, G> Potential for CustomPotential<V, G>
where
    V: Fn(&[f64]) -> f64 + Send + Sync,
    G: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        (self.gradient)(x, grad)
    }
}
