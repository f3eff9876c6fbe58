//! Forward map of the parameterized ODE
//!
//! ```text
//! dH_t = Σ_i θ_i(t) f_i(H_t) dt,   H_0 = x,   F_θ(x) = H_1
//! ```
//!
//! solved with fixed-step explicit Euler or classical RK4.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipfun::ParamFunction;
use crate::numerics::{matvec_into, norm2, Matrix};
use crate::resnet::Activation;

/// States whose Euclidean norm exceeds this abort the integration.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub type ComponentFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// One map `f_i : ℝ^d → ℝ^d` with its Lipschitz constant and sup bound.
#[derive(Clone)]
pub struct Component {
    f: ComponentFn,
    pub lipschitz: f64,
    pub sup: f64,
}

impl Component {
    /// `f(h, out)` must write `f_i(h)` into `out`.
    pub fn new<F>(f: F, lipschitz: f64, sup: f64) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::invalid(format!(
                "component Lipschitz constant must be positive and finite, got {lipschitz}"
            )));
        }
        if !(sup > 0.0 && sup.is_finite()) {
            return Err(Error::invalid(format!(
                "component sup bound must be positive and finite, got {sup}"
            )));
        }
        Ok(Self {
            f: Arc::new(f),
            lipschitz,
            sup,
        })
    }

    pub fn eval(&self, h: &[f64], out: &mut [f64]) {
        (self.f)(h, out)
    }
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Component")
            .field("lipschitz", &self.lipschitz)
            .field("sup", &self.sup)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Generic(Vec<Component>),
    /// `σ_{ij}(h) = σ(h_j) e_i`, component index `i·d + j`.
    SigmaBasis(Activation),
    /// `f(h) = h`.
    LinearTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Generic,
    NeuralTimeIndependent,
    LinearTest,
}

#[derive(Debug, Clone)]
pub struct VectorField {
    d: usize,
    kind: Kind,
}

impl VectorField {
    pub fn generic(d: usize, components: Vec<Component>) -> Result<Self> {
        if d == 0 || components.is_empty() {
            return Err(Error::invalid("a field needs d >= 1 and at least one component"));
        }
        Ok(Self {
            d,
            kind: Kind::Generic(components),
        })
    }

    /// The `d²` maps `h ↦ σ(h_j) e_i`.
    pub fn sigma_basis(d: usize, activation: Activation) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        Ok(Self {
            d,
            kind: Kind::SigmaBasis(activation),
        })
    }

    /// The single map `h ↦ h` on `ℝ^d`.
    pub fn linear_test(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        Ok(Self {
            d,
            kind: Kind::LinearTest,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        match &self.kind {
            Kind::Generic(c) => c.len(),
            Kind::SigmaBasis(_) => self.d * self.d,
            Kind::LinearTest => 1,
        }
    }

    pub fn kind(&self) -> FieldKind {
        match self.kind {
            Kind::Generic(_) => FieldKind::Generic,
            Kind::SigmaBasis(_) => FieldKind::NeuralTimeIndependent,
            Kind::LinearTest => FieldKind::LinearTest,
        }
    }

    /// Largest component Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match &self.kind {
            Kind::Generic(c) => c.iter().map(|c| c.lipschitz).fold(0.0, f64::max),
            Kind::SigmaBasis(a) => a.lipschitz(),
            Kind::LinearTest => 1.0,
        }
    }

    /// Largest component sup bound; `None` for unbounded components.
    pub fn sup(&self) -> Option<f64> {
        match &self.kind {
            Kind::Generic(c) => Some(c.iter().map(|c| c.sup).fold(0.0, f64::max)),
            Kind::SigmaBasis(Activation::Tanh) => Some(1.0),
            Kind::SigmaBasis(_) | Kind::LinearTest => None,
        }
    }

    /// `out = Σ_i θ_i f_i(h)`.
    pub fn apply(&self, theta: &[f64], h: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        match &self.kind {
            Kind::Generic(components) => {
                out.fill(0.0);
                for (c, &t) in components.iter().zip(theta) {
                    if t == 0.0 {
                        continue;
                    }
                    c.eval(h, scratch);
                    for (o, s) in out.iter_mut().zip(scratch.iter()) {
                        *o += t * s;
                    }
                }
            }
            Kind::SigmaBasis(act) => {
                for (s, x) in scratch.iter_mut().zip(h) {
                    *s = act.apply(*x);
                }
                matvec_into(theta, self.d, self.d, scratch, out);
            }
            Kind::LinearTest => {
                for (o, x) in out.iter_mut().zip(h) {
                    *o = theta[0] * x;
                }
            }
        }
    }
}

/// σ-basis field for `dH_t = W σ(H_t) dt`; integrate it against
/// [`constant_theta`]`(w)` to solve that ODE.
pub fn neural_ode_field(w: &Matrix, activation: Activation) -> Result<VectorField> {
    if w.is_empty() || !w.is_square() {
        return Err(Error::invalid(format!(
            "W must be square, got {} x {}",
            w.rows(),
            w.cols()
        )));
    }
    VectorField::sigma_basis(w.rows(), activation)
}

/// The constant path `t ↦ vec(W)`.
pub fn constant_theta(w: &Matrix) -> Result<ParamFunction> {
    ParamFunction::constant(w.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub steps: usize,
    pub scheme: Scheme,
}

impl IntegrationConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            steps,
            scheme: Scheme::Euler,
        }
    }

    pub fn rk4(steps: usize) -> Self {
        Self {
            steps,
            scheme: Scheme::Rk4,
        }
    }
}

/// `H_0 … H_L` on the uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory holds H_0")
    }
}

pub fn integrate(
    field: &VectorField,
    theta: &ParamFunction,
    x: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Vec<f64>> {
    let mut out = None;
    solve(field, theta, x, cfg, |t, h| {
        if t == 1.0 {
            out = Some(h.to_vec());
        }
    })?;
    Ok(out.expect("solver visits the final state"))
}

pub fn integrate_trajectory(
    field: &VectorField,
    theta: &ParamFunction,
    x: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        times: Vec::with_capacity(cfg.steps + 1),
        states: Vec::with_capacity(cfg.steps + 1),
    };
    solve(field, theta, x, cfg, |t, h| {
        traj.times.push(t);
        traj.states.push(h.to_vec());
    })?;
    Ok(traj)
}

/// Steps the ODE, calling `visit(t_k, H_k)` for `k = 0..=L`.
///
/// Euler samples `θ(k/L)`, or `θ((k+1)/L)` for the σ basis, whose layer
/// update then coincides with the residual recursion.
fn solve<V: FnMut(f64, &[f64])>(
    field: &VectorField,
    theta: &ParamFunction,
    x: &[f64],
    cfg: &IntegrationConfig,
    mut visit: V,
) -> Result<()> {
    let d = field.dim();
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if theta.m() != field.m() {
        return Err(Error::invalid(format!(
            "θ has {} coordinates, field has {} components",
            theta.m(),
            field.m()
        )));
    }
    if x.len() != d {
        return Err(Error::invalid(format!("x has length {}, field dimension is {d}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }

    let steps = cfg.steps;
    let inv_l = 1.0 / steps as f64;
    let time = |k: usize| k as f64 / steps as f64;
    let shifted = matches!(field.kind, Kind::SigmaBasis(_));

    let mut h = x.to_vec();
    let mut th = vec![0.0; theta.m()];
    let mut scratch = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut stages = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut probe = vec![0.0; d];

    visit(0.0, &h);
    for k in 0..steps {
        match cfg.scheme {
            Scheme::Euler => {
                theta.eval_into(time(if shifted { k + 1 } else { k }), &mut th)?;
                field.apply(&th, &h, &mut v, &mut scratch);
                for (x, dv) in h.iter_mut().zip(&v) {
                    *x += inv_l * dv;
                }
            }
            Scheme::Rk4 => {
                let t0 = time(k);
                let t_mid = (t0 + time(k + 1)) / 2.0;
                let [k1, k2, k3, k4] = &mut stages;

                theta.eval_into(t0, &mut th)?;
                field.apply(&th, &h, k1, &mut scratch);

                theta.eval_into(t_mid, &mut th)?;
                for i in 0..d {
                    probe[i] = h[i] + 0.5 * inv_l * k1[i];
                }
                field.apply(&th, &probe, k2, &mut scratch);
                for i in 0..d {
                    probe[i] = h[i] + 0.5 * inv_l * k2[i];
                }
                field.apply(&th, &probe, k3, &mut scratch);

                theta.eval_into(time(k + 1), &mut th)?;
                for i in 0..d {
                    probe[i] = h[i] + inv_l * k3[i];
                }
                field.apply(&th, &probe, k4, &mut scratch);

                for i in 0..d {
                    h[i] += inv_l / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if h.iter().any(|v| !v.is_finite()) || norm2(&h) > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { step: k + 1 });
        }
        visit(time(k + 1), &h);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn unit_linear() -> (VectorField, ParamFunction) {
        (
            VectorField::linear_test(1).unwrap(),
            ParamFunction::constant(&[1.0]).unwrap(),
        )
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let x = [0.5, -2.0];
        let fields = [
            VectorField::linear_test(2).unwrap(),
            VectorField::sigma_basis(2, Activation::Tanh).unwrap(),
        ];
        for field in &fields {
            let theta = ParamFunction::zeros(field.m()).unwrap();
            for cfg in [IntegrationConfig::euler(7), IntegrationConfig::rk4(7)] {
                assert_eq!(integrate(field, &theta, &x, &cfg).unwrap(), x.to_vec());
            }
        }
    }

    #[test]
    fn euler_linear_closed_form() {
        let (field, theta) = unit_linear();
        let out = integrate(&field, &theta, &[1.0], &IntegrationConfig::euler(1000)).unwrap()[0];
        assert!((out - 2.716923932235892).abs() < 1e-12);
    }

    #[test]
    fn rk4_linear_accuracy() {
        let (field, theta) = unit_linear();
        let out = integrate(&field, &theta, &[1.0], &IntegrationConfig::rk4(100)).unwrap()[0];
        assert!((out - E).abs() < 1e-8);
    }

    #[test]
    fn scalar_neural_ode_closed_form() {
        let c = 0.8;
        let w = Matrix::new(1, 1, vec![c]).unwrap();
        let field = neural_ode_field(&w, Activation::Identity).unwrap();
        let theta = constant_theta(&w).unwrap();
        let out = integrate(&field, &theta, &[1.5], &IntegrationConfig::euler(64)).unwrap()[0];
        assert!((out - 1.5 * (1.0 + c / 64.0).powi(64)).abs() < 1e-12);
    }

    #[test]
    fn relu_dead_regime_is_stationary() {
        let w = Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]).unwrap();
        let field = neural_ode_field(&w, Activation::Relu).unwrap();
        let theta = constant_theta(&w).unwrap();
        let x = [-0.3, -1.0];
        assert_eq!(integrate(&field, &theta, &x, &IntegrationConfig::rk4(20)).unwrap(), x.to_vec());
    }

    #[test]
    fn non_square_weight_rejected() {
        let w = Matrix::zeros(2, 3);
        assert!(matches!(
            neural_ode_field(&w, Activation::Relu),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mismatched_theta_rejected() {
        let field = VectorField::sigma_basis(2, Activation::Relu).unwrap();
        let theta = ParamFunction::zeros(3).unwrap();
        assert!(integrate(&field, &theta, &[0.0, 0.0], &IntegrationConfig::euler(2)).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let field = VectorField::linear_test(1).unwrap();
        let theta = ParamFunction::constant(&[1e6]).unwrap();
        match integrate(&field, &theta, &[1.0], &IntegrationConfig::euler(10)) {
            Err(Error::Divergence { step }) => assert_eq!(step, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn euler_first_order_convergence() {
        let (field, theta) = unit_linear();
        let mut constants = Vec::new();
        for l in [10, 100, 1000] {
            let euler = integrate(&field, &theta, &[1.0], &IntegrationConfig::euler(l)).unwrap()[0];
            let fine = integrate(&field, &theta, &[1.0], &IntegrationConfig::rk4(10 * l)).unwrap()[0];
            constants.push((fine - euler).abs() * l as f64);
        }
        for c in &constants {
            assert!((c - E / 2.0).abs() < 0.15, "{constants:?}");
        }
    }

    #[test]
    fn trajectory_endpoints() {
        let (field, theta) = unit_linear();
        let cfg = IntegrationConfig::euler(4);
        let traj = integrate_trajectory(&field, &theta, &[1.0], &cfg).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(traj.last(), integrate(&field, &theta, &[1.0], &cfg).unwrap().as_slice());
    }

    #[test]
    fn generic_components_sum() {
        let double = Component::new(|h, o| o.iter_mut().zip(h).for_each(|(o, h)| *o = 2.0 * h), 2.0, 1.0).unwrap();
        let shift = Component::new(|_, o| o.fill(1.0), 1.0, 1.0).unwrap();
        let field = VectorField::generic(2, vec![double, shift]).unwrap();
        let mut out = [0.0; 2];
        let mut scratch = [0.0; 2];
        field.apply(&[0.5, 3.0], &[1.0, -1.0], &mut out, &mut scratch);
        assert_eq!(out, [4.0, 2.0]);
        assert_eq!(field.lipschitz(), 2.0);
        assert!(Component::new(|_, _| {}, 0.0, 1.0).is_err());
    }
}
