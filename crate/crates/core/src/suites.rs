//! Randomized verification suites for the output and parameter-Lipschitz
//! estimates, the weight embedding and the backward pass.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certify::{ode_constants, resnet_constants};
use crate::error::{Error, Result};
use crate::lipfun::{distance_1_inf, embed_weights, random_member, ParamClassSpec, ParamFunction};
use crate::numerics::{norm2, Matrix};
use crate::odeflow::{integrate, Component, IntegrationConfig, VectorField};
use crate::resnet::{
    init_projection, iid_init, random_class_member, Activation, ResNetModel, WeightClassSpec, WeightTensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Prop2,
    Prop5,
    Isometry,
    Gradients,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Prop2 => "prop2",
            Suite::Prop5 => "prop5",
            Suite::Isometry => "isometry",
            Suite::Gradients => "gradients",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prop2" => Ok(Suite::Prop2),
            "prop5" => Ok(Suite::Prop5),
            "isometry" => Ok(Suite::Isometry),
            "gradients" => Ok(Suite::Gradients),
            other => Err(Error::invalid(format!("unknown suite `{other}`"))),
        }
    }
}

/// One inequality or equality checked over every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub checked: usize,
    pub violations: usize,
    /// Largest `measured / bound` for inequalities, largest error otherwise.
    pub worst: f64,
}

impl Check {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            checked: 0,
            violations: 0,
            worst: 0.0,
        }
    }

    /// Records `measured ≤ bound`.
    fn bound(&mut self, measured: f64, bound: f64) {
        self.checked += 1;
        if !(measured <= bound) {
            self.violations += 1;
        }
        if bound > 0.0 {
            self.worst = self.worst.max(measured / bound);
        } else if measured > 0.0 {
            self.worst = f64::INFINITY;
        }
    }

    /// Records `error ≤ tolerance`.
    fn error(&mut self, error: f64, tolerance: f64) {
        self.checked += 1;
        if !(error <= tolerance) {
            self.violations += 1;
        }
        self.worst = self.worst.max(error);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub samples: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.violations == 0 && c.checked > 0)
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }
}

pub fn run_suite(suite: Suite, samples: usize, seed: u64) -> Result<SuiteReport> {
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let checks = match suite {
        Suite::Prop2 => prop2(samples, seed)?,
        Suite::Prop5 => prop5(samples, seed)?,
        Suite::Isometry => isometry(samples, seed)?,
        Suite::Gradients => gradients(samples, seed)?,
    };
    Ok(SuiteReport {
        suite,
        samples,
        seed,
        checks,
    })
}

fn random_in_ball<R: Rng + ?Sized>(d: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm2(&x);
    let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v *= r / n);
    }
    x
}

/// `m` maps `h ↦ c tanh(A h + b)`, each with Lipschitz constant at most
/// `k_f` (via `‖A‖₂ ≤ ‖A‖_F`) and sup norm at most `c √d`.
fn random_tanh_field<R: Rng + ?Sized>(m: usize, d: usize, k_f: f64, rng: &mut R) -> Result<VectorField> {
    let mut components = Vec::with_capacity(m);
    for _ in 0..m {
        let a = Matrix::random_normal(d, d, 1.0, rng);
        let b: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let frob = a.frobenius().max(1e-12);
        let c = k_f * rng.gen_range(0.5..=1.0) / frob;
        let sup = c * (d as f64).sqrt();
        components.push(Component::new(
            move |h: &[f64], out: &mut [f64]| {
                for (i, o) in out.iter_mut().enumerate() {
                    let z: f64 = a.row(i).iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + b[i];
                    *o = c * z.tanh();
                }
            },
            c * frob,
            sup,
        )?);
    }
    VectorField::generic(d, components)
}

/// Output bound and parameter-Lipschitz bound for parameterized ODEs,
/// `m ≤ 4`, `d ≤ 8`, RK4 with 512 steps.
fn prop2(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut output = Check::new("output_bound");
    let mut lipschitz = Check::new("parameter_lipschitz");
    let cfg = IntegrationConfig::rk4(512);
    for _ in 0..samples {
        let m = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=8);
        let k_f = rng.gen_range(1.0..=2.0);
        let field = random_tanh_field(m, d, k_f, &mut rng)?;
        let spec = ParamClassSpec {
            m,
            r_theta: rng.gen_range(1.0..=2.0),
            k_theta: rng.gen_range(0.0..=4.0),
            k_f: field.lipschitz(),
            sup_f: field.sup().expect("tanh components are bounded"),
            r_x: rng.gen_range(0.5..=2.0),
            r_y: 1.0,
            k_loss: 1.0,
        };
        let constants = ode_constants(&spec)?;
        let theta = random_member(m, spec.r_theta, spec.k_theta, &mut rng)?;
        let other = random_member(m, spec.r_theta, spec.k_theta, &mut rng)?;
        let x = random_in_ball(d, spec.r_x, &mut rng);
        let a = integrate(&field, &theta, &x, &cfg)?;
        let b = integrate(&field, &other, &x, &cfg)?;
        output.bound(norm2(&a), constants.output_bound);
        output.bound(norm2(&b), constants.output_bound);
        let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        lipschitz.bound(norm2(&diff), constants.lipschitz * distance_1_inf(&theta, &other)?);
    }
    Ok(vec![output, lipschitz])
}

/// Output bound and parameter-Lipschitz bound for the residual network
/// without projections.
fn prop5(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut output = Check::new("output_bound");
    let mut lipschitz = Check::new("parameter_lipschitz");
    for _ in 0..samples {
        let d = rng.gen_range(1..=8);
        let depth = rng.gen_range(1..=64);
        let activation = if rng.gen::<bool>() {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let spec = WeightClassSpec {
            d,
            depth,
            r_w: rng.gen_range(0.25..=3.0),
            k_w: 1.0,
            k_sigma: activation.lipschitz(),
            r_x: rng.gen_range(0.5..=2.0),
            r_y: 1.0,
            k_loss: 1.0,
        };
        let constants = resnet_constants(&spec)?;
        let bandwidth = rng.gen_range(0.05..=1.0);
        let w = random_class_member(depth, d, spec.r_w, bandwidth, &mut rng)?;
        let v = random_class_member(depth, d, spec.r_w, bandwidth, &mut rng)?;
        let x = random_in_ball(d, spec.r_x, &mut rng);
        let a = ResNetModel::bare(w.clone(), activation).predict(&x)?;
        let b = ResNetModel::bare(v.clone(), activation).predict(&x)?;
        output.bound(norm2(&a), constants.output_bound);
        output.bound(norm2(&b), constants.output_bound);
        let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        let dist = w.combine(1.0, &v, -1.0)?.norm_11_inf();
        lipschitz.bound(norm2(&diff), constants.lipschitz * dist);
    }
    Ok(vec![output, lipschitz])
}

/// `φ` preserves the norm, is linear, maps the weight Lipschitz constant to
/// the path Lipschitz constant, and Euler integration of `φ(W)` is the
/// residual network.
fn isometry(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norm = Check::new("norm_preserved");
    let mut linear = Check::new("linearity");
    let mut lip = Check::new("lipschitz_scaled");
    let mut euler = Check::new("euler_equals_forward");
    for _ in 0..samples {
        let depth = rng.gen_range(1..=48);
        let d = rng.gen_range(1..=5);
        let w = iid_init(depth, d, rng.gen_range(0.1..=3.0), rng.gen())?;
        let v = iid_init(depth, d, rng.gen_range(0.1..=3.0), rng.gen())?;
        let (a, b) = (rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0));
        let pw = embed_weights(&w);

        let expected = w.norm_11_inf();
        norm.error((pw.norm_1_inf() - expected).abs() / expected.max(1.0), 1e-12);

        let lhs = embed_weights(&w.combine(a, &v, b)?);
        let rhs = pw.combine(a, &embed_weights(&v), b)?;
        linear.error(max_knot_gap(&lhs, &rhs) / expected.max(1.0), 1e-12);

        let scaled = crate::resnet::weight_lipschitz(&w) * depth as f64;
        lip.error((pw.lipschitz_constant() - scaled).abs() / scaled.max(1.0), 1e-12);

        let activation = if rng.gen::<bool>() {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let field = VectorField::sigma_basis(d, activation)?;
        let via_ode = integrate(&field, &pw, &x, &IntegrationConfig::euler(depth))?;
        let via_net = ResNetModel::bare(w, activation).predict(&x)?;
        let err = via_ode
            .iter()
            .zip(&via_net)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        euler.error(err, 1e-12);
    }
    Ok(vec![norm, linear, lip, euler])
}

fn max_knot_gap(f: &ParamFunction, g: &ParamFunction) -> f64 {
    (0..f.knots().len())
        .flat_map(|k| {
            f.knot_value(k)
                .iter()
                .zip(g.knot_value(k))
                .map(|(p, q)| (p - q).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences of `⟨F(x), u⟩` against `backward`, for a
/// tanh model with projections; plus tied/untied consistency.
fn gradients(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fd = Check::new("finite_difference");
    let mut tied = Check::new("tied_consistency");
    let h = 1e-5;
    for _ in 0..samples {
        let (p, d, q) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let depth = rng.gen_range(1..=8);
        let mut model = ResNetModel::new(
            Some(init_projection(d, p, &mut rng)),
            iid_init(depth, d, 2.0, rng.gen())?,
            Some(init_projection(q, d, &mut rng)),
            Activation::Tanh,
        )?;
        let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let u: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let grads = model.backward(&model.forward(&x)?, &u)?;
        let objective = |m: &ResNetModel| -> Result<f64> {
            Ok(m.predict(&x)?.iter().zip(&u).map(|(a, b)| a * b).sum())
        };

        let mut worst: f64 = 0.0;
        for i in 0..grads.core.len() {
            let orig = model.core.params()[i];
            model.core.params_mut()[i] = orig + h;
            let up = objective(&model)?;
            model.core.params_mut()[i] = orig - h;
            let down = objective(&model)?;
            model.core.params_mut()[i] = orig;
            worst = worst.max(relative_error(grads.core[i], (up - down) / (2.0 * h)));
        }
        for (which, g) in [(0, &grads.input_proj), (1, &grads.output_proj)] {
            let g = g.as_ref().expect("projections present");
            #[allow(clippy::needless_range_loop)]
            for i in 0..g.len() {
                let set = |m: &mut ResNetModel, v: f64| {
                    let proj = if which == 0 { &mut m.input_proj } else { &mut m.output_proj };
                    proj.as_mut().expect("projections present").as_mut_slice()[i] = v;
                };
                let proj = if which == 0 { &model.input_proj } else { &model.output_proj };
                let orig = proj.as_ref().expect("projections present").as_slice()[i];
                set(&mut model, orig + h);
                let up = objective(&model)?;
                set(&mut model, orig - h);
                let down = objective(&model)?;
                set(&mut model, orig);
                worst = worst.max(relative_error(g[i], (up - down) / (2.0 * h)));
            }
        }
        fd.error(worst, 1e-4);

        let shared = model.core.layer_matrix(0);
        let tied_model = ResNetModel {
            core: WeightTensor::tied(depth, &shared)?,
            ..model.clone()
        };
        let untied_model = ResNetModel {
            core: tied_model.core.untied(),
            ..model.clone()
        };
        let ft = tied_model.forward(&x)?;
        let fu = untied_model.forward(&x)?;
        let mut err = ft
            .output
            .iter()
            .zip(&fu.output)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let gt = tied_model.backward(&ft, &u)?;
        let gu = untied_model.backward(&fu, &u)?;
        let dd = d * d;
        for j in 0..dd {
            let sum: f64 = (0..depth).map(|k| gu.core[k * dd + j]).sum();
            err = err.max((gt.core[j] - sum).abs());
        }
        tied.error(err, 1e-12);
    }
    Ok(vec![fd, tied])
}
