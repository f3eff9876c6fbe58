//! Closed-form generalization certificates.
//!
//! Every bound is returned as a [`BoundReport`] carrying its constant `B`,
//! the additive terms of the right-hand side (the empirical risk excluded),
//! and the sample-size and shape preconditions under which it holds.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::lipfun::ParamClassSpec;
use crate::numerics::{norm_21, spectral_norm_default, Matrix};
use crate::resnet::{WeightClassSpec, WeightTensor};

/// `K_ℓ` for cross-entropy over softmax: the logit gradient
/// `softmax − onehot` has Euclidean norm at most `√2`.
pub const CROSS_ENTROPY_K_LOSS: f64 = SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub name: String,
    pub satisfied: bool,
    pub measured: f64,
    pub required: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    #[serde(rename = "B")]
    pub b: f64,
    pub terms: Vec<Term>,
    pub total: f64,
    pub preconditions: Vec<Precondition>,
    pub inputs_echo: Value,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl BoundReport {
    fn new(
        name: &str,
        b: f64,
        terms: Vec<(&str, f64)>,
        preconditions: Vec<Precondition>,
        inputs_echo: Value,
    ) -> Self {
        let terms: Vec<Term> = terms
            .into_iter()
            .map(|(name, value)| Term {
                name: name.to_string(),
                value,
            })
            .collect();
        let total = terms.iter().map(|t| t.value).sum();
        let valid = preconditions.iter().all(|p| p.satisfied);
        Self {
            bound_name: name.to_string(),
            b,
            terms,
            total,
            preconditions,
            inputs_echo,
            valid,
            notes: Vec::new(),
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn failing(&self) -> impl Iterator<Item = &Precondition> {
        self.preconditions.iter().filter(|p| !p.satisfied)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn at_least(name: &str, measured: f64, required: f64) -> Precondition {
    Precondition {
        name: name.to_string(),
        satisfied: measured >= required,
        measured,
        required,
    }
}

fn check_sample(n: u64, delta: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok((n as f64, (1.0 / delta).ln()))
}

/// Certificate for the class of parameterized ODEs:
///
/// ```text
/// B = 6 K_ℓ K_f e^{K_f R}(R_X + M R e^{K_f R} + R_Y)
/// B √((m+1) log(R m n)/n) + B m √K_Θ / n^{1/4} + (B/√n) √log(1/δ)
/// ```
///
/// valid for `n ≥ 9 max(m⁻²R⁻², 1)`.
pub fn bound_param_ode(spec: &ParamClassSpec, n: u64, delta: f64) -> Result<BoundReport> {
    spec.validate()?;
    let (nf, log_delta) = check_sample(n, delta)?;
    let m = spec.m as f64;
    let r = spec.r_theta;
    let growth = (spec.k_f * r).exp();
    let b = 6.0 * spec.k_loss * spec.k_f * growth * (spec.r_x + spec.sup_f * r * growth + spec.r_y);
    let terms = vec![
        ("complexity", b * ((m + 1.0) * (r * m * nf).ln() / nf).sqrt()),
        ("lipschitz_class", b * m * spec.k_theta.sqrt() / nf.powf(0.25)),
        ("confidence", b / nf.sqrt() * log_delta.sqrt()),
    ];
    let pre = vec![at_least(
        "n >= 9 max(m^-2 R_Theta^-2, 1)",
        nf,
        9.0 * (1.0 / (m * m * r * r)).max(1.0),
    )];
    let mut report = BoundReport::new(
        "param_ode",
        b,
        terms,
        pre,
        json!({ "spec": spec, "n": n, "delta": delta }),
    );
    if spec.k_f < 1.0 || r < 1.0 {
        report
            .notes
            .push("the parameter-Lipschitz estimate behind B assumes K_f >= 1 and R_Theta >= 1".into());
    }
    Ok(report)
}

/// Constants of the time-independent neural ODE `dH_t = W σ(H_t) dt` with
/// `‖W‖_{1,1} ≤ R_W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralOdeSpec {
    pub d: usize,
    #[serde(rename = "R_W")]
    pub r_w: f64,
    #[serde(rename = "K_sigma")]
    pub k_sigma: f64,
    #[serde(rename = "M")]
    pub sup_f: f64,
    #[serde(rename = "R_X")]
    pub r_x: f64,
    #[serde(rename = "R_Y")]
    pub r_y: f64,
    #[serde(rename = "K_loss")]
    pub k_loss: f64,
}

impl NeuralOdeSpec {
    pub fn unit(d: usize) -> Self {
        Self {
            d,
            r_w: 1.0,
            k_sigma: 1.0,
            sup_f: 1.0,
            r_x: 1.0,
            r_y: 1.0,
            k_loss: 1.0,
        }
    }

    /// The same class seen as a parameterized ODE with `m = d²` constant
    /// parameters.
    pub fn as_param_class(&self) -> ParamClassSpec {
        ParamClassSpec {
            m: self.d * self.d,
            r_theta: self.r_w,
            k_theta: 0.0,
            k_f: self.k_sigma,
            sup_f: self.sup_f,
            r_x: self.r_x,
            r_y: self.r_y,
            k_loss: self.k_loss,
        }
    }
}

/// Certificate for time-independent neural ODEs:
///
/// ```text
/// B = 6√2 K_ℓ K_σ e^{K_σ R_W}(R_X + M R_W e^{K_σ R_W} + R_Y)
/// B (d+1) √(log(R_W d n)/n) + (B/√n) √log(1/δ)
/// ```
pub fn bound_neural_ode(spec: &NeuralOdeSpec, n: u64, delta: f64) -> Result<BoundReport> {
    spec.as_param_class().validate()?;
    let (nf, log_delta) = check_sample(n, delta)?;
    let d = spec.d as f64;
    let r = spec.r_w;
    let growth = (spec.k_sigma * r).exp();
    let b = 6.0 * SQRT_2 * spec.k_loss * spec.k_sigma * growth * (spec.r_x + spec.sup_f * r * growth + spec.r_y);
    let terms = vec![
        ("complexity", b * (d + 1.0) * ((r * d * nf).ln() / nf).sqrt()),
        ("confidence", b / nf.sqrt() * log_delta.sqrt()),
    ];
    let pre = vec![width_threshold(nf, d, r)];
    Ok(BoundReport::new(
        "neural_ode",
        b,
        terms,
        pre,
        json!({ "spec": spec, "n": n, "delta": delta }),
    ))
}

fn width_threshold(nf: f64, d: f64, r: f64) -> Precondition {
    at_least(
        "n >= 9 R_W^-1 max(d^-4 R_W^-1, 1)",
        nf,
        9.0 / r * (1.0 / (d.powi(4) * r)).max(1.0),
    )
}

/// Certificate for the `1/L`-scaled residual network class:
///
/// ```text
/// B = 6√2 K_ℓ max(e^{K_σ R_W}/R_W, 1)(R_X e^{K_σ R_W} + R_Y)
/// B (d+1) √(log(R_W d n)/n) + B d² √K_W / n^{1/4} + (B/√n) √log(1/δ)
/// ```
///
/// The depth `L` enters neither `B` nor any term.
pub fn bound_resnet(spec: &WeightClassSpec, n: u64, delta: f64) -> Result<BoundReport> {
    spec.validate()?;
    let (nf, log_delta) = check_sample(n, delta)?;
    let d = spec.d as f64;
    let r = spec.r_w;
    let growth = (spec.k_sigma * r).exp();
    let b = 6.0 * SQRT_2 * spec.k_loss * (growth / r).max(1.0) * (spec.r_x * growth + spec.r_y);
    let terms = vec![
        ("complexity", b * (d + 1.0) * ((r * d * nf).ln() / nf).sqrt()),
        ("lipschitz_class", b * d * d * spec.k_w.sqrt() / nf.powf(0.25)),
        ("confidence", b / nf.sqrt() * log_delta.sqrt()),
    ];
    let pre = vec![width_threshold(nf, d, r)];
    let mut report = BoundReport::new(
        "resnet",
        b,
        terms,
        pre,
        json!({ "spec": spec, "n": n, "delta": delta }),
    );
    report.notes.push("independent of the depth L".into());
    Ok(report)
}

/// `log ∏_k ‖I + W_k/L‖₂` and `Σ_k ‖W_kᵀ‖_{2,1}^{2/3} / (L^{2/3} ‖I + W_k/L‖₂^{2/3})`.
fn bartlett_parts(w: &WeightTensor) -> Result<(f64, f64)> {
    let (depth, d) = (w.depth(), w.width());
    let lf = depth as f64;
    let mut log_product = 0.0;
    let mut sum = 0.0;
    let mut shifted = Matrix::identity(d);
    for k in 0..depth {
        let layer = w.layer_matrix(k);
        for (s, (i, x)) in shifted.as_mut_slice().iter_mut().zip(layer.as_slice().iter().enumerate()) {
            *s = if i / d == i % d { 1.0 } else { 0.0 } + x / lf;
        }
        let spectral = spectral_norm_default(&shifted)?;
        log_product += spectral.ln();
        let n21 = norm_21(&layer.transpose())?;
        sum += n21.powf(2.0 / 3.0) / (lf.powf(2.0 / 3.0) * spectral.powf(2.0 / 3.0));
    }
    Ok((log_product, sum))
}

/// The spectral complexity
/// `A(W) = ∏_k ‖I + W_k/L‖ · (Σ_k ‖W_kᵀ‖_{2,1}^{2/3} / (L^{2/3}‖I + W_k/L‖^{2/3}))^{3/2}`,
/// accumulated in the log domain.
pub fn spectral_complexity(w: &WeightTensor) -> Result<f64> {
    let (log_product, sum) = bartlett_parts(w)?;
    if sum == 0.0 {
        return Ok(0.0);
    }
    Ok((log_product + 1.5 * sum.ln()).exp())
}

/// `2 R_W e^{R_W} √L`, the class-level majorant of [`spectral_complexity`].
pub fn spectral_complexity_majorant(r_w: f64, depth: usize) -> f64 {
    2.0 * r_w * r_w.exp() * (depth as f64).sqrt()
}

fn bartlett_report(
    name: &str,
    a: f64,
    r_x: f64,
    d: usize,
    depth: usize,
    r_w: f64,
    gamma: f64,
    n: u64,
    delta: f64,
    echo: Value,
) -> Result<BoundReport> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if !(r_x > 0.0 && r_x.is_finite()) {
        return Err(Error::invalid(format!("R_X must be positive, got {r_x}")));
    }
    let (nf, log_delta) = check_sample(n, delta)?;
    let terms = vec![
        ("spectral_complexity", r_x * a * (d as f64).ln() / (gamma * nf.sqrt())),
        ("confidence", log_delta.sqrt() / nf.sqrt()),
    ];
    let pre = vec![at_least("L >= R_W", depth as f64, r_w)];
    let mut report = BoundReport::new(name, a, terms, pre, echo);
    report
        .notes
        .push("shape-only comparison: the universal constant C is set to 1".into());
    Ok(report)
}

/// Spectrally-normalized margin bound evaluated on a concrete tensor;
/// `B` holds `A(W)`.
pub fn bound_bartlett_tensor(
    w: &WeightTensor,
    r_x: f64,
    gamma: f64,
    n: u64,
    delta: f64,
) -> Result<BoundReport> {
    let a = spectral_complexity(w)?;
    let r_w = w.norm_11_inf();
    let echo = json!({
        "d": w.width(), "L": w.depth(), "R_W": r_w, "R_X": r_x,
        "gamma": gamma, "n": n, "delta": delta,
    });
    bartlett_report("bartlett", a, r_x, w.width(), w.depth(), r_w, gamma, n, delta, echo)
}

/// The same bound with `A(W)` replaced by `2 R_W e^{R_W} √L`; needs `K_σ = 1`.
pub fn bound_bartlett_spec(spec: &WeightClassSpec, gamma: f64, n: u64, delta: f64) -> Result<BoundReport> {
    spec.validate()?;
    let a = spectral_complexity_majorant(spec.r_w, spec.depth);
    let echo = json!({ "spec": spec, "gamma": gamma, "n": n, "delta": delta });
    let mut report =
        bartlett_report("bartlett_spec", a, spec.r_x, spec.d, spec.depth, spec.r_w, gamma, n, delta, echo)?;
    report.preconditions.push(Precondition {
        name: "K_sigma == 1".into(),
        satisfied: spec.k_sigma == 1.0,
        measured: spec.k_sigma,
        required: 1.0,
    });
    report.valid = report.preconditions.iter().all(|p| p.satisfied);
    Ok(report)
}

/// Frobenius-product diagnostic for the residual parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GolowichRecord {
    /// `log ∏_k ‖I + W_k/L‖_F`
    pub log_product: f64,
    /// `L log(√d − R_W/L)` with `R_W = ‖W‖_{1,1,∞}`; `None` when `√d ≤ R_W/L`.
    pub lower_bound: Option<f64>,
    /// `(L/2) log d − R_W/√d`
    pub approximation: f64,
    pub r_w: f64,
}

pub fn golowich_product(w: &WeightTensor) -> GolowichRecord {
    let (depth, d) = (w.depth(), w.width());
    let lf = depth as f64;
    let log_product = (0..depth)
        .map(|k| {
            let sq: f64 = w
                .layer(k)
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let v = if i / d == i % d { 1.0 } else { 0.0 } + x / lf;
                    v * v
                })
                .sum();
            0.5 * sq.ln()
        })
        .sum();
    let r_w = w.norm_11_inf();
    let sqrt_d = (d as f64).sqrt();
    let gap = sqrt_d - r_w / lf;
    GolowichRecord {
        log_product,
        lower_bound: (gap > 0.0).then(|| lf * gap.ln()),
        approximation: lf / 2.0 * (d as f64).ln() - r_w / sqrt_d,
        r_w,
    }
}

/// Output bound and parameter-Lipschitz constant of a model class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropConstants {
    pub output_bound: f64,
    pub lipschitz: f64,
}

/// `‖F_θ(x)‖ ≤ R_X + M R e^{K_f R}` and
/// `‖F_θ(x) − F_θ̃(x)‖ ≤ 2 M K_f R e^{2 K_f R} ‖θ − θ̃‖_{1,∞}`.
pub fn ode_constants(spec: &ParamClassSpec) -> Result<PropConstants> {
    spec.validate()?;
    let (r, k) = (spec.r_theta, spec.k_f);
    Ok(PropConstants {
        output_bound: spec.r_x + spec.sup_f * r * (k * r).exp(),
        lipschitz: 2.0 * spec.sup_f * k * r * (2.0 * k * r).exp(),
    })
}

/// `‖F_W(x)‖ ≤ R_X e^{K_σ R_W}` and
/// `‖F_W(x) − F_W̃(x)‖ ≤ (R_X/R_W) e^{2 K_σ R_W} ‖W − W̃‖_{1,1,∞}`.
pub fn resnet_constants(spec: &WeightClassSpec) -> Result<PropConstants> {
    spec.validate()?;
    let (r, k) = (spec.r_w, spec.k_sigma);
    Ok(PropConstants {
        output_bound: spec.r_x * (k * r).exp(),
        lipschitz: spec.r_x / r * (2.0 * k * r).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::smooth_init;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn unit_constants() {
        let ode = bound_param_ode(&ParamClassSpec::unit(1), 1000, 0.1).unwrap();
        assert!(rel(ode.b, 76.95371853509244) < 1e-12);
        let node = bound_neural_ode(&NeuralOdeSpec::unit(1), 1000, 0.1).unwrap();
        assert!(rel(node.b, 108.82899242736956) < 1e-12);
        let res = bound_resnet(&WeightClassSpec::unit(2, 10), 1000, 0.1).unwrap();
        assert!(rel(res.b, 85.76360625841486) < 1e-12);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let r = bound_param_ode(&ParamClassSpec::unit(3), 5000, 0.05).unwrap();
        let sum: f64 = r.terms.iter().map(|t| t.value).sum();
        assert_eq!(r.total, sum);
        assert!(r.valid);
    }

    #[test]
    fn zero_lipschitz_class_drops_slow_term() {
        let spec = ParamClassSpec {
            k_theta: 0.0,
            ..ParamClassSpec::unit(2)
        };
        assert_eq!(bound_param_ode(&spec, 100, 0.1).unwrap().term("lipschitz_class"), Some(0.0));
        let wspec = WeightClassSpec {
            k_w: 0.0,
            ..WeightClassSpec::unit(3, 5)
        };
        assert_eq!(bound_resnet(&wspec, 100, 0.1).unwrap().term("lipschitz_class"), Some(0.0));
    }

    #[test]
    fn sample_threshold_flagged() {
        let r = bound_param_ode(&ParamClassSpec::unit(1), 8, 0.1).unwrap();
        assert!(!r.valid);
        let failing: Vec<_> = r.failing().collect();
        assert_eq!(failing.len(), 1);
        assert!(failing[0].name.starts_with("n >="));
        assert_eq!(failing[0].required, 9.0);
    }

    #[test]
    fn bad_delta_rejected() {
        assert!(bound_param_ode(&ParamClassSpec::unit(1), 100, 1.5).is_err());
        assert!(bound_resnet(&WeightClassSpec::unit(1, 1), 100, 0.0).is_err());
    }

    #[test]
    fn neural_ode_smallest_width() {
        let r = bound_neural_ode(&NeuralOdeSpec::unit(1), 400, 0.1).unwrap();
        let expected = 2.0 * r.b * ((400f64).ln() / 400.0).sqrt();
        assert!(rel(r.term("complexity").unwrap(), expected) < 1e-14);
        assert!(r.term("lipschitz_class").is_none());
    }

    #[test]
    fn depth_does_not_enter() {
        let a = bound_resnet(&WeightClassSpec::unit(4, 100), 10_000, 0.1).unwrap();
        let b = bound_resnet(&WeightClassSpec::unit(4, 10_000), 10_000, 0.1).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn json_field_names() {
        let r = bound_resnet(&WeightClassSpec::unit(2, 3), 1_000_000, 0.1).unwrap();
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["bound_name", "B", "terms", "total", "preconditions", "inputs_echo"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["inputs_echo"]["spec"]["R_W"], 1.0);
    }

    #[test]
    fn bartlett_zero_tensor() {
        let w = WeightTensor::zeros(8, 3).unwrap();
        let r = bound_bartlett_tensor(&w, 1.0, 1.0, 100, 0.1).unwrap();
        assert_eq!(r.b, 0.0);
        assert_eq!(r.term("spectral_complexity"), Some(0.0));
    }

    #[test]
    fn bartlett_spec_scales_with_sqrt_depth() {
        let at = |depth| {
            let spec = WeightClassSpec::unit(3, depth);
            bound_bartlett_spec(&spec, 1.0, 100, 0.1).unwrap().term("spectral_complexity").unwrap()
        };
        assert!(rel(at(400), 2.0 * at(100)) < 1e-14);
        let spec = WeightClassSpec::unit(3, 1);
        assert!(rel(bound_bartlett_spec(&spec, 1.0, 10, 0.5).unwrap().b, 2.0 * std::f64::consts::E) < 1e-15);
    }

    #[test]
    fn bartlett_depth_assumption() {
        let spec = WeightClassSpec {
            r_w: 5.0,
            ..WeightClassSpec::unit(2, 3)
        };
        let r = bound_bartlett_spec(&spec, 1.0, 100, 0.1).unwrap();
        assert!(!r.valid);
        assert_eq!(r.failing().next().unwrap().name, "L >= R_W");
    }

    #[test]
    fn golowich_zero_tensor() {
        let w = WeightTensor::zeros(7, 4).unwrap();
        let g = golowich_product(&w);
        assert!((g.log_product - 7.0 * 2f64.ln()).abs() < 1e-14);
        assert_eq!(g.lower_bound, Some(g.log_product));
    }

    #[test]
    fn golowich_undefined_bound() {
        let w = WeightTensor::new(1, 1, vec![5.0]).unwrap();
        assert!(golowich_product(&w).lower_bound.is_none());
    }

    #[test]
    fn golowich_lower_bound_holds() {
        for seed in 0..10 {
            let w = smooth_init(50, 9, 0.1, seed).unwrap();
            let g = golowich_product(&w);
            assert!(g.log_product >= g.lower_bound.unwrap());
        }
    }

    #[test]
    fn prop_constant_values() {
        let ode = ode_constants(&ParamClassSpec::unit(1)).unwrap();
        assert!(rel(ode.output_bound, 3.718281828459045) < 1e-15);
        assert!(rel(ode.lipschitz, 14.7781121978613) < 1e-14);
        let res = resnet_constants(&WeightClassSpec::unit(1, 1)).unwrap();
        assert!(rel(res.output_bound, std::f64::consts::E) < 1e-15);
        assert!(rel(res.lipschitz, 7.38905609893065) < 1e-14);
        let zero_field = ParamClassSpec {
            sup_f: 0.0,
            ..ParamClassSpec::unit(1)
        };
        assert_eq!(ode_constants(&zero_field).unwrap().output_bound, 1.0);
    }
}
