//! The `1/L`-scaled residual network
//!
//! ```text
//! H_0 = A x,   H_{k+1} = H_k + (1/L) W_{k+1} σ(H_k),   F(x) = B H_L
//! ```
//!
//! with reverse-mode gradients, smooth-in-depth and i.i.d. initializations,
//! the weight-difference penalties and membership in the constrained class
//! `{‖W‖_{1,1,∞} ≤ R_W, ‖W_{k+1} − W_k‖_∞ ≤ K_W/L}`.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipfun::within;
use crate::numerics::{matvec_into, matvec_t_into, max_abs, norm1, GpPathSpec, GpSampler, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative; the ReLU derivative at 0 is taken to be 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Depth-indexed stack of `d × d` matrices `W_1 … W_L`, row-major per layer.
///
/// A weight-tied tensor stores a single matrix that every layer shares.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    depth: usize,
    d: usize,
    tied: bool,
    data: Vec<f64>,
}

impl WeightTensor {
    pub fn new(depth: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if depth == 0 || d == 0 {
            return Err(Error::invalid("depth and width must be at least 1"));
        }
        if data.len() != depth * d * d {
            return Err(Error::invalid(format!(
                "expected {} entries for L = {depth}, d = {d}, got {}",
                depth * d * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(Self {
            depth,
            d,
            tied: false,
            data,
        })
    }

    pub fn from_layers(layers: &[Matrix]) -> Result<Self> {
        let d = layers.first().map_or(0, Matrix::rows);
        if layers.iter().any(|m| m.rows() != d || m.cols() != d) {
            return Err(Error::invalid("every layer must be d x d"));
        }
        Self::new(
            layers.len(),
            d,
            layers.iter().flat_map(|m| m.as_slice().iter().copied()).collect(),
        )
    }

    /// All `depth` layers share `shared`.
    pub fn tied(depth: usize, shared: &Matrix) -> Result<Self> {
        if depth == 0 || shared.is_empty() || !shared.is_square() {
            return Err(Error::invalid("tied tensor needs depth >= 1 and a square matrix"));
        }
        Ok(Self {
            depth,
            d: shared.rows(),
            tied: true,
            data: shared.as_slice().to_vec(),
        })
    }

    pub fn zeros(depth: usize, d: usize) -> Result<Self> {
        Self::new(depth, d, vec![0.0; depth * d * d])
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    /// `W_{k+1}` for `k` in `0..depth`.
    #[inline]
    pub fn layer(&self, k: usize) -> &[f64] {
        assert!(k < self.depth, "layer {k} out of range");
        let dd = self.d * self.d;
        if self.tied {
            &self.data
        } else {
            &self.data[k * dd..(k + 1) * dd]
        }
    }

    pub fn layer_matrix(&self, k: usize) -> Matrix {
        Matrix::new(self.d, self.d, self.layer(k).to_vec()).expect("layer is finite")
    }

    /// Stored parameters: one matrix when tied, `depth` matrices otherwise.
    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `‖W‖_{1,1,∞} = max_k Σ_{ij} |W_{k,ij}|`.
    pub fn norm_11_inf(&self) -> f64 {
        self.data
            .chunks(self.d * self.d)
            .map(norm1)
            .fold(0.0, f64::max)
    }

    /// An untied copy with every layer materialized.
    pub fn untied(&self) -> Self {
        if !self.tied {
            return self.clone();
        }
        Self {
            depth: self.depth,
            d: self.d,
            tied: false,
            data: self.data.repeat(self.depth),
        }
    }

    /// Layer-wise `a·self + b·other` (always untied).
    pub fn combine(&self, a: f64, other: &WeightTensor, b: f64) -> Result<Self> {
        if self.depth != other.depth || self.d != other.d {
            return Err(Error::invalid("tensor shape mismatch"));
        }
        let (x, y) = (self.untied(), other.untied());
        Self::new(
            self.depth,
            self.d,
            x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect(),
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub const MAGIC: [u8; 4] = *b"ODRN";
    pub const FORMAT_VERSION: u32 = 1;

    /// Binary layout: `"ODRN"`, version, `L`, `d` as little-endian `u32`,
    /// then `L·d·d` little-endian `f64`, row-major per layer. Tied tensors
    /// are written with every layer materialized.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        let to_u32 = |v: usize| {
            u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))
        };
        w.write_all(&Self::MAGIC)?;
        w.write_all(&Self::FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&to_u32(self.depth)?.to_le_bytes())?;
        w.write_all(&to_u32(self.d)?.to_le_bytes())?;
        for k in 0..self.depth {
            for v in self.layer(k) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.depth * self.d * self.d * 8);
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let format = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 16 {
            return Err(format(bytes.len(), "truncated header".into()));
        }
        if bytes[..4] != Self::MAGIC {
            return Err(format(
                0,
                format!("expected magic {:?}, found {:?}", Self::MAGIC, &bytes[..4]),
            ));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != Self::FORMAT_VERSION {
            return Err(format(4, format!("unsupported version {version}")));
        }
        let (depth, d) = (word(8) as usize, word(12) as usize);
        if depth == 0 || d == 0 {
            return Err(format(8, format!("invalid shape L = {depth}, d = {d}")));
        }
        let expected = depth
            .checked_mul(d * d)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| format(8, "shape overflows".into()))?;
        if bytes.len() != expected {
            return Err(format(
                bytes.len().min(expected),
                format!(
                    "L = {depth}, d = {d} needs {expected} bytes, file has {}",
                    bytes.len()
                ),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(depth, d, data)
    }
}

/// Largest entrywise change between consecutive layers,
/// `max_k ‖W_{k+1} − W_k‖_∞`; zero for a single layer or a tied tensor.
pub fn weight_lipschitz(w: &WeightTensor) -> f64 {
    if w.tied || w.depth < 2 {
        return 0.0;
    }
    (0..w.depth - 1)
        .map(|k| {
            w.layer(k + 1)
                .iter()
                .zip(w.layer(k))
                .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()))
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `(Σ_k ‖ΔW_k‖_F²)^{1/2}`
    FrobL2,
    /// `max_k ‖ΔW_k‖_∞`
    MaxMax,
    /// `(Σ_k ‖ΔW_k‖_∞²)^{1/2}`
    MaxnormL2,
}

impl PenaltyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyKind::FrobL2 => "frob_l2",
            PenaltyKind::MaxMax => "max_max",
            PenaltyKind::MaxnormL2 => "maxnorm_l2",
        }
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frob_l2" => Ok(PenaltyKind::FrobL2),
            "max_max" => Ok(PenaltyKind::MaxMax),
            "maxnorm_l2" => Ok(PenaltyKind::MaxnormL2),
            other => Err(Error::invalid(format!("unknown penalty kind `{other}`"))),
        }
    }
}

pub fn penalty(w: &WeightTensor, kind: PenaltyKind) -> f64 {
    penalty_with_grad(w, kind).0
}

/// Penalty value and a (sub)gradient laid out like [`WeightTensor::params`].
///
/// Ties in the max-norms resolve to the first maximizing entry; at a zero
/// penalty the gradient is zero.
pub fn penalty_with_grad(w: &WeightTensor, kind: PenaltyKind) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.data.len()];
    if w.tied || w.depth < 2 {
        return (0.0, grad);
    }
    let dd = w.d * w.d;
    let diffs: Vec<Vec<f64>> = (0..w.depth - 1)
        .map(|k| w.layer(k + 1).iter().zip(w.layer(k)).map(|(a, b)| a - b).collect())
        .collect();
    // dP/dΔ_k, then scattered: +dΔ_k into W_{k+1}, −dΔ_k into W_k.
    let mut scatter = |k: usize, idx: usize, g: f64| {
        grad[(k + 1) * dd + idx] += g;
        grad[k * dd + idx] -= g;
    };
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() {
                best = i;
            }
        }
        best
    };
    match kind {
        PenaltyKind::FrobL2 => {
            let value = diffs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if value > 0.0 {
                for (k, diff) in diffs.iter().enumerate() {
                    for (idx, x) in diff.iter().enumerate() {
                        scatter(k, idx, x / value);
                    }
                }
            }
            (value, grad)
        }
        PenaltyKind::MaxMax => {
            let norms: Vec<f64> = diffs.iter().map(|d| max_abs(d)).collect();
            let k = argmax(&norms);
            let value = norms[k];
            if value > 0.0 {
                let idx = argmax(&diffs[k]);
                scatter(k, idx, diffs[k][idx].signum());
            }
            (value, grad)
        }
        PenaltyKind::MaxnormL2 => {
            let norms: Vec<f64> = diffs.iter().map(|d| max_abs(d)).collect();
            let value = norms.iter().map(|x| x * x).sum::<f64>().sqrt();
            if value > 0.0 {
                for (k, diff) in diffs.iter().enumerate() {
                    if norms[k] > 0.0 {
                        let idx = argmax(diff);
                        scatter(k, idx, norms[k] / value * diff[idx].signum());
                    }
                }
            }
            (value, grad)
        }
    }
}

/// Constants of the constrained weight class and the data/loss scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightClassSpec {
    pub d: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "R_W")]
    pub r_w: f64,
    #[serde(rename = "K_W")]
    pub k_w: f64,
    #[serde(rename = "K_sigma")]
    pub k_sigma: f64,
    #[serde(rename = "R_X")]
    pub r_x: f64,
    #[serde(rename = "R_Y")]
    pub r_y: f64,
    #[serde(rename = "K_loss")]
    pub k_loss: f64,
}

impl WeightClassSpec {
    pub fn unit(d: usize, depth: usize) -> Self {
        Self {
            d,
            depth,
            r_w: 1.0,
            k_w: 1.0,
            k_sigma: 1.0,
            r_x: 1.0,
            r_y: 1.0,
            k_loss: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.depth == 0 {
            return Err(Error::invalid("d and L must be at least 1"));
        }
        let positive = [
            ("R_W", self.r_w),
            ("K_sigma", self.k_sigma),
            ("R_X", self.r_x),
            ("R_Y", self.r_y),
            ("K_loss", self.k_loss),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.k_w >= 0.0 && self.k_w.is_finite()) {
            return Err(Error::invalid(format!("K_W must be nonnegative, got {}", self.k_w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassReport {
    /// `‖W‖_{1,1,∞}`
    pub norm: f64,
    /// `L · max_k ‖W_{k+1} − W_k‖_∞`, compared against `K_W`.
    pub scaled_lipschitz: f64,
    pub within_norm: bool,
    pub within_lipschitz: bool,
}

impl ClassReport {
    pub fn is_member(&self) -> bool {
        self.within_norm && self.within_lipschitz
    }
}

pub fn check_class(w: &WeightTensor, spec: &WeightClassSpec) -> Result<ClassReport> {
    if w.depth != spec.depth || w.d != spec.d {
        return Err(Error::invalid(format!(
            "tensor is L = {}, d = {}; class is L = {}, d = {}",
            w.depth, w.d, spec.depth, spec.d
        )));
    }
    let norm = w.norm_11_inf();
    let scaled_lipschitz = weight_lipschitz(w) * w.depth as f64;
    Ok(ClassReport {
        norm,
        scaled_lipschitz,
        within_norm: within(norm, spec.r_w),
        within_lipschitz: within(scaled_lipschitz, spec.k_w),
    })
}

/// `W_{k,ij} = f_{ij}(k/L)/√d` with independent RBF Gaussian-process paths
/// `f_{ij}` (entries drawn in row-major order).
pub fn smooth_init(depth: usize, d: usize, bandwidth: f64, seed: u64) -> Result<WeightTensor> {
    if depth == 0 || d == 0 {
        return Err(Error::invalid("depth and width must be at least 1"));
    }
    let sampler = GpSampler::new(depth, bandwidth, GpPathSpec::DEFAULT_JITTER)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dd = d * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = vec![0.0; depth * dd];
    for entry in 0..dd {
        for (k, v) in sampler.sample(&mut rng).into_iter().enumerate() {
            data[k * dd + entry] = v * scale;
        }
    }
    WeightTensor::new(depth, d, data)
}

/// I.i.d. `N(0, scale²/d)` entries.
pub fn iid_init(depth: usize, d: usize, scale: f64, seed: u64) -> Result<WeightTensor> {
    if depth == 0 || d == 0 {
        return Err(Error::invalid("depth and width must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = scale / (d as f64).sqrt();
    let data = (0..depth * d * d)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    WeightTensor::new(depth, d, data)
}

/// A random member of `{‖W‖_{1,1,∞} ≤ R_W}`: a smooth-in-depth tensor
/// rescaled to `‖W‖_{1,1,∞} = u·R_W` with `u` uniform in `(0, 1]`.
pub fn random_class_member<R: Rng + ?Sized>(
    depth: usize,
    d: usize,
    r_w: f64,
    bandwidth: f64,
    rng: &mut R,
) -> Result<WeightTensor> {
    if !(r_w > 0.0 && r_w.is_finite()) {
        return Err(Error::invalid(format!("R_W must be positive, got {r_w}")));
    }
    let w = smooth_init(depth, d, bandwidth, rng.gen())?;
    let norm = w.norm_11_inf();
    if norm == 0.0 {
        return Ok(w);
    }
    let u = 1.0 - rng.gen::<f64>();
    Ok(w.scaled(u * r_w / norm))
}

/// A projection with i.i.d. `N(0, 1/cols)` entries.
pub fn init_projection<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNetModel {
    /// `A`, `d × p`.
    pub input_proj: Option<Matrix>,
    pub core: WeightTensor,
    /// `B`, `q × d`.
    pub output_proj: Option<Matrix>,
    pub activation: Activation,
    pub train_projections: bool,
}

/// Layer states `H_0 … H_L` of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `(L + 1) × d`, row-major.
    pub states: Vec<f64>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    pub fn state(&self, k: usize, d: usize) -> &[f64] {
        &self.states[k * d..(k + 1) * d]
    }
}

/// Gradients laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub core: Vec<f64>,
    pub input_proj: Option<Vec<f64>>,
    pub output_proj: Option<Vec<f64>>,
}

impl ModelGradients {
    pub fn zeros_like(model: &ResNetModel) -> Self {
        Self {
            core: vec![0.0; model.core.params().len()],
            input_proj: model.input_proj.as_ref().map(|a| vec![0.0; a.as_slice().len()]),
            output_proj: model.output_proj.as_ref().map(|b| vec![0.0; b.as_slice().len()]),
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGradients, s: f64) {
        fn axpy(y: &mut [f64], x: &[f64], s: f64) {
            for (a, b) in y.iter_mut().zip(x) {
                *a += s * b;
            }
        }
        axpy(&mut self.core, &other.core, s);
        if let (Some(y), Some(x)) = (&mut self.input_proj, &other.input_proj) {
            axpy(y, x, s);
        }
        if let (Some(y), Some(x)) = (&mut self.output_proj, &other.output_proj) {
            axpy(y, x, s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.core.iter_mut().for_each(|v| *v *= s);
        for g in [&mut self.input_proj, &mut self.output_proj].into_iter().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.core
            .iter()
            .chain(self.input_proj.iter().flatten())
            .chain(self.output_proj.iter().flatten())
            .all(|v| *v == 0.0)
    }
}

impl ResNetModel {
    pub fn new(
        input_proj: Option<Matrix>,
        core: WeightTensor,
        output_proj: Option<Matrix>,
        activation: Activation,
    ) -> Result<Self> {
        let d = core.width();
        if let Some(a) = &input_proj {
            if a.rows() != d {
                return Err(Error::invalid(format!(
                    "input projection has {} rows, width is {d}",
                    a.rows()
                )));
            }
        }
        if let Some(b) = &output_proj {
            if b.cols() != d {
                return Err(Error::invalid(format!(
                    "output projection has {} columns, width is {d}",
                    b.cols()
                )));
            }
        }
        Ok(Self {
            input_proj,
            core,
            output_proj,
            activation,
            train_projections: false,
        })
    }

    /// Bare residual stack without projections.
    pub fn bare(core: WeightTensor, activation: Activation) -> Self {
        Self {
            input_proj: None,
            core,
            output_proj: None,
            activation,
            train_projections: false,
        }
    }

    /// Smooth-in-depth core and `N(0, 1/cols)` projections `p → d → q`.
    pub fn with_projections(
        p: usize,
        d: usize,
        q: usize,
        depth: usize,
        bandwidth: f64,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let core = smooth_init(depth, d, bandwidth, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_0f0f_1234_5678);
        let a = init_projection(d, p, &mut rng);
        let b = init_projection(q, d, &mut rng);
        Self::new(Some(a), core, Some(b), activation)
    }

    pub fn width(&self) -> usize {
        self.core.width()
    }

    pub fn input_dim(&self) -> usize {
        self.input_proj.as_ref().map_or(self.width(), Matrix::cols)
    }

    pub fn output_dim(&self) -> usize {
        self.output_proj.as_ref().map_or(self.width(), Matrix::rows)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn lift(&self, x: &[f64]) -> Vec<f64> {
        match &self.input_proj {
            Some(a) => a.matvec(x),
            None => x.to_vec(),
        }
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        match &self.output_proj {
            Some(b) => b.matvec(h),
            None => h.to_vec(),
        }
    }

    /// One residual update `h ← h + (1/L) W_{k+1} σ(h)`.
    #[inline]
    fn step(&self, k: usize, h: &mut [f64], act: &mut [f64], tmp: &mut [f64]) {
        let d = self.width();
        let inv_l = 1.0 / self.core.depth() as f64;
        for (a, x) in act.iter_mut().zip(h.iter()) {
            *a = self.activation.apply(*x);
        }
        matvec_into(self.core.layer(k), d, d, act, tmp);
        for (x, t) in h.iter_mut().zip(tmp.iter()) {
            *x += inv_l * t;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let d = self.width();
        let depth = self.core.depth();
        let mut states = Vec::with_capacity((depth + 1) * d);
        let mut h = self.lift(x);
        states.extend_from_slice(&h);
        let (mut act, mut tmp) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..depth {
            self.step(k, &mut h, &mut act, &mut tmp);
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k + 1 });
            }
            states.extend_from_slice(&h);
        }
        let output = self.project(&h);
        Ok(ForwardTrace {
            input: x.to_vec(),
            states,
            output,
        })
    }

    /// Forward pass without retaining the layer trace.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let d = self.width();
        let mut h = self.lift(x);
        let (mut act, mut tmp) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..self.core.depth() {
            self.step(k, &mut h, &mut act, &mut tmp);
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.core.depth(),
            });
        }
        Ok(self.project(&h))
    }

    /// Gradients of `⟨F(x), upstream⟩` with respect to every `W_k`, `A` and `B`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<ModelGradients> {
        let mut grads = ModelGradients::zeros_like(self);
        self.backward_into(trace, upstream, &mut grads)?;
        Ok(grads)
    }

    /// [`backward`](Self::backward), added onto `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut ModelGradients,
    ) -> Result<()> {
        let d = self.width();
        let depth = self.core.depth();
        if trace.states.len() != (depth + 1) * d || trace.input.len() != self.input_dim() {
            return Err(Error::InvalidState(
                "trace does not come from a forward pass of this model".into(),
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::invalid(format!(
                "upstream gradient has length {}, output has {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.core.len() != self.core.params().len()
            || grads.input_proj.is_some() != self.input_proj.is_some()
            || grads.output_proj.is_some() != self.output_proj.is_some()
        {
            return Err(Error::invalid("gradient buffers do not match the model"));
        }
        let last = trace.state(depth, d);
        let mut g = match &self.output_proj {
            Some(b) => {
                let gb = grads.output_proj.as_mut().unwrap();
                for (i, u) in upstream.iter().enumerate() {
                    for (j, h) in last.iter().enumerate() {
                        gb[i * d + j] += u * h;
                    }
                }
                b.matvec_t(upstream)
            }
            None => upstream.to_vec(),
        };

        let inv_l = 1.0 / depth as f64;
        let dd = d * d;
        let (mut act, mut tmp) = (vec![0.0; d], vec![0.0; d]);
        for k in (0..depth).rev() {
            let h = trace.state(k, d);
            for (a, x) in act.iter_mut().zip(h) {
                *a = self.activation.apply(*x);
            }
            let offset = if self.core.is_tied() { 0 } else { k * dd };
            let gw = &mut grads.core[offset..offset + dd];
            for i in 0..d {
                let gi = inv_l * g[i];
                if gi == 0.0 {
                    continue;
                }
                for j in 0..d {
                    gw[i * d + j] += gi * act[j];
                }
            }
            matvec_t_into(self.core.layer(k), d, d, &g, &mut tmp);
            for j in 0..d {
                g[j] += inv_l * self.activation.derivative(h[j]) * tmp[j];
            }
        }

        if let Some(ga) = grads.input_proj.as_mut() {
            let p = trace.input.len();
            for i in 0..d {
                for (j, x) in trace.input.iter().enumerate() {
                    ga[i * p + j] += g[i] * x;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_stack_returns_input() {
        let core = WeightTensor::zeros(5, 3).unwrap();
        let model = ResNetModel::new(
            Some(Matrix::identity(3)),
            core,
            Some(Matrix::identity(3)),
            Activation::Relu,
        )
        .unwrap();
        let x = [0.3, -1.2, 2.0];
        assert_eq!(model.forward(&x).unwrap().output, x.to_vec());
    }

    #[test]
    fn positive_orbit_closed_form() {
        let (c, depth) = (0.7, 40);
        let core = WeightTensor::new(depth, 1, vec![c; depth]).unwrap();
        let model = ResNetModel::bare(core, Activation::Relu);
        let out = model.forward(&[1.3]).unwrap().output[0];
        let expected = 1.3 * (1.0 + c / depth as f64).powi(depth as i32);
        assert!((out - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn zero_is_fixed_point() {
        let core = iid_init(10, 4, 1.0, 1).unwrap();
        let model = ResNetModel::bare(core, Activation::Tanh);
        assert_eq!(model.forward(&[0.0; 4]).unwrap().output, vec![0.0; 4]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let model = ResNetModel::bare(WeightTensor::zeros(2, 3).unwrap(), Activation::Relu);
        assert!(model.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_reports_divergence_layer() {
        let core = WeightTensor::new(3, 1, vec![1e300, 1e300, 1e300]).unwrap();
        let model = ResNetModel::bare(core, Activation::Identity);
        match model.forward(&[1e300]) {
            Err(Error::Divergence { step }) => assert_eq!(step, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_layer_hand_derivative() {
        let core = WeightTensor::new(1, 1, vec![0.4]).unwrap();
        let model = ResNetModel::bare(core, Activation::Identity);
        let trace = model.forward(&[2.5]).unwrap();
        assert!((trace.output[0] - (2.5 + 0.4 * 2.5)).abs() < 1e-15);
        let g = model.backward(&trace, &[1.0]).unwrap();
        assert_eq!(g.core, vec![2.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ResNetModel::new(
            Some(init_projection(3, 5, &mut rng)),
            iid_init(6, 3, 1.0, 2).unwrap(),
            Some(init_projection(2, 3, &mut rng)),
            Activation::Tanh,
        )
        .unwrap();
        let trace = model.forward(&[0.1, 0.2, -0.3, 0.4, 0.5]).unwrap();
        assert!(model.backward(&trace, &[0.0, 0.0]).unwrap().is_zero());
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = ResNetModel::bare(WeightTensor::zeros(2, 2).unwrap(), Activation::Relu);
        let b = ResNetModel::bare(WeightTensor::zeros(3, 2).unwrap(), Activation::Relu);
        let trace = a.forward(&[1.0, 1.0]).unwrap();
        assert!(matches!(b.backward(&trace, &[1.0, 1.0]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn weight_lipschitz_cases() {
        let shared = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(weight_lipschitz(&WeightTensor::tied(5, &shared).unwrap()), 0.0);
        let mut data = vec![0.0; 8];
        data[4 + 2] = 5.0;
        assert_eq!(weight_lipschitz(&WeightTensor::new(2, 2, data).unwrap()), 5.0);
        assert_eq!(weight_lipschitz(&WeightTensor::new(1, 1, vec![3.0]).unwrap()), 0.0);
    }

    #[test]
    fn weight_lipschitz_brute_force() {
        let w = smooth_init(16, 3, 0.1, 9).unwrap();
        let mut brute: f64 = 0.0;
        for k in 0..15 {
            let (a, b) = (w.layer_matrix(k), w.layer_matrix(k + 1));
            for i in 0..3 {
                for j in 0..3 {
                    brute = brute.max((b.get(i, j) - a.get(i, j)).abs());
                }
            }
        }
        assert_eq!(weight_lipschitz(&w), brute);
    }

    #[test]
    fn penalty_block_arithmetic() {
        // W_1 = 0, W_2 = diag(3, 4), W_3 = W_2
        let mut data = vec![0.0; 12];
        data[4] = 3.0;
        data[7] = 4.0;
        data[8] = 3.0;
        data[11] = 4.0;
        let w = WeightTensor::new(3, 2, data).unwrap();
        assert_eq!(penalty(&w, PenaltyKind::FrobL2), 5.0);
        assert_eq!(penalty(&w, PenaltyKind::MaxMax), 4.0);
        assert_eq!(penalty(&w, PenaltyKind::MaxnormL2), 4.0);
        let tied = WeightTensor::tied(3, &Matrix::identity(2)).unwrap();
        for kind in [PenaltyKind::FrobL2, PenaltyKind::MaxMax, PenaltyKind::MaxnormL2] {
            let (v, g) = penalty_with_grad(&tied, kind);
            assert_eq!(v, 0.0);
            assert!(g.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn penalty_kind_parsing() {
        assert_eq!("frob_l2".parse::<PenaltyKind>().unwrap(), PenaltyKind::FrobL2);
        assert_eq!("maxnorm_l2".parse::<PenaltyKind>().unwrap(), PenaltyKind::MaxnormL2);
        assert!(matches!("l1".parse::<PenaltyKind>(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn class_membership_cases() {
        let spec = WeightClassSpec::unit(2, 4);
        assert!(check_class(&WeightTensor::zeros(4, 2).unwrap(), &spec).unwrap().is_member());
        let mut data = vec![0.0; 16];
        data[5] = spec.r_w + 1.0;
        let r = check_class(&WeightTensor::new(4, 2, data).unwrap(), &spec).unwrap();
        assert!(!r.within_norm);
        assert!(check_class(&WeightTensor::zeros(3, 2).unwrap(), &spec).is_err());

        let w = smooth_init(32, 3, 0.1, 5).unwrap();
        let measured = check_class(&w, &WeightClassSpec::unit(3, 32)).unwrap();
        let tight = WeightClassSpec {
            r_w: measured.norm,
            k_w: measured.scaled_lipschitz,
            ..WeightClassSpec::unit(3, 32)
        };
        assert!(check_class(&w, &tight).unwrap().is_member());
    }

    #[test]
    fn inits_are_deterministic() {
        assert_eq!(smooth_init(8, 2, 0.1, 3).unwrap(), smooth_init(8, 2, 0.1, 3).unwrap());
        assert_eq!(iid_init(8, 2, 1.0, 3).unwrap(), iid_init(8, 2, 1.0, 3).unwrap());
        assert!(iid_init(4, 3, 0.0, 1).unwrap().params().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wide_bandwidth_gives_flat_paths() {
        let w = smooth_init(64, 2, 100.0, 1).unwrap();
        assert!(weight_lipschitz(&w) < 1e-3);
    }

    #[test]
    fn binary_format() {
        let w = iid_init(3, 2, 1.0, 11).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"ODRN");
        assert_eq!(bytes.len(), 16 + 3 * 4 * 8);
        assert_eq!(WeightTensor::from_bytes(&bytes).unwrap(), w);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightTensor::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(WeightTensor::from_bytes(truncated), Err(Error::Format { .. })));

        let tied = WeightTensor::tied(4, &Matrix::identity(2)).unwrap();
        assert_eq!(WeightTensor::from_bytes(&tied.to_bytes()).unwrap(), tied.untied());
    }
}
