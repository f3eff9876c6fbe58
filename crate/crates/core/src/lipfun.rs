//! Piecewise-linear parameter paths `θ: [0,1] → ℝ^m`, the `(1,∞)`-norm,
//! Lipschitz-class membership, an explicit ε-net of Lipschitz paths and the
//! embedding of residual-network weight tensors into path space.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::norm1;
use crate::resnet::WeightTensor;

/// Absolute slack used by membership checks, scaled by `max(1, bound)`.
pub const MEMBERSHIP_SLACK: f64 = 1e-12;

/// Enumeration guard: maximal `|G_x|` for an explicitly built cover.
pub const MAX_GRID_X: usize = 24;

#[inline]
pub(crate) fn within(value: f64, bound: f64) -> bool {
    value <= bound + MEMBERSHIP_SLACK * bound.abs().max(1.0)
}

/// A continuous piecewise-linear map `[0,1] → ℝ^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFunction {
    m: usize,
    knots: Vec<f64>,
    /// `knots.len() × m`, row-major.
    values: Vec<f64>,
}

impl ParamFunction {
    pub fn new(knots: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let m = values.first().map_or(0, |v| v.len());
        if values.iter().any(|v| v.len() != m) {
            return Err(Error::invalid("value rows must all have length m"));
        }
        Self::from_flat(m, knots, values.concat())
    }

    pub fn from_flat(m: usize, knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if knots.len() < 2 {
            return Err(Error::invalid("at least two knots are required"));
        }
        if knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::invalid("knots must start at 0 and end at 1"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("knots must be strictly increasing"));
        }
        if values.len() != knots.len() * m {
            return Err(Error::invalid(format!(
                "expected {} values for {} knots and m = {m}, got {}",
                knots.len() * m,
                knots.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values must be finite"));
        }
        Ok(Self { m, knots, values })
    }

    /// The constant path `t ↦ c`.
    pub fn constant(c: &[f64]) -> Result<Self> {
        Self::from_flat(c.len(), vec![0.0, 1.0], [c, c].concat())
    }

    pub fn zeros(m: usize) -> Result<Self> {
        Self::constant(&vec![0.0; m])
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.m..(k + 1) * self.m]
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.m];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// Linear interpolation between the bracketing knots; exact at knots.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
        }
        let idx = self.knots.partition_point(|&k| k <= t);
        // idx >= 1 because knots[0] = 0 <= t
        if self.knots[idx - 1] == t {
            out.copy_from_slice(self.knot_value(idx - 1));
            return Ok(());
        }
        let (t0, t1) = (self.knots[idx - 1], self.knots[idx]);
        let w = (t - t0) / (t1 - t0);
        let (a, b) = (self.knot_value(idx - 1), self.knot_value(idx));
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = x + w * (y - x);
        }
        Ok(())
    }

    /// `sup_t Σ_i |θ_i(t)|`, evaluated at the knots and at every interior
    /// zero crossing of a coordinate.
    pub fn norm_1_inf(&self) -> f64 {
        let mut sup = (0..self.knots.len())
            .map(|k| norm1(self.knot_value(k)))
            .fold(0.0, f64::max);
        let mut buf = vec![0.0; self.m];
        for seg in 0..self.knots.len() - 1 {
            let (a, b) = (self.knot_value(seg), self.knot_value(seg + 1));
            for i in 0..self.m {
                if a[i] * b[i] < 0.0 {
                    let w = a[i] / (a[i] - b[i]);
                    for ((o, x), y) in buf.iter_mut().zip(a).zip(b) {
                        *o = x + w * (y - x);
                    }
                    sup = sup.max(norm1(&buf));
                }
            }
        }
        sup
    }

    /// Largest slope over coordinates and segments.
    pub fn lipschitz_constant(&self) -> f64 {
        let mut lip: f64 = 0.0;
        for seg in 0..self.knots.len() - 1 {
            let dt = self.knots[seg + 1] - self.knots[seg];
            let (a, b) = (self.knot_value(seg), self.knot_value(seg + 1));
            for (x, y) in a.iter().zip(b) {
                lip = lip.max((y - x).abs() / dt);
            }
        }
        lip
    }

    /// The same function expressed on the sorted union of its knots and `extra`.
    pub fn refine(&self, extra: &[f64]) -> Result<Self> {
        let knots = merge_knots(&self.knots, extra);
        let mut values = vec![0.0; knots.len() * self.m];
        for (k, t) in knots.iter().enumerate() {
            self.eval_into(*t, &mut values[k * self.m..(k + 1) * self.m])?;
        }
        Self::from_flat(self.m, knots, values)
    }

    /// Pointwise `a·self + b·other`, exact on the union of both knot sets.
    pub fn combine(&self, a: f64, other: &ParamFunction, b: f64) -> Result<Self> {
        if self.m != other.m {
            return Err(Error::invalid(format!(
                "dimension mismatch: {} vs {}",
                self.m, other.m
            )));
        }
        let lhs = self.refine(&other.knots)?;
        let rhs = other.refine(&self.knots)?;
        let values = lhs
            .values
            .iter()
            .zip(&rhs.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::from_flat(self.m, lhs.knots, values)
    }

    pub fn add(&self, other: &ParamFunction) -> Result<Self> {
        self.combine(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &ParamFunction) -> Result<Self> {
        self.combine(1.0, other, -1.0)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_flat(
            self.m,
            self.knots.clone(),
            self.values.iter().map(|v| v * s).collect(),
        )
    }

    /// Coordinate `i` as a one-dimensional path.
    pub fn coordinate(&self, i: usize) -> Result<Self> {
        if i >= self.m {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        let values = (0..self.knots.len()).map(|k| self.knot_value(k)[i]).collect();
        Self::from_flat(1, self.knots.clone(), values)
    }

    /// Line-oriented text form: a header with `m` and the knot count, then
    /// one `t v_1 … v_m` row per knot.
    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "m {} knots {}", self.m, self.knots.len())?;
        for (k, t) in self.knots.iter().enumerate() {
            let mut line = t.to_string();
            for v in self.knot_value(k) {
                write!(line, " {v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("text output is UTF-8")
    }

    /// Parses the form produced by [`ParamFunction::write_text`]. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::invalid("missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (m, n) = match fields.as_slice() {
            ["m", m, "knots", n] => (
                m.parse::<usize>().map_err(|e| Error::invalid(format!("bad m: {e}")))?,
                n.parse::<usize>().map_err(|e| Error::invalid(format!("bad knot count: {e}")))?,
            ),
            _ => return Err(Error::invalid(format!("bad header `{header}`"))),
        };
        let mut knots = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * m);
        for (row, line) in lines.enumerate() {
            let nums = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("row {row}: {e}")))?;
            if nums.len() != m + 1 {
                return Err(Error::invalid(format!(
                    "row {row}: expected {} numbers, got {}",
                    m + 1,
                    nums.len()
                )));
            }
            knots.push(nums[0]);
            values.extend_from_slice(&nums[1..]);
        }
        if knots.len() != n {
            return Err(Error::invalid(format!(
                "header announces {n} knots, found {}",
                knots.len()
            )));
        }
        Self::from_flat(m, knots, values)
    }
}

fn merge_knots(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).expect("knots are finite"));
    all.dedup();
    all
}

/// `‖f − g‖_{1,∞}`, exact for piecewise-linear paths.
pub fn distance_1_inf(f: &ParamFunction, g: &ParamFunction) -> Result<f64> {
    Ok(f.sub(g)?.norm_1_inf())
}

/// Constants defining the parameter class Θ and the loss/data scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamClassSpec {
    pub m: usize,
    #[serde(rename = "R_Theta")]
    pub r_theta: f64,
    #[serde(rename = "K_Theta")]
    pub k_theta: f64,
    #[serde(rename = "K_f")]
    pub k_f: f64,
    /// Supremum of `‖f_i‖` over the input ball.
    #[serde(rename = "M")]
    pub sup_f: f64,
    #[serde(rename = "R_X")]
    pub r_x: f64,
    #[serde(rename = "R_Y")]
    pub r_y: f64,
    #[serde(rename = "K_loss")]
    pub k_loss: f64,
}

impl ParamClassSpec {
    /// All constants equal to one, `K_Θ = 1`.
    pub fn unit(m: usize) -> Self {
        Self {
            m,
            r_theta: 1.0,
            k_theta: 1.0,
            k_f: 1.0,
            sup_f: 1.0,
            r_x: 1.0,
            r_y: 1.0,
            k_loss: 1.0,
        }
    }

    /// Sign and finiteness checks. `M = 0` (a vanishing field) is allowed.
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        let positive = [
            ("R_Theta", self.r_theta),
            ("K_f", self.k_f),
            ("R_X", self.r_x),
            ("R_Y", self.r_y),
            ("K_loss", self.k_loss),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("K_Theta", self.k_theta), ("M", self.sup_f)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MembershipReport {
    pub norm: f64,
    pub lipschitz: f64,
    pub within_norm: bool,
    pub within_lipschitz: bool,
}

impl MembershipReport {
    pub fn is_member(&self) -> bool {
        self.within_norm && self.within_lipschitz
    }
}

pub fn check_membership(f: &ParamFunction, spec: &ParamClassSpec) -> Result<MembershipReport> {
    if f.m() != spec.m {
        return Err(Error::invalid(format!(
            "function has m = {}, class has m = {}",
            f.m(),
            spec.m
        )));
    }
    let norm = f.norm_1_inf();
    let lipschitz = f.lipschitz_constant();
    Ok(MembershipReport {
        norm,
        lipschitz,
        within_norm: within(norm, spec.r_theta),
        within_lipschitz: within(lipschitz, spec.k_theta),
    })
}

/// Upper bound on the log covering number of Θ under the `(1,∞)`-norm:
/// `m·log(16 m R/ε) + m²·K·log 4/ε`.
pub fn cover_log_bound(m: usize, radius: f64, lipschitz: f64, eps: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    if !(radius > 0.0) || !(eps > 0.0) {
        return Err(Error::invalid("radius and eps must be positive"));
    }
    if !(lipschitz >= 0.0) {
        return Err(Error::invalid("Lipschitz constant must be nonnegative"));
    }
    let m = m as f64;
    Ok(m * (16.0 * m * radius / eps).ln() + m * m * lipschitz * 4f64.ln() / eps)
}

/// One element of a [`Cover`]: a start value and a slope sign per `G_x`
/// point (`+1` for slope `+K`, `-1` for `-K`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoverMember {
    pub start_value: f64,
    pub slope_signs: Vec<i8>,
}

/// The ε-net of one-dimensional `K`-Lipschitz paths bounded by `R`.
///
/// Members start on `G_y = {−R + kε/2 : 1 ≤ k ≤ ⌊4R/ε⌋}` and have slope `±K`
/// on each interval of `G_x = {kε/2K : 0 ≤ k ≤ ⌈2K/ε⌉}`, truncated at `t = 1`.
/// The cover holds `|G_y|·2^{|G_x|}` members (`|G_y|` when `K = 0`); they are
/// generated on demand from their index, whose low `|G_x|` bits are the signs.
#[derive(Debug, Clone)]
pub struct Cover {
    epsilon: f64,
    radius: f64,
    lipschitz: f64,
    grid_x: Vec<f64>,
    grid_y: Vec<f64>,
    /// `[a_j, b_j]` intervals with `a_j < 1`, the last one truncated at 1.
    pieces: Vec<(f64, f64)>,
}

pub fn build_cover(radius: f64, lipschitz: f64, eps: f64) -> Result<Cover> {
    if !(radius > 0.0 && radius.is_finite()) || !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("radius and eps must be positive"));
    }
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(Error::invalid("Lipschitz constant must be nonnegative"));
    }
    let grid_x: Vec<f64> = if lipschitz > 0.0 {
        let intervals = (2.0 * lipschitz / eps).ceil();
        let needed = intervals as usize + 1;
        if !(intervals + 1.0 <= MAX_GRID_X as f64) {
            return Err(Error::CapacityExceeded {
                needed: if intervals.is_finite() { needed } else { usize::MAX },
                limit: MAX_GRID_X,
            });
        }
        (0..needed)
            .map(|k| k as f64 * eps / (2.0 * lipschitz))
            .collect()
    } else {
        Vec::new()
    };
    let ny = (4.0 * radius / eps).floor() as usize;
    let grid_y = (1..=ny).map(|k| -radius + k as f64 * eps / 2.0).collect();

    let pieces = if lipschitz > 0.0 {
        grid_x
            .iter()
            .enumerate()
            .filter(|(_, &a)| a < 1.0)
            .map(|(j, &a)| (a, grid_x.get(j + 1).map_or(1.0, |&b| b.min(1.0))))
            .collect()
    } else {
        vec![(0.0, 1.0)]
    };
    Ok(Cover {
        epsilon: eps,
        radius,
        lipschitz,
        grid_x,
        grid_y,
        pieces,
    })
}

impl Cover {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn grid_x(&self) -> &[f64] {
        &self.grid_x
    }

    pub fn grid_y(&self) -> &[f64] {
        &self.grid_y
    }

    fn sign_bits(&self) -> usize {
        self.grid_x.len()
    }

    pub fn len(&self) -> usize {
        self.grid_y.len() << self.sign_bits()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_y.is_empty()
    }

    /// `log |cover|`, computed without forming the count.
    pub fn log_len(&self) -> f64 {
        (self.grid_y.len() as f64).ln() + self.sign_bits() as f64 * 2f64.ln()
    }

    pub fn member(&self, index: usize) -> CoverMember {
        assert!(index < self.len(), "member index {index} out of range");
        let bits = self.sign_bits();
        let mask = index & ((1usize << bits) - 1);
        CoverMember {
            start_value: self.grid_y[index >> bits],
            slope_signs: (0..bits)
                .map(|j| if mask >> j & 1 == 1 { 1 } else { -1 })
                .collect(),
        }
    }

    pub fn members(&self) -> impl Iterator<Item = CoverMember> + '_ {
        (0..self.len()).map(|i| self.member(i))
    }

    /// The member realised as a path on `[0,1]`.
    pub fn member_function(&self, index: usize) -> ParamFunction {
        let member = self.member(index);
        let mut knots = vec![0.0];
        let mut values = vec![member.start_value];
        let mut v = member.start_value;
        for (j, &(a, b)) in self.pieces.iter().enumerate() {
            let slope = member.slope_signs.get(j).map_or(0.0, |&s| s as f64) * self.lipschitz;
            v += slope * (b - a);
            knots.push(b);
            values.push(v);
        }
        ParamFunction::from_flat(1, knots, values).expect("cover member is a valid path")
    }

    /// Index and exact sup-distance of the member closest to `f`.
    ///
    /// Depth-first branch and bound over the slope signs: the sup-distance on
    /// a prefix of pieces is a lower bound for every completion, so branches
    /// at least as far as the best member found so far are cut.
    pub fn nearest_member(&self, f: &ParamFunction) -> Result<(usize, f64)> {
        if f.m() != 1 {
            return Err(Error::invalid("nearest_member expects a one-dimensional path"));
        }
        if self.is_empty() {
            return Err(Error::invalid("empty cover"));
        }
        // Sample points of each piece: its endpoints plus f's interior knots.
        let samples: Vec<Vec<(f64, f64)>> = self
            .pieces
            .iter()
            .map(|&(a, b)| {
                let mut pts = vec![a];
                pts.extend(f.knots().iter().copied().filter(|&t| t > a && t < b));
                pts.push(b);
                pts.into_iter()
                    .map(|t| (t - a, f.eval(t).expect("t in [0,1]")[0]))
                    .collect()
            })
            .collect();
        let f0 = f.knot_value(0)[0];
        let mut starts: Vec<usize> = (0..self.grid_y.len()).collect();
        starts.sort_by(|&i, &j| {
            let di = (self.grid_y[i] - f0).abs();
            let dj = (self.grid_y[j] - f0).abs();
            di.partial_cmp(&dj).unwrap().then(i.cmp(&j))
        });

        let mut search = Search {
            cover: self,
            samples: &samples,
            best: f64::INFINITY,
            best_index: 0,
        };
        for y in starts {
            let start = self.grid_y[y];
            if (start - f0).abs() >= search.best {
                continue;
            }
            search.descend(0, start, 0.0, y << self.sign_bits());
        }
        Ok((search.best_index, search.best))
    }

    /// Text dump: a header line, then for each member a `member` line
    /// followed by its path in [`ParamFunction::write_text`] form.
    pub fn write_text<W: Write>(&self, w: &mut W, limit: Option<usize>) -> io::Result<()> {
        writeln!(
            w,
            "epsilon {} radius {} lipschitz {} members {} gx {} gy {}",
            self.epsilon,
            self.radius,
            self.lipschitz,
            self.len(),
            self.grid_x.len(),
            self.grid_y.len()
        )?;
        let count = limit.map_or(self.len(), |l| l.min(self.len()));
        for i in 0..count {
            let member = self.member(i);
            let signs: String = member
                .slope_signs
                .iter()
                .map(|&s| if s > 0 { '+' } else { '-' })
                .collect();
            let signs = if signs.is_empty() { "0".to_string() } else { signs };
            writeln!(w, "member {i} start {} signs {signs}", member.start_value)?;
            self.member_function(i).write_text(w)?;
        }
        Ok(())
    }
}

struct Search<'a> {
    cover: &'a Cover,
    samples: &'a [Vec<(f64, f64)>],
    best: f64,
    best_index: usize,
}

impl Search<'_> {
    fn piece_distance(&self, j: usize, start: f64, slope: f64) -> f64 {
        self.samples[j]
            .iter()
            .map(|&(dt, fv)| (fv - start - slope * dt).abs())
            .fold(0.0, f64::max)
    }

    fn descend(&mut self, j: usize, value: f64, acc: f64, index: usize) {
        if acc >= self.best {
            return;
        }
        if j == self.samples.len() {
            self.best = acc;
            self.best_index = index;
            return;
        }
        let k = self.cover.lipschitz;
        if k == 0.0 {
            let d = acc.max(self.piece_distance(j, value, 0.0));
            self.descend(j + 1, value, d, index);
            return;
        }
        let (a, b) = self.cover.pieces[j];
        let f_end = self.samples[j].last().unwrap().1;
        let up = value + k * (b - a);
        let down = value - k * (b - a);
        let order = if (up - f_end).abs() <= (down - f_end).abs() {
            [1i8, -1]
        } else {
            [-1, 1]
        };
        for s in order {
            let slope = s as f64 * k;
            let d = acc.max(self.piece_distance(j, value, slope));
            if d < self.best {
                let bit = if s > 0 { 1usize << j } else { 0 };
                self.descend(j + 1, value + slope * (b - a), d, index | bit);
            }
        }
    }
}

/// Cartesian product of per-coordinate ε/m covers, an ε-net of Θ for `m ≤ 2`.
#[derive(Debug, Clone)]
pub struct ProductCover {
    coordinates: Vec<Cover>,
}

pub const MAX_PRODUCT_DIM: usize = 2;

pub fn build_product_cover(m: usize, radius: f64, lipschitz: f64, eps: f64) -> Result<ProductCover> {
    if m == 0 || m > MAX_PRODUCT_DIM {
        return Err(Error::invalid(format!(
            "product covers are enumerated for 1 <= m <= {MAX_PRODUCT_DIM}, got m = {m}"
        )));
    }
    let per = build_cover(radius, lipschitz, eps / m as f64)?;
    Ok(ProductCover {
        coordinates: vec![per; m],
    })
}

impl ProductCover {
    pub fn m(&self) -> usize {
        self.coordinates.len()
    }

    pub fn log_len(&self) -> f64 {
        self.coordinates.iter().map(Cover::log_len).sum()
    }

    pub fn coordinate_cover(&self, i: usize) -> &Cover {
        &self.coordinates[i]
    }

    /// Per-coordinate nearest members and the exact `(1,∞)` distance of
    /// their product to `f`.
    pub fn covering_member(&self, f: &ParamFunction) -> Result<(Vec<usize>, f64)> {
        if f.m() != self.m() {
            return Err(Error::invalid("dimension mismatch"));
        }
        let mut indices = Vec::with_capacity(self.m());
        let mut parts = Vec::with_capacity(self.m());
        for (i, cover) in self.coordinates.iter().enumerate() {
            let (idx, _) = cover.nearest_member(&f.coordinate(i)?)?;
            indices.push(idx);
            parts.push(cover.member_function(idx));
        }
        let member = stack_coordinates(&parts)?;
        Ok((indices, distance_1_inf(f, &member)?))
    }
}

/// Stacks one-dimensional paths into a single path on the union of knots.
pub fn stack_coordinates(parts: &[ParamFunction]) -> Result<ParamFunction> {
    let mut knots: Vec<f64> = Vec::new();
    for p in parts {
        knots = merge_knots(&knots, p.knots());
    }
    let m = parts.len();
    let mut values = vec![0.0; knots.len() * m];
    for (i, p) in parts.iter().enumerate() {
        if p.m() != 1 {
            return Err(Error::invalid("stack_coordinates expects one-dimensional parts"));
        }
        for (k, &t) in knots.iter().enumerate() {
            values[k * m + i] = p.eval(t)?[0];
        }
    }
    ParamFunction::from_flat(m, knots, values)
}

/// The embedding `φ`: weight tensor `(W_1, …, W_L)` ↦ the piecewise-affine
/// path with value `vec(W_k)` at `k/L` and `φ(0) = φ(1/L)`.
pub fn embed_weights(w: &WeightTensor) -> ParamFunction {
    let (depth, d) = (w.depth(), w.width());
    let m = d * d;
    let knots: Vec<f64> = (0..=depth).map(|k| k as f64 / depth as f64).collect();
    let mut values = Vec::with_capacity((depth + 1) * m);
    values.extend_from_slice(w.layer(0));
    for k in 0..depth {
        values.extend_from_slice(w.layer(k));
    }
    ParamFunction::from_flat(m, knots, values).expect("weight tensor entries are finite")
}

/// Knot count of [`random_member`] paths.
pub const RANDOM_MEMBER_KNOTS: usize = 17;

/// A random member of `{‖θ‖_{1,∞} ≤ R, each θ_i K-Lipschitz}`: uniform
/// knots, per-coordinate slopes uniform in `[−K, K]`, then shrunk so that
/// `‖θ‖_{1,∞} ≤ u·R` with `u` uniform in `(0, 1]`.
pub fn random_member<R: Rng + ?Sized>(
    m: usize,
    radius: f64,
    lipschitz: f64,
    rng: &mut R,
) -> Result<ParamFunction> {
    if m == 0 || !(radius > 0.0) || !(lipschitz >= 0.0) {
        return Err(Error::invalid("random_member needs m >= 1, R > 0, K >= 0"));
    }
    let n = RANDOM_MEMBER_KNOTS;
    let h = 1.0 / (n - 1) as f64;
    let knots: Vec<f64> = (0..n).map(|k| k as f64 * h).collect();
    let mut values = vec![0.0; n * m];
    for i in 0..m {
        let mut v = rng.gen_range(-radius..=radius) / m as f64;
        values[i] = v;
        for k in 1..n {
            v += h * rng.gen_range(-lipschitz..=lipschitz);
            values[k * m + i] = v;
        }
    }
    let f = ParamFunction::from_flat(m, knots, values)?;
    let u = 1.0 - rng.gen::<f64>();
    let norm = f.norm_1_inf();
    let target = u * radius;
    if norm > target {
        f.scaled(target / norm)
    } else {
        Ok(f)
    }
}
