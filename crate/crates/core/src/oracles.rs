//! Synthetic rewards and the ground truth they induce: closed-form Gaussian
//! tilts, grid tilts, the proximal recursion and distribution distances.
//!
//! Grid arithmetic runs in log-space with max-subtraction so that large
//! `R / beta` and empty bins stay finite.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::GaussianReference;

pub const DEFAULT_BOX: f64 = 5.0;
pub const DEFAULT_BINS: usize = 200;

/// Reward functions over `R^d`, parameterized per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `-||x - mu_c||^2 / (2 s^2) + <b_c, x>`. Without a scale only the
    /// linear part remains.
    Quadratic {
        centers: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        linear: Option<Vec<Vec<f64>>>,
    },
    /// `-(||x|| - r)^2`.
    Ring { radius: f64 },
    /// `1` on the closed box `[lower_c, upper_c]`, else `0`.
    IndicatorRegion {
        lower: Vec<Vec<f64>>,
        upper: Vec<Vec<f64>>,
    },
}

impl RewardSpec {
    /// `R = -x^2 / 2` in one dimension, single condition.
    pub fn standard_quadratic(dim: usize) -> Self {
        RewardSpec::Quadratic {
            centers: vec![vec![0.0; dim]],
            scale: Some(1.0),
            linear: None,
        }
    }

    pub fn validate(&self, dim: usize, conditions: usize) -> Result<()> {
        let per_condition = |path: &str, rows: &[Vec<f64>]| -> Result<()> {
            if rows.len() != conditions {
                return Err(Error::config(
                    path,
                    format!("{} entries for {conditions} conditions", rows.len()),
                ));
            }
            if rows
                .iter()
                .any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::config(
                    path,
                    format!("entries must be finite of length {dim}"),
                ));
            }
            Ok(())
        };
        match self {
            RewardSpec::Quadratic {
                centers,
                scale,
                linear,
            } => {
                per_condition("reward.centers", centers)?;
                if let Some(s) = scale {
                    if !(*s > 0.0 && s.is_finite()) {
                        return Err(Error::config("reward.scale", "must be positive"));
                    }
                }
                if let Some(b) = linear {
                    per_condition("reward.linear", b)?;
                }
                if scale.is_none() && linear.is_none() {
                    return Err(Error::config(
                        "reward.scale",
                        "needs a scale or a linear term",
                    ));
                }
                Ok(())
            }
            RewardSpec::Ring { radius } => {
                if !(*radius >= 0.0 && radius.is_finite()) {
                    return Err(Error::config("reward.radius", "must be non-negative"));
                }
                Ok(())
            }
            RewardSpec::IndicatorRegion { lower, upper } => {
                per_condition("reward.lower", lower)?;
                per_condition("reward.upper", upper)?;
                let ordered = lower
                    .iter()
                    .zip(upper)
                    .all(|(l, u)| l.iter().zip(u).all(|(a, b)| a <= b));
                if !ordered {
                    return Err(Error::config(
                        "reward.upper",
                        "must not lie below reward.lower",
                    ));
                }
                Ok(())
            }
        }
    }
}

/// `R(x | c)`.
pub fn reward(spec: &RewardSpec, x: &[f64], c: usize) -> f64 {
    match spec {
        RewardSpec::Quadratic {
            centers,
            scale,
            linear,
        } => {
            let mut r = 0.0;
            if let Some(s) = scale {
                let sq: f64 = x
                    .iter()
                    .zip(&centers[c])
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum();
                r -= sq / (2.0 * s * s);
            }
            if let Some(b) = linear {
                r += x.iter().zip(&b[c]).map(|(a, w)| a * w).sum::<f64>();
            }
            r
        }
        RewardSpec::Ring { radius } => {
            let norm = libm::sqrt(x.iter().map(|a| a * a).sum());
            -(norm - radius) * (norm - radius)
        }
        RewardSpec::IndicatorRegion { lower, upper } => {
            let inside = x
                .iter()
                .zip(lower[c].iter().zip(&upper[c]))
                .all(|(a, (l, u))| *a >= *l && *a <= *u);
            if inside {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Diagonal Gaussian parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Closed form of `pi_ref exp(R / beta)` for a quadratic reward.
pub fn tilted_gaussian_oracle(
    reference: &GaussianReference,
    spec: &RewardSpec,
    beta: f64,
    c: usize,
) -> Result<GaussianParams> {
    let RewardSpec::Quadratic {
        centers,
        scale,
        linear,
    } = spec
    else {
        return Err(Error::UnsupportedOracle(String::from(
            "closed-form tilt needs a quadratic reward; use the grid oracle",
        )));
    };
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let d = reference.means[c].len();
    let mut mean = Vec::with_capacity(d);
    let mut variance = Vec::with_capacity(d);
    for j in 0..d {
        let (m, v) = (reference.means[c][j], reference.variances[c][j]);
        let mut precision = 1.0 / v;
        let mut shift = m / v;
        if let Some(s) = scale {
            let k = 1.0 / (s * s * beta);
            precision += k;
            shift += k * centers[c][j];
        }
        if let Some(b) = linear {
            shift += b[c][j] / beta;
        }
        mean.push(shift / precision);
        variance.push(1.0 / precision);
    }
    Ok(GaussianParams { mean, variance })
}

/// Probability masses on a regular grid over a box, row-major with the last
/// axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDistribution {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: usize,
    pub masses: Vec<f64>,
}

impl GridDistribution {
    /// Normalizes `log_masses` (entries may be `-inf`).
    pub fn from_log_masses(
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: usize,
        log_masses: &[f64],
    ) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || bins == 0 {
            return Err(Error::shape(
                "grid",
                format!("{d}-dimensional box with {bins} bins"),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Domain(String::from(
                "grid box must have lower < upper",
            )));
        }
        let cells = bins
            .checked_pow(d as u32)
            .ok_or_else(|| Error::shape("grid", "cell count overflows"))?;
        if log_masses.len() != cells {
            return Err(Error::shape(
                "grid",
                format!("{} masses for {cells} cells", log_masses.len()),
            ));
        }
        let masses = normalize_log(log_masses)?;
        Ok(Self {
            lower,
            upper,
            bins,
            masses,
        })
    }

    /// Masses proportional to `exp(log_density(center))`.
    pub fn from_log_density<F: Fn(&[f64]) -> f64>(
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: usize,
        log_density: F,
    ) -> Result<Self> {
        let probe = Self {
            lower: lower.clone(),
            upper: upper.clone(),
            bins,
            masses: Vec::new(),
        };
        let cells = bins.pow(lower.len() as u32);
        let logs: Vec<f64> = (0..cells).map(|i| log_density(&probe.center(i))).collect();
        Self::from_log_masses(lower, upper, bins, &logs)
    }

    /// Discretized diagonal Gaussian on the default box `[-5, 5]^d`.
    pub fn gaussian(params: &GaussianParams, bins: usize) -> Result<Self> {
        let d = params.mean.len();
        Self::gaussian_on(params, vec![-DEFAULT_BOX; d], vec![DEFAULT_BOX; d], bins)
    }

    pub fn gaussian_on(
        params: &GaussianParams,
        lower: Vec<f64>,
        upper: Vec<f64>,
        bins: usize,
    ) -> Result<Self> {
        Self::from_log_density(lower, upper, bins, |x| {
            x.iter()
                .zip(params.mean.iter().zip(&params.variance))
                .map(|(a, (m, v))| -(a - m) * (a - m) / (2.0 * v))
                .sum()
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn cells(&self) -> usize {
        self.masses.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.bins as f64
    }

    /// Center of cell `index`.
    pub fn center(&self, index: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut rest = index;
        for axis in (0..d).rev() {
            let k = rest % self.bins;
            rest /= self.bins;
            out[axis] = self.lower[axis] + (k as f64 + 0.5) * self.width(axis);
        }
        out
    }

    /// Cell containing `x`, clamping to the boundary; the flag reports
    /// whether clamping happened.
    pub fn locate(&self, x: &[f64]) -> (usize, bool) {
        let mut index = 0;
        let mut outside = false;
        for (axis, &v) in x.iter().enumerate() {
            let pos = (v - self.lower[axis]) / self.width(axis);
            let k = if !(pos >= 0.0) {
                outside = true;
                0
            } else if pos >= self.bins as f64 {
                // the closed upper edge belongs to the last bin
                outside |= v > self.upper[axis];
                self.bins - 1
            } else {
                pos as usize
            };
            index = index * self.bins + k;
        }
        (index, outside)
    }

    pub fn log_masses(&self) -> Vec<f64> {
        self.masses.iter().map(|&m| libm::log(m)).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, m) in self.masses.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.center(i)) {
                *o += m * c;
            }
        }
        out
    }

    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut out = vec![0.0; self.dim()];
        for (i, m) in self.masses.iter().enumerate() {
            for ((o, c), mu) in out.iter_mut().zip(self.center(i)).zip(&mean) {
                *o += m * (c - mu) * (c - mu);
            }
        }
        out
    }

    fn same_layout(&self, other: &Self) -> Result<()> {
        if self.lower != other.lower || self.upper != other.upper || self.bins != other.bins {
            return Err(Error::shape(
                "grid",
                "distributions live on different grids",
            ));
        }
        Ok(())
    }

    /// `1/2 sum |p - q|`.
    pub fn tv(&self, other: &Self) -> Result<f64> {
        self.same_layout(other)?;
        Ok(0.5
            * self
                .masses
                .iter()
                .zip(&other.masses)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

fn normalize_log(logs: &[f64]) -> Result<Vec<f64>> {
    if logs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical(String::from(
            "grid log-mass is NaN or +inf",
        )));
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numerical(String::from("grid has no mass")));
    }
    let w: Vec<f64> = logs.iter().map(|v| libm::exp(v - max)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// Reward evaluated at every cell center.
pub fn reward_grid(spec: &RewardSpec, grid: &GridDistribution, c: usize) -> Vec<f64> {
    (0..grid.cells())
        .map(|i| reward(spec, &grid.center(i), c))
        .collect()
}

/// Cell-wise `pi_ref exp(R / beta)`, renormalized.
pub fn grid_tilt(
    reference: &GridDistribution,
    rewards: &[f64],
    beta: f64,
) -> Result<GridDistribution> {
    if rewards.len() != reference.cells() {
        return Err(Error::shape(
            "grid_tilt",
            format!("{} rewards for {} cells", rewards.len(), reference.cells()),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let logs: Vec<f64> = reference
        .log_masses()
        .iter()
        .zip(rewards)
        .map(|(l, r)| l + r / beta)
        .collect();
    GridDistribution::from_log_masses(
        reference.lower.clone(),
        reference.upper.clone(),
        reference.bins,
        &logs,
    )
}

/// One proximal step: cell-wise `target^(eta/(1+eta)) * pi_k^(1/(1+eta))`,
/// renormalized. `eta = inf` returns the target.
pub fn proximal_recursion(
    target: &GridDistribution,
    pi_k: &GridDistribution,
    eta: f64,
) -> Result<GridDistribution> {
    target.same_layout(pi_k)?;
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let (a, b) = if eta.is_infinite() {
        (1.0, 0.0)
    } else {
        (eta / (1.0 + eta), 1.0 / (1.0 + eta))
    };
    let weighted = |w: f64, l: f64| if w == 0.0 { 0.0 } else { w * l };
    let logs: Vec<f64> = target
        .log_masses()
        .iter()
        .zip(pi_k.log_masses())
        .map(|(&lt, lk)| weighted(a, lt) + weighted(b, lk))
        .collect();
    GridDistribution::from_log_masses(
        target.lower.clone(),
        target.upper.clone(),
        target.bins,
        &logs,
    )
}

/// `pi_0, pi_1, ..., pi_k`.
pub fn proximal_iterates(
    target: &GridDistribution,
    pi_0: &GridDistribution,
    eta: f64,
    k: usize,
) -> Result<Vec<GridDistribution>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(pi_0.clone());
    for _ in 0..k {
        let next = proximal_recursion(target, out.last().expect("non-empty"), eta)?;
        out.push(next);
    }
    Ok(out)
}

/// Gaussian form of one proximal step: precisions average with weights
/// `eta/(1+eta)` and `1/(1+eta)`, and so do precision-weighted means.
pub fn proximal_gaussian_step(
    target: &GaussianParams,
    pi_k: &GaussianParams,
    eta: f64,
) -> GaussianParams {
    let (a, b) = (eta / (1.0 + eta), 1.0 / (1.0 + eta));
    let mut mean = Vec::with_capacity(target.mean.len());
    let mut variance = Vec::with_capacity(target.mean.len());
    for j in 0..target.mean.len() {
        let (pt, pk) = (1.0 / target.variance[j], 1.0 / pi_k.variance[j]);
        let p = a * pt + b * pk;
        mean.push((a * pt * target.mean[j] + b * pk * pi_k.mean[j]) / p);
        variance.push(1.0 / p);
    }
    GaussianParams { mean, variance }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub tv: f64,
    /// Samples clamped into boundary cells.
    pub outside: usize,
}

/// TV between the histogram of `samples` and `oracle`.
pub fn tv_distance(samples: &[Vec<f64>], oracle: &GridDistribution) -> Result<TvReport> {
    if samples.is_empty() {
        return Err(Error::Domain(String::from("TV needs at least one sample")));
    }
    let mut counts = vec![0.0; oracle.cells()];
    let mut outside = 0;
    for s in samples {
        if s.len() != oracle.dim() {
            return Err(Error::shape(
                "tv_distance",
                format!("sample of length {}", s.len()),
            ));
        }
        let (i, out) = oracle.locate(s);
        counts[i] += 1.0;
        outside += out as usize;
    }
    let n = samples.len() as f64;
    let tv = 0.5
        * counts
            .iter()
            .zip(&oracle.masses)
            .map(|(c, m)| (c / n - m).abs())
            .sum::<f64>();
    Ok(TvReport { tv, outside })
}

/// Oracle `pi_ref exp(R / beta)` for condition `c` on the default box.
pub fn oracle_grid(
    reference: &GaussianReference,
    spec: &RewardSpec,
    beta: f64,
    c: usize,
    bins: usize,
) -> Result<GridDistribution> {
    let d = reference.means[c].len();
    if d > 2 {
        return Err(Error::UnsupportedOracle(format!(
            "grid oracles cover d <= 2, got d = {d}"
        )));
    }
    let base = GridDistribution::from_log_density(
        vec![-DEFAULT_BOX; d],
        vec![DEFAULT_BOX; d],
        bins,
        |x| reference.log_density(x, c),
    )?;
    grid_tilt(&base, &reward_grid(spec, &base, c), beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(m: f64, v: f64) -> GaussianParams {
        GaussianParams {
            mean: vec![m],
            variance: vec![v],
        }
    }

    #[test]
    fn closed_form_tilts() {
        let r = GaussianReference::standard(1, 1);
        let t = tilted_gaussian_oracle(&r, &RewardSpec::standard_quadratic(1), 1.0, 0).unwrap();
        assert_eq!(t, gauss(0.0, 0.5));
        let lin = RewardSpec::Quadratic {
            centers: vec![vec![0.0]],
            scale: None,
            linear: Some(vec![vec![1.0]]),
        };
        assert_eq!(
            tilted_gaussian_oracle(&r, &lin, 1.0, 0).unwrap(),
            gauss(1.0, 1.0)
        );
        let wide = tilted_gaussian_oracle(&r, &RewardSpec::standard_quadratic(1), 1e12, 0).unwrap();
        assert!((wide.variance[0] - 1.0).abs() < 1e-11);
        assert!(matches!(
            tilted_gaussian_oracle(&r, &RewardSpec::Ring { radius: 1.0 }, 1.0, 0),
            Err(Error::UnsupportedOracle(_))
        ));
    }

    #[test]
    fn reward_examples() {
        let q = RewardSpec::Quadratic {
            centers: vec![vec![1.0, 2.0]],
            scale: Some(0.5),
            linear: None,
        };
        assert_eq!(reward(&q, &[1.0, 2.0], 0), 0.0);
        let ring = RewardSpec::Ring { radius: 1.0 };
        let s = core::f64::consts::FRAC_1_SQRT_2;
        assert!(reward(&ring, &[s, s], 0).abs() < 1e-15);
        let ind = RewardSpec::IndicatorRegion {
            lower: vec![vec![0.0, 0.0]],
            upper: vec![vec![1.0, 1.0]],
        };
        assert_eq!(reward(&ind, &[1.0, 0.5], 0), 1.0);
        assert_eq!(reward(&ind, &[1.01, 0.5], 0), 0.0);
    }

    #[test]
    fn two_bin_tilt() {
        let g = GridDistribution::from_log_masses(vec![0.0], vec![2.0], 2, &[0.0, 0.0]).unwrap();
        let t = grid_tilt(&g, &[0.0, libm::log(2.0)], 1.0).unwrap();
        assert!((t.masses[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.masses[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn locate_clamps_and_flags() {
        let g = GridDistribution::from_log_masses(vec![0.0], vec![1.0], 4, &[0.0; 4]).unwrap();
        assert_eq!(g.locate(&[0.3]), (1, false));
        assert_eq!(g.locate(&[1.0]), (3, false));
        assert_eq!(g.locate(&[-2.0]), (0, true));
        assert_eq!(g.locate(&[7.0]), (3, true));
        assert_eq!(g.center(2), vec![0.625]);
    }

    #[test]
    fn proximal_gaussian_one_step() {
        let p = proximal_gaussian_step(&gauss(0.0, 0.5), &gauss(0.0, 1.0), 1.0);
        assert!((p.variance[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_bins_stay_empty() {
        let t = GridDistribution::from_log_masses(
            vec![0.0],
            vec![1.0],
            3,
            &[0.0, f64::NEG_INFINITY, 0.0],
        )
        .unwrap();
        let p = GridDistribution::from_log_masses(vec![0.0], vec![1.0], 3, &[0.0; 3]).unwrap();
        let n = proximal_recursion(&t, &p, 1.0).unwrap();
        assert_eq!(n.masses[1], 0.0);
        assert!((n.masses.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let inf = proximal_recursion(&t, &p, f64::INFINITY).unwrap();
        assert_eq!(inf, t);
    }

    #[test]
    fn disjoint_support_tv_is_one() {
        let g =
            GridDistribution::from_log_masses(vec![0.0], vec![2.0], 2, &[0.0, f64::NEG_INFINITY])
                .unwrap();
        let samples = vec![vec![1.5]; 10];
        assert_eq!(tv_distance(&samples, &g).unwrap().tv, 1.0);
        assert_eq!(g.tv(&g).unwrap(), 0.0);
    }
}
