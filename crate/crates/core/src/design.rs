//! Shaping-vector parameterization of the NMPC design vector.
//!
//! A shaping vector `sigma` fixes one curvature per design component; the
//! scalar `alpha` in `[0, 1]` then moves every component between its bounds,
//! from the cheapest setting (`alpha = 0`) to the most demanding one
//! (`alpha = 1`). Only `kappa` runs downward with `alpha`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{n_steps_for, PredictionGrid};

/// Number of tuned design components.
pub const N_DESIGN: usize = 7;

/// Component names in design-vector order.
pub const COMPONENTS: [&str; N_DESIGN] = ["kappa", "mu_d", "N_pred", "n_contr", "rho_f", "rho_constr", "max_iter"];

const KAPPA: usize = 0;
const MU_D: usize = 1;
const N_PRED: usize = 2;
const N_CONTR: usize = 3;
const RHO_F: usize = 4;
const RHO_CONSTR: usize = 5;
const MAX_ITER: usize = 6;

/// Curvature exponents, one per design component, each drawn from
/// `{-sigma_bar, ..., -1, 1, ..., sigma_bar}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapingVector {
    sigma: [i32; N_DESIGN],
    sigma_bar: u32,
}

impl ShapingVector {
    pub fn new(sigma: [i32; N_DESIGN], sigma_bar: u32) -> Result<Self> {
        if sigma_bar == 0 {
            return Err(Error::invalid("sigma_bar must be at least 1"));
        }
        if let Some(bad) = sigma.iter().find(|s| **s == 0 || s.unsigned_abs() > sigma_bar) {
            return Err(Error::invalid(format!("shaping exponent {bad} outside S(sigma_bar = {sigma_bar})")));
        }
        Ok(Self { sigma, sigma_bar })
    }

    /// All exponents equal to one: every component interpolates affinely.
    pub fn linear() -> Self {
        Self {
            sigma: [1; N_DESIGN],
            sigma_bar: 1,
        }
    }

    pub fn components(&self) -> &[i32; N_DESIGN] {
        &self.sigma
    }

    pub fn sigma_bar(&self) -> u32 {
        self.sigma_bar
    }
}

impl std::fmt::Display for ShapingVector {
    /// Colon-separated exponents, e.g. `1:-2:3:1:-1:2:-3`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.sigma.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Parses the [`Display`](std::fmt::Display) form; `sigma_bar` is the
/// largest magnitude present.
impl std::str::FromStr for ShapingVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<i32> = s
            .split(':')
            .map(|t| t.trim().parse::<i32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad shaping vector `{s}`: {e}")))?;
        let sigma: [i32; N_DESIGN] = parts
            .try_into()
            .map_err(|_| Error::invalid(format!("shaping vector `{s}` must have {N_DESIGN} entries")))?;
        let bar = sigma.iter().map(|v| v.unsigned_abs()).max().unwrap_or(1).max(1);
        Self::new(sigma, bar)
    }
}

/// `alpha^sigma` for positive exponents, `alpha^(1/|sigma|)` for negative ones.
pub fn shape_value(sigma_i: i32, alpha: f64) -> Result<f64> {
    if sigma_i == 0 {
        return Err(Error::invalid("shaping exponent must be nonzero"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(if sigma_i > 0 {
        alpha.powi(sigma_i)
    } else {
        alpha.powf(1.0 / f64::from(sigma_i.unsigned_abs()))
    })
}

/// Draws a shaping vector uniformly on `S^7`. The draw depends only on
/// `(seed, stream)`, so candidates can be sampled in any order.
pub fn sample_sigma(seed: u64, stream: u64, sigma_bar: u32) -> Result<ShapingVector> {
    if sigma_bar == 0 {
        return Err(Error::invalid("sigma_bar must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let bar = sigma_bar as i32;
    let sigma = std::array::from_fn(|_| {
        let k = rng.random_range(0..2 * bar);
        if k < bar {
            k - bar
        } else {
            k - bar + 1
        }
    });
    ShapingVector::new(sigma, sigma_bar)
}

/// How the two penalty weights move between their bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyInterpolation {
    #[default]
    Linear,
    /// Interpolate `ln(rho)`; both bounds must be positive.
    Log,
}

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T> Interval<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

/// Per-component search bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBounds {
    pub kappa: Interval<u32>,
    pub mu_d: Interval<f64>,
    pub n_pred: Interval<u32>,
    pub n_contr: Interval<u32>,
    pub rho_f: Interval<f64>,
    pub rho_constr: Interval<f64>,
    pub max_iter: Interval<u32>,
    pub penalty_interpolation: PenaltyInterpolation,
}

impl Default for DesignBounds {
    fn default() -> Self {
        Self {
            kappa: Interval::new(1, 10),
            mu_d: Interval::new(0.0, 1.0),
            n_pred: Interval::new(5, 25),
            n_contr: Interval::new(1, 5),
            rho_f: Interval::new(1.0, 1e3),
            rho_constr: Interval::new(1e3, 1e7),
            max_iter: Interval::new(5, 20),
            penalty_interpolation: PenaltyInterpolation::Linear,
        }
    }
}

impl DesignBounds {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("kappa", self.kappa),
            ("N_pred", self.n_pred),
            ("n_contr", self.n_contr),
            ("max_iter", self.max_iter),
        ];
        for (name, iv) in ints {
            if iv.min == 0 || iv.min > iv.max {
                return Err(Error::invalid(format!("{name} bounds [{}, {}] invalid", iv.min, iv.max)));
            }
        }
        // n_contr is capped by N_pred, so its floor must fit under N_pred's
        if self.n_contr.min > self.n_pred.min {
            return Err(Error::invalid("n_contr lower bound exceeds N_pred lower bound"));
        }
        if !(0.0 <= self.mu_d.min && self.mu_d.min <= self.mu_d.max && self.mu_d.max <= 1.0) {
            return Err(Error::invalid("mu_d bounds must satisfy 0 <= min <= max <= 1"));
        }
        for (name, iv) in [("rho_f", self.rho_f), ("rho_constr", self.rho_constr)] {
            if !(iv.min.is_finite() && iv.max.is_finite() && 0.0 <= iv.min && iv.min <= iv.max) {
                return Err(Error::invalid(format!("{name} bounds [{}, {}] invalid", iv.min, iv.max)));
            }
            if self.penalty_interpolation == PenaltyInterpolation::Log && iv.min <= 0.0 {
                return Err(Error::invalid(format!("{name}: log interpolation needs a positive lower bound")));
            }
        }
        Ok(())
    }

    fn lower_upper(&self) -> [(f64, f64); N_DESIGN] {
        let i = |iv: Interval<u32>| (f64::from(iv.min), f64::from(iv.max));
        let f = |iv: Interval<f64>| (iv.min, iv.max);
        [
            i(self.kappa),
            f(self.mu_d),
            i(self.n_pred),
            i(self.n_contr),
            f(self.rho_f),
            f(self.rho_constr),
            i(self.max_iter),
        ]
    }
}

/// Continuous design components at `(sigma, alpha)`, before integer rounding.
pub fn realize_continuous(sigma: &ShapingVector, alpha: f64, bounds: &DesignBounds) -> Result<[f64; N_DESIGN]> {
    let lu = bounds.lower_upper();
    let mut out = [0.0; N_DESIGN];
    for (i, ((lo, hi), s)) in lu.iter().zip(sigma.components()).enumerate() {
        let phi = shape_value(*s, alpha)?;
        let log = bounds.penalty_interpolation == PenaltyInterpolation::Log && (i == RHO_F || i == RHO_CONSTR);
        out[i] = match (i == KAPPA, log) {
            (true, _) => hi - phi * (hi - lo),
            (false, true) => (lo.ln() + phi * (hi.ln() - lo.ln())).exp().clamp(*lo, *hi),
            (false, false) => lo + phi * (hi - lo),
        };
    }
    Ok(out)
}

/// The seven tuned NMPC parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignVector {
    pub kappa: u32,
    pub mu_d: f64,
    #[serde(rename = "N_pred")]
    pub n_pred: u32,
    pub n_contr: u32,
    pub rho_f: f64,
    pub rho_constr: f64,
    pub max_iter: u32,
}

fn round_clamp(v: f64, iv: Interval<u32>) -> u32 {
    // round half up
    let r = (v + 0.5).floor();
    (r.max(0.0) as u32).clamp(iv.min, iv.max)
}

/// Realizes the design vector at `(sigma, alpha)`. Integer components are
/// rounded half-up and clamped to their bounds, then `n_contr <= N_pred`.
pub fn realize(sigma: &ShapingVector, alpha: f64, bounds: &DesignBounds) -> Result<DesignVector> {
    let c = realize_continuous(sigma, alpha, bounds)?;
    let n_pred = round_clamp(c[N_PRED], bounds.n_pred);
    Ok(DesignVector {
        kappa: round_clamp(c[KAPPA], bounds.kappa),
        mu_d: c[MU_D].clamp(bounds.mu_d.min, bounds.mu_d.max),
        n_pred,
        n_contr: round_clamp(c[N_CONTR], bounds.n_contr).min(n_pred),
        rho_f: c[RHO_F],
        rho_constr: c[RHO_CONSTR],
        max_iter: round_clamp(c[MAX_ITER], bounds.max_iter),
    })
}

impl DesignVector {
    pub fn tau_u(&self, tau: f64) -> f64 {
        f64::from(self.kappa) * tau
    }

    /// Prediction horizon `T = N_pred * kappa * tau`, seconds.
    pub fn horizon(&self, tau: f64) -> f64 {
        f64::from(self.n_pred) * self.tau_u(tau)
    }

    pub fn n_steps(&self) -> u32 {
        n_steps_for(self.mu_d, self.kappa).expect("realized mu_d lies in [0, 1]")
    }

    pub fn grid(&self, tau: f64) -> PredictionGrid {
        PredictionGrid::new(tau, self.kappa, self.mu_d).expect("realized design has a valid grid")
    }

    /// Checks the component invariants against `bounds`.
    pub fn validate(&self, bounds: &DesignBounds) -> Result<()> {
        let within_u = |v: u32, iv: Interval<u32>| iv.min <= v && v <= iv.max;
        let within_f = |v: f64, iv: Interval<f64>| iv.min <= v && v <= iv.max;
        let ok = within_u(self.kappa, bounds.kappa)
            && within_f(self.mu_d, bounds.mu_d)
            && within_u(self.n_pred, bounds.n_pred)
            && within_u(self.n_contr, bounds.n_contr)
            && self.n_contr <= self.n_pred
            && within_f(self.rho_f, bounds.rho_f)
            && within_f(self.rho_constr, bounds.rho_constr)
            && within_u(self.max_iter, bounds.max_iter)
            && self.kappa >= 1
            && self.max_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("design vector {self:?} violates its bounds")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_examples() {
        for a in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert_eq!(shape_value(1, a).unwrap(), a);
        }
        assert_eq!(shape_value(2, 0.5).unwrap(), 0.25);
        assert_eq!(shape_value(-2, 0.25).unwrap(), 0.5);
        assert!(shape_value(0, 0.5).is_err());
        assert!(shape_value(1, 1.5).is_err());
    }

    #[test]
    fn endpoints_with_default_bounds() {
        let b = DesignBounds::default();
        let sigma = ShapingVector::new([2, -3, 1, -1, 3, -2, 1], 3).unwrap();
        let lo = realize(&sigma, 0.0, &b).unwrap();
        assert_eq!(
            lo,
            DesignVector {
                kappa: 10,
                mu_d: 0.0,
                n_pred: 5,
                n_contr: 1,
                rho_f: 1.0,
                rho_constr: 1e3,
                max_iter: 5
            }
        );
        let hi = realize(&sigma, 1.0, &b).unwrap();
        assert_eq!(
            hi,
            DesignVector {
                kappa: 1,
                mu_d: 1.0,
                n_pred: 25,
                n_contr: 5,
                rho_f: 1e3,
                rho_constr: 1e7,
                max_iter: 20
            }
        );
    }

    #[test]
    fn affine_midpoint() {
        let d = realize(&ShapingVector::linear(), 0.5, &DesignBounds::default()).unwrap();
        assert_eq!(d.n_pred, 15);
        // 10 - 0.5 * 9 = 5.5 rounds half up
        assert_eq!(d.kappa, 6);
        assert_eq!(d.max_iter, 13);
        assert_eq!(d.rho_f, 500.5);
    }

    #[test]
    fn log_interpolation_of_penalties() {
        let b = DesignBounds {
            penalty_interpolation: PenaltyInterpolation::Log,
            ..DesignBounds::default()
        };
        let d = realize(&ShapingVector::linear(), 0.5, &b).unwrap();
        assert!((d.rho_constr - 1e5).abs() < 1e-6);
        assert!((d.rho_f - 1e3f64.sqrt()).abs() < 1e-9);
        let bad = DesignBounds {
            rho_f: Interval::new(0.0, 1.0),
            ..b
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn n_contr_never_exceeds_horizon() {
        let b = DesignBounds {
            n_pred: Interval::new(2, 3),
            n_contr: Interval::new(1, 8),
            ..DesignBounds::default()
        };
        let d = realize(&ShapingVector::linear(), 1.0, &b).unwrap();
        assert_eq!((d.n_pred, d.n_contr), (3, 3));
    }

    #[test]
    fn sigma_bar_one_gives_signs_only() {
        for j in 0..200 {
            let s = sample_sigma(1, j, 1).unwrap();
            assert!(s.components().iter().all(|v| *v == 1 || *v == -1));
        }
    }

    #[test]
    fn sigma_draws_are_uniform() {
        let mut counts = [[0usize; 6]; N_DESIGN];
        let n = 10_000;
        for j in 0..n {
            let s = sample_sigma(77, j, 3).unwrap();
            for (i, v) in s.components().iter().enumerate() {
                let slot = if *v < 0 { (v + 3) as usize } else { (v + 2) as usize };
                counts[i][slot] += 1;
            }
        }
        for row in counts {
            for c in row {
                let freq = c as f64 / n as f64;
                assert!((freq - 1.0 / 6.0).abs() < 0.02, "{freq}");
            }
        }
    }

    #[test]
    fn sigma_draws_are_deterministic() {
        let a: Vec<_> = (0..50).map(|j| sample_sigma(9, j, 3).unwrap()).collect();
        let b: Vec<_> = (0..50).map(|j| sample_sigma(9, j, 3).unwrap()).collect();
        assert_eq!(a, b);
        assert_ne!(a, (0..50).map(|j| sample_sigma(10, j, 3).unwrap()).collect::<Vec<_>>());
    }

    #[test]
    fn sigma_text_round_trip() {
        let s = ShapingVector::new([1, -2, 3, -1, 2, -3, 1], 3).unwrap();
        assert_eq!(s.to_string(), "1:-2:3:-1:2:-3:1");
        assert_eq!(s.to_string().parse::<ShapingVector>().unwrap(), s);
        assert!("1:2:0:1:1:1:1".parse::<ShapingVector>().is_err());
        assert!("1:2:3".parse::<ShapingVector>().is_err());
    }

    #[test]
    fn load_ratio_grows_with_alpha() {
        // per-updating-period prediction load max_iter * N_pred * n_steps / kappa,
        // evaluated on the continuous components: n_steps / kappa -> mu_d + (1 - mu_d) / kappa
        let b = DesignBounds::default();
        for j in 0..200 {
            let s = sample_sigma(3, j, 3).unwrap();
            let mut last = 0.0;
            for i in 0..=100 {
                let c = realize_continuous(&s, f64::from(i) / 100.0, &b).unwrap();
                let load = c[MAX_ITER] * c[N_PRED] * (c[MU_D] + (1.0 - c[MU_D]) / c[KAPPA]);
                assert!(load >= last - 1e-9);
                last = load;
            }
        }
    }

    fn arb_sigma() -> impl Strategy<Value = ShapingVector> {
        (1u32..=5).prop_flat_map(|bar| {
            let b = bar as i32;
            proptest::array::uniform7((-b..=b).prop_filter("nonzero", |v| *v != 0))
                .prop_map(move |s| ShapingVector::new(s, bar).unwrap())
        })
    }

    fn arb_bounds() -> impl Strategy<Value = DesignBounds> {
        (
            (1u32..8, 0u32..8),
            (0.0f64..0.5, 0.0f64..0.5),
            (1u32..10, 0u32..20),
            (1u32..4, 0u32..6),
            (0.1f64..10.0, 0.0f64..1e3),
            (1.0f64..1e3, 0.0f64..1e7),
            (1u32..10, 0u32..30),
            any::<bool>(),
        )
            .prop_map(|(k, m, np, nc, rf, rc, mi, log)| DesignBounds {
                kappa: Interval::new(k.0, k.0 + k.1),
                mu_d: Interval::new(m.0, m.0 + m.1),
                n_pred: Interval::new(np.0, np.0 + np.1),
                n_contr: Interval::new(nc.0, nc.0 + nc.1),
                rho_f: Interval::new(rf.0, rf.0 + rf.1),
                rho_constr: Interval::new(rc.0, rc.0 + rc.1),
                max_iter: Interval::new(mi.0, mi.0 + mi.1),
                penalty_interpolation: if log { PenaltyInterpolation::Log } else { PenaltyInterpolation::Linear },
            })
            .prop_filter("valid", |b| b.validate().is_ok())
    }

    proptest! {
        #[test]
        fn realized_vectors_respect_bounds(sigma in arb_sigma(), alpha in 0.0f64..=1.0, bounds in arb_bounds()) {
            let d = realize(&sigma, alpha, &bounds).unwrap();
            prop_assert!(d.validate(&bounds).is_ok(), "{:?}", d);
        }

        #[test]
        fn realize_is_monotone(sigma in arb_sigma(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, bounds in arb_bounds()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c_lo = realize_continuous(&sigma, lo, &bounds).unwrap();
            let c_hi = realize_continuous(&sigma, hi, &bounds).unwrap();
            prop_assert!(c_hi[KAPPA] <= c_lo[KAPPA]);
            for i in 1..N_DESIGN {
                prop_assert!(c_hi[i] >= c_lo[i]);
            }
            let d_lo = realize(&sigma, lo, &bounds).unwrap();
            let d_hi = realize(&sigma, hi, &bounds).unwrap();
            prop_assert!(d_hi.kappa <= d_lo.kappa);
            prop_assert!(d_hi.n_pred >= d_lo.n_pred && d_hi.max_iter >= d_lo.max_iter);
            prop_assert!(d_hi.n_contr >= d_lo.n_contr && d_hi.mu_d >= d_lo.mu_d);
            prop_assert!(d_hi.rho_f >= d_lo.rho_f && d_hi.rho_constr >= d_lo.rho_constr);
        }
    }
}
