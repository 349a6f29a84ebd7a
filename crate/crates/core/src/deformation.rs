//! Plasticity bookkeeping for bilinear strain paths.
//!
//! A path is a list of in-plane principal strain increments. Each increment
//! contributes an equivalent plastic strain
//!
//! ```text
//! dε̄ = (2/√3) · √(dε1² + dε2² + dε1·dε2)
//! ```
//!
//! which is accumulated by a left-Riemann prefix sum and normalised by the
//! failure strain to give the damage indicator `D = ε̄ / ε̄_fail`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of the reference forming dataset, in seconds.
pub const DEFAULT_DT: f64 = 0.0025;

/// One per-increment change of the in-plane principal strains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainIncrement {
    pub d_eps1: f64,
    pub d_eps2: f64,
}

impl StrainIncrement {
    pub fn new(d_eps1: f64, d_eps2: f64) -> Self {
        Self { d_eps1, d_eps2 }
    }

    pub fn equivalent(&self) -> Result<f64> {
        equivalent_strain_increment(self.d_eps1, self.d_eps2)
    }

    /// Loading direction of this increment in the (dε1, dε2) plane.
    pub fn direction(&self) -> f64 {
        self.d_eps2.atan2(self.d_eps1)
    }
}

/// Cumulative strain state recorded at one increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainState {
    pub eps1: f64,
    pub eps2: f64,
    pub phi: f64,
}

/// A recorded strain history together with its derived ε̄ and damage series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingPath {
    pub path_id: u64,
    pub steps: Vec<StrainState>,
    pub dt: f64,
    pub eps_bar: Vec<f64>,
    pub eps_bar_fail: f64,
    pub damage: Vec<f64>,
}

impl LoadingPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Per-step increments recovered by differencing the cumulative strains.
    /// The path is assumed to start from the undeformed state.
    pub fn increments(&self) -> Vec<StrainIncrement> {
        let mut prev = (0.0, 0.0);
        self.steps
            .iter()
            .map(|s| {
                let inc = StrainIncrement::new(s.eps1 - prev.0, s.eps2 - prev.1);
                prev = (s.eps1, s.eps2);
                inc
            })
            .collect()
    }

    /// Index of the first step whose direction differs from step 0, if any.
    pub fn switch_index(&self) -> Option<usize> {
        let first = self.steps.first()?.phi;
        self.steps.iter().position(|s| s.phi != first)
    }

    /// Checks the structural invariants. `tolerance` bounds the allowed gap
    /// between the stored ε̄/D series and their recomputation from the strains;
    /// pass `None` to skip the recomputation (e.g. for external data whose
    /// first increment does not start at zero strain).
    pub fn validate(&self, tolerance: Option<f64>) -> Result<()> {
        let n = self.steps.len();
        if n == 0 {
            return Err(Error::invalid(format!("path {} has no steps", self.path_id)));
        }
        if self.eps_bar.len() != n || self.damage.len() != n {
            return Err(Error::invalid(format!(
                "path {}: series lengths differ (steps {}, eps_bar {}, damage {})",
                self.path_id,
                n,
                self.eps_bar.len(),
                self.damage.len()
            )));
        }
        if !(self.eps_bar_fail > 0.0) || !self.eps_bar_fail.is_finite() {
            return Err(Error::invalid(format!(
                "path {}: eps_bar_fail must be positive, got {}",
                self.path_id, self.eps_bar_fail
            )));
        }
        let finite = self
            .steps
            .iter()
            .all(|s| s.eps1.is_finite() && s.eps2.is_finite() && s.phi.is_finite())
            && self.eps_bar.iter().chain(&self.damage).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("path {}: non-finite value", self.path_id)));
        }
        if self.eps_bar[0] < 0.0 || self.eps_bar.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "path {}: eps_bar must be nonnegative and nondecreasing",
                self.path_id
            )));
        }
        if self.damage.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "path {}: damage must be nondecreasing",
                self.path_id
            )));
        }
        if let Some(k) = self.switch_index() {
            let second = self.steps[k].phi;
            if self.steps[k..].iter().any(|s| s.phi != second) {
                return Err(Error::invalid(format!(
                    "path {}: loading direction switches more than once",
                    self.path_id
                )));
            }
        }
        for (i, (e, d)) in self.eps_bar.iter().zip(&self.damage).enumerate() {
            if (e / self.eps_bar_fail - d).abs() > tolerance.unwrap_or(1e-6) {
                return Err(Error::invalid(format!(
                    "path {} step {i}: damage {d} != eps_bar / eps_bar_fail",
                    self.path_id
                )));
            }
        }
        if let Some(tol) = tolerance {
            let recomputed = accumulate_equivalent_strain(&self.increments())?;
            for (i, (a, b)) in recomputed.iter().zip(&self.eps_bar).enumerate() {
                if (a - b).abs() > tol {
                    return Err(Error::invalid(format!(
                        "path {} step {i}: stored eps_bar {b} disagrees with recomputed {a}",
                        self.path_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// First `len` steps of every series.
    pub fn prefix(&self, len: usize) -> Result<LoadingPath> {
        if len == 0 || len > self.len() {
            return Err(Error::invalid(format!(
                "prefix length {len} outside 1..={}",
                self.len()
            )));
        }
        Ok(LoadingPath {
            path_id: self.path_id,
            steps: self.steps[..len].to_vec(),
            dt: self.dt,
            eps_bar: self.eps_bar[..len].to_vec(),
            eps_bar_fail: self.eps_bar_fail,
            damage: self.damage[..len].to_vec(),
        })
    }
}

/// Equivalent plastic strain of one increment.
pub fn equivalent_strain_increment(d_eps1: f64, d_eps2: f64) -> Result<f64> {
    if !d_eps1.is_finite() || !d_eps2.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite strain increment ({d_eps1}, {d_eps2})"
        )));
    }
    let q = d_eps1 * d_eps1 + d_eps2 * d_eps2 + d_eps1 * d_eps2;
    Ok(2.0 / 3f64.sqrt() * q.sqrt())
}

/// Running ε̄ after each increment.
pub fn accumulate_equivalent_strain(increments: &[StrainIncrement]) -> Result<Vec<f64>> {
    if increments.is_empty() {
        return Err(Error::invalid("cannot accumulate an empty increment sequence"));
    }
    let mut total = 0.0;
    increments
        .iter()
        .map(|inc| {
            total += inc.equivalent()?;
            Ok(total)
        })
        .collect()
}

pub fn damage_series(eps_bar: &[f64], eps_bar_fail: f64) -> Result<Vec<f64>> {
    if !(eps_bar_fail > 0.0) || !eps_bar_fail.is_finite() {
        return Err(Error::invalid(format!(
            "eps_bar_fail must be positive and finite, got {eps_bar_fail}"
        )));
    }
    if eps_bar.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("eps_bar must be nondecreasing"));
    }
    Ok(eps_bar.iter().map(|e| e / eps_bar_fail).collect())
}

/// Smallest index where `damage` reaches `threshold`.
pub fn localization_step(damage: &[f64], threshold: f64) -> Option<usize> {
    damage.iter().position(|&d| d >= threshold)
}

/// Parameters of a two-segment proportional strain path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilinearSpec {
    pub phi1: f64,
    pub phi2: f64,
    pub switch_fraction: f64,
    pub n_steps: usize,
    pub step_magnitude: f64,
    pub eps_bar_fail: f64,
}

impl BilinearSpec {
    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if !(self.step_magnitude > 0.0) || !self.step_magnitude.is_finite() {
            return Err(Error::invalid(format!(
                "step_magnitude must be positive, got {}",
                self.step_magnitude
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::invalid(format!(
                "switch_fraction must lie in [0, 1], got {}",
                self.switch_fraction
            )));
        }
        for phi in [self.phi1, self.phi2] {
            if !(-PI..=PI).contains(&phi) {
                return Err(Error::invalid(format!("direction {phi} outside [-pi, pi]")));
            }
        }
        if !(self.eps_bar_fail > 0.0) || !self.eps_bar_fail.is_finite() {
            return Err(Error::invalid(format!(
                "eps_bar_fail must be positive, got {}",
                self.eps_bar_fail
            )));
        }
        Ok(())
    }

    /// Number of increments loaded along `phi1`.
    pub fn first_segment_len(&self) -> usize {
        ((self.switch_fraction * self.n_steps as f64).floor() as usize).min(self.n_steps)
    }
}

/// Builds the strain history for `spec` with path id 0 and the default sampling interval.
pub fn generate_bilinear_path(spec: &BilinearSpec) -> Result<LoadingPath> {
    spec.validate()?;
    let n1 = spec.first_segment_len();
    let seg = |phi: f64| {
        (
            StrainIncrement::new(spec.step_magnitude * phi.cos(), spec.step_magnitude * phi.sin()),
            phi,
        )
    };
    let (inc1, phi1) = seg(spec.phi1);
    let (inc2, phi2) = seg(spec.phi2);

    let mut increments = Vec::with_capacity(spec.n_steps);
    let mut steps = Vec::with_capacity(spec.n_steps);
    let (mut eps1, mut eps2) = (0.0, 0.0);
    for i in 0..spec.n_steps {
        let (inc, phi) = if i < n1 { (inc1, phi1) } else { (inc2, phi2) };
        eps1 += inc.d_eps1;
        eps2 += inc.d_eps2;
        increments.push(inc);
        steps.push(StrainState { eps1, eps2, phi });
    }
    let eps_bar = accumulate_equivalent_strain(&increments)?;
    let damage = damage_series(&eps_bar, spec.eps_bar_fail)?;
    Ok(LoadingPath {
        path_id: 0,
        steps,
        dt: DEFAULT_DT,
        eps_bar,
        eps_bar_fail: spec.eps_bar_fail,
        damage,
    })
}

/// Analytic stand-in for a forming-limit curve:
/// `ε̄_fail(φ) = c0 + c1·(1 − cos(φ − φ_ref))`.
///
/// Synthetic only. Real failure strains come from the external simulations
/// and are ingested unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureCurve {
    pub c0: f64,
    pub c1: f64,
    pub phi_ref: f64,
}

impl Default for FailureCurve {
    fn default() -> Self {
        Self {
            c0: 0.3,
            c1: 0.4,
            phi_ref: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl FailureCurve {
    pub fn eval(&self, phi_final: f64) -> f64 {
        self.c0 + self.c1 * (1.0 - (phi_final - self.phi_ref).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_OVER_SQRT3: f64 = 1.154_700_538_379_251_5;

    #[test]
    fn increment_examples() {
        assert!((equivalent_strain_increment(0.001, 0.001).unwrap() - 0.002).abs() < 1e-15);
        let single = equivalent_strain_increment(0.003, 0.0).unwrap();
        assert!((single - 0.003 * TWO_OVER_SQRT3).abs() < 1e-15);
        assert!((single - 0.003_464_10).abs() < 1e-8);
        let shear = equivalent_strain_increment(0.001, -0.001).unwrap();
        assert!((shear - 0.001_154_70).abs() < 1e-8);
        assert_eq!(equivalent_strain_increment(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn increment_rejects_non_finite() {
        assert!(matches!(
            equivalent_strain_increment(f64::NAN, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(equivalent_strain_increment(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let incs = vec![StrainIncrement::new(1e-4, 1e-4); 100];
        let acc = accumulate_equivalent_strain(&incs).unwrap();
        assert!((acc[99] - 0.02).abs() < 1e-14);
        let one = accumulate_equivalent_strain(&[StrainIncrement::new(0.003, 0.0)]).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0] - 0.003_464_10).abs() < 1e-8);
        assert!(accumulate_equivalent_strain(&[]).is_err());
    }

    #[test]
    fn damage_examples() {
        let fail = 0.37;
        assert_eq!(damage_series(&[fail], fail).unwrap(), vec![1.0]);
        assert_eq!(damage_series(&[0.5 * fail], fail).unwrap(), vec![0.5]);
        assert_eq!(damage_series(&[0.0; 3], fail).unwrap(), vec![0.0; 3]);
        assert!(damage_series(&[0.1], 0.0).is_err());
        assert!(damage_series(&[0.1], -1.0).is_err());
        assert!(damage_series(&[0.2, 0.1], 1.0).is_err());
    }

    #[test]
    fn localization_examples() {
        assert_eq!(localization_step(&[0.2, 0.9, 1.0, 1.1], 1.0), Some(2));
        assert_eq!(localization_step(&[0.1, 0.2], 1.0), None);
        assert_eq!(localization_step(&[], 1.0), None);
    }

    #[test]
    fn proportional_path_when_first_segment_empty() {
        let spec = BilinearSpec {
            phi1: 0.3,
            phi2: -0.2,
            switch_fraction: 0.0,
            n_steps: 10,
            step_magnitude: 1e-3,
            eps_bar_fail: 0.4,
        };
        let path = generate_bilinear_path(&spec).unwrap();
        assert!(path.steps.iter().all(|s| s.phi == -0.2));
        assert_eq!(path.switch_index(), None);
        path.validate(Some(1e-12)).unwrap();
    }

    #[test]
    fn straight_path_along_major_axis() {
        let spec = BilinearSpec {
            phi1: 0.0,
            phi2: 0.0,
            switch_fraction: 0.5,
            n_steps: 4,
            step_magnitude: 0.001,
            eps_bar_fail: 0.3,
        };
        let path = generate_bilinear_path(&spec).unwrap();
        let eps1: Vec<f64> = path.steps.iter().map(|s| s.eps1).collect();
        for (got, want) in eps1.iter().zip([0.001, 0.002, 0.003, 0.004]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(path.steps.iter().all(|s| s.eps2 == 0.0));
    }

    #[test]
    fn switch_lands_at_floor_of_fraction() {
        let spec = BilinearSpec {
            phi1: 0.1,
            phi2: 0.7,
            switch_fraction: 0.37,
            n_steps: 10,
            step_magnitude: 1e-3,
            eps_bar_fail: 0.3,
        };
        let path = generate_bilinear_path(&spec).unwrap();
        assert_eq!(path.switch_index(), Some(3));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let good = BilinearSpec {
            phi1: 0.1,
            phi2: 0.7,
            switch_fraction: 0.5,
            n_steps: 10,
            step_magnitude: 1e-3,
            eps_bar_fail: 0.3,
        };
        for bad in [
            BilinearSpec { n_steps: 0, ..good },
            BilinearSpec { step_magnitude: 0.0, ..good },
            BilinearSpec { switch_fraction: 1.5, ..good },
            BilinearSpec { eps_bar_fail: 0.0, ..good },
            BilinearSpec { phi1: 4.0, ..good },
        ] {
            assert!(generate_bilinear_path(&bad).is_err());
        }
    }

    #[test]
    fn localization_matches_linear_scan_on_generated_path() {
        let spec = BilinearSpec {
            phi1: 0.2,
            phi2: 0.6,
            switch_fraction: 0.4,
            n_steps: 200,
            step_magnitude: 3e-3,
            eps_bar_fail: 0.35,
        };
        let path = generate_bilinear_path(&spec).unwrap();
        assert!(*path.eps_bar.last().unwrap() > spec.eps_bar_fail);
        // oracle: first index where accumulated eps_bar reaches the failure strain
        let mut expected = None;
        for (i, e) in path.eps_bar.iter().enumerate() {
            if e / spec.eps_bar_fail >= 1.0 {
                expected = Some(i);
                break;
            }
        }
        assert!(expected.is_some());
        assert_eq!(localization_step(&path.damage, 1.0), expected);
    }

    fn spec_strategy() -> impl Strategy<Value = BilinearSpec> {
        use std::f64::consts::PI;
        (
            -PI..PI,
            -PI..PI,
            0.0..=1.0f64,
            1usize..300,
            1e-4..1e-2f64,
            0.05..1.0f64,
        )
            .prop_map(|(phi1, phi2, s, n, m, f)| BilinearSpec {
                phi1,
                phi2,
                switch_fraction: s,
                n_steps: n,
                step_magnitude: m,
                eps_bar_fail: f,
            })
    }

    proptest! {
        #[test]
        fn increment_is_symmetric_scaled_and_nonnegative(a in -1.0..1.0f64, b in -1.0..1.0f64, k in -10.0..10.0f64) {
            let v = equivalent_strain_increment(a, b).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v, equivalent_strain_increment(b, a).unwrap());
            let scaled = equivalent_strain_increment(k * a, k * b).unwrap();
            prop_assert!((scaled - k.abs() * v).abs() <= 1e-12 * (1.0 + scaled.abs()));
            if a != 0.0 || b != 0.0 {
                prop_assert!(v > 0.0);
            }
        }

        #[test]
        fn generated_paths_round_trip_increments(spec in spec_strategy()) {
            let path = generate_bilinear_path(&spec).unwrap();
            path.validate(Some(1e-12)).unwrap();
            for (step, inc) in path.steps.iter().zip(path.increments()) {
                prop_assert!((inc.direction() - step.phi).abs() < 1e-12
                    || (inc.direction() - step.phi).abs() > 2.0 * std::f64::consts::PI - 1e-12);
                let d1 = spec.step_magnitude * step.phi.cos();
                let d2 = spec.step_magnitude * step.phi.sin();
                prop_assert!((inc.d_eps1 - d1).abs() < 1e-12);
                prop_assert!((inc.d_eps2 - d2).abs() < 1e-12);
            }
        }

        #[test]
        fn accumulation_matches_extended_precision_sum(
            incs in proptest::collection::vec((-1e-2..1e-2f64, -1e-2..1e-2f64), 10)
        ) {
            let incs: Vec<StrainIncrement> = incs.into_iter().map(|(a, b)| StrainIncrement::new(a, b)).collect();
            let got = accumulate_equivalent_strain(&incs).unwrap();
            // compensated (Kahan) summation of the per-step integrand as the oracle
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for (inc, g) in incs.iter().zip(&got) {
                let term = 2.0 / 3f64.sqrt()
                    * (inc.d_eps1.powi(2) + inc.d_eps2.powi(2) + inc.d_eps1 * inc.d_eps2).sqrt();
                let y = term - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
                prop_assert!((g - sum).abs() < 1e-15);
            }
            prop_assert!(got.windows(2).all(|w| w[1] >= w[0]));
        }

        #[test]
        fn damage_preserves_monotonicity(mut xs in proptest::collection::vec(0.0..1.0f64, 1..50), fail in 0.01..2.0f64) {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = damage_series(&xs, fail).unwrap();
            prop_assert!(d.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
