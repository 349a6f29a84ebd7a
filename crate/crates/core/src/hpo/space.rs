//! Search dimensions and their mapping to and from the unit cube.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ArchitectureTag;

/// One sampled point, keyed by dimension name.
pub type Configuration = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKind {
    /// Real-valued, uniform in the value.
    Linear,
    /// Real-valued, uniform in log10 of the value.
    Log,
    /// Every integer in `[low, high]` equally likely.
    Integer,
    /// Powers of two in `[low, high]`, equally likely.
    Log2Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub kind: DimensionKind,
    pub low: f64,
    pub high: f64,
}

impl Dimension {
    pub fn new(name: &str, kind: DimensionKind, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            low,
            high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("dimension `{}`: {msg}", self.name)));
        if !(self.low.is_finite() && self.high.is_finite()) || self.low > self.high {
            return bad("bounds must be finite and ordered");
        }
        match self.kind {
            DimensionKind::Linear => Ok(()),
            DimensionKind::Log if self.low <= 0.0 => bad("log bounds must be positive"),
            DimensionKind::Integer if self.low.fract() != 0.0 || self.high.fract() != 0.0 => {
                bad("integer bounds must be whole")
            }
            DimensionKind::Log2Integer if !is_pow2(self.low) || !is_pow2(self.high) => {
                bad("log2 grid bounds must be powers of two")
            }
            _ => Ok(()),
        }
    }

    /// Maps `u` in `[0, 1]` to a value inside the bounds.
    pub fn decode(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.kind {
            DimensionKind::Linear => self.low + u * (self.high - self.low),
            DimensionKind::Log => {
                let (a, b) = (self.low.log10(), self.high.log10());
                10f64.powf(a + u * (b - a)).clamp(self.low, self.high)
            }
            DimensionKind::Integer => bin(u, self.low, self.high),
            DimensionKind::Log2Integer => 2f64.powf(bin(u, self.low.log2(), self.high.log2())),
        }
    }

    /// Position of `value` in the unit cube; integers map to bin centres.
    pub fn encode(&self, value: f64) -> f64 {
        let frac = |x: f64, a: f64, b: f64| if b > a { (x - a) / (b - a) } else { 0.5 };
        let centre = |x: f64, a: f64, b: f64| (x - a + 0.5) / (b - a + 1.0);
        let u = match self.kind {
            DimensionKind::Linear => frac(value, self.low, self.high),
            DimensionKind::Log => frac(value.log10(), self.low.log10(), self.high.log10()),
            DimensionKind::Integer => centre(value, self.low, self.high),
            DimensionKind::Log2Integer => centre(value.log2(), self.low.log2(), self.high.log2()),
        };
        u.clamp(0.0, 1.0)
    }

    pub fn contains(&self, value: f64) -> bool {
        let inside = value >= self.low && value <= self.high;
        inside
            && match self.kind {
                DimensionKind::Linear | DimensionKind::Log => true,
                DimensionKind::Integer => value.fract() == 0.0,
                DimensionKind::Log2Integer => is_pow2(value),
            }
    }
}

fn is_pow2(x: f64) -> bool {
    x >= 1.0 && x.fract() == 0.0 && (x as u64).is_power_of_two()
}

/// Equal-width bins over the integers `lo..=hi`.
fn bin(u: f64, lo: f64, hi: f64) -> f64 {
    (lo + (u * (hi - lo + 1.0)).floor()).min(hi)
}

/// Named dimensions for one architecture family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub architecture: Option<ArchitectureTag>,
    pub dimensions: Vec<Dimension>,
}

impl SearchSpace {
    /// Default search ranges for the given family.
    pub fn for_architecture(tag: ArchitectureTag) -> Self {
        use DimensionKind::*;
        let batch = Dimension::new("batch_size", Log2Integer, 16.0, 256.0);
        let dimensions = match tag {
            ArchitectureTag::Gru => vec![
                Dimension::new("learning_rate", Log, 1e-5, 1e-3),
                Dimension::new("hidden", Integer, 16.0, 128.0),
                batch,
            ],
            ArchitectureTag::Cnn => vec![
                Dimension::new("learning_rate", Log, 1e-5, 1e-3),
                Dimension::new("filters", Integer, 16.0, 128.0),
                Dimension::new("kernel", Integer, 3.0, 7.0),
                batch,
            ],
            ArchitectureTag::Transformer => vec![
                Dimension::new("learning_rate", Log, 1e-5, 1e-2),
                Dimension::new("d_model", Integer, 16.0, 128.0),
                Dimension::new("heads", Integer, 1.0, 8.0),
                Dimension::new("d_ff", Integer, 32.0, 256.0),
                batch,
            ],
        };
        Self {
            architecture: Some(tag),
            dimensions,
        }
    }

    pub fn len(&self) -> usize {
        self.dimensions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dimensions.is_empty()
    }

    pub fn dimension(&self, name: &str) -> Option<&Dimension> {
        self.dimensions.iter().find(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::invalid("search space has no dimensions"));
        }
        for (i, d) in self.dimensions.iter().enumerate() {
            d.validate()?;
            if self.dimensions[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::invalid(format!("duplicate dimension `{}`", d.name)));
            }
        }
        if let Some(tag) = self.architecture {
            let expected = Self::for_architecture(tag);
            for d in &expected.dimensions {
                if self.dimension(&d.name).is_none() {
                    return Err(Error::invalid(format!("{tag} search space lacks `{}`", d.name)));
                }
            }
            if self.len() != expected.len() {
                return Err(Error::invalid(format!("{tag} search space has extra dimensions")));
            }
        }
        Ok(())
    }

    /// Decodes a unit-cube point (one coordinate per dimension, in order).
    pub fn decode(&self, u: &[f64]) -> Configuration {
        let mut cfg: Configuration = self
            .dimensions
            .iter()
            .zip(u)
            .map(|(d, &x)| (d.name.clone(), d.decode(x)))
            .collect();
        self.canonicalize(&mut cfg);
        cfg
    }

    pub fn encode(&self, cfg: &Configuration) -> Vec<f64> {
        self.dimensions
            .iter()
            .map(|d| d.encode(cfg.get(&d.name).copied().unwrap_or(d.low)))
            .collect()
    }

    /// Applies cross-dimension constraints: `d_model` becomes the nearest
    /// multiple of `heads` that stays inside its bounds.
    pub fn canonicalize(&self, cfg: &mut Configuration) {
        let (Some(dm), Some(&heads)) = (self.dimension("d_model"), cfg.get("heads")) else {
            return;
        };
        let Some(&d) = cfg.get("d_model") else {
            return;
        };
        let h = heads.max(1.0);
        let lo = (dm.low / h).ceil() * h;
        let hi = (dm.high / h).floor() * h;
        cfg.insert("d_model".into(), ((d / h).round() * h).clamp(lo, hi));
    }

    pub fn contains(&self, cfg: &Configuration) -> bool {
        cfg.len() == self.len()
            && self
                .dimensions
                .iter()
                .all(|d| cfg.get(&d.name).is_some_and(|&v| d.contains(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_ranges() {
        let gru = SearchSpace::for_architecture(ArchitectureTag::Gru);
        let lr = gru.dimension("learning_rate").unwrap();
        assert_eq!((lr.low, lr.high), (1e-5, 1e-3));
        let hidden = gru.dimension("hidden").unwrap();
        assert_eq!((hidden.low, hidden.high), (16.0, 128.0));
        let cnn = SearchSpace::for_architecture(ArchitectureTag::Cnn);
        assert_eq!(cnn.dimension("kernel").map(|d| (d.low, d.high)), Some((3.0, 7.0)));
        let tr = SearchSpace::for_architecture(ArchitectureTag::Transformer);
        assert_eq!(tr.dimension("learning_rate").unwrap().high, 1e-2);
        assert_eq!(tr.dimension("heads").map(|d| (d.low, d.high)), Some((1.0, 8.0)));
        assert_eq!(tr.dimension("d_ff").map(|d| (d.low, d.high)), Some((32.0, 256.0)));
        for tag in ArchitectureTag::ALL {
            SearchSpace::for_architecture(tag).validate().unwrap();
        }
    }

    #[test]
    fn batch_grid_is_powers_of_two() {
        let d = Dimension::new("batch_size", DimensionKind::Log2Integer, 16.0, 256.0);
        let seen: std::collections::BTreeSet<u64> = (0..=1000).map(|i| d.decode(i as f64 / 1000.0) as u64).collect();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![16, 32, 64, 128, 256]);
    }

    #[test]
    fn integer_bins_have_equal_mass() {
        let d = Dimension::new("kernel", DimensionKind::Integer, 3.0, 7.0);
        let mut counts = [0usize; 5];
        for i in 0..5000 {
            counts[d.decode((i as f64 + 0.5) / 5000.0) as usize - 3] += 1;
        }
        assert_eq!(counts, [1000; 5]);
        assert_eq!(d.decode(1.0), 7.0);
        assert_eq!(d.decode(0.0), 3.0);
    }

    #[test]
    fn invalid_spaces() {
        let mut s = SearchSpace::for_architecture(ArchitectureTag::Gru);
        s.dimensions[1].low = 200.0;
        assert!(s.validate().is_err());
        let mut s = SearchSpace::for_architecture(ArchitectureTag::Gru);
        s.dimensions.pop();
        assert!(s.validate().is_err());
        let s = SearchSpace {
            architecture: None,
            dimensions: vec![Dimension::new("b", DimensionKind::Log2Integer, 16.0, 100.0)],
        };
        assert!(s.validate().is_err());
        assert!(Dimension::new("lr", DimensionKind::Log, 0.0, 1.0).validate().is_err());
    }

    #[test]
    fn d_model_is_multiple_of_heads() {
        let s = SearchSpace::for_architecture(ArchitectureTag::Transformer);
        for i in 0..500 {
            let u: Vec<f64> = (0..5).map(|k| ((i * (k + 3) * 37) % 101) as f64 / 100.0).collect();
            let cfg = s.decode(&u);
            assert_eq!(cfg["d_model"] % cfg["heads"], 0.0, "{cfg:?}");
            assert!(s.contains(&cfg));
        }
    }

    proptest! {
        #[test]
        fn decode_stays_in_bounds(u in proptest::collection::vec(0.0..=1.0f64, 5)) {
            for tag in ArchitectureTag::ALL {
                let s = SearchSpace::for_architecture(tag);
                let cfg = s.decode(&u[..s.len()]);
                prop_assert!(s.contains(&cfg), "{:?}", cfg);
            }
        }

        #[test]
        fn encode_decode_round_trip(u in 0.0..=1.0f64) {
            for d in SearchSpace::for_architecture(ArchitectureTag::Cnn).dimensions {
                let v = d.decode(u);
                let back = d.decode(d.encode(v));
                prop_assert!((back - v).abs() <= 1e-9 * v.abs(), "{} {} {}", d.name, v, back);
            }
        }
    }
}
