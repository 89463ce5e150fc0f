//! Monotone particle configurations on the circle and the two quotient
//! distances between them.
//!
//! A [`Configuration`] is a sorted lift of `n` particle positions to the real
//! line. Two lifts that differ by a common integer shift, or by a cyclic
//! relabeling of the particles (advance the start index, add one to the
//! wrapped particles), describe the same empirical measure on the circle; the
//! [`ConfigurationClass`] stores the canonical representative of that class.
//!
//! Particles carry uniform weights `1/n`, so every norm here is the weighted
//! `L²` norm `sqrt((1/n) Σ x_i²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used by validation and distance comparisons.
pub const TOL: f64 = 1e-12;

/// Distance from `a` to `b` on the unit circle, in `[0, 1/2]`.
pub fn circle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Fractional part in `[0, 1)`, robust to `rem_euclid` rounding up to 1.
pub fn frac(x: f64) -> f64 {
    let f = x.rem_euclid(1.0);
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

/// Weighted `L²` norm of a vector of per-particle quantities.
pub fn weighted_norm(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Weighted inner product `(1/n) Σ a_i b_i`.
pub fn weighted_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// A sorted lift of `n` particle positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Configuration {
    points: Vec<f64>,
}

impl Configuration {
    /// Validates membership in `Mon`: sorted with spread at most one.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        Self::with_spread(points, 1.0)
    }

    /// Validates membership in `Mon_3`: sorted with spread at most three.
    pub fn new_mon3(points: Vec<f64>) -> Result<Self> {
        Self::with_spread(points, 3.0)
    }

    fn with_spread(points: Vec<f64>, spread: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("a configuration needs at least one particle".into()));
        }
        if let Some(bad) = points.iter().find(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite position {bad}")));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] < w[0] - TOL) {
            return Err(Error::Validation(format!(
                "positions must be nondecreasing: points[{}] = {} > points[{}] = {}",
                i,
                points[i],
                i + 1,
                points[i + 1]
            )));
        }
        let s = points[points.len() - 1] - points[0];
        if s > spread + TOL {
            return Err(Error::Validation(format!(
                "spread {s} exceeds the allowed {spread}"
            )));
        }
        Ok(Self { points })
    }

    /// Builds a configuration without validation. Callers guarantee order.
    pub(crate) fn from_sorted_unchecked(points: Vec<f64>) -> Self {
        Self { points }
    }

    /// Equally spaced configuration `base + i/n`.
    pub fn uniform(n: usize, base: f64) -> Self {
        Self {
            points: (0..n).map(|i| base + i as f64 / n as f64).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    pub fn spread(&self) -> f64 {
        self.points[self.n() - 1] - self.points[0]
    }

    /// Adds a common real shift to every particle.
    pub fn shifted(&self, by: f64) -> Self {
        Self {
            points: self.points.iter().map(|x| x + by).collect(),
        }
    }

    /// The `r`-th cyclic relabeling: start at index `r`, wrapped particles
    /// raised by one.
    pub fn relabeled(&self, r: usize) -> Self {
        Self {
            points: cyclic_relabel(&self.points, r),
        }
    }

    pub fn canonicalize(&self) -> ConfigurationClass {
        ConfigurationClass::of_points(&self.points)
    }
}

impl TryFrom<Vec<f64>> for Configuration {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<Configuration> for Vec<f64> {
    fn from(c: Configuration) -> Self {
        c.points
    }
}

pub(crate) fn cyclic_relabel(points: &[f64], r: usize) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let j = i + r;
            if j < n {
                points[j]
            } else {
                points[j - n] + 1.0
            }
        })
        .collect()
}

/// An equivalence class of configurations modulo common integer shifts and
/// cyclic relabeling, stored through its canonical representative.
///
/// The canonical representative has base point in `[0, 1)` and is the
/// lexicographically least of the `n` cyclic relabelings with that property;
/// it coincides with the sorted fractional parts of the positions.
///
/// Equality compares points up to `TOL` on the circle, so representatives that
/// differ only by rounding in the fractional part are the same class.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConfigurationClass {
    canonical: Configuration,
}

impl ConfigurationClass {
    /// Class of an arbitrary multiset of lifted positions (any order).
    pub fn of_points(points: &[f64]) -> Self {
        let mut f: Vec<f64> = points.iter().map(|&x| frac(x)).collect();
        f.sort_by(|a, b| a.partial_cmp(b).expect("finite positions"));
        Self {
            canonical: Configuration::from_sorted_unchecked(f),
        }
    }

    pub fn canonical(&self) -> &Configuration {
        &self.canonical
    }

    pub fn n(&self) -> usize {
        self.canonical.n()
    }

    pub fn points(&self) -> &[f64] {
        self.canonical.points()
    }

    pub fn gap_coordinates(&self) -> GapCoordinates {
        GapCoordinates::from_class(self)
    }
}

impl PartialEq for ConfigurationClass {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (self.points(), other.points());
        let n = a.len();
        n == b.len()
            && (0..n.max(1)).any(|r| {
                (0..n).all(|i| circle_dist(a[i], b[(i + r) % n]) <= TOL)
            })
    }
}

impl TryFrom<Vec<f64>> for ConfigurationClass {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Ok(Configuration::new(points)?.canonicalize())
    }
}

impl From<ConfigurationClass> for Vec<f64> {
    fn from(c: ConfigurationClass) -> Self {
        c.canonical.points
    }
}

/// Base point and consecutive gaps of a canonical configuration. The last gap
/// closes the circle, so the gaps sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCoordinates {
    pub base: f64,
    pub gaps: Vec<f64>,
}

impl GapCoordinates {
    pub fn from_class(class: &ConfigurationClass) -> Self {
        let p = class.points();
        let n = p.len();
        let mut gaps: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.push(1.0 - (p[n - 1] - p[0]));
        Self { base: p[0], gaps }
    }

    pub fn to_configuration(&self) -> Configuration {
        let n = self.gaps.len();
        let mut points = Vec::with_capacity(n);
        let mut x = self.base;
        for g in &self.gaps[..n] {
            points.push(x);
            x += g;
        }
        Configuration::from_sorted_unchecked(points)
    }
}

fn check_dims(m: &Configuration, n: &Configuration) -> Result<()> {
    if m.n() != n.n() {
        return Err(Error::Dimension {
            expected: m.n(),
            got: n.n(),
        });
    }
    Ok(())
}

/// Distance between `L²_Z` classes: the weighted norm of the per-particle
/// circle distances.
pub fn dist_z(m: &Configuration, n: &Configuration) -> Result<f64> {
    check_dims(m, n)?;
    let d: Vec<f64> = m
        .points()
        .iter()
        .zip(n.points())
        .map(|(a, b)| circle_dist(*a, *b))
        .collect();
    Ok(weighted_norm(&d))
}

/// Quadratic Wasserstein distance between the two uniform empirical measures
/// on the circle, computed over cyclically ordered matchings.
pub fn dist_s(m: &Configuration, n: &Configuration) -> Result<f64> {
    check_dims(m, n)?;
    Ok(dist_s_points(m.points(), n.points()))
}

pub(crate) fn dist_s_points(m: &[f64], n: &[f64]) -> f64 {
    best_relabel(m, n).0
}

/// `dist_S` with the cyclic relabeling of `n` that attains it.
pub(crate) fn best_relabel(m: &[f64], n: &[f64]) -> (f64, usize) {
    let k = m.len();
    let mut best = (f64::INFINITY, 0);
    let mut d = vec![0.0; k];
    for r in 0..k {
        for (i, di) in d.iter_mut().enumerate() {
            let j = i + r;
            let target = if j < k { n[j] } else { n[j - k] + 1.0 };
            *di = m[i] - target;
        }
        let mean = d.iter().sum::<f64>() / k as f64;
        for z in [mean.floor(), mean.ceil()] {
            let s = d.iter().map(|x| (x - z) * (x - z)).sum::<f64>() / k as f64;
            if s < best.0 {
                best = (s, r);
            }
        }
    }
    (best.0.sqrt(), best.1)
}

/// Block-averages consecutive groups of `n/m` particles.
pub fn coarse_grain(m_conf: &Configuration, m: usize) -> Result<Configuration> {
    let n = m_conf.n();
    if m == 0 || n % m != 0 {
        return Err(Error::Arity { n, m });
    }
    let block = n / m;
    let points = m_conf
        .points()
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect();
    Ok(Configuration::from_sorted_unchecked(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn conf(p: &[f64]) -> Configuration {
        Configuration::new(p.to_vec()).unwrap()
    }

    /// All matchings, with per-particle integer shifts in {-1, 0, 1}.
    fn brute_force_w2(m: &[f64], n: &[f64]) -> f64 {
        fn permutations(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = vec![];
            for p in permutations(k - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        let k = m.len();
        let mut best = f64::INFINITY;
        for perm in permutations(k) {
            let mut s = 0.0;
            for i in 0..k {
                let mut b = f64::INFINITY;
                for z in [-1.0, 0.0, 1.0] {
                    let d = m[i] - n[perm[i]] - z;
                    b = b.min(d * d);
                }
                s += b;
            }
            best = best.min(s / k as f64);
        }
        best.sqrt()
    }

    fn sorted_points(k: usize) -> impl Strategy<Value = Vec<f64>> {
        (proptest::collection::vec(0.0f64..1.0, k), -2i32..3).prop_map(|(mut v, shift)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.iter().map(|x| x + shift as f64).collect()
        })
    }

    #[test]
    fn circle_dist_examples() {
        assert_abs_diff_eq!(circle_dist(0.9, 0.2), 0.3, epsilon = 1e-15);
        assert_eq!(circle_dist(0.5, 0.5), 0.0);
        assert_eq!(circle_dist(0.0, 0.5), 0.5);
    }

    #[test]
    fn dist_z_examples() {
        let d = dist_z(&conf(&[0.1, 0.9]), &Configuration::new_mon3(vec![0.2, 1.1]).unwrap()).unwrap();
        // per-coordinate circle distances 0.1 and 0.2
        assert_abs_diff_eq!(d, 0.025f64.sqrt(), epsilon = 1e-14);
        let m = conf(&[0.1, 0.7]);
        assert_eq!(dist_z(&m, &m).unwrap(), 0.0);
        let shifted = Configuration::new_mon3(vec![1.1, 2.7]).unwrap();
        assert_abs_diff_eq!(dist_z(&m, &shifted).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dist_s_examples() {
        let d = dist_s(&conf(&[0.0, 0.5]), &conf(&[0.25, 0.75])).unwrap();
        assert_abs_diff_eq!(d, 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(
            d,
            brute_force_w2(&[0.0, 0.5], &[0.25, 0.75]),
            epsilon = 1e-14
        );
        let m = conf(&[0.1, 0.4, 0.8]);
        assert_abs_diff_eq!(dist_s(&m, &m.relabeled(2)).unwrap(), 0.0, epsilon = 1e-14);
        let a = conf(&[0.9]);
        let b = conf(&[0.15]);
        assert_abs_diff_eq!(dist_s(&a, &b).unwrap(), circle_dist(0.9, 0.15), epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let r = dist_s(&conf(&[0.1]), &conf(&[0.1, 0.2]));
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert!(dist_z(&conf(&[0.1]), &conf(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn canonicalize_examples() {
        // Lexicographically least representative of {0.3, 0.1} (mod 1).
        let c = conf(&[1.3, 2.1]).canonicalize();
        assert_abs_diff_eq!(c.points()[0], 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(c.points()[1], 0.3, epsilon = 1e-14);
        // (0.3, 1.1) is another representative of the same class.
        assert_eq!(conf(&[0.3, 1.1]).canonicalize(), c);

        let c = conf(&[0.6, 1.2]).canonicalize();
        assert_abs_diff_eq!(c.points()[0], 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(c.points()[1], 0.6, epsilon = 1e-14);

        let again = c.canonical().canonicalize();
        assert_eq!(again, c);
    }

    #[test]
    fn canonicalize_rejects_non_monotone_input() {
        assert!(Configuration::new(vec![0.5, 0.2]).is_err());
        assert!(Configuration::new(vec![0.0, 1.5]).is_err());
        assert!(Configuration::new_mon3(vec![0.0, 1.5]).is_ok());
    }

    #[test]
    fn repeated_points_are_allowed() {
        let c = conf(&[0.4, 0.4, 1.0]).canonicalize();
        assert_eq!(c.points(), &[0.0, 0.4, 0.4]);
    }

    #[test]
    fn coarse_grain_examples() {
        assert_eq!(coarse_grain(&conf(&[0.2, 0.4]), 1).unwrap().points(), &[0.30000000000000004]);
        let m = conf(&[0.1, 0.3, 0.7]);
        assert_eq!(coarse_grain(&m, 3).unwrap(), m);
        let m = conf(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(coarse_grain(&m, 2).unwrap().points(), &[0.0, 1.0]);
        assert!(matches!(coarse_grain(&m, 3), Err(Error::Arity { .. })));
    }

    #[test]
    fn gap_coordinates_roundtrip() {
        let c = conf(&[0.35, 0.5, 1.2]).canonicalize();
        let g = c.gap_coordinates();
        assert_abs_diff_eq!(g.gaps.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let back = g.to_configuration();
        for (a, b) in back.points().iter().zip(c.points()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn json_is_a_plain_array() {
        let m = conf(&[0.25, 0.75]);
        assert_eq!(serde_json::to_string(&m).unwrap(), "[0.25,0.75]");
        let back: Configuration = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<Configuration>("[0.75,0.25]").is_err());
        let class: ConfigurationClass = serde_json::from_str("[0.6,1.2]").unwrap();
        assert_eq!(serde_json::to_string(&class).unwrap(), "[0.19999999999999996,0.6]");
    }

    proptest! {
        #[test]
        fn dist_s_matches_brute_force(k in 1usize..=5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || {
                let mut v: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v
            };
            let m = draw();
            let n = draw();
            let fast = dist_s_points(&m, &n);
            let slow = brute_force_w2(&m, &n);
            prop_assert!((fast - slow).abs() < 1e-12, "{} vs {}", fast, slow);
        }

        #[test]
        fn dist_s_below_dist_z(m in sorted_points(3), n in sorted_points(3)) {
            let (m, n) = (conf(&m), conf(&n));
            prop_assert!(dist_s(&m, &n).unwrap() <= dist_z(&m, &n).unwrap() + TOL);
        }

        #[test]
        fn triangle_inequalities(a in sorted_points(3), b in sorted_points(3), c in sorted_points(3)) {
            let (a, b, c) = (conf(&a), conf(&b), conf(&c));
            for d in [dist_s, dist_z] {
                prop_assert!(d(&a, &c).unwrap() <= d(&a, &b).unwrap() + d(&b, &c).unwrap() + TOL);
            }
        }

        #[test]
        fn dist_s_is_class_invariant(a in sorted_points(4), b in sorted_points(4), r in 0usize..4, z in -2i32..3) {
            let (a, b) = (conf(&a), conf(&b));
            let b2 = b.relabeled(r).shifted(z as f64);
            let d1 = dist_s(&a, &b).unwrap();
            let d2 = dist_s_points(a.points(), b2.points());
            prop_assert!((d1 - d2).abs() < 1e-12);
        }

        #[test]
        fn canonicalize_is_idempotent(a in sorted_points(4), r in 0usize..4) {
            let c = conf(&a).relabeled(r).canonicalize();
            prop_assert_eq!(c.canonical().canonicalize(), c.clone());
            prop_assert_eq!(conf(&a).canonicalize(), c);
        }
    }
}
