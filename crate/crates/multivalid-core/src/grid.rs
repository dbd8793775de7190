//! Bucket partition and prediction grids.
//!
//! Buckets partition [0,1] into n cells B_n(i) = [(i−1)/n, i/n) for i < n and
//! B_n(n) = [(n−1)/n, 1]. Predictions live on 𝒫^{rn} = {0, 1/rn, …, 1} and are
//! represented by their integer numerator over the denominator rn, so the
//! bucket of a prediction is integer arithmetic: i = min(num/r + 1, n).

use serde::{Deserialize, Serialize};

use crate::CoreError;

/// Largest supported grid denominator r·n. Keeps numerators comfortably inside
/// u32 and exact in f64.
const MAX_DENOMINATOR: u32 = 1 << 26;

/// A point of a grid {0, 1/den, …, 1}, stored exactly as numerator/denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub numerator: u32,
    pub denominator: u32,
}

impl GridPoint {
    pub fn new(numerator: u32, denominator: u32) -> Self {
        assert!(denominator >= 1 && numerator <= denominator);
        Self { numerator, denominator }
    }

    /// The point as a float; exact up to one correctly rounded division.
    pub fn value(&self) -> f64 {
        f64::from(self.numerator) / f64::from(self.denominator)
    }
}

/// Discretization parameters: n buckets, optional n′ moment buckets, and the
/// grid refinement r.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketGrid {
    n: u32,
    n_prime: Option<u32>,
    r: u32,
}

impl BucketGrid {
    pub fn new(n: u32, r: u32) -> Result<Self, CoreError> {
        if n < 1 {
            return Err(CoreError::InvalidBucketCount);
        }
        if r < 1 {
            return Err(CoreError::InvalidRefinement);
        }
        let rn = u64::from(n) * u64::from(r);
        if rn > u64::from(MAX_DENOMINATOR) {
            return Err(CoreError::GridTooFine { rn, max: MAX_DENOMINATOR });
        }
        Ok(Self { n, n_prime: None, r })
    }

    pub fn with_moment_buckets(n: u32, n_prime: u32, r: u32) -> Result<Self, CoreError> {
        let mut grid = Self::new(n, r)?;
        if n_prime < 1 {
            return Err(CoreError::InvalidBucketCount);
        }
        let rn_prime = u64::from(n_prime) * u64::from(r);
        if rn_prime > u64::from(MAX_DENOMINATOR) {
            return Err(CoreError::GridTooFine { rn: rn_prime, max: MAX_DENOMINATOR });
        }
        grid.n_prime = Some(n_prime);
        Ok(grid)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn n_prime(&self) -> Option<u32> {
        self.n_prime
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    /// Denominator r·n of the prediction grid.
    pub fn denominator(&self) -> u32 {
        self.r * self.n
    }

    /// Denominator r·n′ of the moment grid, when n′ is configured.
    pub fn moment_denominator(&self) -> Option<u32> {
        self.n_prime.map(|np| self.r * np)
    }

    /// The grid point num/(rn).
    pub fn point(&self, numerator: u32) -> GridPoint {
        GridPoint::new(numerator, self.denominator())
    }

    /// Bucket index in [1, n] of a prediction-grid point.
    pub fn bucket_of(&self, point: GridPoint) -> u32 {
        debug_assert_eq!(point.denominator, self.denominator());
        bucket_of_numerator(point.numerator, self.r, self.n)
    }
}

/// All rn+1 points of 𝒫^{rn}, in increasing order.
pub fn grid_points(r: u32, n: u32) -> Vec<GridPoint> {
    assert!(r >= 1 && n >= 1);
    let den = r * n;
    (0..=den).map(|num| GridPoint::new(num, den)).collect()
}

/// Bucket index in [1, n] of the grid point num/(rn). The final point rn/(rn)
/// belongs to the closed last bucket.
pub fn bucket_of_numerator(numerator: u32, r: u32, n: u32) -> u32 {
    debug_assert!(numerator <= r * n);
    (numerator / r + 1).min(n)
}

/// Bucket index in [1, n] of an arbitrary value: the unique i with
/// v ∈ [(i−1)/n, i/n), where the last bucket is closed at 1. Boundaries are
/// the correctly rounded floats i/n, so membership is well defined for every
/// representable v.
pub fn bucket_index(v: f64, n: u32) -> Result<u32, CoreError> {
    assert!(n >= 1, "bucket count must be at least 1");
    if !(0.0..=1.0).contains(&v) {
        return Err(CoreError::ValueOutOfRange { value: v });
    }
    if v >= 1.0 {
        return Ok(n);
    }
    let nf = f64::from(n);
    let mut i = (v * nf) as u32 + 1;
    i = i.clamp(1, n);
    // Fix up against the rounded boundaries; each loop moves at most one step.
    while i > 1 && v < f64::from(i - 1) / nf {
        i -= 1;
    }
    while i < n && v >= f64::from(i) / nf {
        i += 1;
    }
    Ok(i)
}

/// Coverage indicator: y ∈ [ℓ, u), except that intervals ending exactly at 1
/// are closed there (y ∈ [ℓ, u]). Endpoints may lie outside [0,1] (the
/// residual wrapper reports intervals on a wider scale); the closed-right rule
/// applies only to u = 1 exactly.
pub fn cover(lower: f64, upper: f64, y: f64) -> bool {
    assert!(lower <= upper, "interval endpoints out of order");
    if upper == 1.0 {
        y >= lower && y <= upper
    } else {
        y >= lower && y < upper
    }
}
