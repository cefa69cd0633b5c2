//! Point clouds made of randomly placed shapes, labelled by how many of each
//! shape they contain.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::group::{act, random_transform, GroupId, SpatialPoint};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Triangle,
    Square,
    Pentagon,
    L,
}

pub const PATTERNS: [Pattern; 4] = [Pattern::Triangle, Pattern::Square, Pattern::Pentagon, Pattern::L];
/// Each pattern appears 0, 1 or 2 times.
pub const MAX_INSTANCES: usize = 2;
pub const SIZE_RANGE: (f64, f64) = (0.5, 1.5);
pub const CENTRE_BOX: f64 = 5.0;
pub const MIN_SEPARATION: f64 = 0.5;

impl Pattern {
    pub fn num_vertices(self) -> usize {
        match self {
            Pattern::Triangle => 3,
            Pattern::Square | Pattern::L => 4,
            Pattern::Pentagon => 5,
        }
    }

    /// Vertices for edge length 1, centred on the origin.
    fn template(self) -> Vec<[f64; 2]> {
        let regular = |k: usize| {
            let r = 0.5 / (PI / k as f64).sin();
            (0..k)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / k as f64;
                    [r * a.cos(), r * a.sin()]
                })
                .collect()
        };
        match self {
            Pattern::Triangle => regular(3),
            Pattern::Square => regular(4),
            Pattern::Pentagon => regular(5),
            Pattern::L => {
                let pts = [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [1.0, 0.0]];
                pts.iter().map(|p| [p[0] - 0.25, p[1] - 0.75]).collect()
            }
        }
    }
}

/// Vertices of `pattern` with edge length `size`, rotated by `angle` and
/// centred at `centre`.
pub fn place_pattern(pattern: Pattern, size: f64, angle: f64, centre: [f64; 2]) -> Vec<[f64; 2]> {
    let (c, s) = (angle.cos(), angle.sin());
    pattern
        .template()
        .into_iter()
        .map(|[x, y]| [size * (c * x - s * y) + centre[0], size * (s * x + c * y) + centre[1]])
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    #[default]
    None,
    T2,
    SE2,
}

impl std::str::FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "t2" => Ok(Augment::T2),
            "se2" => Ok(Augment::SE2),
            other => Err(Error::Config(format!("unknown augmentation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstellationExample {
    pub points: Vec<[f64; 2]>,
    /// Instance count per entry of [`PATTERNS`].
    pub labels: [usize; 4],
    pub seed: u64,
}

impl ConstellationExample {
    pub fn validate(&self) -> Result<()> {
        let expected: usize = PATTERNS.iter().zip(&self.labels).map(|(p, c)| p.num_vertices() * c).sum();
        if self.labels.iter().any(|&c| c > MAX_INSTANCES) {
            return Err(Error::Config(format!("labels out of range: {:?}", self.labels)));
        }
        if expected != self.points.len() {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.points.len(),
            });
        }
        Ok(())
    }

    /// Positions `n x 2` and unit features `n x 1`.
    pub fn to_input(&self) -> Result<(Tensor, Tensor)> {
        let n = self.points.len();
        let x = Tensor::from_vec(n, 2, self.points.iter().flatten().copied().collect())?;
        Ok((x, Tensor::full(n, 1, 1.0)))
    }
}

fn try_generate(seed: u64) -> Option<ConstellationExample> {
    let mut rng = seeded(seed);
    let mut labels = [0; 4];
    while labels.iter().all(|&c| c == 0) {
        for c in labels.iter_mut() {
            *c = rng.gen_range(0..=MAX_INSTANCES);
        }
    }
    let mut points: Vec<[f64; 2]> = Vec::new();
    for (pattern, &count) in PATTERNS.iter().zip(&labels) {
        for _ in 0..count {
            let placed = (0..100).find_map(|_| {
                let size = rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1);
                let angle = rng.gen_range(0.0..2.0 * PI);
                let centre = [rng.gen_range(-CENTRE_BOX..=CENTRE_BOX), rng.gen_range(-CENTRE_BOX..=CENTRE_BOX)];
                let cand = place_pattern(*pattern, size, angle, centre);
                let clear = cand
                    .iter()
                    .all(|a| points.iter().all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) >= MIN_SEPARATION));
                clear.then_some(cand)
            })?;
            points.extend(placed);
        }
    }
    Some(ConstellationExample { points, labels, seed })
}

/// `count` examples; example `i` is drawn from `derive_seed(rng_seed, i)`.
///
/// Each pattern gets 0 to 2 instances (at least one shape overall), edge
/// length uniform in `[0.5, 1.5]`, uniform orientation and centre uniform in
/// `[-5, 5]^2`; points of different instances stay at least 0.5 apart.
/// `augment` then moves each whole example by a random translation (and
/// rotation for `SE2`).
pub fn generate_constellation(count: usize, rng_seed: u64, augment: Augment) -> Result<Vec<ConstellationExample>> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    (0..count)
        .map(|i| {
            let seed = derive_seed(rng_seed, i as u64);
            let mut ex = (0..)
                .find_map(|attempt| try_generate(derive_seed(seed, attempt)))
                .expect("unbounded retries");
            ex.seed = seed;
            let group = match augment {
                Augment::None => return Ok(ex),
                Augment::T2 => GroupId::T(2),
                Augment::SE2 => GroupId::SE2,
            };
            let u = random_transform(group, CENTRE_BOX, derive_seed(seed, u64::MAX))?;
            for p in ex.points.iter_mut() {
                let moved = act(&u, &SpatialPoint::new(p.to_vec()))?;
                *p = [moved.0[0], moved.0[1]];
            }
            Ok(ex)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_distances() {
        let s = 1.3;
        let pts = place_pattern(Pattern::Square, s, 0.7, [1.0, -2.0]);
        let mut d: Vec<f64> = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                d.push((pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]));
            }
        }
        d.sort_by(f64::total_cmp);
        let want = [s, s, s, s, s * 2f64.sqrt(), s * 2f64.sqrt()];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_match_construction() {
        let data = generate_constellation(50, 3, Augment::None).unwrap();
        for ex in &data {
            ex.validate().unwrap();
            assert!(ex.labels.iter().any(|&c| c > 0));
        }
        assert_eq!(data, generate_constellation(50, 3, Augment::None).unwrap());
    }

    #[test]
    fn augmentation_moves_points_keeps_labels() {
        let base = generate_constellation(10, 4, Augment::None).unwrap();
        for aug in [Augment::T2, Augment::SE2] {
            let moved = generate_constellation(10, 4, aug).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                assert_eq!(a.labels, b.labels);
                assert_ne!(a.points, b.points);
                let d = |p: &[[f64; 2]]| (p[0][0] - p[1][0]).hypot(p[0][1] - p[1][1]);
                assert!((d(&a.points) - d(&b.points)).abs() < 1e-9);
            }
        }
    }
}
