//! Unit quaternions, the geodesic metric on SO(3), and the 24 rotations
//! of the cube.
//!
//! Quaternions are kept in the `w ≥ 0` hemisphere so that `q` and `-q`
//! (the same rotation) have one representation. The octahedral group is
//! generated from two quarter turns and ordered deterministically, which
//! fixes the goal numbering used by the benchmark.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::math::Vec3;

/// A rotation stored as a unit quaternion, serialized as `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl From<[f64; 4]> for Rotation {
    fn from(a: [f64; 4]) -> Self {
        Rotation::from_wxyz(a[0], a[1], a[2], a[3])
    }
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.to_array()
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes arbitrary components.
    ///
    /// Panics on a zero or non-finite quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n > 0.0 && n.is_finite(), "invalid quaternion [{w}, {x}, {y}, {z}]");
        Rotation {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
        .canonical()
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle / 2.0).sin_cos();
        Rotation::from_wxyz(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotvec(v: Vec3) -> Self {
        let theta = v.norm();
        if theta < 1e-12 {
            return Rotation::from_wxyz(1.0, v.x / 2.0, v.y / 2.0, v.z / 2.0);
        }
        Rotation::from_axis_angle(v, theta)
    }

    /// Logarithm map; the result has norm in `[0, π]`.
    pub fn to_rotvec(self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-12 {
            return v * 2.0;
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    fn canonical(mut self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            let first = [self.x, self.y, self.z].into_iter().find(|c| *c != 0.0).unwrap_or(0.0);
            first < 0.0
        };
        if flip {
            self.w = -self.w;
            self.x = -self.x;
            self.y = -self.y;
            self.z = -self.z;
        }
        // Signed zeros would break bitwise comparisons of equal rotations.
        self.w += 0.0;
        self.x += 0.0;
        self.y += 0.0;
        self.z += 0.0;
        self
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product `self ∘ other` (apply `other` first).
    pub fn compose(self, other: Rotation) -> Rotation {
        let (a, b) = (self, other);
        Rotation::from_wxyz(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn inverse(self) -> Rotation {
        Rotation::from_wxyz(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        self.inverse().rotate(v)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * s.atan2(self.w.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Column-major 3×3 matrix as rows.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let ex = self.rotate(Vec3::X);
        let ey = self.rotate(Vec3::Y);
        let ez = self.rotate(Vec3::Z);
        [[ex.x, ey.x, ez.x], [ex.y, ey.y, ez.y], [ex.z, ey.z, ez.z]]
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(rhs)
    }
}

/// Geodesic angle between two rotations, in `[0, π]`.
pub fn distance(a: Rotation, b: Rotation) -> f64 {
    a.inverse().compose(b).angle()
}

/// Haar-uniform rotation (Shoemake's subgroup algorithm).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * 2.0 * PI;
    let u3: f64 = rng.gen::<f64>() * 2.0 * PI;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Rotation::from_wxyz(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos())
}

/// Uniform direction on the unit sphere.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// `r` composed with a rotation about a uniformly random axis by an angle
/// drawn from `N(0, sigma)`.
pub fn perturb_rotation<R: Rng + ?Sized>(r: Rotation, sigma: f64, rng: &mut R) -> Rotation {
    assert!(sigma >= 0.0, "negative rotation noise");
    if sigma == 0.0 {
        return r;
    }
    let axis = random_unit_vector(rng);
    let angle = sigma * Distribution::<f64>::sample(&StandardNormal, rng);
    r.compose(Rotation::from_axis_angle(axis, angle))
}

/// The 24 proper rotations mapping the cube onto itself.
#[derive(Debug, Clone)]
pub struct OctahedralGroup {
    elements: Vec<Rotation>,
}

const EXACT_COMPONENTS: [f64; 4] = [0.0, 0.5, std::f64::consts::FRAC_1_SQRT_2, 1.0];

fn snap(c: f64) -> f64 {
    for e in EXACT_COMPONENTS {
        if (c.abs() - e).abs() < 1e-9 {
            return e.copysign(c) + 0.0;
        }
    }
    c
}

impl OctahedralGroup {
    /// Closure of `{Rx(π/2), Ry(π/2)}`, sorted by angle then components.
    pub fn generate() -> Self {
        let gens = [
            Rotation::from_axis_angle(Vec3::X, PI / 2.0),
            Rotation::from_axis_angle(Vec3::Y, PI / 2.0),
        ];
        let mut elements = vec![Rotation::IDENTITY];
        let mut frontier = vec![Rotation::IDENTITY];
        while let Some(e) = frontier.pop() {
            for g in gens {
                let p = e.compose(g);
                let p = Rotation {
                    w: snap(p.w),
                    x: snap(p.x),
                    y: snap(p.y),
                    z: snap(p.z),
                }
                .canonical();
                if elements.iter().all(|q| distance(*q, p) > 1e-6) {
                    elements.push(p);
                    frontier.push(p);
                }
            }
        }
        assert_eq!(elements.len(), 24, "cube rotation group must have 24 elements");
        elements.sort_by(|a, b| {
            let key = |r: &Rotation| {
                let a = r.angle();
                // angles take four distinct values; quantize to make sorting exact
                ((a * 1e6).round() as i64, r.to_array())
            };
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0).then_with(|| {
                ka.1.iter()
                    .zip(kb.1.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        Self { elements }
    }

    /// Shared instance.
    pub fn get() -> &'static OctahedralGroup {
        static GROUP: OnceLock<OctahedralGroup> = OnceLock::new();
        GROUP.get_or_init(OctahedralGroup::generate)
    }

    pub fn elements(&self) -> &[Rotation] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Index of the element closest to `r`, and the distance to it.
    pub fn nearest(&self, r: Rotation) -> (usize, f64) {
        self.elements
            .iter()
            .enumerate()
            .map(|(i, g)| (i, distance(*g, r)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

/// Canonical representative of the right coset `r·G`: the element `r·g`
/// closest to the identity, ties broken by the lower group index.
pub fn reduce_symmetry(r: Rotation) -> Rotation {
    let group = OctahedralGroup::get();
    let mut best = r.compose(group.elements[0]);
    let mut best_angle = best.angle();
    for g in &group.elements[1..] {
        let cand = r.compose(*g);
        let a = cand.angle();
        if a < best_angle {
            best = cand;
            best_angle = a;
        }
    }
    best
}

/// The 24 goal orientations, numbered 1..=24; goal 3 is the identity (the
/// start orientation used by the benchmark). The remaining goals follow the
/// group order.
#[derive(Debug, Clone)]
pub struct GoalSet {
    goals: Vec<Rotation>,
}

impl GoalSet {
    pub const START_GOAL: usize = 3;

    pub fn new() -> Self {
        let group = OctahedralGroup::get().elements();
        // group[0] is the identity (smallest angle)
        let mut goals: Vec<Rotation> = group[1..].to_vec();
        goals.insert(Self::START_GOAL - 1, group[0]);
        Self { goals }
    }

    /// Goal by 1-based number.
    pub fn goal(&self, number: usize) -> Rotation {
        assert!((1..=24).contains(&number), "goal numbers run from 1 to 24");
        self.goals[number - 1]
    }

    pub fn all(&self) -> &[Rotation] {
        &self.goals
    }

    pub fn numbers(&self) -> impl Iterator<Item = usize> {
        1..=self.goals.len()
    }
}

impl Default for GoalSet {
    fn default() -> Self {
        Self::new()
    }
}
