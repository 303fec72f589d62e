//! Surface samples of simple primitives and two-part composites.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Bounding-sphere radius of every generated cloud around its pose
/// translation.
pub const NORMALIZED_RADIUS: f64 = 0.4;

/// Largest per-axis pose translation; with [`NORMALIZED_RADIUS`] this keeps
/// every cloud inside the origin-centered unit cube.
pub const MAX_TRANSLATION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Plane,
    Composite,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Sphere,
        Primitive::Box,
        Primitive::Cylinder,
        Primitive::Plane,
        Primitive::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
            Primitive::Plane => "plane",
            Primitive::Composite => "composite",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown primitive `{s}`")))
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A primitive surface centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box with half extents.
    Box {
        half: [f64; 3],
    },
    /// Closed cylinder along z.
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Rectangle in the z = 0 plane.
    Plane {
        half: [f64; 2],
    },
}

impl Shape {
    pub fn kind(&self) -> Primitive {
        match self {
            Shape::Sphere { .. } => Primitive::Sphere,
            Shape::Box { .. } => Primitive::Box,
            Shape::Cylinder { .. } => Primitive::Cylinder,
            Shape::Plane { .. } => Primitive::Plane,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
            Shape::Cylinder {
                radius,
                half_height,
            } => 2.0 * PI * radius * (2.0 * half_height + radius),
            Shape::Plane { half: [a, b] } => 4.0 * a * b,
        }
    }

    /// Radius of the smallest origin-centered sphere containing the surface.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half: [a, b, c] } => (a * a + b * b + c * c).sqrt(),
            Shape::Cylinder {
                radius,
                half_height,
            } => radius.hypot(half_height),
            Shape::Plane { half: [a, b] } => a.hypot(b),
        }
    }

    /// Face areas in a fixed order: box `±x, ±y, ±z`; cylinder side, top,
    /// bottom; single-face shapes one entry.
    pub fn face_areas(&self) -> Vec<f64> {
        match *self {
            Shape::Box { half: [a, b, c] } => {
                let (x, y, z) = (4.0 * b * c, 4.0 * a * c, 4.0 * a * b);
                vec![x, x, y, y, z, z]
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let cap = PI * radius * radius;
                vec![4.0 * PI * radius * half_height, cap, cap]
            }
            _ => vec![self.area()],
        }
    }

    /// One uniformly distributed surface point.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Point<f64> {
        match *self {
            Shape::Sphere { radius } => {
                let d = unit_vector(rng);
                [d[0] * radius, d[1] * radius, d[2] * radius]
            }
            Shape::Box { half } => {
                let face = pick_weighted(&self.face_areas(), rng);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for (d, v) in p.iter_mut().enumerate() {
                    *v = if d == axis {
                        sign * half[d]
                    } else {
                        rng.gen_range(-half[d]..=half[d])
                    };
                }
                p
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let face = pick_weighted(&self.face_areas(), rng);
                let theta = rng.gen_range(0.0..2.0 * PI);
                match face {
                    0 => [
                        radius * theta.cos(),
                        radius * theta.sin(),
                        rng.gen_range(-half_height..=half_height),
                    ],
                    _ => {
                        // Uniform on a disk: radius grows with the square root.
                        let r = radius * rng.gen::<f64>().sqrt();
                        let z = if face == 1 { half_height } else { -half_height };
                        [r * theta.cos(), r * theta.sin(), z]
                    }
                }
            }
            Shape::Plane { half: [a, b] } => [rng.gen_range(-a..=a), rng.gen_range(-b..=b), 0.0],
        }
    }

    fn random(kind: Primitive, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match kind {
            Primitive::Sphere => Shape::Sphere { radius: 1.0 },
            Primitive::Box => Shape::Box {
                half: [
                    rng.gen_range(0.2..0.6),
                    rng.gen_range(0.2..0.6),
                    rng.gen_range(0.2..0.6),
                ],
            },
            Primitive::Cylinder => Shape::Cylinder {
                radius: rng.gen_range(0.15..0.5),
                half_height: rng.gen_range(0.3..0.8),
            },
            Primitive::Plane => Shape::Plane {
                half: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
            },
            Primitive::Composite => {
                return Err(Error::contract("a composite is not a single shape"))
            }
        })
    }
}

/// A shape placed in the model frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Part {
    pub shape: Shape,
    pub rotation: Mat3,
    pub offset: Point<f64>,
}

/// Rigid placement applied after normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Point<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let t = MAX_TRANSLATION;
        Self {
            rotation: random_rotation(rng),
            translation: [
                rng.gen_range(-t..=t),
                rng.gen_range(-t..=t),
                rng.gen_range(-t..=t),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub primitive: Primitive,
    pub n_points: usize,
    pub seed: u64,
    pub pose: Pose,
}

impl SyntheticSpec {
    /// Spec with a pose drawn from `seed` as well.
    pub fn with_random_pose(primitive: Primitive, n_points: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            primitive,
            n_points,
            seed,
            pose: Pose::random(&mut rng),
        }
    }
}

/// A sampled cloud together with the parts it was drawn from.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub cloud: PointCloud<f64>,
    pub parts: Vec<Part>,
    /// Category label: the primitive name, or `a+b` for composites.
    pub category: String,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Sampled> {
    if spec.n_points < 8 {
        return Err(Error::contract(format!(
            "generate: n_points = {} must be at least 8",
            spec.n_points
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parts = match spec.primitive {
        Primitive::Composite => composite_parts(&mut rng)?,
        kind => vec![Part {
            shape: Shape::random(kind, &mut rng)?,
            rotation: IDENTITY,
            offset: [0.0; 3],
        }],
    };
    let category = match spec.primitive {
        Primitive::Composite => {
            let mut names = [parts[0].shape.kind().name(), parts[1].shape.kind().name()];
            names.sort_unstable();
            format!("{}+{}", names[0], names[1])
        }
        kind => kind.name().to_string(),
    };

    let (center, radius) = enclosing_sphere(&parts);
    let scale = NORMALIZED_RADIUS / radius;
    let areas: Vec<f64> = parts.iter().map(|p| p.shape.area()).collect();
    let points = (0..spec.n_points)
        .map(|_| {
            let part = &parts[pick_weighted(&areas, &mut rng)];
            let local = part.shape.sample(&mut rng);
            let model = add(mat_vec(&part.rotation, &local), part.offset);
            let normalized = scale_point(sub(model, center), scale);
            add(
                mat_vec(&spec.pose.rotation, &normalized),
                spec.pose.translation,
            )
        })
        .collect();
    Ok(Sampled {
        cloud: PointCloud::new(points)?,
        parts,
        category,
    })
}

fn composite_parts(rng: &mut ChaCha8Rng) -> Result<Vec<Part>> {
    let kinds = [
        Primitive::Sphere,
        Primitive::Box,
        Primitive::Cylinder,
        Primitive::Plane,
    ];
    let a = Shape::random(kinds[rng.gen_range(0..4)], rng)?;
    let b = Shape::random(kinds[rng.gen_range(0..4)], rng)?;
    // The second part overlaps or touches the first.
    let reach = a.bounding_radius().max(b.bounding_radius());
    let dir = unit_vector(rng);
    let offset = scale_point(dir, rng.gen_range(0.5..1.0) * reach);
    Ok(vec![
        Part {
            shape: a,
            rotation: random_rotation(rng),
            offset: [0.0; 3],
        },
        Part {
            shape: b,
            rotation: random_rotation(rng),
            offset,
        },
    ])
}

/// Smallest sphere containing every part's bounding sphere.
fn enclosing_sphere(parts: &[Part]) -> (Point<f64>, f64) {
    let mut center = parts[0].offset;
    let mut radius = parts[0].shape.bounding_radius();
    for p in &parts[1..] {
        let r = p.shape.bounding_radius();
        let d = norm(sub(p.offset, center));
        if d + r <= radius {
            continue;
        }
        if d + radius <= r {
            center = p.offset;
            radius = r;
            continue;
        }
        let new_radius = (d + radius + r) / 2.0;
        let dir = scale_point(sub(p.offset, center), 1.0 / d);
        center = add(center, scale_point(dir, new_radius - radius));
        radius = new_radius;
    }
    (center, radius)
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Point<f64> {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Uniform random rotation from a unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn pick_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn mat_vec(m: &Mat3, v: &Point<f64>) -> Point<f64> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn add(a: Point<f64>, b: Point<f64>) -> Point<f64> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Point<f64>, b: Point<f64>) -> Point<f64> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale_point(a: Point<f64>, s: f64) -> Point<f64> {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: Point<f64>) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
