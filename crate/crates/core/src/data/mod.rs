//! Synthetic training data: sampled shapes, viewpoint occlusion, point
//! files and the dataset manifest.

pub mod io;
pub mod synthetic;

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, Point, PointCloud};
use crate::scalar::Real;

pub use io::Format;
pub use synthetic::{generate, Pose, Primitive, Sampled, Shape, SyntheticSpec};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const DEFAULT_COMPLETE_POINTS: usize = 2048;
pub const DEFAULT_PARTIAL_POINTS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Simple,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Simple, Difficulty::Moderate, Difficulty::Hard];

    /// Fraction of points removed.
    pub fn fraction(self) -> f64 {
        match self {
            Difficulty::Simple => 0.25,
            Difficulty::Moderate => 0.5,
            Difficulty::Hard => 0.75,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown difficulty `{s}`")))
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Removes the `ceil(fraction * N)` points farthest from `viewpoint`.
/// Survivors keep their input order. Among equally distant points the
/// lexicographically larger one goes first, so the result does not depend
/// on input order.
pub fn occlude<T: Real>(
    complete: &[Point<T>],
    viewpoint: &Point<T>,
    fraction: f64,
) -> Result<Vec<Point<T>>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!(
            "occlude: fraction {fraction} outside (0, 1)"
        )));
    }
    let n = complete.len();
    let remove = (fraction * n as f64).ceil() as usize;
    if remove >= n {
        return Err(Error::contract(format!(
            "occlude: removing {remove} of {n} points leaves nothing"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let d: Vec<T> = complete
        .iter()
        .map(|p| geometry::dist2(p, viewpoint))
        .collect();
    order.sort_by(|&a, &b| {
        d[b].partial_cmp(&d[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| geometry::lex_cmp(&complete[b], &complete[a]))
            .then(a.cmp(&b))
    });
    let mut removed = vec![false; n];
    for &i in &order[..remove] {
        removed[i] = true;
    }
    Ok(complete
        .iter()
        .zip(&removed)
        .filter(|(_, r)| !**r)
        .map(|(p, _)| *p)
        .collect())
}

/// Camera position along `direction` at 1.5 times the cloud's
/// origin-centered bounding radius.
pub fn viewpoint(cloud: &[Point<f64>], direction: &Point<f64>) -> Point<f64> {
    let radius = cloud
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let len = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
    let s = 1.5 * radius / len;
    [direction[0] * s, direction[1] * s, direction[2] * s]
}

/// Brings a cloud to exactly `n` points: FPS when it has more, cyclic
/// repetition when it has fewer.
pub fn resample<T: Real>(points: &[Point<T>], n: usize) -> Result<Vec<Point<T>>> {
    if n == 0 || points.is_empty() {
        return Err(Error::contract("resample: empty input or target"));
    }
    if points.len() >= n {
        let picks = geometry::fps(points, n)?;
        Ok(picks.iter().map(|&i| points[i]).collect())
    } else {
        Ok((0..n).map(|i| points[i % points.len()]).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub partial: PointCloud<f64>,
    pub complete: PointCloud<f64>,
    pub category: String,
    pub difficulty: Difficulty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DifficultyChoice {
    Fixed(Difficulty),
    /// Cycles simple, moderate, hard by example index.
    Mixed,
}

impl DifficultyChoice {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "mixed" {
            Ok(DifficultyChoice::Mixed)
        } else {
            Difficulty::from_name(s).map(DifficultyChoice::Fixed)
        }
    }

    pub fn for_index(self, i: usize) -> Difficulty {
        match self {
            DifficultyChoice::Fixed(d) => d,
            DifficultyChoice::Mixed => Difficulty::ALL[i % 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub count: usize,
    pub difficulty: DifficultyChoice,
    /// `None` cycles through every primitive kind.
    pub primitive: Option<Primitive>,
    pub complete_points: usize,
    pub partial_points: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 64,
            difficulty: DifficultyChoice::Mixed,
            primitive: Some(Primitive::Composite),
            complete_points: DEFAULT_COMPLETE_POINTS,
            partial_points: DEFAULT_PARTIAL_POINTS,
            seed: 0,
        }
    }
}

/// Example `index` of a dataset. Each index draws from its own ChaCha8
/// stream, so examples are independent of the dataset size.
pub fn make_example(spec: &DatasetSpec, index: usize) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let primitive = spec
        .primitive
        .unwrap_or(Primitive::ALL[index % Primitive::ALL.len()]);
    let shape_seed: u64 = rand::Rng::gen(&mut rng);
    let sampled = generate(&SyntheticSpec {
        primitive,
        n_points: spec.complete_points,
        seed: shape_seed,
        pose: Pose::random(&mut rng),
    })?;
    let difficulty = spec.difficulty.for_index(index);
    let dir = synthetic::unit_vector(&mut rng);
    let complete = sampled.cloud.points();
    let view = viewpoint(complete, &dir);
    let kept = occlude(complete, &view, difficulty.fraction())?;
    let partial = resample(&kept, spec.partial_points)?;
    Ok(Example {
        partial: PointCloud::new(partial)?,
        complete: sampled.cloud,
        category: sampled.category,
        difficulty,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub partial: PathBuf,
    pub complete: PathBuf,
    pub category: String,
    pub difficulty: Difficulty,
}

/// Writes `count` examples and the manifest into `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, format: Format) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let ex = make_example(spec, i)?;
        let ext = format.extension();
        let entry = ManifestEntry {
            partial: PathBuf::from(format!("{i:05}_partial.{ext}")),
            complete: PathBuf::from(format!("{i:05}_complete.{ext}")),
            category: ex.category.clone(),
            difficulty: ex.difficulty,
        };
        io::write_cloud(&dir.join(&entry.partial), ex.partial.points())?;
        io::write_cloud(&dir.join(&entry.complete), ex.complete.points())?;
        entries.push(entry);
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest_text(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# partial complete category difficulty\n");
    for e in entries {
        s.push_str(&format!(
            "{} {} {} {}\n",
            e.partial.display(),
            e.complete.display(),
            e.category,
            e.difficulty
        ));
    }
    s
}

pub fn parse_manifest(text: &str, source_name: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        entries.push(ManifestEntry {
            partial: PathBuf::from(f[0]),
            complete: PathBuf::from(f[1]),
            category: f[2].to_string(),
            difficulty: Difficulty::from_name(f[3]).map_err(|e| err(e.to_string()))?,
        });
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 0,
            message: "manifest lists no examples".into(),
        });
    }
    Ok(entries)
}

/// Loads every example listed in `dir/manifest.txt`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Example>> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text, &path.display().to_string())?
        .into_iter()
        .map(|e| {
            Ok(Example {
                partial: io::read_cloud(&dir.join(&e.partial))?,
                complete: io::read_cloud(&dir.join(&e.complete))?,
                category: e.category,
                difficulty: e.difficulty,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occlude_boundary_counts() {
        let pts: Vec<Point<f64>> = (0..100).map(|i| [i as f64, 0.0, 0.0]).collect();
        let kept = occlude(&pts, &[-1.0, 0.0, 0.0], 1e-9).unwrap();
        assert_eq!(kept.len(), 99);
        assert_eq!(kept.last(), Some(&[98.0, 0.0, 0.0]));
        assert_eq!(occlude(&pts, &[-1.0, 0.0, 0.0], 0.5).unwrap().len(), 50);
        assert!(occlude(&pts, &[0.0; 3], 0.0).is_err());
        assert!(occlude(&pts, &[0.0; 3], 1.0).is_err());
        assert!(occlude(&pts[..2], &[0.0; 3], 0.99).is_err());
    }

    #[test]
    fn hard_leaves_a_quarter() {
        let spec = DatasetSpec {
            count: 3,
            difficulty: DifficultyChoice::Fixed(Difficulty::Hard),
            partial_points: 2048,
            ..DatasetSpec::default()
        };
        let ex = make_example(&spec, 0).unwrap();
        // 512 survivors repeated cyclically up to 2048.
        assert_eq!(ex.partial.len(), 2048);
        assert_eq!(ex.partial[0], ex.partial[512]);
        assert_ne!(ex.partial[0], ex.partial[1]);
    }

    #[test]
    fn examples_are_deterministic_and_independent_of_count() {
        let a = DatasetSpec {
            count: 2,
            ..DatasetSpec::default()
        };
        let b = DatasetSpec {
            count: 10,
            ..DatasetSpec::default()
        };
        let (x, y) = (make_example(&a, 1).unwrap(), make_example(&b, 1).unwrap());
        assert_eq!(x.partial.points(), y.partial.points());
        assert_eq!(x.complete.points(), y.complete.points());
        assert_eq!(x.difficulty, Difficulty::Moderate);
        let other = make_example(&DatasetSpec { seed: 1, ..a }, 1).unwrap();
        assert_ne!(other.complete.points(), x.complete.points());
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![ManifestEntry {
            partial: "a.xyz".into(),
            complete: "b.xyz".into(),
            category: "box+plane".into(),
            difficulty: Difficulty::Hard,
        }];
        assert_eq!(
            parse_manifest(&manifest_text(&entries), "m").unwrap(),
            entries
        );
        assert!(matches!(
            parse_manifest("a b c\n", "m"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_manifest("# none\n", "m"),
            Err(Error::Parse { line: 0, .. })
        ));
        assert!(matches!(
            parse_manifest("\na b c extreme\n", "m"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
