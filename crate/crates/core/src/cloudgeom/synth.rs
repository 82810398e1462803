//! Seeded synthetic scenes with known class boundaries.
//!
//! Every kind places points on a cubic lattice of spacing [`LATTICE_STEP`]
//! and then adds isotropic Gaussian jitter. Classes are filled layer by
//! layer starting at their shared boundary, so a partial final layer
//! always sits far from the interface.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Point3, PointCloud};
use crate::error::{invalid, Error, Result};

pub const LATTICE_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Floor slab under two adjacent rooms; three classes.
    TwoRooms,
    /// Two half-spaces split by the plane x = 0; two classes.
    PlanarBoundary,
    /// Vertical columns on a 4 x 4 checkerboard; two classes.
    CheckerColumns,
}

impl SceneKind {
    pub fn num_classes(self) -> usize {
        match self {
            SceneKind::TwoRooms => 3,
            SceneKind::PlanarBoundary | SceneKind::CheckerColumns => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::TwoRooms => "two-rooms",
            SceneKind::PlanarBoundary => "planar-boundary",
            SceneKind::CheckerColumns => "checker-columns",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-rooms" => Ok(SceneKind::TwoRooms),
            "planar-boundary" => Ok(SceneKind::PlanarBoundary),
            "checker-columns" => Ok(SceneKind::CheckerColumns),
            other => Err(invalid(format!("unknown scene kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub points_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, points_per_class: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            kind,
            points_per_class,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_class < 8 {
            return Err(invalid(format!(
                "points-per-class must be at least 8, got {}",
                self.points_per_class
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn cube_side(m: usize) -> usize {
    let mut q = (m as f64).cbrt().ceil() as usize;
    while q > 1 && (q - 1).pow(3) >= m {
        q -= 1;
    }
    q.max(2)
}

/// Lattice block filled `m` points deep, layer by layer along `depth`.
/// `place(layer, u, v)` maps lattice coordinates to a position.
fn fill_layers(
    m: usize,
    width_u: usize,
    width_v: usize,
    mut place: impl FnMut(usize, usize, usize) -> Point3,
) -> Vec<Point3> {
    let per_layer = width_u * width_v;
    (0..m)
        .map(|i| {
            let layer = i / per_layer;
            let r = i % per_layer;
            place(layer, r / width_v, r % width_v)
        })
        .collect()
}

pub fn synth_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let m = spec.points_per_class;
    let h = LATTICE_STEP;
    let mut positions: Vec<Point3> = Vec::with_capacity(m * spec.kind.num_classes());
    let mut labels = Vec::with_capacity(m * spec.kind.num_classes());

    match spec.kind {
        SceneKind::PlanarBoundary => {
            let q = cube_side(m);
            let centre = (q as f64 - 1.0) / 2.0;
            for (class, side) in [(0usize, -1.0), (1, 1.0)] {
                let pts = fill_layers(m, q, q, |layer, u, v| {
                    [
                        side * (layer as f64 + 0.5) * h,
                        (u as f64 - centre) * h,
                        (v as f64 - centre) * h,
                    ]
                });
                labels.extend(std::iter::repeat_n(class, pts.len()));
                positions.extend(pts);
            }
        }
        SceneKind::TwoRooms => {
            let q = cube_side(m);
            // floor spans both rooms and grows downward from z = 0
            let floor = fill_layers(m, 2 * q, q, |layer, u, v| {
                [
                    (u as f64 + 0.5 - q as f64) * h,
                    (v as f64 + 0.5) * h,
                    -(layer as f64 + 0.5) * h,
                ]
            });
            labels.extend(std::iter::repeat_n(0, floor.len()));
            positions.extend(floor);
            for (class, x0) in [(1usize, -(q as f64)), (2, 0.0)] {
                let room = fill_layers(m, q, q, |layer, u, v| {
                    [
                        (x0 + u as f64 + 0.5) * h,
                        (v as f64 + 0.5) * h,
                        (layer as f64 + 0.5) * h,
                    ]
                });
                labels.extend(std::iter::repeat_n(class, room.len()));
                positions.extend(room);
            }
        }
        SceneKind::CheckerColumns => {
            const GRID: usize = 4;
            const FOOT: usize = 3;
            let cells_per_class = GRID * GRID / 2;
            let per_cell = m.div_ceil(cells_per_class);
            for class in 0..2 {
                let mut remaining = m;
                for gx in 0..GRID {
                    for gy in 0..GRID {
                        if (gx + gy) % 2 != class || remaining == 0 {
                            continue;
                        }
                        let take = per_cell.min(remaining);
                        remaining -= take;
                        let pts = fill_layers(take, FOOT, FOOT, |layer, u, v| {
                            [
                                ((gx * FOOT + u) as f64 + 0.5) * h,
                                ((gy * FOOT + v) as f64 + 0.5) * h,
                                (layer as f64 + 0.5) * h,
                            ]
                        });
                        labels.extend(std::iter::repeat_n(class, pts.len()));
                        positions.extend(pts);
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
        for p in positions.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    PointCloud::new(positions, labels, spec.kind.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudgeom::sq_dist;

    #[test]
    fn deterministic_per_seed() {
        for kind in [
            SceneKind::TwoRooms,
            SceneKind::PlanarBoundary,
            SceneKind::CheckerColumns,
        ] {
            let spec = SceneSpec::new(kind, 100, 0.02, 9);
            assert_eq!(synth_scene(&spec).unwrap(), synth_scene(&spec).unwrap());
            let other = SceneSpec::new(kind, 100, 0.02, 10);
            assert_ne!(synth_scene(&spec).unwrap(), synth_scene(&other).unwrap());
        }
    }

    #[test]
    fn planar_boundary_contacts_lie_near_plane() {
        let cloud = synth_scene(&SceneSpec::new(SceneKind::PlanarBoundary, 250, 0.0, 1)).unwrap();
        let pos = cloud.positions();
        let lab = cloud.labels();
        let mut contacts = 0;
        for i in 0..cloud.len() {
            let touches_other = (0..cloud.len()).any(|j| {
                lab[j] != lab[i] && sq_dist(&pos[i], &pos[j]) <= LATTICE_STEP * LATTICE_STEP * (1.0 + 1e-9)
            });
            if touches_other {
                contacts += 1;
                assert!(pos[i][0].abs() <= LATTICE_STEP, "point {i} at x = {}", pos[i][0]);
            }
        }
        assert!(contacts > 0);
    }

    #[test]
    fn class_sizes_and_label_cover() {
        let c = synth_scene(&SceneSpec::new(SceneKind::TwoRooms, 64, 0.01, 3)).unwrap();
        assert_eq!(c.len(), 192);
        let mut seen: Vec<usize> = c.labels().to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2]);

        let c = synth_scene(&SceneSpec::new(SceneKind::CheckerColumns, 50, 0.0, 3)).unwrap();
        assert_eq!(c.len(), 100);
        assert_eq!(c.labels().iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn lattice_points_are_distinct() {
        for kind in [
            SceneKind::TwoRooms,
            SceneKind::PlanarBoundary,
            SceneKind::CheckerColumns,
        ] {
            let c = synth_scene(&SceneSpec::new(kind, 77, 0.0, 0)).unwrap();
            let p = c.positions();
            for i in 0..p.len() {
                for j in 0..i {
                    assert!(sq_dist(&p[i], &p[j]) > 1e-6, "{kind}: {i} and {j} coincide");
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(synth_scene(&SceneSpec::new(SceneKind::TwoRooms, 7, 0.0, 0)).is_err());
        assert!(synth_scene(&SceneSpec::new(SceneKind::TwoRooms, 8, -0.1, 0)).is_err());
        assert!("nope".parse::<SceneKind>().is_err());
        assert_eq!(
            "planar-boundary".parse::<SceneKind>().unwrap(),
            SceneKind::PlanarBoundary
        );
    }
}
