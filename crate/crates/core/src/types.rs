//! Domain types shared by every module: Gaussian primitives, sparse scene
//! queries, labeled voxel grids, occupancy fields, and rigid poses.

use nalgebra::{UnitQuaternion, Vector3};

use crate::quat;

/// One anisotropic 3D Gaussian primitive carrying an opacity, a class
/// distribution, and a velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGaussian {
    /// Mean, meters.
    pub position: Vector3<f64>,
    /// Orientation of the principal axes.
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations, meters, strictly positive.
    pub scale: Vector3<f64>,
    /// Occupancy opacity in [0, 1].
    pub opacity: f64,
    /// Distribution over foreground classes; sums to 1.
    pub classes: Vec<f64>,
    /// Meters per second.
    pub velocity: Vector3<f64>,
}

impl SemanticGaussian {
    /// Builds a Gaussian, normalizing the class distribution and clamping
    /// opacity into [0, 1].
    pub fn new(
        position: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        classes: Vec<f64>,
        velocity: Vector3<f64>,
    ) -> Self {
        let total: f64 = classes.iter().sum();
        let classes = if total > 0.0 {
            classes.iter().map(|c| c / total).collect()
        } else {
            vec![1.0 / classes.len().max(1) as f64; classes.len()]
        };
        Self {
            position,
            rotation,
            scale,
            opacity: opacity.clamp(0.0, 1.0),
            classes,
            velocity,
        }
    }

    /// Isotropic Gaussian with uniform classes, handy in tests.
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, class_count: usize) -> Self {
        Self::new(
            position,
            UnitQuaternion::identity(),
            Vector3::repeat(sigma),
            opacity,
            vec![1.0 / class_count as f64; class_count],
            Vector3::zeros(),
        )
    }
}

/// One child slot of a [`SceneQuery`].
#[derive(Debug, Clone, PartialEq)]
pub struct QueryChild {
    /// Offset from the query anchor, meters.
    pub offset: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    /// Child opacity; the effective Gaussian opacity is `query.opacity * child.opacity`.
    pub opacity: f64,
}

/// A sparse scene query anchoring `J` Gaussians around a refined position.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneQuery {
    /// Initial query position `p`, meters.
    pub position: Vector3<f64>,
    /// Refinement offset `o`; the effective anchor is `p + o`.
    pub offset: Vector3<f64>,
    /// Query opacity modulating every child.
    pub opacity: f64,
    pub velocity: Vector3<f64>,
    pub children: Vec<QueryChild>,
    /// Class distribution shared by all children.
    pub classes: Vec<f64>,
}

impl SceneQuery {
    /// Effective anchor `p + o`; used for propagation separation.
    pub fn anchor(&self) -> Vector3<f64> {
        self.position + self.offset
    }

    /// Decodes the query into its `J` child Gaussians.
    pub fn decode(&self) -> Vec<SemanticGaussian> {
        self.children
            .iter()
            .map(|child| SemanticGaussian {
                position: self.position + self.offset + child.offset,
                rotation: child.rotation,
                scale: child.scale,
                opacity: self.opacity * child.opacity,
                classes: self.classes.clone(),
                velocity: self.velocity,
            })
            .collect()
    }
}

/// Decodes a query into its child Gaussians. See [`SceneQuery::decode`].
pub fn decode_query(query: &SceneQuery) -> Vec<SemanticGaussian> {
    query.decode()
}

/// Decodes a whole query set in order; query `i`'s children occupy the
/// contiguous index range `i*J .. (i+1)*J`.
pub fn decode_queries(queries: &[SceneQuery]) -> Vec<SemanticGaussian> {
    queries.iter().flat_map(|q| q.decode()).collect()
}

/// Dense labeled voxel grid. Label values run `0..=class_count`, with
/// `class_count` itself denoting empty space.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    /// Min corner, meters.
    pub origin: Vector3<f64>,
    pub voxel_size: Vector3<f64>,
    pub dims: [usize; 3],
    /// Number of foreground classes.
    pub class_count: usize,
    /// `dims` product labels, x fastest.
    pub labels: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(
        origin: Vector3<f64>,
        voxel_size: Vector3<f64>,
        dims: [usize; 3],
        class_count: usize,
    ) -> Self {
        assert!(class_count < 256, "labels are stored as u8");
        let labels = vec![class_count as u8; dims[0] * dims[1] * dims[2]];
        Self {
            origin,
            voxel_size,
            dims,
            class_count,
            labels,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn empty_label(&self) -> u8 {
        self.class_count as u8
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unlinear(&self, v: usize) -> [usize; 3] {
        let i = v % self.dims[0];
        let j = (v / self.dims[0]) % self.dims[1];
        let k = v / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Center of voxel (i, j, k).
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (i as f64 + 0.5) * self.voxel_size.x,
            self.origin.y + (j as f64 + 0.5) * self.voxel_size.y,
            self.origin.z + (k as f64 + 0.5) * self.voxel_size.z,
        )
    }

    pub fn set_label(&mut self, i: usize, j: usize, k: usize, label: u8) {
        let v = self.linear(i, j, k);
        self.labels[v] = label;
    }

    /// Voxel containing `p`, or None when outside the grid.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let t = (p[a] - self.origin[a]) / self.voxel_size[a];
            if t < 0.0 || t >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = t as usize;
        }
        Some(idx)
    }

    /// Max corner, meters.
    pub fn max_corner(&self) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + self.dims[0] as f64 * self.voxel_size.x,
            self.origin.y + self.dims[1] as f64 * self.voxel_size.y,
            self.origin.z + self.dims[2] as f64 * self.voxel_size.z,
        )
    }
}

/// Per-voxel joint distribution `[alpha * e ; 1 - alpha]` over the foreground
/// classes and the empty background.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyField {
    pub dims: [usize; 3],
    pub class_count: usize,
    /// `voxel_count * (class_count + 1)` entries, voxel-major, x fastest.
    pub data: Vec<f32>,
}

impl OccupancyField {
    pub fn row_len(&self) -> usize {
        self.class_count + 1
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn row(&self, voxel: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[voxel * w..(voxel + 1) * w]
    }

    /// Argmax label per voxel over `[alpha * e ; 1 - alpha]`; ties resolve to
    /// the lowest index.
    pub fn to_label_grid(&self, template: &VoxelGrid) -> VoxelGrid {
        assert_eq!(self.dims, template.dims);
        assert_eq!(self.class_count, template.class_count);
        let mut grid = template.clone();
        for v in 0..self.voxel_count() {
            let row = self.row(v);
            let mut best = 0usize;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            grid.labels[v] = best as u8;
        }
        grid
    }
}

/// Rigid transform with a timestamp; maps local coordinates to world.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    /// Seconds.
    pub timestamp: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            timestamp: 0.0,
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, timestamp: f64) -> Self {
        Self {
            rotation,
            translation,
            timestamp,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            timestamp: other.timestamp,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
            timestamp: self.timestamp,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_wxyz(&self) -> [f64; 4] {
        quat::from_unit_quaternion(&self.rotation)
    }
}
