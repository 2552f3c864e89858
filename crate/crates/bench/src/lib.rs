//! Shared fixtures for the benchmarks.

use nalgebra::{Point3, Vector3};
use ultima_core::asset::{cuboid, Asset};
use ultima_core::geometry::{compute_camera_pose, CameraIntrinsics, CameraObjectRelation, CameraPose};

/// A 0.6 × 0.4 × 0.8 box facing -y.
pub fn box_asset() -> Asset {
    let mesh = cuboid(Point3::new(-0.3, -0.2, 0.0), Point3::new(0.3, 0.2, 0.8));
    Asset::new("bench_box", "box", mesh, Vector3::new(0.0, -1.0, 0.0)).expect("valid asset")
}

/// Front, slightly elevated, medium-shot pose of `asset`.
pub fn medium_pose(asset: &Asset, intrinsics: &CameraIntrinsics) -> CameraPose {
    let beta = CameraObjectRelation::from_degrees(180.0, 20.0, 2.0).expect("valid relation");
    compute_camera_pose(&beta, asset.extent(), &asset.facing, intrinsics).expect("valid pose")
}
