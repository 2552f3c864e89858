//! Camera-object relations and everything derived from them: the categorical
//! bins used for labels, the 8x3x3 relation grid, seeded sampling, and camera
//! placement around a centered, upright asset.
//!
//! Conventions: world `z` is vertical, angles are radians, the asset sits at the
//! origin. The orientation azimuth `phi` is the counterclockwise angle from the
//! camera-facing direction (camera towards asset) to the asset's facing
//! direction, so `phi = pi` means the asset looks straight at the camera.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, FRAC_PI_6, FRAC_PI_8, TAU};
use std::fmt;

use nalgebra::{Point3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative distances below this are close-ups.
pub const CLOSE_UP_CUTOFF: f64 = 1.25;
/// Relative distances at or above this are long shots.
pub const LONG_SHOT_CUTOFF: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("angle must be finite, got {0}")]
    NonFiniteAngle(f64),
    #[error("elevation {0} rad lies outside [-pi/2, pi/2]")]
    ElevationOutOfRange(f64),
    #[error("relative distance must be finite and positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("{axis} representative {value} lies outside the {class} bin")]
    RepresentativeOutsideBin {
        axis: RelationAxis,
        class: &'static str,
        value: f64,
    },
    #[error("{0} selection of the grid is empty or repeats a class")]
    BadSelection(RelationAxis),
    #[error("facing vector must be finite, non-zero and horizontal, got {0:?}")]
    InvalidFacing([f64; 3]),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("world extent must be finite and positive, got {0}")]
    InvalidExtent(f64),
    #[error("camera position coincides with its target")]
    DegeneratePose,
}

/// Reduce any finite angle to `[0, 2pi)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    // rem_euclid of a tiny negative number rounds up to exactly TAU
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// The three label axes of a relation. Doubles as the VQA task kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationAxis {
    Orientation,
    Viewpoint,
    Shot,
}

impl RelationAxis {
    pub const ALL: [RelationAxis; 3] = [Self::Orientation, Self::Viewpoint, Self::Shot];

    pub fn name(self) -> &'static str {
        match self {
            Self::Orientation => "orientation",
            Self::Viewpoint => "viewpoint",
            Self::Shot => "shot",
        }
    }

    /// Display names of every class on this axis, in canonical order.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Self::Orientation => &ORIENTATION_NAMES,
            Self::Viewpoint => &VIEWPOINT_NAMES,
            Self::Shot => &SHOT_NAMES,
        }
    }

    /// Index of the class named `text` on this axis, tolerant to case,
    /// spacing, hyphens and underscores.
    pub fn class_index(self, text: &str) -> Option<usize> {
        let key = name_key(text);
        if key.is_empty() {
            return None;
        }
        self.class_names().iter().position(|n| name_key(n) == key)
    }
}

impl fmt::Display for RelationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn name_key(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

const ORIENTATION_NAMES: [&str; 8] = [
    "Right",
    "Front Right",
    "Front",
    "Front Left",
    "Left",
    "Back Left",
    "Back",
    "Back Right",
];
const VIEWPOINT_NAMES: [&str; 3] = ["Horizontal", "Top", "Bottom"];
const SHOT_NAMES: [&str; 3] = ["Close-up", "Medium-shot", "Long-shot"];

/// Common surface of the three class enums.
pub trait RelationClass: Copy + Eq + Ord + fmt::Debug + 'static {
    const AXIS: RelationAxis;

    fn all() -> &'static [Self];

    /// Position in [`RelationClass::all`].
    fn index(self) -> usize {
        Self::all()
            .iter()
            .position(|c| *c == self)
            .expect("class listed in all()")
    }

    fn display_name(self) -> &'static str {
        Self::AXIS.class_names()[self.index()]
    }

    fn from_name(text: &str) -> Option<Self> {
        Self::AXIS.class_index(text).map(|i| Self::all()[i])
    }
}

/// Eight azimuth bins of width pi/4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationClass {
    Right,
    FrontRight,
    Front,
    FrontLeft,
    Left,
    BackLeft,
    Back,
    BackRight,
}

/// Upper edges of the counterclockwise sectors, `(2k + 1) * pi/8`. Sector 0
/// (Back) wraps across zero.
const ORIENTATION_EDGES: [f64; 8] = [
    FRAC_PI_8,
    3.0 * FRAC_PI_8,
    5.0 * FRAC_PI_8,
    7.0 * FRAC_PI_8,
    9.0 * FRAC_PI_8,
    11.0 * FRAC_PI_8,
    13.0 * FRAC_PI_8,
    15.0 * FRAC_PI_8,
];

impl OrientationClass {
    pub const ALL: [OrientationClass; 8] = [
        Self::Right,
        Self::FrontRight,
        Self::Front,
        Self::FrontLeft,
        Self::Left,
        Self::BackLeft,
        Self::Back,
        Self::BackRight,
    ];

    /// Counterclockwise sector number starting at Back = 0.
    fn sector(self) -> usize {
        match self {
            Self::Back => 0,
            Self::BackRight => 1,
            Self::Right => 2,
            Self::FrontRight => 3,
            Self::Front => 4,
            Self::FrontLeft => 5,
            Self::Left => 6,
            Self::BackLeft => 7,
        }
    }

    fn from_sector(sector: usize) -> Self {
        const BY_SECTOR: [OrientationClass; 8] = [
            OrientationClass::Back,
            OrientationClass::BackRight,
            OrientationClass::Right,
            OrientationClass::FrontRight,
            OrientationClass::Front,
            OrientationClass::FrontLeft,
            OrientationClass::Left,
            OrientationClass::BackLeft,
        ];
        BY_SECTOR[sector % 8]
    }

    /// Bin center in `[0, 2pi)`.
    pub fn center(self) -> f64 {
        self.sector() as f64 * FRAC_PI_4
    }

    /// Half-open membership `[center - pi/8, center + pi/8)` on the normalized angle.
    pub fn contains(self, phi: f64) -> bool {
        if !phi.is_finite() {
            return false;
        }
        let phi = normalize_angle(phi);
        match self.sector() {
            0 => !(ORIENTATION_EDGES[0]..ORIENTATION_EDGES[7]).contains(&phi),
            s => ORIENTATION_EDGES[s - 1] <= phi && phi < ORIENTATION_EDGES[s],
        }
    }
}

impl RelationClass for OrientationClass {
    const AXIS: RelationAxis = RelationAxis::Orientation;
    fn all() -> &'static [Self] {
        &Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewpointClass {
    Horizontal,
    Top,
    Bottom,
}

impl ViewpointClass {
    pub const ALL: [ViewpointClass; 3] = [Self::Horizontal, Self::Top, Self::Bottom];

    /// Bin midpoint.
    pub fn center(self) -> f64 {
        match self {
            Self::Horizontal => 0.0,
            Self::Top => FRAC_PI_3,
            Self::Bottom => -FRAC_PI_3,
        }
    }

    pub fn contains(self, theta: f64) -> bool {
        match self {
            Self::Horizontal => (-FRAC_PI_6..=FRAC_PI_6).contains(&theta),
            Self::Top => theta > FRAC_PI_6 && theta <= FRAC_PI_2,
            Self::Bottom => (-FRAC_PI_2..-FRAC_PI_6).contains(&theta),
        }
    }
}

impl RelationClass for ViewpointClass {
    const AXIS: RelationAxis = RelationAxis::Viewpoint;
    fn all() -> &'static [Self] {
        &Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotClass {
    CloseUp,
    MediumShot,
    LongShot,
}

impl ShotClass {
    pub const ALL: [ShotClass; 3] = [Self::CloseUp, Self::MediumShot, Self::LongShot];

    pub fn contains(self, dist_rel: f64) -> bool {
        if !(dist_rel.is_finite() && dist_rel > 0.0) {
            return false;
        }
        match self {
            Self::CloseUp => dist_rel < CLOSE_UP_CUTOFF,
            Self::MediumShot => (CLOSE_UP_CUTOFF..LONG_SHOT_CUTOFF).contains(&dist_rel),
            Self::LongShot => dist_rel >= LONG_SHOT_CUTOFF,
        }
    }

    /// Range used by the sampler; the long-shot bin is open-ended so it is
    /// capped at twice its cutoff.
    fn sampling_range(self) -> (f64, f64) {
        match self {
            Self::CloseUp => (0.75, CLOSE_UP_CUTOFF),
            Self::MediumShot => (CLOSE_UP_CUTOFF, LONG_SHOT_CUTOFF),
            Self::LongShot => (LONG_SHOT_CUTOFF, 2.0 * LONG_SHOT_CUTOFF),
        }
    }
}

impl RelationClass for ShotClass {
    const AXIS: RelationAxis = RelationAxis::Shot;
    fn all() -> &'static [Self] {
        &Self::ALL
    }
}

pub fn classify_orientation(phi: f64) -> Result<OrientationClass, GeometryError> {
    if !phi.is_finite() {
        return Err(GeometryError::NonFiniteAngle(phi));
    }
    let phi = normalize_angle(phi);
    let passed = ORIENTATION_EDGES.iter().filter(|e| **e <= phi).count();
    Ok(OrientationClass::from_sector(passed))
}

pub fn classify_viewpoint(theta: f64) -> Result<ViewpointClass, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFiniteAngle(theta));
    }
    if !(-FRAC_PI_2..=FRAC_PI_2).contains(&theta) {
        return Err(GeometryError::ElevationOutOfRange(theta));
    }
    Ok(if theta > FRAC_PI_6 {
        ViewpointClass::Top
    } else if theta < -FRAC_PI_6 {
        ViewpointClass::Bottom
    } else {
        ViewpointClass::Horizontal
    })
}

pub fn classify_shot(dist_rel: f64) -> Result<ShotClass, GeometryError> {
    if !(dist_rel.is_finite() && dist_rel > 0.0) {
        return Err(GeometryError::NonPositiveDistance(dist_rel));
    }
    Ok(if dist_rel < CLOSE_UP_CUTOFF {
        ShotClass::CloseUp
    } else if dist_rel < LONG_SHOT_CUTOFF {
        ShotClass::MediumShot
    } else {
        ShotClass::LongShot
    })
}

/// One (orientation, viewpoint, shot) label combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassTriple {
    pub orientation: OrientationClass,
    pub viewpoint: ViewpointClass,
    pub shot: ShotClass,
}

impl ClassTriple {
    /// All 72 triples, orientation-major.
    pub fn all() -> impl Iterator<Item = ClassTriple> {
        OrientationClass::ALL.into_iter().flat_map(|orientation| {
            ViewpointClass::ALL.into_iter().flat_map(move |viewpoint| {
                ShotClass::ALL.into_iter().map(move |shot| ClassTriple {
                    orientation,
                    viewpoint,
                    shot,
                })
            })
        })
    }

    /// Display name of the class on `axis`.
    pub fn name(&self, axis: RelationAxis) -> &'static str {
        match axis {
            RelationAxis::Orientation => self.orientation.display_name(),
            RelationAxis::Viewpoint => self.viewpoint.display_name(),
            RelationAxis::Shot => self.shot.display_name(),
        }
    }
}

/// The ground-truth triple `{phi, theta, D}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RelationRepr")]
pub struct CameraObjectRelation {
    phi: f64,
    theta: f64,
    dist_rel: f64,
}

#[derive(Deserialize)]
struct RelationRepr {
    phi: f64,
    theta: f64,
    dist_rel: f64,
}

impl TryFrom<RelationRepr> for CameraObjectRelation {
    type Error = GeometryError;
    fn try_from(r: RelationRepr) -> Result<Self, Self::Error> {
        CameraObjectRelation::new(r.phi, r.theta, r.dist_rel)
    }
}

impl CameraObjectRelation {
    /// `phi` is reduced modulo 2pi; `theta` must lie in `[-pi/2, pi/2]`;
    /// `dist_rel` must be positive.
    pub fn new(phi: f64, theta: f64, dist_rel: f64) -> Result<Self, GeometryError> {
        if !phi.is_finite() {
            return Err(GeometryError::NonFiniteAngle(phi));
        }
        if !theta.is_finite() {
            return Err(GeometryError::NonFiniteAngle(theta));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&theta) {
            return Err(GeometryError::ElevationOutOfRange(theta));
        }
        if !(dist_rel.is_finite() && dist_rel > 0.0) {
            return Err(GeometryError::NonPositiveDistance(dist_rel));
        }
        Ok(Self {
            phi: normalize_angle(phi),
            theta,
            dist_rel,
        })
    }

    pub fn from_degrees(phi_deg: f64, theta_deg: f64, dist_rel: f64) -> Result<Self, GeometryError> {
        Self::new(phi_deg.to_radians(), theta_deg.to_radians(), dist_rel)
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dist_rel(&self) -> f64 {
        self.dist_rel
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi.to_degrees()
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn classes(&self) -> ClassTriple {
        // fields are validated at construction so classification cannot fail
        ClassTriple {
            orientation: classify_orientation(self.phi).expect("finite phi"),
            viewpoint: classify_viewpoint(self.theta).expect("theta in range"),
            shot: classify_shot(self.dist_rel).expect("positive distance"),
        }
    }
}

/// Which classes the grid covers and the representative value used for each
/// bin. Representative arrays are indexed in canonical class order
/// (`OrientationClass::ALL`, etc.) and always hold one value per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub orientations: Vec<OrientationClass>,
    pub viewpoints: Vec<ViewpointClass>,
    pub shots: Vec<ShotClass>,
    pub orientation_reps: [f64; 8],
    pub viewpoint_reps: [f64; 3],
    pub shot_reps: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            orientations: OrientationClass::ALL.to_vec(),
            viewpoints: ViewpointClass::ALL.to_vec(),
            shots: ShotClass::ALL.to_vec(),
            orientation_reps: OrientationClass::ALL.map(OrientationClass::center),
            viewpoint_reps: ViewpointClass::ALL.map(ViewpointClass::center),
            shot_reps: [1.0, 2.0, 4.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (class, value) in OrientationClass::ALL.iter().zip(self.orientation_reps) {
            if !class.contains(value) {
                return Err(outside(*class, value));
            }
        }
        for (class, value) in ViewpointClass::ALL.iter().zip(self.viewpoint_reps) {
            if !class.contains(value) {
                return Err(outside(*class, value));
            }
        }
        for (class, value) in ShotClass::ALL.iter().zip(self.shot_reps) {
            if !class.contains(value) {
                return Err(outside(*class, value));
            }
        }
        check_selection(&self.orientations)?;
        check_selection(&self.viewpoints)?;
        check_selection(&self.shots)?;
        Ok(())
    }

    /// Number of relations the grid yields.
    pub fn len(&self) -> usize {
        self.orientations.len() * self.viewpoints.len() * self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn outside<C: RelationClass>(class: C, value: f64) -> GeometryError {
    GeometryError::RepresentativeOutsideBin {
        axis: C::AXIS,
        class: class.display_name(),
        value,
    }
}

fn check_selection<C: RelationClass>(selection: &[C]) -> Result<(), GeometryError> {
    let mut seen = selection.to_vec();
    seen.sort();
    seen.dedup();
    if selection.is_empty() || seen.len() != selection.len() {
        return Err(GeometryError::BadSelection(C::AXIS));
    }
    Ok(())
}

/// One relation per selected class triple, orientation-major in selection order.
pub fn enumerate_relation_grid(spec: &GridSpec) -> Result<Vec<CameraObjectRelation>, GeometryError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.len());
    for o in &spec.orientations {
        for v in &spec.viewpoints {
            for s in &spec.shots {
                out.push(CameraObjectRelation::new(
                    spec.orientation_reps[o.index()],
                    spec.viewpoint_reps[v.index()],
                    spec.shot_reps[s.index()],
                )?);
            }
        }
    }
    Ok(out)
}

/// Draw a relation inside `bin`, or inside a uniformly chosen bin when `None`.
pub fn sample_relation<R: Rng + ?Sized>(rng: &mut R, bin: Option<ClassTriple>) -> CameraObjectRelation {
    let target = bin.unwrap_or_else(|| ClassTriple {
        orientation: OrientationClass::ALL[rng.random_range(0..8)],
        viewpoint: ViewpointClass::ALL[rng.random_range(0..3)],
        shot: ShotClass::ALL[rng.random_range(0..3)],
    });
    loop {
        let phi = target.orientation.center() + rng.random_range(-FRAC_PI_8..FRAC_PI_8);
        let theta = match target.viewpoint {
            ViewpointClass::Horizontal => rng.random_range(-FRAC_PI_6..=FRAC_PI_6),
            ViewpointClass::Top => FRAC_PI_2 - rng.random_range(0.0..FRAC_PI_3),
            ViewpointClass::Bottom => -FRAC_PI_2 + rng.random_range(0.0..FRAC_PI_3),
        };
        let (lo, hi) = target.shot.sampling_range();
        let dist = rng.random_range(lo..hi);
        // rounding at a bin edge can land in the neighbour; redraw in that case
        if let Ok(beta) = CameraObjectRelation::new(phi, theta, dist) {
            if beta.classes() == target {
                return beta;
            }
        }
    }
}

/// Pinhole intrinsics in physical units.
///
/// The rendered frame is the largest centered region of the sensor with the
/// image's aspect ratio (pixels are square), so a 36x24 mm sensor rendering a
/// square image uses a 24x24 mm crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub focal_length: f64,
    pub sensor_width: f64,
    pub sensor_height: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal_length: 35.0,
            sensor_width: 36.0,
            sensor_height: 24.0,
            image_width: 1024,
            image_height: 1024,
        }
    }
}

impl CameraIntrinsics {
    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        self.image_width = width;
        self.image_height = height;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.focal_length) || !positive(self.sensor_width) || !positive(self.sensor_height) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal {} mm, sensor {}x{} mm",
                self.focal_length, self.sensor_width, self.sensor_height
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image {}x{} px",
                self.image_width, self.image_height
            )));
        }
        Ok(())
    }

    /// Field of view across the full sensor width.
    pub fn horizontal_fov(&self) -> f64 {
        2.0 * (self.sensor_width / (2.0 * self.focal_length)).atan()
    }

    /// Field of view across the full sensor height.
    pub fn vertical_fov(&self) -> f64 {
        2.0 * (self.sensor_height / (2.0 * self.focal_length)).atan()
    }

    /// Sensor region actually imaged, `(width, height)` in millimeters.
    pub fn effective_sensor(&self) -> (f64, f64) {
        let image_aspect = self.image_width as f64 / self.image_height as f64;
        let sensor_aspect = self.sensor_width / self.sensor_height;
        if image_aspect >= sensor_aspect {
            (self.sensor_width, self.sensor_width / image_aspect)
        } else {
            (self.sensor_height * image_aspect, self.sensor_height)
        }
    }

    /// Rendered `(horizontal, vertical)` field of view.
    pub fn frame_fov(&self) -> (f64, f64) {
        let (w, h) = self.effective_sensor();
        (
            2.0 * (w / (2.0 * self.focal_length)).atan(),
            2.0 * (h / (2.0 * self.focal_length)).atan(),
        )
    }

    /// `2 tan(fov_min / 2)`: frame extent per unit of distance along the
    /// narrower image axis.
    pub fn min_frame_slope(&self) -> f64 {
        let (w, h) = self.effective_sensor();
        w.min(h) / self.focal_length
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        let (w, _) = self.effective_sensor();
        self.focal_length * self.image_width as f64 / w
    }
}

/// World distance at which the frame along the narrower axis spans
/// `dist_rel` times the asset extent.
pub fn relative_to_world_distance(
    dist_rel: f64,
    asset_extent: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    if !(dist_rel.is_finite() && dist_rel > 0.0) {
        return Err(GeometryError::NonPositiveDistance(dist_rel));
    }
    if !(asset_extent.is_finite() && asset_extent > 0.0) {
        return Err(GeometryError::InvalidExtent(asset_extent));
    }
    intrinsics.validate()?;
    Ok(dist_rel * asset_extent / intrinsics.min_frame_slope())
}

/// Inverse of [`relative_to_world_distance`].
pub fn world_to_relative_distance(
    world_distance: f64,
    asset_extent: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    if !(asset_extent.is_finite() && asset_extent > 0.0) {
        return Err(GeometryError::InvalidExtent(asset_extent));
    }
    intrinsics.validate()?;
    Ok(world_distance * intrinsics.min_frame_slope() / asset_extent)
}

/// A look-at camera. `ground_direction` is the unit horizontal direction from
/// the target towards the camera; it fixes the image frame when the camera is
/// exactly above or below the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Point3<f64>,
    pub target: Point3<f64>,
    pub up_hint: Vector3<f64>,
    pub ground_direction: Vector3<f64>,
}

/// Orthonormal camera frame; `forward` points from the camera into the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraBasis {
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub forward: Vector3<f64>,
}

impl CameraPose {
    pub fn distance(&self) -> f64 {
        (self.position - self.target).norm()
    }

    pub fn basis(&self) -> Result<CameraBasis, GeometryError> {
        let view = self.target - self.position;
        let len = view.norm();
        if !(len.is_finite() && len > 0.0) {
            return Err(GeometryError::DegeneratePose);
        }
        let forward = view / len;
        let mut right = forward.cross(&self.up_hint);
        if right.norm() <= 1e-12 {
            // looking straight along the vertical: use the limit frame
            right = self.up_hint.cross(&self.ground_direction);
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        Ok(CameraBasis { right, up, forward })
    }
}

impl CameraBasis {
    /// Camera-space coordinates `(x right, y up, z along the view axis)`.
    pub fn to_camera(&self, eye: &Point3<f64>, p: &Point3<f64>) -> Vector3<f64> {
        let v = p - eye;
        Vector3::new(v.dot(&self.right), v.dot(&self.up), v.dot(&self.forward))
    }
}

fn checked_facing(facing: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let bad = || GeometryError::InvalidFacing([facing.x, facing.y, facing.z]);
    let norm = facing.norm();
    if !(norm.is_finite() && norm > 1e-12) || facing.z.abs() > 1e-9 * norm {
        return Err(bad());
    }
    Ok(Vector3::new(facing.x, facing.y, 0.0).normalize())
}

/// Place the camera so that the asset at the origin is seen under `beta`.
///
/// With `d` the ground-plane direction from the asset to the camera, the
/// facing vector satisfies `facing = Rz(phi) * (-d)`.
pub fn compute_camera_pose(
    beta: &CameraObjectRelation,
    asset_extent: f64,
    facing: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<CameraPose, GeometryError> {
    let facing = checked_facing(facing)?;
    let distance = relative_to_world_distance(beta.dist_rel, asset_extent, intrinsics)?;
    let toward_camera = -(Rotation3::from_axis_angle(&Vector3::z_axis(), -beta.phi) * facing);
    let (sin_t, cos_t) = beta.theta.sin_cos();
    let offset = (toward_camera * cos_t + Vector3::z() * sin_t) * distance;
    Ok(CameraPose {
        position: Point3::from(offset),
        target: Point3::origin(),
        up_hint: Vector3::z(),
        ground_direction: toward_camera,
    })
}

/// Read `beta` back off a pose built by [`compute_camera_pose`].
pub fn recover_relation(
    pose: &CameraPose,
    asset_extent: f64,
    facing: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<CameraObjectRelation, GeometryError> {
    let facing = checked_facing(facing)?;
    let v = pose.position - pose.target;
    let distance = v.norm();
    if !(distance.is_finite() && distance > 0.0) {
        return Err(GeometryError::DegeneratePose);
    }
    let horizontal = v.x.hypot(v.y);
    let theta = v.z.atan2(horizontal);
    let toward_camera = if horizontal > 1e-12 * distance {
        Vector3::new(v.x / horizontal, v.y / horizontal, 0.0)
    } else {
        pose.ground_direction
    };
    let looking = -toward_camera;
    let phi = looking.cross(&facing).z.atan2(looking.dot(&facing));
    let dist_rel = world_to_relative_distance(distance, asset_extent, intrinsics)?;
    CameraObjectRelation::new(phi, theta.clamp(-FRAC_PI_2, FRAC_PI_2), dist_rel)
}

/// Smallest absolute difference between two angles, in `[0, pi]`.
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = normalize_angle(a - b);
    d.min(TAU - d)
}
