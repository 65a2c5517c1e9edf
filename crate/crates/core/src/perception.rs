//! Synthetic camera + LIDAR perception of surrounding participants.
//!
//! Detections are generated from ground truth geometry rather than images.
//! Each detection keeps the id of the object that produced it, which stands
//! in for appearance-based re-identification across frames.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rect, Vec2};
use crate::store::AgentId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("pixel {0} outside sensor width {1}")]
    PixelOutOfRange(f64, f64),
    #[error("covariance is not symmetric positive definite")]
    NotSpd,
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Front,
    Left,
    Rear,
    Right,
}

impl CameraId {
    pub const ALL: [CameraId; 4] = [CameraId::Front, CameraId::Left, CameraId::Rear, CameraId::Right];

    /// Mounting yaw in the ego frame, degrees, counter-clockwise.
    pub fn yaw_deg(self) -> f64 {
        match self {
            CameraId::Front => 0.0,
            CameraId::Left => 90.0,
            CameraId::Rear => 180.0,
            CameraId::Right => -90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Car,
    Person,
}

impl ClassLabel {
    /// Nominal footprint radius used to turn a surface range into a center range.
    pub fn radius(self) -> f64 {
        match self {
            ClassLabel::Car => 0.15,
            ClassLabel::Person => 0.1,
        }
    }
}

/// Linear pixel-to-angle map shared by all four cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraCalibration {
    /// Degrees per pixel.
    pub slope: f64,
    pub width_px: f64,
    /// Pixel column looking straight along the camera axis.
    pub center_px: f64,
}

impl Default for CameraCalibration {
    fn default() -> Self {
        // 870 px * 0.184 deg/px spans the 160 deg horizontal field of view
        Self { slope: 0.184, width_px: 870.0, center_px: 435.0 }
    }
}

impl CameraCalibration {
    pub fn bias(&self) -> f64 {
        -self.slope * self.center_px
    }

    pub fn half_fov(&self) -> f64 {
        self.slope * self.width_px / 2.0
    }

    /// Inverse of the map, in the camera's own frame.
    pub fn local_angle_to_pixel(&self, local_deg: f64) -> f64 {
        (local_deg - self.bias()) / self.slope
    }
}

pub fn wrap_deg(a: f64) -> f64 {
    let mut a = (a + 180.0).rem_euclid(360.0) - 180.0;
    if a <= -180.0 {
        a += 360.0;
    }
    a
}

/// Ego-frame bearing, degrees, of a pixel column on one camera.
pub fn pixel_to_angle(pixel_x: f64, camera: CameraId, cal: &CameraCalibration) -> Result<f64, PerceptionError> {
    if !(0.0..=cal.width_px).contains(&pixel_x) {
        return Err(PerceptionError::PixelOutOfRange(pixel_x, cal.width_px));
    }
    Ok(wrap_deg(camera.yaw_deg() + cal.slope * pixel_x + cal.bias()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub camera_id: CameraId,
    pub pixel_x: f64,
    pub bbox: PixelBox,
    pub class_label: ClassLabel,
    pub t: f64,
    pub source: AgentId,
}

/// One LIDAR return in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub angle_deg: f64,
    pub range: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub detections: Vec<Detection>,
    pub cloud: Vec<LidarPoint>,
}

/// Ground-truth participant as seen by the sensor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: AgentId,
    pub class_label: ClassLabel,
    pub position: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    /// Radians, counter-clockwise from +x.
    pub heading: f64,
}

/// Near-field wedge no camera covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindWedge {
    pub center_deg: f64,
    pub half_width_deg: f64,
    pub max_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorParams {
    pub calibration: CameraCalibration,
    pub lidar_range: f64,
    pub lidar_resolution_deg: f64,
    pub lidar_noise: f64,
    pub pixel_noise: f64,
    pub dropout: f64,
    pub blind_wedges: Vec<BlindWedge>,
    pub theta_merge_deg: f64,
    pub d_merge: f64,
    /// Points farther apart than this along range start a new cluster.
    pub cluster_gap: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            calibration: CameraCalibration::default(),
            lidar_range: 12.0,
            lidar_resolution_deg: 0.45,
            lidar_noise: 0.0,
            pixel_noise: 0.0,
            dropout: 0.0,
            blind_wedges: [45.0, 135.0, -135.0, -45.0]
                .into_iter()
                .map(|c| BlindWedge { center_deg: c, half_width_deg: 10.0, max_range: 0.3 })
                .collect(),
            theta_merge_deg: 5.0,
            d_merge: 0.15,
            cluster_gap: 0.2,
        }
    }
}

impl SensorParams {
    pub fn noisy() -> Self {
        Self { lidar_noise: 0.01, pixel_noise: 2.0, dropout: 0.05, ..Self::default() }
    }
}

fn ray_circle(origin: Vec2, dir: Vec2, center: Vec2, r: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(oc) - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

fn line_of_sight(from: Vec2, to: Vec2, occluders: &[Rect]) -> bool {
    occluders.iter().all(|o| o.clip_segment(from, to).is_none())
}

/// Synthesizes one frame of camera detections and LIDAR returns.
pub fn sense<R: Rng + ?Sized>(
    world: &[WorldObject],
    ego: &Pose,
    ego_id: AgentId,
    occluders: &[Rect],
    params: &SensorParams,
    t: f64,
    rng: &mut R,
) -> SensorFrame {
    let cal = &params.calibration;
    let px_noise = Normal::new(0.0, params.pixel_noise.max(0.0)).expect("finite sigma");
    let range_noise = Normal::new(0.0, params.lidar_noise.max(0.0)).expect("finite sigma");
    let mut frame = SensorFrame::default();
    let mut ray_windows: Vec<(f64, f64)> = Vec::new();
    for obj in world.iter().filter(|o| o.id != ego_id) {
        let rel = obj.position - ego.position;
        let range = rel.norm();
        if range <= obj.radius || range > params.lidar_range {
            continue;
        }
        let bearing = wrap_deg((rel.angle() - ego.heading).to_degrees());
        let half = (obj.radius / range).asin().to_degrees();
        ray_windows.push((bearing - half, bearing + half));
        if params.blind_wedges.iter().any(|w| range <= w.max_range && wrap_deg(bearing - w.center_deg).abs() <= w.half_width_deg) {
            continue;
        }
        if !line_of_sight(ego.position, obj.position, occluders) {
            continue;
        }
        for cam in CameraId::ALL {
            let local = wrap_deg(bearing - cam.yaw_deg());
            if local.abs() > cal.half_fov() {
                continue;
            }
            if params.dropout > 0.0 && rng.random::<f64>() < params.dropout {
                continue;
            }
            let px = (cal.local_angle_to_pixel(local) + px_noise.sample(rng)).clamp(0.0, cal.width_px);
            let x0 = cal.local_angle_to_pixel(local - half).clamp(0.0, cal.width_px);
            let x1 = cal.local_angle_to_pixel(local + half).clamp(0.0, cal.width_px);
            frame.detections.push(Detection {
                camera_id: cam,
                pixel_x: px,
                bbox: PixelBox { x0, x1, y0: 200.0, y1: 300.0 },
                class_label: obj.class_label,
                t,
                source: obj.id,
            });
        }
    }
    // cast rays only where some object could return them
    let step = params.lidar_resolution_deg;
    let mut rays: Vec<i64> = Vec::new();
    for (a0, a1) in ray_windows {
        let k0 = (a0 / step).floor() as i64;
        let k1 = (a1 / step).ceil() as i64;
        rays.extend(k0..=k1);
    }
    rays.sort_unstable();
    rays.dedup();
    for k in rays {
        let ego_deg = k as f64 * step;
        let dir = Vec2::from_angle(ego.heading + ego_deg.to_radians());
        let mut best = params.lidar_range;
        let mut hit = false;
        for obj in world.iter().filter(|o| o.id != ego_id) {
            if let Some(d) = ray_circle(ego.position, dir, obj.position, obj.radius) {
                if d < best {
                    best = d;
                    hit = true;
                }
            }
        }
        for o in occluders {
            if let Some(d) = o.ray_hit(ego.position, dir, params.lidar_range) {
                if d < best {
                    best = d;
                    hit = true;
                }
            }
        }
        if hit {
            let r = (best + range_noise.sample(rng)).max(0.0);
            frame.cloud.push(LidarPoint { angle_deg: wrap_deg(ego_deg), range: r });
        }
    }
    frame
}

/// A detection after camera-to-ego conversion and duplicate merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bearing {
    pub class_label: ClassLabel,
    pub source: AgentId,
    pub angle_deg: f64,
    /// Ego-frame angular window `[lo, hi]`; `lo` may exceed 180 after unwrapping.
    pub window: (f64, f64),
}

fn circular_mean(a: f64, b: f64) -> f64 {
    let (ra, rb) = (a.to_radians(), b.to_radians());
    wrap_deg((ra.sin() + rb.sin()).atan2(ra.cos() + rb.cos()).to_degrees())
}

pub fn detection_bearing(d: &Detection, cal: &CameraCalibration) -> Result<Bearing, PerceptionError> {
    let angle = pixel_to_angle(d.pixel_x, d.camera_id, cal)?;
    let lo = pixel_to_angle(d.bbox.x0.min(d.bbox.x1), d.camera_id, cal)?;
    let hi = pixel_to_angle(d.bbox.x0.max(d.bbox.x1), d.camera_id, cal)?;
    let width = wrap_deg(hi - lo).abs();
    let lo = wrap_deg(lo);
    Ok(Bearing { class_label: d.class_label, source: d.source, angle_deg: angle, window: (lo, lo + width) })
}

/// Collapses same-class bearings closer than `theta_merge_deg` until no pair
/// qualifies; windows are unioned and angles averaged on the circle.
pub fn merge_bearings(mut items: Vec<Bearing>, theta_merge_deg: f64) -> Vec<Bearing> {
    loop {
        let mut merged = false;
        'outer: for i in 0..items.len() {
            for j in i + 1..items.len() {
                let (a, b) = (&items[i], &items[j]);
                if a.class_label == b.class_label && wrap_deg(a.angle_deg - b.angle_deg).abs() < theta_merge_deg {
                    let angle = circular_mean(a.angle_deg, b.angle_deg);
                    // union of windows expressed around a's start
                    let shift = wrap_deg(b.window.0 - a.window.0) - (b.window.0 - a.window.0);
                    let lo = a.window.0.min(b.window.0 + shift);
                    let hi = a.window.1.max(b.window.1 + shift);
                    let source = a.source.min(b.source);
                    items[i] = Bearing { class_label: a.class_label, source, angle_deg: angle, window: (lo, hi) };
                    items.remove(j);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return items;
        }
    }
}

/// Nearest point cluster inside an angular window, as `(bearing, range)`.
pub fn fuse_angle_with_ranges(window: (f64, f64), cloud: &[LidarPoint], cluster_gap: f64) -> Option<(f64, f64)> {
    let (lo, hi) = window;
    let mut pts: Vec<(f64, f64)> = cloud
        .iter()
        .filter_map(|p| {
            let off = (p.angle_deg - lo).rem_euclid(360.0);
            (off <= hi - lo).then_some((lo + off, p.range))
        })
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut clusters: Vec<Vec<(f64, f64)>> = vec![vec![pts[0]]];
    for w in pts.windows(2) {
        if w[1].1 - w[0].1 > cluster_gap {
            clusters.push(Vec::new());
        }
        clusters.last_mut().unwrap().push(w[1]);
    }
    let median = |mut xs: Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
    };
    let nearest = clusters.into_iter().min_by(|a, b| median(a.iter().map(|p| p.1).collect()).total_cmp(&median(b.iter().map(|p| p.1).collect())))?;
    let angle = median(nearest.iter().map(|p| p.0).collect());
    // range of the return closest to the median bearing, not the median of
    // ranges, which is biased outward on a curved surface
    let range = nearest.iter().min_by(|a, b| (a.0 - angle).abs().total_cmp(&(b.0 - angle).abs())).map(|p| p.1)?;
    Some((wrap_deg(angle), range))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedObject {
    pub object_key: AgentId,
    pub class_label: ClassLabel,
    pub rel_angle: f64,
    pub rel_range: f64,
    pub world_pos: Vec2,
    pub world_vel: Vec2,
    pub covariance: [[f64; 2]; 2],
}

/// Collapses same-class objects closer than `d_merge` until none remain.
pub fn merge_duplicates(objs: &[FusedObject], d_merge: f64) -> Vec<FusedObject> {
    let mut items = objs.to_vec();
    loop {
        let mut merged = false;
        'outer: for i in 0..items.len() {
            for j in i + 1..items.len() {
                if items[i].class_label == items[j].class_label && items[i].world_pos.distance(items[j].world_pos) < d_merge {
                    let b = items.remove(j);
                    let a = &mut items[i];
                    a.world_pos = (a.world_pos + b.world_pos) * 0.5;
                    a.world_vel = (a.world_vel + b.world_vel) * 0.5;
                    a.rel_range = 0.5 * (a.rel_range + b.rel_range);
                    a.rel_angle = circular_mean(a.rel_angle, b.rel_angle);
                    a.object_key = a.object_key.min(b.object_key);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            return items;
        }
    }
}

/// Camera/LIDAR fusion of one frame into world-frame objects.
pub fn perceive(frame: &SensorFrame, ego: &Pose, params: &SensorParams) -> Vec<FusedObject> {
    let bearings: Vec<Bearing> = frame.detections.iter().filter_map(|d| detection_bearing(d, &params.calibration).ok()).collect();
    let bearings = merge_bearings(bearings, params.theta_merge_deg);
    let sigma2 = 0.1_f64 * 0.1;
    let objs: Vec<FusedObject> = bearings
        .into_iter()
        .filter_map(|b| {
            let (angle, surface) = fuse_angle_with_ranges(b.window, &frame.cloud, params.cluster_gap)?;
            let range = surface + b.class_label.radius();
            let world = ego.position + Vec2::from_angle(ego.heading + angle.to_radians()) * range;
            Some(FusedObject {
                object_key: b.source,
                class_label: b.class_label,
                rel_angle: angle,
                rel_range: range,
                world_pos: world,
                world_vel: Vec2::ZERO,
                covariance: [[sigma2, 0.0], [0.0, sigma2]],
            })
        })
        .collect();
    merge_duplicates(&objs, params.d_merge)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanNoise {
    /// Process acceleration noise, m/s^2.
    pub sigma_a: f64,
    /// Position measurement noise, m.
    pub sigma_z: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        Self { sigma_a: 0.5, sigma_z: 0.1 }
    }
}

/// Constant-velocity track, state `[x, y, vx, vy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack {
    pub state: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub last_update: f64,
}

impl KalmanTrack {
    pub fn new(z: Vec2, t: f64, noise: &KalmanNoise) -> Self {
        let pz = noise.sigma_z * noise.sigma_z;
        Self {
            state: Vector4::new(z.x, z.y, 0.0, 0.0),
            covariance: Matrix4::from_diagonal(&Vector4::new(pz, pz, 1.0, 1.0)),
            last_update: t,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.state[0], self.state[1])
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.state[2], self.state[3])
    }
}

pub fn is_spd(m: &Matrix4<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-9 * (1.0 + m.abs().max());
    sym && (*m).cholesky().is_some()
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

fn process_noise(dt: f64, sigma_a: f64) -> Matrix4<f64> {
    let q = sigma_a * sigma_a;
    let (d2, d3, d4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
    let mut m = Matrix4::zeros();
    for i in 0..2 {
        m[(i, i)] = d4 / 4.0 * q;
        m[(i, i + 2)] = d3 / 2.0 * q;
        m[(i + 2, i)] = d3 / 2.0 * q;
        m[(i + 2, i + 2)] = d2 * q;
    }
    m
}

/// Predict by `dt`, then correct with a position measurement. The update
/// uses the Joseph form so the posterior stays symmetric positive definite.
pub fn kalman_update(track: &KalmanTrack, z: Vec2, dt: f64, noise: &KalmanNoise) -> Result<KalmanTrack, PerceptionError> {
    if !(dt > 0.0) {
        return Err(PerceptionError::BadStep(dt));
    }
    if !is_spd(&track.covariance) {
        return Err(PerceptionError::NotSpd);
    }
    let f = transition(dt);
    let x_pred = f * track.state;
    let p_pred = f * track.covariance * f.transpose() + process_noise(dt, noise.sigma_a);
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r = Matrix2::identity() * (noise.sigma_z * noise.sigma_z);
    let s = h * p_pred * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(PerceptionError::NotSpd)?;
    let k = p_pred * h.transpose() * s_inv;
    let innovation = Vector2::new(z.x, z.y) - h * x_pred;
    let x = x_pred + k * innovation;
    let i_kh = Matrix4::identity() - k * h;
    let p = i_kh * p_pred * i_kh.transpose() + k * r * k.transpose();
    let p = (p + p.transpose()) * 0.5;
    Ok(KalmanTrack { state: x, covariance: p, last_update: track.last_update + dt })
}

/// Per-observer set of tracks keyed by object id.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    tracks: std::collections::BTreeMap<AgentId, (ClassLabel, KalmanTrack)>,
    first_seen: std::collections::BTreeMap<AgentId, f64>,
}

impl Tracker {
    /// Folds one frame's fused objects in and drops tracks not seen for
    /// `max_age` seconds. Returns the smoothed objects, coasting tracks
    /// extrapolated to `t` at their estimated velocity.
    pub fn update(&mut self, objs: &[FusedObject], t: f64, noise: &KalmanNoise, max_age: f64) -> Vec<FusedObject> {
        for o in objs {
            match self.tracks.get_mut(&o.object_key) {
                Some((_, tr)) if t > tr.last_update => {
                    let dt = t - tr.last_update;
                    if let Ok(next) = kalman_update(tr, o.world_pos, dt, noise) {
                        *tr = next;
                    }
                }
                Some(_) => {}
                None => {
                    self.tracks.insert(o.object_key, (o.class_label, KalmanTrack::new(o.world_pos, t, noise)));
                    self.first_seen.insert(o.object_key, t);
                }
            }
        }
        self.tracks.retain(|_, (_, tr)| t - tr.last_update <= max_age);
        self.first_seen.retain(|id, _| self.tracks.contains_key(id));
        self.tracks
            .iter()
            .map(|(&id, (class, tr))| {
                let c = tr.covariance;
                FusedObject {
                    object_key: id,
                    class_label: *class,
                    rel_angle: 0.0,
                    rel_range: 0.0,
                    world_pos: tr.position() + tr.velocity() * (t - tr.last_update),
                    world_vel: tr.velocity(),
                    covariance: [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]],
                }
            })
            .collect()
    }

    pub fn track(&self, id: AgentId) -> Option<&KalmanTrack> {
        self.tracks.get(&id).map(|(_, t)| t)
    }

    /// Seconds since the track was opened.
    pub fn age(&self, id: AgentId, t: f64) -> Option<f64> {
        self.first_seen.get(&id).map(|t0| t - t0)
    }
}
