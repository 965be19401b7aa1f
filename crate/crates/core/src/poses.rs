//! Reference frames, unit quaternions and the pose arithmetic used to build
//! labels and to score orientation error.
//!
//! World frame is z-up (x forward, y left). Quaternions are stored
//! scalar-last `(x, y, z, w)`. Euler angles follow the intrinsic
//! yaw-pitch-roll (Z-Y-X) sequence; positive pitch tilts the nose down.

use std::f64::consts::PI;

pub type Vec3 = [f64; 3];

/// Unit quaternion, scalar-last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { x: 0.0, y: 0.0, z: 0.0, w: 1.0 };

    /// Normalizes `(x, y, z, w)`; `None` for zero or non-finite input.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Option<Self> {
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        Some(Self { x: x / n, y: y / n, z: z / n, w: w / n })
    }

    /// Intrinsic Z-Y-X composition: yaw about z, then pitch about the new y,
    /// then roll about the new x.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = (roll * 0.5).sin_cos();
        let (sp, cp) = (pitch * 0.5).sin_cos();
        let (sy, cy) = (yaw * 0.5).sin_cos();
        Self {
            x: sr * cp * cy - cr * sp * sy,
            y: cr * sp * cy + sr * cp * sy,
            z: cr * cp * sy - sr * sp * cy,
            w: cr * cp * cy + sr * sp * sy,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Option<Self> {
        let n = norm(axis);
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        Some(Self { x: axis[0] / n * s, y: axis[1] / n * s, z: axis[2] / n * s, w: c })
    }

    /// `(roll, pitch, yaw)` of the Z-Y-X decomposition.
    pub fn to_euler(&self) -> (f64, f64, f64) {
        let Quaternion { x, y, z, w } = *self;
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
        (roll, pitch, self.yaw())
    }

    pub fn yaw(&self) -> f64 {
        let Quaternion { x, y, z, w } = *self;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z + self.w * o.w
    }

    pub fn conjugate(&self) -> Self {
        Self { x: -self.x, y: -self.y, z: -self.z, w: self.w }
    }

    pub fn neg(&self) -> Self {
        Self { x: -self.x, y: -self.y, z: -self.z, w: -self.w }
    }

    /// Hamilton product `self * o`.
    pub fn mul(&self, o: &Self) -> Self {
        Self {
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
        }
    }

    /// Rotates `v` by this quaternion (`q v q*`).
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // v + 2w (u x v) + 2 u x (u x v), u the vector part
        let u = [self.x, self.y, self.z];
        let t = cross(u, v).map(|c| 2.0 * c);
        let ut = cross(u, t);
        [v[0] + self.w * t[0] + ut[0], v[1] + self.w * t[1] + ut[1], v[2] + self.w * t[2] + ut[2]]
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { x, y, z, w } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.w.is_finite()
    }
}

/// Position plus orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quaternion) -> Self {
        Self { position, orientation }
    }

    pub fn from_euler(position: Vec3, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { position, orientation: Quaternion::from_euler(roll, pitch, yaw) }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, local: Vec3) -> Vec3 {
        add(self.orientation.rotate(local), self.position)
    }

    /// Maps a point from the parent frame into this pose's local frame.
    pub fn inverse_transform_point(&self, world: Vec3) -> Vec3 {
        self.orientation.conjugate().rotate(sub(world, self.position))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.orientation.is_finite()
    }
}

/// Named channel of a robot state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateChannel {
    Pitch,
    Roll,
    X,
    Y,
    Z,
    Qx,
    Qy,
    Qz,
    Qw,
}

impl StateChannel {
    pub fn is_angle(self) -> bool {
        matches!(self, StateChannel::Pitch | StateChannel::Roll)
    }
}

/// Ordered channel list; inferred from the state width of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSchema(pub Vec<StateChannel>);

impl StateSchema {
    pub fn pitch() -> Self {
        Self(vec![StateChannel::Pitch])
    }

    pub fn pitch_roll() -> Self {
        Self(vec![StateChannel::Pitch, StateChannel::Roll])
    }

    pub fn pose7() -> Self {
        use StateChannel::*;
        Self(vec![X, Y, Z, Qx, Qy, Qz, Qw])
    }

    /// Schema for a given state width: 1 = pitch, 2 = pitch+roll, 7 = pose.
    pub fn from_dim(dim: usize) -> Option<Self> {
        match dim {
            0 => Some(Self(Vec::new())),
            1 => Some(Self::pitch()),
            2 => Some(Self::pitch_roll()),
            7 => Some(Self::pose7()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, ch: StateChannel) -> Option<usize> {
        self.0.iter().position(|&c| c == ch)
    }
}

/// State vector paired with its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub values: Vec<f64>,
    pub schema: StateSchema,
}

impl RobotState {
    /// Builds a state, wrapping angle channels into (-pi, pi].
    pub fn new(values: Vec<f64>, schema: StateSchema) -> Option<Self> {
        if values.len() != schema.len() {
            return None;
        }
        let values = values
            .iter()
            .zip(&schema.0)
            .map(|(&v, ch)| if ch.is_angle() { wrap_angle(v) } else { v })
            .collect();
        Some(Self { values, schema })
    }

    pub fn get(&self, ch: StateChannel) -> Option<f64> {
        self.schema.index_of(ch).map(|i| self.values[i])
    }
}

/// Wraps an angle into (-pi, pi]; -pi maps to +pi.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Orientation distance `2 acos |<q1, q2>|` in degrees; 0 for `q` vs `-q`.
///
/// Evaluated as `4 atan2(|q1 - s q2|, |q1 + s q2|)` with `s` the sign of the
/// dot product, which equals the arccos form for unit inputs but stays exact
/// near zero distance where `acos` loses half the mantissa.
pub fn rotation_distance_deg(q1: &Quaternion, q2: &Quaternion) -> f64 {
    let s = if q1.dot(q2) < 0.0 { -1.0 } else { 1.0 };
    let diff = [q1.x - s * q2.x, q1.y - s * q2.y, q1.z - s * q2.z, q1.w - s * q2.w];
    let sum = [q1.x + s * q2.x, q1.y + s * q2.y, q1.z + s * q2.z, q1.w + s * q2.w];
    let n = |v: [f64; 4]| v.iter().map(|c| c * c).sum::<f64>().sqrt();
    (4.0 * n(diff).atan2(n(sum))).to_degrees().clamp(0.0, 180.0)
}

/// Target pose expressed in the observer's base frame.
///
/// The base frame keeps the observer position and yaw and zeroes roll and
/// pitch, so the label does not depend on camera tilt. Returns
/// `[x, y, z, phi]` with `phi` the relative yaw in (-pi, pi].
pub fn relative_pose_base_frame(observer_world: &Pose, target_world: &Pose) -> [f64; 4] {
    let yaw_o = observer_world.orientation.yaw();
    let base = Quaternion::from_euler(0.0, 0.0, yaw_o);
    let rel = base.conjugate().rotate(sub(target_world.position, observer_world.position));
    let phi = wrap_angle(target_world.orientation.yaw() - yaw_o);
    [rel[0], rel[1], rel[2], phi]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}
