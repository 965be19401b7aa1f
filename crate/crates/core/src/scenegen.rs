//! Synthetic desk-scale world: scene sampling, a pinhole ray-cast renderer
//! and the binary dataset container.
//!
//! The world is a checkerboard ground plane under a uniform sky with one
//! vertical billboard standing in for the observed subject. Images are
//! rendered from the observer camera, so observer pitch moves both the
//! horizon and the subject vertically, the same way a change of altitude
//! does.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::poses::{self, Pose, Quaternion, StateSchema, Vec3};
use crate::rng;

pub const SKY_LEVEL: u8 = 140;
pub const GROUND_DARK: u8 = 122;
pub const GROUND_LIGHT: u8 = 134;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    /// Mean absolute intensity difference.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: u64 = self.data.iter().zip(&other.data).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
        s as f64 / self.data.len() as f64
    }
}

/// Pinhole intrinsics. Pixel `(col, row)` has its center at `(u, v) = (col, row)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// 64x64 sensor, f = 64 px, principal point at the image center.
    pub fn desk() -> Self {
        Self::centered(64, 64, 64.0)
    }

    pub fn centered(width: usize, height: usize, f: f64) -> Self {
        Self { f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0, width, height }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = self.f > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(SceneError::InvalidConfig(format!("bad intrinsics {self:?}")))
        }
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u < self.width as f64 - 0.5 && v >= -0.5 && v < self.height as f64 - 0.5
    }
}

/// Sampling ranges and world constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Target position relative to the observer base frame, meters.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Relative target yaw, radians.
    pub phi_range: (f64, f64),
    /// Observer tilt, radians.
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    /// Observer world x/y placement range, meters.
    pub observer_xy_range: (f64, f64),
    pub ground_z: f64,
    pub checker_period: f64,
    pub billboard_width: f64,
    pub billboard_height: f64,
    pub seed: u64,
    pub n_groups: u16,
    pub state_schema: StateSchema,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let deg = PI / 180.0;
        Self {
            x_range: (1.0, 3.0),
            y_range: (-1.0, 1.0),
            z_range: (-0.5, 0.5),
            phi_range: (-PI / 2.0, PI / 2.0),
            pitch_range: (-17.0 * deg, 17.0 * deg),
            roll_range: (-5.0 * deg, 5.0 * deg),
            observer_xy_range: (-4.0, 4.0),
            ground_z: -1.5,
            checker_period: 0.5,
            billboard_width: 0.45,
            billboard_height: 1.7,
            seed: 1,
            n_groups: 17,
            state_schema: StateSchema::pitch(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ranges = [
            ("x", self.x_range),
            ("y", self.y_range),
            ("z", self.z_range),
            ("phi", self.phi_range),
            ("pitch", self.pitch_range),
            ("roll", self.roll_range),
            ("observer_xy", self.observer_xy_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(SceneError::InvalidConfig(format!("{name} range [{lo}, {hi}]")));
            }
        }
        let limit = 17.0f64.to_radians() + 1e-12;
        if self.pitch_range.0 < -limit || self.pitch_range.1 > limit {
            return Err(SceneError::InvalidConfig("pitch range exceeds +-17 deg".into()));
        }
        if self.n_groups == 0 {
            return Err(SceneError::InvalidConfig("n_groups must be positive".into()));
        }
        if !(self.checker_period > 0.0 && self.billboard_width > 0.0 && self.billboard_height > 0.0) {
            return Err(SceneError::InvalidConfig("non-positive scene dimension".into()));
        }
        let ok_schema = self.state_schema == StateSchema::pitch() || self.state_schema == StateSchema::pitch_roll();
        if !ok_schema {
            return Err(SceneError::InvalidConfig("state schema must be [pitch] or [pitch, roll]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("non-finite pose")]
    NonFinitePose,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place a visible target for sample {0}")]
    NoVisiblePlacement(usize),
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Observer pose, target pose and group for one sample ordinal.
pub fn sample_scene(config: &SceneConfig, index: usize) -> (Pose, Pose, u16) {
    sample_scene_attempt(config, index, 0)
}

/// As [`sample_scene`], with a retry counter selecting a fresh stream.
pub fn sample_scene_attempt(config: &SceneConfig, index: usize, attempt: u32) -> (Pose, Pose, u16) {
    let mut r = rng::stream(config.seed, &[rng::TAG_SCENE, index as u64, attempt as u64]);
    let group = (index % config.n_groups as usize) as u16;
    let ox = draw(&mut r, config.observer_xy_range);
    let oy = draw(&mut r, config.observer_xy_range);
    let yaw = draw(&mut r, (-PI, PI));
    let pitch = draw(&mut r, config.pitch_range);
    let roll = draw(&mut r, config.roll_range);
    let rel = [draw(&mut r, config.x_range), draw(&mut r, config.y_range), draw(&mut r, config.z_range)];
    let phi = draw(&mut r, config.phi_range);

    let observer = Pose::from_euler([ox, oy, 0.0], roll, pitch, yaw);
    let base = Quaternion::from_euler(0.0, 0.0, yaw);
    let target_pos = poses::add(base.rotate(rel), observer.position);
    let target = Pose::from_euler(target_pos, 0.0, 0.0, yaw + phi);
    (observer, target, group)
}

/// Pinhole projection of a world point; `None` when behind the camera or
/// outside the sensor.
pub fn project_point(intr: &CameraIntrinsics, camera: &Pose, world: Vec3) -> Option<(f64, f64)> {
    let b = camera.inverse_transform_point(world);
    // body (forward, left, up) -> camera (right, down, forward)
    let (xc, yc, zc) = (-b[1], -b[2], b[0]);
    if zc <= 1e-9 {
        return None;
    }
    let u = intr.cx + intr.f * xc / zc;
    let v = intr.cy + intr.f * yc / zc;
    intr.in_bounds(u, v).then_some((u, v))
}

struct Pattern {
    dark: f64,
    light: f64,
    stripe_center: f64,
    stripe_half: f64,
}

impl Pattern {
    fn for_group(g: u16) -> Self {
        let g = g as usize;
        Self {
            dark: 40.0 + 12.0 * (g % 4) as f64,
            light: 176.0 + 10.0 * ((g / 4) % 4) as f64,
            stripe_center: 0.06 + 0.03 * (g % 3) as f64,
            stripe_half: 0.035,
        }
    }

    /// Tone at signed lateral coordinate `s` (meters, mirrored by the sign of
    /// the viewing yaw).
    fn tone(&self, s: f64) -> f64 {
        if (s + self.stripe_center).abs() <= self.stripe_half {
            self.light
        } else if s < 0.0 {
            self.dark
        } else {
            self.light
        }
    }
}

/// Sub-samples per pixel along each axis.
const SUPERSAMPLE: usize = 4;

/// Ray-casts one frame from the observer camera.
pub fn render(
    config: &SceneConfig,
    intr: &CameraIntrinsics,
    observer: &Pose,
    target: &Pose,
    group: u16,
) -> Result<Image, SceneError> {
    if !observer.is_finite() || !target.is_finite() {
        return Err(SceneError::NonFinitePose);
    }
    let rot = observer.orientation.to_matrix();
    let o = observer.position;
    let c = target.position;
    let psi = target.orientation.yaw();
    let (sin_psi, cos_psi) = psi.sin_cos();
    let normal = [cos_psi, sin_psi, 0.0];
    let lateral = [-sin_psi, cos_psi, 0.0];
    let phi = poses::wrap_angle(psi - observer.orientation.yaw());
    let sigma = if phi >= 0.0 { 1.0 } else { -1.0 };
    let shade = 0.5 + 0.25 * (1.0 + phi.cos());
    let pattern = Pattern::for_group(group);
    let half_w = config.billboard_width / 2.0;
    let half_h = config.billboard_height / 2.0;
    let to_center = poses::sub(c, o);
    let plane_num = poses::dot(normal, to_center);

    // radiance along the ray through image point (u, v)
    let trace = |u: f64, v: f64| -> f64 {
        let d = poses::mat_vec(&rot, [1.0, -(u - intr.cx) / intr.f, -(v - intr.cy) / intr.f]);
        let mut hit_t = f64::INFINITY;
        let mut value = SKY_LEVEL as f64;
        let denom = poses::dot(normal, d);
        if denom.abs() > 1e-12 {
            let t = plane_num / denom;
            if t > 0.0 {
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                let rel = poses::sub(p, c);
                let s = poses::dot(rel, lateral);
                let h = rel[2];
                if s.abs() <= half_w && h.abs() <= half_h {
                    hit_t = t;
                    value = pattern.tone(sigma * s) * shade;
                }
            }
        }
        if d[2] < 0.0 {
            let t = (config.ground_z - o[2]) / d[2];
            if t < hit_t {
                let gx = o[0] + t * d[0];
                let gy = o[1] + t * d[1];
                // cells are symmetric about the world x axis
                let cell = (gx / config.checker_period).floor() as i64
                    + (gy.abs() / config.checker_period + 0.5).floor() as i64;
                value = if cell.rem_euclid(2) == 0 { GROUND_LIGHT } else { GROUND_DARK } as f64;
            }
        }
        value
    };

    // box-filtered over a centered sub-pixel grid, so the image is a
    // band-limited view that resamples cleanly under warps
    let offsets: Vec<f64> = (0..SUPERSAMPLE).map(|i| (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5).collect();
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut img = Image::new(intr.width, intr.height);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let mut acc = 0.0;
            for dv in &offsets {
                for du in &offsets {
                    acc += trace(col as f64 + du, row as f64 + dv);
                }
            }
            img.set(col, row, (acc / norm).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(img)
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub state: Vec<f32>,
    pub label: Vec<f32>,
    pub group_id: u16,
}

pub const DATASET_MAGIC: &[u8; 4] = b"VSF1";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub n_samples: u32,
    pub height: u16,
    pub width: u16,
    pub state_dim: u16,
    pub label_dim: u16,
    pub n_groups: u16,
}

impl DatasetHeader {
    pub fn record_bytes(&self) -> usize {
        self.height as usize * self.width as usize + 4 * self.state_dim as usize + 4 * self.label_dim as usize + 2
    }
}

/// In-memory dataset; all samples share the header geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub state_dim: usize,
    pub label_dim: usize,
    pub n_groups: u16,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, state_dim: usize, label_dim: usize, n_groups: u16) -> Self {
        Self { height, width, state_dim, label_dim, n_groups, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: DATASET_VERSION,
            n_samples: self.samples.len() as u32,
            height: self.height as u16,
            width: self.width as u16,
            state_dim: self.state_dim as u16,
            label_dim: self.label_dim as u16,
            n_groups: self.n_groups,
        }
    }

    /// Same geometry, no samples.
    pub fn like(&self) -> Self {
        Self::empty(self.height, self.width, self.state_dim, self.label_dim, self.n_groups)
    }

    /// Subset in the order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut d = self.like();
        d.samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        d
    }

    pub fn schema(&self) -> Option<StateSchema> {
        StateSchema::from_dim(self.state_dim)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, s) in self.samples.iter().enumerate() {
            let bad = s.image.width != self.width
                || s.image.height != self.height
                || s.image.data.len() != self.width * self.height
                || s.state.len() != self.state_dim
                || s.label.len() != self.label_dim
                || s.group_id >= self.n_groups
                || !s.label.iter().all(|v| v.is_finite());
            if bad {
                return Err(DatasetError::Inconsistent(format!("sample {i} does not match the header")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionMismatch(u32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>, DatasetError> {
    data.validate()?;
    let h = data.header();
    let mut out = Vec::with_capacity(DATASET_HEADER_BYTES + h.record_bytes() * data.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.n_samples.to_le_bytes());
    for v in [h.height, h.width, h.state_dim, h.label_dim, h.n_groups] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &data.samples {
        out.extend_from_slice(&s.image.data);
        for v in s.state.iter().chain(&s.label) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.group_id.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated { expected: DATASET_HEADER_BYTES, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    if bytes.len() < DATASET_HEADER_BYTES {
        return Err(DatasetError::Truncated { expected: DATASET_HEADER_BYTES, found: bytes.len() });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch(version));
    }
    let h = DatasetHeader {
        version,
        n_samples: u32_at(8),
        height: u16_at(12),
        width: u16_at(14),
        state_dim: u16_at(16),
        label_dim: u16_at(18),
        n_groups: u16_at(20),
    };
    let rec = h.record_bytes();
    let expected = DATASET_HEADER_BYTES + rec * h.n_samples as usize;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DatasetError::Inconsistent(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let (hh, ww) = (h.height as usize, h.width as usize);
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let mut samples = Vec::with_capacity(h.n_samples as usize);
    let mut o = DATASET_HEADER_BYTES;
    for _ in 0..h.n_samples {
        let image = Image { width: ww, height: hh, data: bytes[o..o + hh * ww].to_vec() };
        o += hh * ww;
        let state = (0..h.state_dim as usize).map(|i| f32_at(o + 4 * i)).collect();
        o += 4 * h.state_dim as usize;
        let label = (0..h.label_dim as usize).map(|i| f32_at(o + 4 * i)).collect();
        o += 4 * h.label_dim as usize;
        let group_id = u16_at(o);
        o += 2;
        samples.push(Sample { image, state, label, group_id });
    }
    let data = Dataset {
        height: hh,
        width: ww,
        state_dim: h.state_dim as usize,
        label_dim: h.label_dim as usize,
        n_groups: h.n_groups,
        samples,
    };
    data.validate()?;
    Ok(data)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), DatasetError> {
    let bytes = encode_dataset(data)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

/// Counters reported by [`generate_dataset`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenStats {
    pub emitted: usize,
    pub discarded: usize,
}

const MAX_PLACEMENT_ATTEMPTS: u32 = 10_000;

/// Renders a labelled sample from explicit poses.
pub fn make_sample(
    config: &SceneConfig,
    intr: &CameraIntrinsics,
    observer: &Pose,
    target: &Pose,
    group: u16,
) -> Result<Sample, SceneError> {
    let image = render(config, intr, observer, target, group)?;
    let label = poses::relative_pose_base_frame(observer, target).map(|v| v as f32).to_vec();
    let (roll, pitch, _) = observer.orientation.to_euler();
    let state = config
        .state_schema
        .0
        .iter()
        .map(|ch| match ch {
            poses::StateChannel::Pitch => pitch as f32,
            poses::StateChannel::Roll => roll as f32,
            _ => unreachable!("validated schema"),
        })
        .collect();
    Ok(Sample { image, state, label, group_id: group })
}

/// Draws, filters and renders `n` samples.
pub fn generate_dataset(
    config: &SceneConfig,
    intr: &CameraIntrinsics,
    n: usize,
) -> Result<(Dataset, GenStats), SceneError> {
    config.validate()?;
    intr.validate()?;
    if n == 0 {
        return Err(SceneError::InvalidConfig("n must be positive".into()));
    }
    let mut data = Dataset::empty(intr.height, intr.width, config.state_schema.len(), 4, config.n_groups);
    let mut stats = GenStats::default();
    for i in 0..n {
        let mut placed = None;
        for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let (obs, tgt, g) = sample_scene_attempt(config, i, attempt);
            if project_point(intr, &obs, tgt.position).is_some() {
                placed = Some((obs, tgt, g));
                break;
            }
            stats.discarded += 1;
        }
        let (obs, tgt, g) = placed.ok_or(SceneError::NoVisiblePlacement(i))?;
        data.samples.push(make_sample(config, intr, &obs, &tgt, g)?);
        stats.emitted += 1;
    }
    Ok((data, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(pitch_deg: f64, roll_deg: f64) -> Pose {
        Pose::from_euler([0.0, 0.0, 0.0], roll_deg.to_radians(), pitch_deg.to_radians(), 0.0)
    }

    /// Boundary between sky rows and the first row showing ground texture.
    fn horizon_row(img: &Image) -> f64 {
        let first_ground = (0..img.height)
            .find(|&r| (0..img.width).any(|c| img.get(c, r) != SKY_LEVEL))
            .unwrap();
        first_ground as f64 - 0.5
    }

    fn far_away_target() -> Pose {
        Pose::from_euler([1000.0, 1000.0, 0.0], 0.0, 0.0, 0.0)
    }

    #[test]
    fn sample_scene_is_deterministic() {
        let c = SceneConfig::default();
        assert_eq!(sample_scene(&c, 17), sample_scene(&c, 17));
        assert_ne!(sample_scene(&c, 17), sample_scene(&c, 18));
    }

    #[test]
    fn sampled_channels_stay_in_range() {
        let c = SceneConfig::default();
        for i in 0..2000 {
            let (obs, tgt, g) = sample_scene(&c, i);
            let l = poses::relative_pose_base_frame(&obs, &tgt);
            let (roll, pitch, _) = obs.orientation.to_euler();
            let eps = 1e-9;
            assert!(l[0] >= c.x_range.0 - eps && l[0] <= c.x_range.1 + eps);
            assert!(l[1] >= c.y_range.0 - eps && l[1] <= c.y_range.1 + eps);
            assert!(l[2] >= c.z_range.0 - eps && l[2] <= c.z_range.1 + eps);
            assert!(l[3] >= c.phi_range.0 - eps && l[3] <= c.phi_range.1 + eps);
            assert!(pitch >= c.pitch_range.0 - eps && pitch <= c.pitch_range.1 + eps);
            assert!(roll >= c.roll_range.0 - eps && roll <= c.roll_range.1 + eps);
            assert!(g < c.n_groups);
        }
    }

    #[test]
    fn groups_are_balanced() {
        let c = SceneConfig::default();
        let mut counts = [0usize; 17];
        for i in 0..17_000 {
            counts[sample_scene(&c, i).2 as usize] += 1;
        }
        for n in counts {
            assert!((n as f64 - 1000.0).abs() <= 50.0);
        }
    }

    #[test]
    fn project_point_examples() {
        let intr = CameraIntrinsics::desk();
        let cam = Pose::new([0.0; 3], Quaternion::IDENTITY);
        assert_eq!(project_point(&intr, &cam, [1.0, 0.0, 0.0]), Some((intr.cx, intr.cy)));
        // camera-frame (0.1, 0, 1): right of the axis, i.e. body -y
        let (u, v) = project_point(&intr, &cam, [1.0, -0.1, 0.0]).unwrap();
        assert!((u - (intr.cx + 6.4)).abs() < 1e-12 && (v - intr.cy).abs() < 1e-12);
        assert_eq!(project_point(&intr, &cam, [-1.0, 0.0, 0.0]), None);
        assert_eq!(project_point(&intr, &cam, [1.0, 5.0, 0.0]), None);
    }

    #[test]
    fn billboard_dead_ahead_is_centered() {
        let c = SceneConfig::default();
        let intr = CameraIntrinsics::desk();
        let tgt = Pose::from_euler([2.0, 0.0, 0.0], 0.0, 0.0, 0.0);
        let img = render(&c, &intr, &level(0.0, 0.0), &tgt, 0).unwrap();
        let bg = render(&c, &intr, &level(0.0, 0.0), &far_away_target(), 0).unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for r in 0..img.height {
            for col in 0..img.width {
                if img.get(col, r) != bg.get(col, r) {
                    sum += col as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        assert!((sum / n - intr.cx).abs() <= 0.5, "centroid column {}", sum / n);
    }

    #[test]
    fn horizon_follows_pitch() {
        let c = SceneConfig::default();
        let intr = CameraIntrinsics::desk();
        for deg in [-17.0, -10.0, -3.0, 0.0, 5.0, 10.0, 17.0f64] {
            let img = render(&c, &intr, &level(deg, 0.0), &far_away_target(), 0).unwrap();
            let want = intr.cy - intr.f * deg.to_radians().tan();
            let got = horizon_row(&img);
            let tol = if deg == 0.0 { 0.5 } else { 1.0 };
            assert!((got - want).abs() <= tol, "pitch {deg}: horizon {got} vs {want}");
        }
    }

    /// Grid search for two observer states (altitude, pitch) that see nearly
    /// the same image of a fixed target while the labels' z differ.
    fn ambiguity_search(target: &Pose) -> (f64, f64, (f64, f64), (f64, f64)) {
        let c = SceneConfig::default();
        let intr = CameraIntrinsics::desk();
        let mut best = (f64::INFINITY, 0.0, (0.0, 0.0), (0.0, 0.0));
        for p1 in (-17..=17).step_by(2).map(|d| (d as f64).to_radians()) {
            let a = Pose::from_euler([0.0, 0.0, 0.0], 0.0, p1, 0.0);
            let img_a = render(&c, &intr, &a, target, 3).unwrap();
            let za = poses::relative_pose_base_frame(&a, target)[2];
            for dz in [-0.25, -0.21, 0.21, 0.25] {
                for k in -80..=80 {
                    let p2 = p1 + (k as f64 * 0.1).to_radians();
                    if p2.abs() > 17f64.to_radians() {
                        continue;
                    }
                    let b = Pose::from_euler([0.0, 0.0, dz], 0.0, p2, 0.0);
                    let zb = poses::relative_pose_base_frame(&b, target)[2];
                    let d = img_a.mean_abs_diff(&render(&c, &intr, &b, target, 3).unwrap());
                    if d < best.0 {
                        best = (d, (za - zb).abs(), (0.0, p1), (dz, p2));
                    }
                }
            }
        }
        best
    }

    #[test]
    fn pitch_and_altitude_are_visually_ambiguous() {
        let target = Pose::from_euler([3.0, 0.0, 0.0], 0.0, 0.0, 0.3);
        let (diff, dz, a, b) = ambiguity_search(&target);
        assert!(diff < 2.0, "best pair differs by {diff} levels: {a:?} vs {b:?}");
        assert!(dz > 0.2);
    }

    #[test]
    fn render_rejects_non_finite() {
        let c = SceneConfig::default();
        let bad = Pose::from_euler([f64::NAN, 0.0, 0.0], 0.0, 0.0, 0.0);
        assert!(matches!(
            render(&c, &CameraIntrinsics::desk(), &bad, &far_away_target(), 0),
            Err(SceneError::NonFinitePose)
        ));
    }

    #[test]
    fn generated_targets_are_visible_and_labels_tilt_invariant() {
        let c = SceneConfig::default();
        let intr = CameraIntrinsics::desk();
        let (data, stats) = generate_dataset(&c, &intr, 50).unwrap();
        assert_eq!(stats.emitted, 50);
        for (i, s) in data.samples.iter().enumerate() {
            let mut attempt = 0;
            let (obs, tgt, _) = loop {
                let p = sample_scene_attempt(&c, i, attempt);
                if project_point(&intr, &p.0, p.1.position).is_some() {
                    break p;
                }
                attempt += 1;
            };
            let l = poses::relative_pose_base_frame(&obs, &tgt);
            assert_eq!(s.label, l.map(|v| v as f32).to_vec());
            let (roll, pitch, yaw) = obs.orientation.to_euler();
            let tilted = Pose::from_euler(obs.position, roll, pitch + 0.1, yaw);
            let l2 = poses::relative_pose_base_frame(&tilted, &tgt);
            for k in 0..4 {
                assert!((l[k] - l2[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let c = SceneConfig { seed: 9, ..SceneConfig::default() };
        let intr = CameraIntrinsics::desk();
        let a = encode_dataset(&generate_dataset(&c, &intr, 20).unwrap().0).unwrap();
        let b = encode_dataset(&generate_dataset(&c, &intr, 20).unwrap().0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let d = Dataset::empty(64, 64, 1, 4, 17);
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(bytes.len(), DATASET_HEADER_BYTES);
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
    }

    #[test]
    fn container_errors_are_distinct() {
        let c = SceneConfig::default();
        let (d, _) = generate_dataset(&c, &CameraIntrinsics::desk(), 3).unwrap();
        let bytes = encode_dataset(&d).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(DatasetError::BadMagic(m)) if &m == b"XSF1"));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(DatasetError::VersionMismatch(2))));

        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(DatasetError::Truncated { .. })));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(DatasetError::Truncated { .. })));
    }
}
