//! Offline augmentation: photometric perturbations, vignetting, horizontal
//! flip and synthetic pitch via a pure-rotation homography.
//!
//! Copies are produced in a fixed order: exposure, gamma, dynamic range,
//! noise, blur, then vignette, then the optional flip, then the pitch warp.
//! Copies whose subject leaves the field of view after warping are dropped.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::poses::{Pose, StateChannel, StateSchema};
use crate::rng;
use crate::scenegen::{project_point, CameraIntrinsics, Dataset, Image, Sample};

/// Parameter ranges for one augmentation run. Every copy draws its own
/// parameters uniformly from these ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub exposure: (f64, f64),
    pub gamma: (f64, f64),
    /// Output black level range for the dynamic-range remap.
    pub range_lo: (f64, f64),
    /// Output white level range for the dynamic-range remap.
    pub range_hi: (f64, f64),
    /// Gaussian noise sigma, 8-bit units.
    pub noise_sigma: (f64, f64),
    /// Blur sigma, pixels.
    pub blur_sigma: (f64, f64),
    pub vignette: (f64, f64),
    pub flip_probability: f64,
    pub pitch_warp: bool,
    /// Synthetic pitch offset range, radians.
    pub pitch_range: (f64, f64),
    pub copies: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = 17f64.to_radians();
        Self {
            exposure: (0.7, 1.3),
            gamma: (0.6, 1.6),
            range_lo: (0.0, 25.0),
            range_hi: (230.0, 255.0),
            noise_sigma: (0.0, 8.0),
            blur_sigma: (0.0, 1.5),
            vignette: (0.0, 0.4),
            flip_probability: 0.5,
            pitch_warp: true,
            pitch_range: (-p, p),
            copies: 10,
            seed: 1,
        }
    }
}

impl AugmentConfig {
    /// Every operation pinned at its identity.
    pub fn identity() -> Self {
        Self {
            exposure: (1.0, 1.0),
            gamma: (1.0, 1.0),
            range_lo: (0.0, 0.0),
            range_hi: (255.0, 255.0),
            noise_sigma: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            vignette: (0.0, 0.0),
            flip_probability: 0.0,
            pitch_warp: true,
            pitch_range: (0.0, 0.0),
            copies: 1,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let p = 17f64.to_radians() + 1e-12;
        let checks = [
            ("exposure", self.exposure, 1e-9, f64::INFINITY),
            ("gamma", self.gamma, 1e-9, f64::INFINITY),
            ("range_lo", self.range_lo, 0.0, 255.0),
            ("range_hi", self.range_hi, 0.0, 255.0),
            ("noise_sigma", self.noise_sigma, 0.0, f64::INFINITY),
            ("blur_sigma", self.blur_sigma, 0.0, f64::INFINITY),
            ("vignette", self.vignette, 0.0, 1.0),
            ("pitch_range", self.pitch_range, -p, p),
        ];
        for (name, (lo, hi), min, max) in checks {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                return Err(AugmentError::InvalidConfig(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if self.range_lo.1 >= self.range_hi.0 {
            return Err(AugmentError::InvalidConfig("range_lo must stay below range_hi".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(AugmentError::InvalidConfig("flip probability outside [0, 1]".into()));
        }
        if self.copies == 0 {
            return Err(AugmentError::InvalidConfig("copies must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("state schema has no pitch channel; pitch warp needs one")]
    MissingPitch,
    #[error("unsupported state width {0}")]
    UnknownSchema(usize),
    #[error("flip needs 4-element labels (x, y, z, phi), got {0}")]
    UnsupportedLabel(usize),
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    Image { width: img.width, height: img.height, data: img.data.iter().map(|&p| to_u8(f(p as f64))).collect() }
}

/// `round(255 (in/255)^gamma)`.
pub fn apply_gamma(img: &Image, gamma: f64) -> Image {
    map_pixels(img, |p| 255.0 * (p / 255.0).powf(gamma))
}

pub fn apply_exposure(img: &Image, gain: f64) -> Image {
    map_pixels(img, |p| gain * p)
}

/// Affine remap of [0, 255] onto [lo, hi].
pub fn apply_range(img: &Image, lo: f64, hi: f64) -> Image {
    map_pixels(img, |p| lo + p * (hi - lo) / 255.0)
}

pub fn add_noise(img: &Image, sigma: f64, rng: &mut impl Rng) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&p| to_u8(p as f64 + normal.sample(rng))).collect(),
    }
}

/// Normalized 1-D Gaussian kernel truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index into [0, n) without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur, reflect padding.
pub fn blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * img.get(reflect(x as isize + j as isize - r, w), y) as f64)
                .sum();
        }
    }
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
            out.set(x, y, to_u8(v));
        }
    }
    out
}

/// Multiplies by `1 - strength (r / r_max)^2`, `r` measured from the image
/// center and `r_max` the center-to-corner distance.
pub fn vignette(img: &Image, strength: f64) -> Image {
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let r2_max = cx * cx + cy * cy;
    let mut out = img.clone();
    if r2_max == 0.0 {
        return out;
    }
    for y in 0..img.height {
        for x in 0..img.width {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            out.set(x, y, to_u8(img.get(x, y) as f64 * (1.0 - strength * r2 / r2_max)));
        }
    }
    out
}

/// Mirrors the columns; negates label y and phi and the roll state.
pub fn hflip(sample: &Sample, schema: &StateSchema) -> Result<Sample, AugmentError> {
    if sample.label.len() != 4 {
        return Err(AugmentError::UnsupportedLabel(sample.label.len()));
    }
    let img = &sample.image;
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(x, y, img.get(img.width - 1 - x, y));
        }
    }
    let mut label = sample.label.clone();
    label[1] = -label[1];
    label[3] = -label[3];
    let mut state = sample.state.clone();
    if let Some(i) = schema.index_of(StateChannel::Roll) {
        state[i] = -state[i];
    }
    Ok(Sample { image: out, state, label, group_id: sample.group_id })
}

/// Source location, in the original image, of destination pixel
/// `(col, row)` after pitching the camera down by `delta`. `None` when the
/// ray falls behind the original camera.
pub fn pitch_warp_source(intr: &CameraIntrinsics, delta: f64, col: usize, row: usize) -> Option<(f64, f64)> {
    let (s, c) = delta.sin_cos();
    let rx = (col as f64 - intr.cx) / intr.f;
    let ry = (row as f64 - intr.cy) / intr.f;
    // K R K^-1 with R mapping the new camera frame into the old one
    let (x, y, z) = (rx, c * ry + s, -s * ry + c);
    if z <= 1e-12 {
        return None;
    }
    Some((intr.cx + intr.f * x / z, intr.cy + intr.f * y / z))
}

fn bilinear_clamped(img: &Image, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (img.width - 1) as f64);
    let v = v.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
    let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps the image as if the camera were pitched down by `delta` more and
/// adds `delta` to the pitch state. Labels are untouched since they live in
/// the tilt-free base frame. `None` when the subject leaves the view.
pub fn pitch_warp(
    sample: &Sample,
    delta: f64,
    intr: &CameraIntrinsics,
    schema: &StateSchema,
) -> Result<Option<Sample>, AugmentError> {
    let pi = schema.index_of(StateChannel::Pitch).ok_or(AugmentError::MissingPitch)?;
    let pitch = sample.state[pi] as f64 + delta;
    let roll = schema.index_of(StateChannel::Roll).map(|i| sample.state[i] as f64).unwrap_or(0.0);
    let camera = Pose::from_euler([0.0; 3], roll, pitch, 0.0);
    let centroid = [sample.label[0] as f64, sample.label[1] as f64, sample.label[2] as f64];
    if project_point(intr, &camera, centroid).is_none() {
        return Ok(None);
    }
    let img = &sample.image;
    let mut out = Image::new(img.width, img.height);
    let edge = (img.width - 1) as f64 * 4.0;
    for row in 0..img.height {
        for col in 0..img.width {
            let (u, v) = pitch_warp_source(intr, delta, col, row).unwrap_or((edge, edge));
            out.set(col, row, to_u8(bilinear_clamped(img, u, v)));
        }
    }
    let mut state = sample.state.clone();
    state[pi] = pitch as f32;
    Ok(Some(Sample { image: out, state, label: sample.label.clone(), group_id: sample.group_id }))
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Produces up to `config.copies` augmented copies of one sample. `key`
/// selects the random streams, one per copy.
pub fn augment_pipeline(
    sample: &Sample,
    config: &AugmentConfig,
    intr: &CameraIntrinsics,
    schema: &StateSchema,
    key: u64,
) -> Result<Vec<Sample>, AugmentError> {
    if config.pitch_warp && schema.index_of(StateChannel::Pitch).is_none() {
        return Err(AugmentError::MissingPitch);
    }
    let mut out = Vec::with_capacity(config.copies);
    for copy in 0..config.copies {
        let mut r = rng::stream(config.seed, &[rng::TAG_AUGMENT, key, copy as u64]);
        let gain = draw(&mut r, config.exposure);
        let gamma = draw(&mut r, config.gamma);
        let lo = draw(&mut r, config.range_lo);
        let hi = draw(&mut r, config.range_hi);
        let noise = draw(&mut r, config.noise_sigma);
        let blur_sigma = draw(&mut r, config.blur_sigma);
        let vig = draw(&mut r, config.vignette);
        let flip = r.random::<f64>() < config.flip_probability;
        let delta = draw(&mut r, config.pitch_range);

        let mut img = apply_exposure(&sample.image, gain);
        img = apply_gamma(&img, gamma);
        img = apply_range(&img, lo, hi);
        img = add_noise(&img, noise, &mut r);
        img = blur(&img, blur_sigma);
        img = vignette(&img, vig);
        let mut s = Sample { image: img, state: sample.state.clone(), label: sample.label.clone(), group_id: sample.group_id };
        if flip {
            s = hflip(&s, schema)?;
        }
        if config.pitch_warp {
            match pitch_warp(&s, delta, intr, schema)? {
                Some(w) => s = w,
                None => continue,
            }
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentStats {
    pub emitted: usize,
    pub discarded: usize,
}

/// Augments every sample of `data`; sample `i` uses stream key `i`.
pub fn augment_dataset(
    data: &Dataset,
    config: &AugmentConfig,
    intr: &CameraIntrinsics,
) -> Result<(Dataset, AugmentStats), AugmentError> {
    config.validate()?;
    let schema = data.schema().ok_or(AugmentError::UnknownSchema(data.state_dim))?;
    let mut out = data.like();
    let mut stats = AugmentStats::default();
    for (i, s) in data.samples.iter().enumerate() {
        let copies = augment_pipeline(s, config, intr, &schema, i as u64)?;
        stats.discarded += config.copies - copies.len();
        stats.emitted += copies.len();
        out.samples.extend(copies);
    }
    Ok((out, stats))
}
