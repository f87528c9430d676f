//! Seeded toy multi-modal scenes and the `.mmss` dataset container.
//!
//! Every modality is rendered from one label map. Only the camera modality
//! depends on the day/night condition, so it is the ground-truth fragile
//! sensor at night.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::check_input_size;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, IGNORE_LABEL};

pub const MAX_CLASSES: usize = 16;
pub const CHANNELS: usize = 3;

const NIGHT_GAIN: f64 = 0.15;
const NIGHT_NOISE_SIGMA: f64 = 0.2;
const RANGE_DROPOUT: f64 = 0.9;

// independent random streams per scene
const STREAM_LAYOUT: u64 = 0;
const STREAM_CONDITION: u64 = 1;
const STREAM_ILLUMINATION: u64 = 2;
const STREAM_NIGHT_NOISE: u64 = 3;
const STREAM_RANGE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Day,
    Night,
}

impl Condition {
    fn to_byte(self) -> u8 {
        match self {
            Condition::Day => 0,
            Condition::Night => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Condition::Day),
            1 => Ok(Condition::Night),
            other => Err(Error::Malformed(format!("unknown condition byte {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityKind {
    Camera,
    Depth,
    Event,
    Range,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] = [
        ModalityKind::Camera,
        ModalityKind::Depth,
        ModalityKind::Event,
        ModalityKind::Range,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Camera => "rgb",
            ModalityKind::Depth => "depth",
            ModalityKind::Event => "event",
            ModalityKind::Range => "lidar",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown modality {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityScene {
    pub height: usize,
    pub width: usize,
    /// One `3×H×W` image per modality, values in `[0, 1]`.
    pub images: Vec<Vec<f32>>,
    /// `H×W` class ids in `[0, K)`, or [`IGNORE_LABEL`].
    pub labels: Vec<u8>,
    pub condition: Condition,
    pub seed: u64,
}

impl ModalityScene {
    pub fn modality_count(&self) -> usize {
        self.images.len()
    }

    pub fn image_tensor<S: Scalar>(&self, modality: usize) -> Result<Tensor<S>> {
        let img = self
            .images
            .get(modality)
            .ok_or_else(|| Error::InvalidArgument(format!("modality index {modality} out of range")))?;
        Tensor::new(
            &[CHANNELS, self.height, self.width],
            img.iter().map(|v| S::lit(f64::from(*v))).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub modalities: Vec<ModalityKind>,
    pub p_night: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 5,
            modalities: ModalityKind::ALL.to_vec(),
            p_night: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_input_size(self.height, self.width)?;
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "classes must be in 1..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidArgument("at least one modality is required".into()));
        }
        if !(0.0..=1.0).contains(&self.p_night) {
            return Err(Error::InvalidArgument(format!("p_night must lie in [0, 1], got {}", self.p_night)));
        }
        Ok(())
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|k| k.name().to_string()).collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates one scene; the condition is drawn with probability `p_night`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<ModalityScene> {
    spec.validate()?;
    let night = stream(seed, STREAM_CONDITION).gen_bool(spec.p_night);
    let condition = if night { Condition::Night } else { Condition::Day };
    render_scene(seed, spec, condition)
}

/// Renders the scene of `seed` under a forced condition.
pub fn render_scene(seed: u64, spec: &SceneSpec, condition: Condition) -> Result<ModalityScene> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let layout = paint_layout(&mut stream(seed, STREAM_LAYOUT), h, w, k);

    let mut labels = layout.clone();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                labels[y * w + x] = IGNORE_LABEL;
            }
        }
    }

    let depth = render_depth(&layout, h, w, k);
    let images = spec
        .modalities
        .iter()
        .map(|kind| match kind {
            ModalityKind::Camera => render_camera(seed, &layout, h, w, condition),
            ModalityKind::Depth => depth.clone(),
            ModalityKind::Event => render_events(&layout, h, w),
            ModalityKind::Range => render_range(seed, &depth, h, w),
        })
        .collect();

    Ok(ModalityScene {
        height: h,
        width: w,
        images,
        labels,
        condition,
        seed,
    })
}

fn paint_layout(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Vec<u8> {
    let mut map = vec![0u8; h * w];
    if k == 1 {
        return map;
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let class = rng.gen_range(1..k) as u8;
        let ellipse = rng.gen_bool(0.5);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(h as f64 / 8.0..h as f64 / 3.0);
        let rx = rng.gen_range(w as f64 / 8.0..w as f64 / 3.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    map[y * w + x] = class;
                }
            }
        }
    }
    map
}

/// Fixed per-class colour: golden-ratio hue walk at high value.
pub fn class_color(class: usize) -> [f64; 3] {
    let hue = (class as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.55, 0.95);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Fixed per-class depth in `[0.1, 0.8]`.
pub fn class_depth(class: usize, classes: usize) -> f64 {
    if classes <= 1 {
        return 0.45;
    }
    0.1 + 0.7 * class as f64 / (classes - 1) as f64
}

fn render_camera(seed: u64, layout: &[u8], h: usize, w: usize, condition: Condition) -> Vec<f32> {
    let mut illum_rng = stream(seed, STREAM_ILLUMINATION);
    let gy = illum_rng.gen_range(-0.15..0.15);
    let gx = illum_rng.gen_range(-0.15..0.15);
    let mut noise_rng = stream(seed, STREAM_NIGHT_NOISE);
    let noise = Normal::new(0.0, NIGHT_NOISE_SIGMA).expect("valid sigma");
    let mut out = vec![0f32; CHANNELS * h * w];
    for ch in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let illum = 0.9 + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
                let mut v = (class_color(layout[y * w + x] as usize)[ch] * illum).clamp(0.0, 1.0);
                if condition == Condition::Night {
                    v = (v * NIGHT_GAIN + noise.sample(&mut noise_rng)).clamp(0.0, 1.0);
                }
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

fn render_depth(layout: &[u8], h: usize, w: usize, k: usize) -> Vec<f32> {
    let mut plane = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = class_depth(layout[y * w + x] as usize, k) + 0.15 * y as f64 / h as f64;
            plane[y * w + x] = d.clamp(0.0, 1.0) as f32;
        }
    }
    plane.repeat(CHANNELS)
}

/// Channels: horizontal label edges, vertical label edges, their maximum.
fn render_events(layout: &[u8], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; CHANNELS * h * w];
    let at = |y: usize, x: usize| layout[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let c = at(y, x);
            let horiz = (x > 0 && at(y, x - 1) != c) || (x + 1 < w && at(y, x + 1) != c);
            let vert = (y > 0 && at(y - 1, x) != c) || (y + 1 < h && at(y + 1, x) != c);
            let p = y * w + x;
            out[p] = f32::from(u8::from(horiz));
            out[h * w + p] = f32::from(u8::from(vert));
            out[2 * h * w + p] = f32::from(u8::from(horiz || vert));
        }
    }
    out
}

fn render_range(seed: u64, depth: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut rng = stream(seed, STREAM_RANGE);
    let keep: Vec<bool> = (0..h * w).map(|_| !rng.gen_bool(RANGE_DROPOUT)).collect();
    let mut out = depth.to_vec();
    for ch in 0..CHANNELS {
        for (p, &k) in keep.iter().enumerate() {
            if !k {
                out[ch * h * w + p] = 0.0;
            }
        }
    }
    out
}

/// Scene seed for index `i` of a split derived from `base`.
pub fn scene_seed(base: u64, i: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub scenes: Vec<ModalityScene>,
}

impl Dataset {
    /// Generates `count` scenes with seeds `scene_seed(base, offset + i)`.
    pub fn generate(base_seed: u64, offset: u64, count: usize, spec: &SceneSpec) -> Result<Self> {
        let scenes = (0..count as u64)
            .map(|i| generate_scene(scene_seed(base_seed, offset + i), spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modalities: spec.modality_names(),
            height: spec.height,
            width: spec.width,
            classes: spec.classes,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

// ---- container ----------------------------------------------------------

pub const MAGIC: [u8; 4] = *b"MMSS";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a dataset: little-endian header followed by per-scene
/// `seed u64, condition u8, images f32[M·3·H·W], labels u8[H·W]`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let m = ds.modalities.len();
    let px = ds.height * ds.width;
    let mut buf = Vec::with_capacity(64 + ds.len() * (9 + m * CHANNELS * px * 4 + px));
    buf.extend_from_slice(&MAGIC);
    for v in [FORMAT_VERSION, to_u32(ds.len())?, to_u32(m)?, to_u32(ds.height)?, to_u32(ds.width)?, to_u32(ds.classes)?] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for name in &ds.modalities {
        buf.extend_from_slice(&to_u32(name.len())?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for s in &ds.scenes {
        if s.images.len() != m || s.height != ds.height || s.width != ds.width || s.labels.len() != px {
            return Err(Error::InvalidArgument("scene does not match dataset header".into()));
        }
        buf.extend_from_slice(&s.seed.to_le_bytes());
        buf.push(s.condition.to_byte());
        for img in &s.images {
            if img.len() != CHANNELS * px {
                return Err(Error::InvalidArgument("image size does not match dataset header".into()));
            }
            for v in img {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&s.labels);
    }
    Ok(buf)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Malformed(format!("invalid utf-8 name: {e}")))
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes(extra)),
        }
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let m = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if height == 0 || width == 0 || m == 0 || classes == 0 {
        return Err(Error::Malformed(format!(
            "degenerate header: M={m} H={height} W={width} K={classes}"
        )));
    }
    let modalities = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let px = height
        .checked_mul(width)
        .filter(|px| px.checked_mul(CHANNELS * 4).is_some())
        .ok_or_else(|| Error::Malformed(format!("image size {height}x{width} too large")))?;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let seed = r.u64()?;
        let condition = Condition::from_byte(r.u8()?)?;
        let mut images = Vec::with_capacity(m);
        for _ in 0..m {
            let raw = r.take(CHANNELS * px * 4)?;
            let img: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::Malformed("non-finite pixel value".into()));
            }
            images.push(img);
        }
        let labels = r.take(px)?.to_vec();
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        scenes.push(ModalityScene {
            height,
            width,
            images,
            labels,
            condition,
            seed,
        });
    }
    r.finish()?;
    Ok(Dataset {
        modalities,
        height,
        width,
        classes,
        scenes,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
