//! Synthetic hyperspectral scenes with labelled objects, the `FUNH` binary
//! cube container, per-scene annotation text, and the dataset manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::cassi::{random_mask, CodedAperture, HsiCube, Measurement};
use crate::detection::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const FUNH_MAGIC: &[u8; 4] = b"FUNH";
pub const FUNH_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_classes: usize,
    pub mean_objects: f64,
    pub min_size: usize,
    pub max_size: usize,
    /// Seed of the class signatures, shared by every scene of a dataset.
    pub signature_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            bands: 8,
            num_classes: 5,
            mean_objects: 24.0,
            min_size: 4,
            max_size: 12,
            signature_seed: 2024,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 || self.num_classes == 0 {
            return Err(Error::Config("scene sizes and class count must be positive".into()));
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "object sizes {}..={} must start at 4 px or more",
                self.min_size, self.max_size
            )));
        }
        if self.max_size + 2 > self.height.min(self.width) {
            return Err(Error::Config("objects do not fit inside the image".into()));
        }
        if !(self.mean_objects >= 0.0 && self.mean_objects.is_finite()) {
            return Err(Error::Config("mean object count must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Per-class emission curves: each is a sum of one to three Gaussian bumps
/// over the band index, scaled into `[0.15, 0.95]`. Draws are repeated until
/// every pair of classes has correlation below 0.95.
pub fn class_signatures(num_classes: usize, bands: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while out.len() < num_classes {
        attempts += 1;
        let bumps = rng.gen_range(1..=3);
        let mut curve = vec![0.0; bands];
        for _ in 0..bumps {
            let center = rng.gen_range(-0.5..bands as f64 - 0.5);
            let width = rng.gen_range(0.6..(bands as f64 / 3.0).max(1.0));
            let amp = rng.gen_range(0.4..1.0);
            for (b, v) in curve.iter_mut().enumerate() {
                *v += amp * (-0.5 * ((b as f64 - center) / width).powi(2)).exp();
            }
        }
        let max = curve.iter().cloned().fold(0.0, f64::max);
        let curve: Vec<f64> = curve.iter().map(|v| 0.15 + 0.8 * v / max).collect();
        // single-band data cannot separate classes by correlation
        let separable = bands < 2 || out.iter().all(|s| correlation(s, &curve) < 0.95);
        if separable || attempts > 10_000 {
            out.push(curve);
        }
    }
    out
}

/// Pearson correlation; 0 when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

const BACKGROUNDS: usize = 3;

/// Smooth, dim background spectra.
fn background_spectra(bands: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4c6_0000);
    (0..BACKGROUNDS)
        .map(|_| {
            let base = rng.gen_range(0.08..0.2);
            let slope = rng.gen_range(-0.08..0.08);
            let t = |b: usize| if bands > 1 { b as f64 / (bands - 1) as f64 - 0.5 } else { 0.0 };
            (0..bands).map(|b| (base + slope * t(b)).max(0.02)).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// An object to paint: shape inscribed in the `w x h` rectangle at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub shape: Shape,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl ObjectSpec {
    fn covers(&self, row: usize, col: usize) -> bool {
        if col < self.x || col >= self.x + self.w || row < self.y || row >= self.y + self.h {
            return false;
        }
        match self.shape {
            Shape::Rectangle => true,
            Shape::Ellipse => {
                let (a, b) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (col - self.x) as f64 + 0.5 - a;
                let dy = (row - self.y) as f64 + 0.5 - b;
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
        }
    }

    fn pixels(&self) -> Vec<(usize, usize)> {
        let mut px = Vec::new();
        for r in self.y..self.y + self.h {
            for c in self.x..self.x + self.w {
                if self.covers(r, c) {
                    px.push((r, c));
                }
            }
        }
        px
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cube: HsiCube<f32>,
    pub annotations: Vec<Annotation>,
    pub objects: Vec<ObjectSpec>,
    /// Per-pixel label: `Some(class)` on painted object pixels.
    pub labels: Vec<Option<usize>>,
}

/// Paint `objects` (in order; later objects overwrite) over a textured
/// background. Annotations are the tight boxes of the painted pixels.
pub fn render_scene(spec: &SceneSpec, objects: &[ObjectSpec], seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w, nb) = (spec.height, spec.width, spec.bands);
    for o in objects {
        if o.class_id >= spec.num_classes || o.w == 0 || o.h == 0 || o.x + o.w > w || o.y + o.h > h {
            return Err(Error::Contract(format!("object {o:?} does not fit a {w}x{h} image")));
        }
    }
    let signatures = class_signatures(spec.num_classes, nb, spec.signature_seed);
    let backgrounds = background_spectra(nb, spec.signature_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = &backgrounds[rng.gen_range(0..BACKGROUNDS)];

    // low-frequency texture: bilinear upsampling of a coarse random grid
    let grid = 5;
    let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(0.6..1.4)).collect();
    let texture = |r: usize, c: usize| {
        let fy = r as f64 / h.max(2) as f64 * (grid - 1) as f64;
        let fx = c as f64 / w.max(2) as f64 * (grid - 1) as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |y: usize, x: usize| coarse[y * grid + x];
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
    };
    let mut data = vec![0.0f32; h * w * nb];
    for r in 0..h {
        for c in 0..w {
            let t = texture(r, c);
            for b in 0..nb {
                data[(r * w + c) * nb + b] = (bg[b] * t).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut labels = vec![None; h * w];
    let mut painted: Vec<Vec<(usize, usize)>> = Vec::with_capacity(objects.len());
    for o in objects {
        let sig = &signatures[o.class_id];
        // smooth shading across the object, slightly brighter at one corner
        let (gx, gy) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let level = rng.gen_range(0.8..1.0);
        let px = o.pixels();
        for &(r, c) in &px {
            let u = (c - o.x) as f64 / o.w as f64 - 0.5;
            let v = (r - o.y) as f64 / o.h as f64 - 0.5;
            let shade = level + gx * u + gy * v;
            for b in 0..nb {
                let noise = rng.gen_range(-0.01..0.01);
                data[(r * w + c) * nb + b] = (sig[b] * shade + noise).clamp(0.0, 1.0) as f32;
            }
            labels[r * w + c] = Some(o.class_id);
        }
        painted.push(px);
    }
    let mut annotations = Vec::new();
    for (k, (o, px)) in objects.iter().zip(&painted).enumerate() {
        // pixels still carrying this object after later overwrites
        let own: Vec<&(usize, usize)> = px
            .iter()
            .filter(|&&(r, c)| labels[r * w + c] == Some(o.class_id) && objects[k + 1..].iter().all(|later| !later.covers(r, c)))
            .collect();
        if own.is_empty() {
            continue;
        }
        let x_min = own.iter().map(|p| p.1).min().unwrap_or(0);
        let x_max = own.iter().map(|p| p.1).max().unwrap_or(0) + 1;
        let y_min = own.iter().map(|p| p.0).min().unwrap_or(0);
        let y_max = own.iter().map(|p| p.0).max().unwrap_or(0) + 1;
        annotations.push(Annotation {
            class_id: o.class_id,
            bbox: BBox::new(x_min as f64, y_min as f64, x_max as f64, y_max as f64),
        });
    }
    let cube = HsiCube::new(h, w, nb, data)?;
    Ok(Scene { cube, annotations, objects: objects.to_vec(), labels })
}

/// Random non-touching objects (one pixel of clearance) with a Poisson
/// count around `spec.mean_objects`, then [`render_scene`].
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e_c750);
    let target = if spec.mean_objects > 0.0 {
        let p = Poisson::new(spec.mean_objects).map_err(|e| Error::Config(e.to_string()))?;
        (p.sample(&mut rng) as usize).min((2.0 * spec.mean_objects).ceil() as usize)
    } else {
        0
    };
    let mut objects: Vec<ObjectSpec> = Vec::new();
    let mut attempts = 0;
    while objects.len() < target && attempts < target * 60 {
        attempts += 1;
        let ow = rng.gen_range(spec.min_size..=spec.max_size);
        let oh = rng.gen_range(spec.min_size..=spec.max_size);
        let x = rng.gen_range(0..=spec.width - ow);
        let y = rng.gen_range(0..=spec.height - oh);
        let shape = if rng.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        let mut o = ObjectSpec { class_id: rng.gen_range(0..spec.num_classes), shape, x, y, w: ow, h: oh };
        let clear = objects.iter().all(|p| {
            x + ow < p.x || p.x + p.w < x || y + oh < p.y || p.y + p.h < y
        });
        if !clear {
            continue;
        }
        // thin ellipses fill too little of their box; paint those as rectangles
        if o.shape == Shape::Ellipse && (o.pixels().len() as f64) < 0.7 * (ow * oh) as f64 {
            o.shape = Shape::Rectangle;
        }
        objects.push(o);
    }
    render_scene(spec, &objects, seed)
}

// ---- FUNH container -----------------------------------------------------------

/// Element type stored in a container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Header plus band-sequential, row-major little-endian payload.
pub fn encode_funh<T: Scalar>(cube: &HsiCube<T>) -> Vec<u8> {
    let (h, w, nb) = (cube.height(), cube.width(), cube.bands());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * nb * T::BYTES);
    out.extend_from_slice(FUNH_MAGIC);
    for v in [FUNH_VERSION, h as u32, w as u32, nb as u32, T::DTYPE_CODE] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for b in 0..nb {
        for p in 0..h * w {
            cube.data()[p * nb + b].write_le(&mut out);
        }
    }
    out
}

/// A decoded container in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredCube {
    F32(HsiCube<f32>),
    F64(HsiCube<f64>),
}

impl StoredCube {
    pub fn dtype(&self) -> Dtype {
        match self {
            StoredCube::F32(_) => Dtype::F32,
            StoredCube::F64(_) => Dtype::F64,
        }
    }

    pub fn into_cube<T: Scalar>(self) -> HsiCube<T> {
        match self {
            StoredCube::F32(c) => c.cast(),
            StoredCube::F64(c) => c.cast(),
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn decode_payload<T: Scalar>(payload: &[u8], h: usize, w: usize, nb: usize) -> Result<HsiCube<T>> {
    let mut data = vec![T::zero(); h * w * nb];
    for (i, chunk) in payload.chunks_exact(T::BYTES).enumerate() {
        let (b, p) = (i / (h * w), i % (h * w));
        data[p * nb + b] = T::read_le(chunk);
    }
    HsiCube::new(h, w, nb, data).map_err(|e| Error::Format(format!("cube payload: {e}")))
}

/// Parse a `FUNH` container, rejecting bad magic, versions, dtypes, sizes
/// and non-finite values.
pub fn decode_funh(bytes: &[u8]) -> Result<StoredCube> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("container is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != FUNH_MAGIC {
        return Err(Error::Format("bad magic, expected FUNH".into()));
    }
    let version = read_u32(bytes, 4);
    if version != FUNH_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let (h, w, nb, code) = (
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
        read_u32(bytes, 20),
    );
    let dtype = match code {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let width = if dtype == Dtype::F32 { 4 } else { 8 };
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(nb))
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("container dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{h}x{w}x{nb} payload needs {expected} bytes, found {}",
            payload.len()
        )));
    }
    if nb == 0 {
        return Err(Error::Format("container has zero bands".into()));
    }
    Ok(match dtype {
        Dtype::F32 => StoredCube::F32(decode_payload(payload, h, w, nb)?),
        Dtype::F64 => StoredCube::F64(decode_payload(payload, h, w, nb)?),
    })
}

pub fn save_cube<T: Scalar>(path: &Path, cube: &HsiCube<T>) -> Result<()> {
    fs::write(path, encode_funh(cube))?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<StoredCube> {
    decode_funh(&fs::read(path)?)
}

/// Masks travel as single-band cubes.
pub fn mask_to_cube<T: Scalar>(mask: &CodedAperture<T>) -> HsiCube<T> {
    HsiCube::new(mask.height(), mask.width(), 1, mask.values().to_vec()).expect("mask shape")
}

pub fn cube_to_mask<T: Scalar>(cube: &HsiCube<T>) -> Result<CodedAperture<T>> {
    if cube.bands() != 1 {
        return Err(Error::Format(format!("a mask has one band, found {}", cube.bands())));
    }
    CodedAperture::new(cube.height(), cube.width(), cube.data().to_vec())
}

/// Measurements travel as single-band cubes; the noise level is not stored.
pub fn measurement_to_cube<T: Scalar>(y: &Measurement<T>) -> HsiCube<T> {
    HsiCube::new(y.height(), y.width(), 1, y.values().to_vec()).expect("measurement shape")
}

pub fn cube_to_measurement<T: Scalar>(cube: &HsiCube<T>) -> Result<Measurement<T>> {
    if cube.bands() != 1 {
        return Err(Error::Format(format!("a measurement has one band, found {}", cube.bands())));
    }
    Measurement::new(cube.height(), cube.width(), cube.data().to_vec(), 0.0)
}

/// Generate a Bernoulli coded aperture.
pub fn generate_mask(height: usize, width: usize, density: f64, seed: u64) -> Result<CodedAperture<f32>> {
    random_mask(height, width, density, seed)
}

// ---- annotations ---------------------------------------------------------------

/// One `class_id x_min y_min x_max y_max` record per line.
pub fn format_annotations(anns: &[Annotation]) -> String {
    let mut s = String::new();
    for a in anns {
        let b = &a.bbox;
        s.push_str(&format!("{} {} {} {} {}\n", a.class_id, b.x_min, b.y_min, b.x_max, b.y_max));
    }
    s
}

/// Parse annotation text; blank lines and `#` comments are skipped. Boxes
/// must be finite and non-degenerate; bounds are checked by the caller.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("line {}: expected 5 fields, found {}", n + 1, fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad class id {:?}", n + 1, fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Format(format!("line {}: bad coordinate {f:?}", n + 1)))?;
        }
        if v[0] >= v[2] || v[1] >= v[3] {
            return Err(Error::Format(format!("line {}: empty box", n + 1)));
        }
        out.push(Annotation { class_id, bbox: BBox::new(v[0], v[1], v[2], v[3]) });
    }
    Ok(out)
}

// ---- datasets -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    pub mask_density: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene: SceneSpec::default(),
            train: 128,
            val: 32,
            seed: 7,
            mask_density: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if !(0.0..=1.0).contains(&self.mask_density) {
            return Err(Error::Config(format!("mask density {} outside [0, 1]", self.mask_density)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub cube: String,
    pub annotations: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub spec: DatasetSpec,
    pub mask: String,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.format != 1 {
            return Err(Error::Format(format!("unsupported manifest format {}", m.format)));
        }
        m.spec.validate().map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let relative = |p: &str| !p.is_empty() && !p.starts_with('/') && !p.split(['/', '\\']).any(|s| s == "..");
        let files = std::iter::once(m.mask.as_str()).chain(m.scenes.iter().flat_map(|s| [s.cube.as_str(), s.annotations.as_str()]));
        for f in files {
            if !relative(f) {
                return Err(Error::Format(format!("manifest path {f:?} must stay inside the dataset")));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Seed of scene `index`, derived from the dataset seed.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed.wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub cube: HsiCube<f32>,
    pub annotations: Vec<Annotation>,
}

/// A dataset held in memory: one shared coded aperture and the two splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub mask: CodedAperture<f32>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Build every scene of `spec` in memory: the first `train` scenes form the
/// training split, the remaining `val` scenes the validation split.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mask = generate_mask(spec.scene.height, spec.scene.width, spec.mask_density, scene_seed(spec.seed, usize::MAX))?;
    let mut train = Vec::with_capacity(spec.train);
    let mut val = Vec::with_capacity(spec.val);
    for i in 0..spec.train + spec.val {
        let seed = scene_seed(spec.seed, i);
        let scene = generate_scene(&spec.scene, seed)?;
        let sample = Sample {
            id: format!("scene_{i:04}"),
            seed,
            cube: scene.cube,
            annotations: scene.annotations,
        };
        if i < spec.train {
            train.push(sample);
        } else {
            val.push(sample);
        }
    }
    Ok(Dataset { spec: spec.clone(), mask, train, val })
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        let entry = |s: &Sample, split| ManifestEntry {
            id: s.id.clone(),
            split,
            seed: s.seed,
            cube: format!("{}.funh", s.id),
            annotations: format!("{}.txt", s.id),
        };
        let scenes = self
            .train
            .iter()
            .map(|s| entry(s, Split::Train))
            .chain(self.val.iter().map(|s| entry(s, Split::Val)))
            .collect();
        Manifest {
            format: 1,
            spec: self.spec.clone(),
            mask: "mask.funh".into(),
            scenes,
        }
    }

    /// Write cubes, annotation files, the mask and the manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        save_cube(&dir.join(&manifest.mask), &mask_to_cube(&self.mask))?;
        for (s, e) in self.train.iter().chain(&self.val).zip(&manifest.scenes) {
            save_cube(&dir.join(&e.cube), &s.cube)?;
            fs::write(dir.join(&e.annotations), format_annotations(&s.annotations))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path)?;
        f.write_all(manifest.to_json().as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let scene = &manifest.spec.scene;
        let mask = cube_to_mask(&load_cube(&dir.join(&manifest.mask))?.into_cube::<f32>())?;
        if mask.height() != scene.height || mask.width() != scene.width {
            return Err(Error::Format("mask size differs from the scene size".into()));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in &manifest.scenes {
            let cube = load_cube(&dir.join(&e.cube))?.into_cube::<f32>();
            if (cube.height(), cube.width(), cube.bands()) != (scene.height, scene.width, scene.bands) {
                return Err(Error::Format(format!("{}: cube size differs from the manifest", e.id)));
            }
            let annotations = parse_annotations(&fs::read_to_string(dir.join(&e.annotations))?)?;
            for a in &annotations {
                a.validate(scene.num_classes, scene.width, scene.height)?;
            }
            let sample = Sample { id: e.id.clone(), seed: e.seed, cube, annotations };
            match e.split {
                Split::Train => train.push(sample),
                Split::Val => val.push(sample),
            }
        }
        Ok(Dataset { spec: manifest.spec, mask, train, val })
    }
}

#[cfg(test)]
#[path = "data_tests.rs"]
mod tests;
