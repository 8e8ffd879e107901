//! Samples, the synthetic ultrasound-like generator, boundary targets,
//! PGM I/O, dataset loading and train/val splitting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::resample::upsample_bilinear_forward;
use crate::rng::{splitmix64, SplitMix64};
use crate::tensor::Tensor;

/// A binary map stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("binary_map", "length", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Thresholds values at 0.5 (`v ≥ 0.5` is foreground).
    pub fn from_values<T: num_traits::ToPrimitive>(height: usize, width: usize, values: &[T]) -> Result<Self> {
        let bits = values.iter().map(|v| v.to_f64().is_some_and(|v| v >= 0.5)).collect();
        Self::new(height, width, bits)
    }

    /// Thresholds a `(1,1,H,W)` or `(1,H,W)`-like tensor whose last two axes
    /// are spatial.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::shape("binary_map", "leading extents", "1", format!("{s:?}")));
        }
        Self::from_values(s[s.len() - 2], s[s.len() - 1], t.data())
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground coordinates as `(row, col)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.bits.len())
            .filter(|&i| self.bits[i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data).expect("positive extents")
    }
}

/// Inner one-pixel rim: `mask ∧ ¬erode(mask)` with a 4-neighbourhood
/// erosion; pixels outside the image count as background.
pub fn extract_boundary(mask: &BinaryMap) -> BinaryMap {
    let (h, w) = (mask.height, mask.width);
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.get(r as usize, c as usize)
    };
    let mut out = BinaryMap::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let interior = at(ri - 1, ci) && at(ri + 1, ci) && at(ri, ci - 1) && at(ri, ci + 1);
            out.bits[r * w + c] = !interior;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1,1,H,W)` intensities in `[0,1]`.
    pub image: Tensor<f32>,
    /// `(1,1,H,W)` with values in `{0,1}`.
    pub mask: Tensor<f32>,
    pub boundary: Tensor<f32>,
}

impl Sample {
    /// Builds a sample, deriving the boundary target from the mask.
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: &BinaryMap) -> Result<Self> {
        let [n, c, h, w] = image.dims4("sample")?;
        if (n, c, h, w) != (1, 1, mask.height, mask.width) {
            return Err(Error::shape(
                "sample",
                "image",
                format!("(1,1,{},{})", mask.height, mask.width),
                format!("({n},{c},{h},{w})"),
            ));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask: mask.to_tensor(),
            boundary: extract_boundary(mask).to_tensor(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub blob_count_range: [usize; 2],
    /// Range of the intensity drop inside a lesion.
    pub contrast: [f64; 2],
    pub speckle_strength: f64,
    pub blur_radius: usize,
    /// Fraction of samples listed in `train.txt`.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            size: 256,
            seed: 0,
            blob_count_range: [1, 2],
            contrast: [0.1, 0.4],
            speckle_strength: 0.25,
            blur_radius: 2,
            train_fraction: 0.8,
        }
    }
}

pub const MIN_MASK_FRACTION: f64 = 0.005;
pub const MAX_MASK_FRACTION: f64 = 0.6;
pub const MIN_CONTRAST: f64 = 0.05;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.count == 0 {
            return bad("count must be positive");
        }
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return bad("size must be a positive multiple of 16");
        }
        let [b0, b1] = self.blob_count_range;
        if b0 == 0 || b0 > b1 {
            return bad("blob_count_range must satisfy 1 ≤ lo ≤ hi");
        }
        let [c0, c1] = self.contrast;
        if !(c0 >= MIN_CONTRAST && c0 <= c1 && c1 < 1.0) {
            return bad("contrast must satisfy 0.05 ≤ lo ≤ hi < 1");
        }
        if !(self.speckle_strength >= 0.0 && self.speckle_strength.is_finite()) {
            return bad("speckle_strength must be finite and ≥ 0");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) <= 1.0
    }
}

/// Smooth background: a coarse random grid bilinearly upsampled.
fn background(size: usize, rng: &mut SplitMix64) -> Vec<f64> {
    const GRID: usize = 4;
    let level = rng.uniform(0.45, 0.7);
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| level + rng.uniform(-0.08, 0.08)).collect();
    upsample_bilinear_forward(&coarse, [1, 1, GRID, GRID], size, size)
}

/// Separable box blur with edge clamping.
fn box_blur(img: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let norm = (2 * r + 1) as f64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for d in -r..=r {
                    let k = (b + d).clamp(0, n - 1);
                    let (row, col) = if horizontal { (a, k) } else { (k, a) };
                    acc += src[(row * n + col) as usize];
                }
                let (row, col) = if horizontal { (a, b) } else { (b, a) };
                out[(row * n + col) as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Generates one sample; the content depends only on `cfg` and `index`.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let s = cfg.size;
    let sf = s as f64;
    let mut rng = SplitMix64::new(splitmix64(cfg.seed ^ index as u64));
    loop {
        let clean_bg = background(s, &mut rng);
        let blobs = cfg.blob_count_range[0] + rng.below(cfg.blob_count_range[1] - cfg.blob_count_range[0] + 1);
        let ellipses: Vec<(Ellipse, f64)> = (0..blobs)
            .map(|_| {
                let theta = rng.uniform(0.0, std::f64::consts::PI);
                let e = Ellipse {
                    cy: rng.uniform(0.2, 0.8) * sf,
                    cx: rng.uniform(0.2, 0.8) * sf,
                    ay: rng.uniform(0.08, 0.4) * sf / 2.0,
                    ax: rng.uniform(0.08, 0.4) * sf / 2.0,
                    cos: theta.cos(),
                    sin: theta.sin(),
                };
                (e, rng.uniform(cfg.contrast[0], cfg.contrast[1]))
            })
            .collect();
        let mut mask = BinaryMap::empty(s, s);
        let mut clean = clean_bg;
        for r in 0..s {
            for c in 0..s {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let drop = ellipses
                    .iter()
                    .filter(|(e, _)| e.contains(y, x))
                    .map(|(_, d)| *d)
                    .fold(0.0, f64::max);
                if drop > 0.0 {
                    mask.bits[r * s + c] = true;
                    clean[r * s + c] -= drop;
                }
            }
        }
        let blurred = box_blur(&clean, s, cfg.blur_radius);
        let fraction = mask.count() as f64 / (s * s) as f64;
        if !(fraction > MIN_MASK_FRACTION && fraction < MAX_MASK_FRACTION) {
            continue;
        }
        if contrast(&blurred, &mask) < MIN_CONTRAST {
            continue;
        }
        let image: Vec<f32> = blurred
            .iter()
            .map(|&u| (u * (1.0 + cfg.speckle_strength * rng.normal())).clamp(0.0, 1.0) as f32)
            .collect();
        let image = Tensor::from_vec(&[1, 1, s, s], image)?;
        return Sample::new(format!("synth_{index:05}"), image, &mask);
    }
}

/// `|mean(inside) − mean(outside)|`; zero when either region is empty.
pub fn contrast(image: &[f64], mask: &BinaryMap) -> f64 {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in image.iter().zip(&mask.bits) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return 0.0;
    }
    (si / ni as f64 - so / no as f64).abs()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    (0..cfg.count).map(|i| synth_sample(cfg, i)).collect()
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Parses an 8-bit binary PGM into a `(1,1,H,W)` tensor scaled to `[0,1]`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err(path, 0, "expected magic `P5`"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, pos, format!("expected header field {}", k + 1)));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| format_err(path, start, format!("header value `{text}` out of range")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(format_err(path, pos, "zero image extent"));
    }
    if maxval != 255 {
        return Err(format_err(path, pos, format!("maxval must be 255, got {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {} bytes, found {}", w * h, payload.len()),
        ));
    }
    let data = payload[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[1, 1, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

/// Encodes the last two axes of `map` (values clamped to `[0,1]`, scaled
/// by 255 and rounded).
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape("write_pgm", "leading extents", "1", format!("{s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let bytes = encode_pgm(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour resize of a single plane (half-pixel centres).
pub fn resize_nearest(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let pick = |d: usize, out: usize, inp: usize| (((d as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = pick(r, out_h, h);
        for c in 0..out_w {
            out.push(src[sr * w + pick(c, out_w, w)]);
        }
    }
    out
}

/// Ids from `dir/images/*.pgm`, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let images = dir.join("images");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads one `images/<id>.pgm` + `masks/<id>.pgm` pair resized to `size×size`.
pub fn load_sample(dir: &Path, id: &str, size: usize) -> Result<Sample> {
    let mask_path = dir.join("masks").join(format!("{id}.pgm"));
    if !mask_path.exists() {
        return Err(Error::MissingMask(id.to_string()));
    }
    let image = read_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
    let mask = read_pgm(&mask_path)?;
    let [_, _, h, w] = image.dims4("load_dataset")?;
    let [_, _, mh, mw] = mask.dims4("load_dataset")?;
    let image = if (h, w) == (size, size) {
        image
    } else {
        let data = upsample_bilinear_forward(image.data(), [1, 1, h, w], size, size);
        Tensor::from_vec(&[1, 1, size, size], data)?
    };
    let mask = resize_nearest(mask.data(), mh, mw, size, size);
    let mask = BinaryMap::from_values(size, size, &mask)?;
    Sample::new(id, image, &mask)
}

/// Loads every sample of a dataset directory at `size×size`.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    list_ids(dir)?.iter().map(|id| load_sample(dir, id, size)).collect()
}

/// Seeded shuffle, then the first `round(ratio·n)` samples go to train.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    SplitMix64::for_name(seed, "split").shuffle(&mut order);
    let cut = ((items.len() as f64 * ratio).round() as usize).min(items.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    (pick(&order[..cut]), pick(&order[cut..]))
}

fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Writes `images/`, `masks/`, `train.txt` and `val.txt` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample], train_fraction: f64, seed: u64) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        write_pgm(&dir.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
        write_pgm(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (train, val) = split(&ids, train_fraction, seed);
    write_ids(&dir.join("train.txt"), &train)?;
    write_ids(&dir.join("val.txt"), &val)
}

/// Train/val samples of a dataset directory. Uses `train.txt`/`val.txt`
/// when present, otherwise a seeded split with `train_fraction`.
pub fn load_split(dir: &Path, size: usize, train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (tp, vp): (PathBuf, PathBuf) = (dir.join("train.txt"), dir.join("val.txt"));
    if tp.exists() && vp.exists() {
        let load =
            |ids: Vec<String>| -> Result<Vec<Sample>> { ids.iter().map(|id| load_sample(dir, id, size)).collect() };
        return Ok((load(read_ids(&tp)?)?, load(read_ids(&vp)?)?));
    }
    let all = load_dataset(dir, size)?;
    Ok(split(&all, train_fraction, seed))
}
