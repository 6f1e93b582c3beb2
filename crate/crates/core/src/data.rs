//! Image pair loading, BT.601 luma/chroma conversion, patch sampling and datasets.
//!
//! Visible images are reduced to luma before entering the network so both
//! encoder inputs are single-channel; chroma is carried separately and can be
//! reinjected into a fused luma map for color output.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng as StreamRng;
use crate::tensor::Tensor;

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
/// `2 (1 - KB)`, `2 (1 - KR)`.
const CB_SCALE: f64 = 1.772;
const CR_SCALE: f64 = 1.402;

/// A registered visible (`[3, H, W]`) and infrared (`[1, H, W]`) pair in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub visible: Tensor<f32>,
    pub infrared: Tensor<f32>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, visible: Tensor<f32>, infrared: Tensor<f32>) -> Result<Self> {
        let (vs, is) = (visible.shape(), infrared.shape());
        if vs.len() != 3 || vs[0] != 3 {
            return Err(Error::shape(format!("visible must be [3, H, W], got {vs:?}")));
        }
        if is.len() != 3 || is[0] != 1 {
            return Err(Error::shape(format!("infrared must be [1, H, W], got {is:?}")));
        }
        if vs[1..] != is[1..] {
            return Err(Error::shape(format!(
                "visible {}x{} and infrared {}x{} differ in size",
                vs[2], vs[1], is[2], is[1]
            )));
        }
        Ok(ImagePair {
            id: id.into(),
            visible,
            infrared,
        })
    }

    /// Build from two grayscale maps; the visible one is replicated to 3 channels.
    pub fn from_gray(
        id: impl Into<String>,
        visible: Tensor<f32>,
        infrared: Tensor<f32>,
    ) -> Result<Self> {
        let vis = replicate3(&visible)?;
        Self::new(id, vis, infrared)
    }

    pub fn height(&self) -> usize {
        self.infrared.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.infrared.shape()[2]
    }

    pub fn luma_chroma(&self) -> LumaChroma {
        rgb_to_luma_chroma(&self.visible).expect("visible is validated as [3, H, W]")
    }

    pub fn visible_luma(&self) -> Tensor<f32> {
        self.luma_chroma().luma
    }
}

fn replicate3(gray: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = gray.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("expected [1, H, W], got {s:?}")));
    }
    let mut data = Vec::with_capacity(3 * gray.numel());
    for _ in 0..3 {
        data.extend_from_slice(gray.data());
    }
    Tensor::new(vec![3, s[1], s[2]], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LumaChroma {
    /// `[1, H, W]`
    pub luma: Tensor<f32>,
    /// `[2, H, W]`: Cb then Cr, offset by 0.5.
    pub chroma: Tensor<f32>,
}

pub fn rgb_to_luma_chroma(rgb: &Tensor<f32>) -> Result<LumaChroma> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected [3, H, W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = rgb.data();
    let mut luma = Vec::with_capacity(hw);
    let mut chroma = vec![0.0f32; 2 * hw];
    for p in 0..hw {
        let (r, g, b) = (d[p] as f64, d[hw + p] as f64, d[2 * hw + p] as f64);
        let y = KR * r + KG * g + KB * b;
        luma.push(y as f32);
        chroma[p] = ((b - y) / CB_SCALE + 0.5) as f32;
        chroma[hw + p] = ((r - y) / CR_SCALE + 0.5) as f32;
    }
    Ok(LumaChroma {
        luma: Tensor::new(vec![1, s[1], s[2]], luma)?,
        chroma: Tensor::new(vec![2, s[1], s[2]], chroma)?,
    })
}

/// Inverse BT.601 with `fused_luma` in place of the source luma; clamped to `[0, 1]`.
pub fn chroma_reinject(fused_luma: &Tensor<f32>, chroma: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (ls, cs) = (fused_luma.shape(), chroma.shape());
    if ls.len() != 3 || ls[0] != 1 || cs.len() != 3 || cs[0] != 2 || ls[1..] != cs[1..] {
        return Err(Error::shape(format!(
            "luma {ls:?} and chroma {cs:?} are incompatible"
        )));
    }
    let hw = ls[1] * ls[2];
    let (y, c) = (fused_luma.data(), chroma.data());
    let mut out = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        let yv = y[p] as f64;
        let cb = c[p] as f64 - 0.5;
        let cr = c[hw + p] as f64 - 0.5;
        let r = yv + CR_SCALE * cr;
        let b = yv + CB_SCALE * cb;
        let g = (yv - KR * r - KB * b) / KG;
        out[p] = r.clamp(0.0, 1.0) as f32;
        out[hw + p] = g.clamp(0.0, 1.0) as f32;
        out[2 * hw + p] = b.clamp(0.0, 1.0) as f32;
    }
    Tensor::new(vec![3, ls[1], ls[2]], out)
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn rgb_tensor(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            for (p, px) in g.pixels().enumerate() {
                let v = px.0[0] as f32 / 255.0;
                data[p] = v;
                data[hw + p] = v;
                data[2 * hw + p] = v;
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for (p, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * hw + p] = px.0[c] as f32 / 255.0;
                }
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Loads an image as a single channel; color images are reduced to BT.601 luma.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?;
    Ok(gray_tensor(&img))
}

fn gray_tensor(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            let data = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            Tensor::from_parts(vec![1, h, w], data)
        }
        _ => {
            let lc = rgb_to_luma_chroma(&rgb_tensor(img)).expect("rgb tensor is [3, H, W]");
            lc.luma
        }
    }
}

pub fn load_image_pair(
    id: impl Into<String>,
    visible_path: &Path,
    infrared_path: &Path,
) -> Result<ImagePair> {
    let vis = open_image(visible_path)?;
    let ir = open_image(infrared_path)?;
    if vis.width() != ir.width() || vis.height() != ir.height() {
        return Err(Error::shape(format!(
            "visible {} is {}x{} but infrared {} is {}x{}",
            visible_path.display(),
            vis.width(),
            vis.height(),
            infrared_path.display(),
            ir.width(),
            ir.height()
        )));
    }
    ImagePair::new(id, rgb_tensor(&vis), gray_tensor(&ir))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, H, W]` map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("expected [1, H, W], got {s:?}")));
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        s[2] as u32,
        s[1] as u32,
        img.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `[3, H, W]` map in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected [3, H, W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    let d = img.data();
    let mut raw = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        raw.extend_from_slice(&[to_u8(d[p]), to_u8(d[hw + p]), to_u8(d[2 * hw + p])]);
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(s[2] as u32, s[1] as u32, raw).expect("buffer length");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Co-registered single-channel training patches, each `[1, P, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub visible_luma: Tensor<f32>,
    pub infrared: Tensor<f32>,
    pub size: usize,
}

impl PatchPair {
    /// Whole-image pair without cropping (non-square sizes allowed).
    pub fn from_pair(pair: &ImagePair) -> Self {
        PatchPair {
            visible_luma: pair.visible_luma(),
            infrared: pair.infrared.clone(),
            size: pair.height().max(pair.width()),
        }
    }
}

/// The crop window and flips drawn for one patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub hflip: bool,
    pub vflip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSampler {
    pub size: usize,
    /// Probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
}

impl PatchSampler {
    pub fn new(size: usize) -> Self {
        PatchSampler {
            size,
            flip_prob: 0.5,
        }
    }

    pub fn without_flips(size: usize) -> Self {
        PatchSampler {
            size,
            flip_prob: 0.0,
        }
    }

    pub fn draw_window(&self, h: usize, w: usize, rng: &mut StreamRng) -> Result<PatchWindow> {
        let p = self.size;
        if p == 0 || h < p || w < p {
            return Err(Error::Size(format!(
                "image {w}x{h} is smaller than the {p}x{p} patch"
            )));
        }
        let top = rng.gen_range(0..=h - p);
        let left = rng.gen_range(0..=w - p);
        let hflip = rng.gen_bool(self.flip_prob);
        let vflip = rng.gen_bool(self.flip_prob);
        Ok(PatchWindow {
            top,
            left,
            hflip,
            vflip,
        })
    }

    pub fn sample(&self, pair: &ImagePair, rng: &mut StreamRng) -> Result<PatchPair> {
        let win = self.draw_window(pair.height(), pair.width(), rng)?;
        Ok(self.extract(pair, win))
    }

    pub fn extract(&self, pair: &ImagePair, win: PatchWindow) -> PatchPair {
        let vis = crop_flip(&pair.visible, win, self.size);
        let luma = rgb_to_luma_chroma(&vis).expect("crop keeps 3 channels").luma;
        PatchPair {
            visible_luma: luma,
            infrared: crop_flip(&pair.infrared, win, self.size),
            size: self.size,
        }
    }
}

/// Random crop plus horizontal/vertical flips (probability 0.5 each), applied
/// identically to both modalities; the visible crop is reduced to luma.
pub fn sample_patch(pair: &ImagePair, size: usize, rng: &mut StreamRng) -> Result<PatchPair> {
    PatchSampler::new(size).sample(pair, rng)
}

fn crop_flip(img: &Tensor<f32>, win: PatchWindow, p: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, w) = (s[0], s[2]);
    let h = s[1];
    let d = img.data();
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for i in 0..p {
            let si = if win.vflip { p - 1 - i } else { i } + win.top;
            let row = &d[(ch * h + si) * w..(ch * h + si + 1) * w];
            for j in 0..p {
                let sj = if win.hflip { p - 1 - j } else { j } + win.left;
                out.push(row[sj]);
            }
        }
    }
    Tensor::from_parts(vec![c, p, p], out)
}

/// An in-memory set of pairs with an access counter.
#[derive(Debug)]
pub struct Dataset {
    name: String,
    pairs: Vec<ImagePair>,
    accesses: AtomicUsize,
}

impl Dataset {
    pub fn from_pairs(name: impl Into<String>, mut pairs: Vec<ImagePair>) -> Self {
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        Dataset {
            name: name.into(),
            pairs,
            accesses: AtomicUsize::new(0),
        }
    }

    /// Loads `<dir>/manifest.tsv` if present, otherwise pairs matching file
    /// names in `<dir>/vi` and `<dir>/ir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let entries = if dir.join(MANIFEST).is_file() {
            read_manifest(&dir.join(MANIFEST), dir)?
        } else {
            scan_pairs(dir)?
        };
        let pairs = entries
            .par_iter()
            .map(|(id, vi, ir)| load_image_pair(id.clone(), vi, ir))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pairs(dir.display().to_string(), pairs))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, i: usize) -> &ImagePair {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        &self.pairs[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImagePair> {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn accesses(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }
}

pub const MANIFEST: &str = "manifest.tsv";

/// `<id>\t<vi_path>\t<ir_path>` per line; relative paths resolve against `root`.
pub fn read_manifest(path: &Path, root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected 3 tab-separated fields, got {}",
                path.display(),
                n + 1,
                fields.len()
            )));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                root.join(p)
            }
        };
        out.push((fields[0].to_string(), resolve(fields[1]), resolve(fields[2])));
    }
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn scan_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let (vi_dir, ir_dir) = (dir.join("vi"), dir.join("ir"));
    for d in [&vi_dir, &ir_dir] {
        if !d.is_dir() {
            return Err(Error::io(
                d,
                std::io::Error::new(std::io::ErrorKind::NotFound, "expected `vi/` and `ir/`"),
            ));
        }
    }
    let vis = list_images(&vi_dir)?;
    let irs = list_images(&ir_dir)?;
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for vi in &vis {
        let name = vi.file_name().expect("listed file has a name");
        let ir = ir_dir.join(name);
        let id = vi
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if ir.is_file() {
            out.push((id, vi.clone(), ir));
        } else {
            missing.push(id);
        }
    }
    for ir in &irs {
        if !vi_dir.join(ir.file_name().expect("named")).is_file() {
            missing.push(
                ir.file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string(),
            );
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Dataset(format!(
            "unmatched pairs in {}: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no image pairs in {}", dir.display())));
    }
    Ok(out)
}
