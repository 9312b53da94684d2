//! Evaluation: AUROC, dataset ingestion and export, training-image
//! preparation, histograms, map rendering and reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::AnomalyMap;
use crate::tensor::kernels::bilinear_resize;
use crate::tensor::Tensor;
use crate::toy::ToySpec;

/// Mann–Whitney AUROC: the probability that a positive outranks a negative,
/// ties counting one half. Computed from midranks, so it equals pairwise
/// counting exactly.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "auroc needs both classes ({} positives, {} negatives)",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("auroc input".into()));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps every quantity an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j, midrank (i+1+j)/2
        let twice_mid = (i + 1 + j) as u128;
        let hits = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += hits * twice_mid;
        i = j;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

/// Pixel-level AUROC pooled over every pixel of every map; mask pixels are
/// the positives.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[Vec<bool>]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidArgument(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (k, (m, mask)) in maps.iter().zip(masks).enumerate() {
        if m.values.len() != mask.len() {
            return Err(Error::Shape {
                op: "pixel_auroc",
                detail: format!("map {k} has {} pixels, mask {}", m.values.len(), mask.len()),
            });
        }
        for (&v, &a) in m.values.iter().zip(mask) {
            if a {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::InvalidArgument("no anomalous pixels in the evaluation set".into()));
    }
    auroc(&pos, &neg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub path: PathBuf,
    /// `<class>/<file stem>`.
    pub id: String,
    /// `[C,H,W]` in `[0,1]`.
    pub image: Tensor,
    pub label: Label,
    /// Row-major, `H·W` entries.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `train/good`, `test/<class>`, `ground_truth/<class>/<stem>_mask.png`.
    Mvtec,
    /// One directory; `x.png` is anomalous iff `x_mask.png` sits next to it.
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

fn layout_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Layout {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Sorted directory entries, split into (directories, files).
fn list_dir(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut dirs = Vec::new();
    let mut files = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            dirs.push(p);
        } else {
            files.push(p);
        }
    }
    dirs.sort();
    files.sort();
    Ok((dirs, files))
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn name(p: &Path) -> String {
    p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// PNG files of a class directory; anything else is a layout violation.
fn class_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let (dirs, files) = list_dir(dir)?;
    if let Some(d) = dirs.first() {
        return Err(layout_err(d, "unexpected subdirectory in an image class directory"));
    }
    if let Some(f) = files.iter().find(|f| !is_png(f)) {
        return Err(layout_err(f, "not a PNG file"));
    }
    Ok(files)
}

fn load_mask(path: &Path, image: &Tensor) -> Result<Vec<bool>> {
    let m = read_png(path)?;
    if m.dims()[1..] != image.dims()[1..] {
        return Err(image_err(
            path,
            format!("mask is {:?}, image is {:?}", &m.dims()[1..], &image.dims()[1..]),
        ));
    }
    let plane = m.dims()[1] * m.dims()[2];
    Ok((0..plane).map(|i| m.data()[i] > 0.0).collect())
}

/// Reads every sample of `split`, in sorted path order.
pub fn ingest(root: &Path, layout: Layout, split: Split) -> Result<Vec<LabeledSample>> {
    if !root.is_dir() {
        return Err(layout_err(root, "dataset root is not a directory"));
    }
    match layout {
        Layout::Mvtec => ingest_mvtec(root, split),
        Layout::Flat => ingest_flat(root, split),
    }
}

fn ingest_mvtec(root: &Path, split: Split) -> Result<Vec<LabeledSample>> {
    let (train, test) = (root.join("train"), root.join("test"));
    if !train.is_dir() && !test.is_dir() {
        return Err(layout_err(root, "expected a train/ or test/ directory"));
    }
    let mut out = Vec::new();
    match split {
        Split::Train => {
            if !train.is_dir() {
                return Ok(out);
            }
            let (dirs, files) = list_dir(&train)?;
            if let Some(f) = files.first() {
                return Err(layout_err(f, "train/ may only contain class directories"));
            }
            for d in dirs {
                if name(&d) != "good" {
                    return Err(layout_err(&d, "training classes other than good are not allowed"));
                }
                for p in class_images(&d)? {
                    out.push(sample(&p, "good", Label::Normal, None)?);
                }
            }
        }
        Split::Test => {
            if !test.is_dir() {
                return Ok(out);
            }
            let (dirs, files) = list_dir(&test)?;
            if let Some(f) = files.first() {
                return Err(layout_err(f, "test/ may only contain class directories"));
            }
            for d in dirs {
                let class = name(&d);
                let label = if class == "good" {
                    Label::Normal
                } else {
                    Label::Anomalous
                };
                for p in class_images(&d)? {
                    let mask_path = root
                        .join("ground_truth")
                        .join(&class)
                        .join(format!("{}_mask.png", stem(&p)));
                    let mask = match label {
                        Label::Anomalous if !mask_path.is_file() => return Err(Error::MissingMask(p)),
                        Label::Anomalous => Some(mask_path),
                        Label::Normal => None,
                    };
                    out.push(sample(&p, &class, label, mask.as_deref())?);
                }
            }
        }
    }
    Ok(out)
}

fn ingest_flat(root: &Path, split: Split) -> Result<Vec<LabeledSample>> {
    let files = class_images(root)?;
    let masks: Vec<&PathBuf> = files.iter().filter(|p| stem(p).ends_with("_mask")).collect();
    for m in &masks {
        let s = stem(m);
        let owner = root.join(format!("{}.png", &s[..s.len() - 5]));
        if !owner.is_file() {
            return Err(layout_err(m, "mask without a matching image"));
        }
    }
    let mut out = Vec::new();
    for p in files.iter().filter(|p| !stem(p).ends_with("_mask")) {
        let mask = root.join(format!("{}_mask.png", stem(p)));
        let label = if mask.is_file() {
            Label::Anomalous
        } else {
            Label::Normal
        };
        if split == Split::Train && label == Label::Anomalous {
            continue;
        }
        let class = match label {
            Label::Normal => "good",
            Label::Anomalous => "anomalous",
        };
        out.push(sample(p, class, label, mask.is_file().then_some(mask.as_path()))?);
    }
    Ok(out)
}

fn sample(path: &Path, class: &str, label: Label, mask: Option<&Path>) -> Result<LabeledSample> {
    let image = read_png(path)?;
    let mask = mask.map(|m| load_mask(m, &image)).transpose()?;
    Ok(LabeledSample {
        path: path.to_path_buf(),
        id: format!("{class}/{}", stem(path)),
        image,
        label,
        mask,
    })
}

/// Reads an 8- or 16-bit PNG as `[C,H,W]` in `[0,1]` (C = 1 or 3; alpha dropped).
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| image_err(path, e.to_string()))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = info.color_type.samples();
    let (scale, wide) = match info.bit_depth {
        png::BitDepth::Sixteen => (65535.0, true),
        png::BitDepth::Eight => (255.0, false),
        other => return Err(image_err(path, format!("unsupported bit depth {other:?}"))),
    };
    let keep = if samples >= 3 { 3 } else { 1 };
    let value = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / scale
        } else {
            buf[i] as f64 / scale
        }
    };
    let mut data = vec![0.0; keep * h * w];
    for p in 0..h * w {
        for c in 0..keep {
            data[c * h * w + p] = value(p * samples + c);
        }
    }
    Tensor::new(&[keep, h, w], data)
}

fn png_writer(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth) -> Result<png::Writer<BufWriter<fs::File>>> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header().map_err(|e| image_err(path, e.to_string()))
}

/// Writes `[C,H,W]` (C = 1 or 3) values in `[0,1]` as an 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    write_png_depth(path, image, png::BitDepth::Eight)
}

/// Same as [`write_png`] with 16 bits per sample.
pub fn write_png16(path: &Path, image: &Tensor) -> Result<()> {
    write_png_depth(path, image, png::BitDepth::Sixteen)
}

fn write_png_depth(path: &Path, image: &Tensor, depth: png::BitDepth) -> Result<()> {
    let dims = image.dims();
    if dims.len() != 3 || !(dims[0] == 1 || dims[0] == 3) {
        return Err(image_err(path, format!("cannot write tensor {dims:?} as an image")));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let wide = depth == png::BitDepth::Sixteen;
    let mut bytes = Vec::with_capacity(c * h * w * if wide { 2 } else { 1 });
    for p in 0..h * w {
        for ch in 0..c {
            let v = image.data()[ch * h * w + p].clamp(0.0, 1.0);
            if wide {
                bytes.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
            } else {
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let color = if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    };
    let mut wr = png_writer(path, w, h, color, depth)?;
    wr.write_image_data(&bytes).map_err(|e| image_err(path, e.to_string()))
}

fn write_mask(path: &Path, h: usize, w: usize, mask: &[bool]) -> Result<()> {
    let t = Tensor::new(&[1, h, w], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    write_png(path, &t)
}

/// Affine map between raw toy values and stored 8-bit intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyMeta {
    pub spec: ToySpec,
    /// Raw value stored as intensity 0.
    pub lo: f64,
    /// Raw value stored as intensity 1.
    pub hi: f64,
}

impl ToyMeta {
    pub const FILE: &'static str = "toy_meta.json";

    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn to_raw(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let p = root.join(Self::FILE);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }
}

/// Toy data to export: raw `[N,1,S,S]` batches and optional masks for the
/// anomalous test images (full-image masks when absent).
pub struct ToyExport<'a> {
    pub spec: &'a ToySpec,
    pub train: &'a Tensor,
    pub test_normal: &'a Tensor,
    /// `(class name, images, masks)`.
    pub test_anomalous: Vec<(&'a str, &'a Tensor, Option<&'a [Vec<bool>]>)>,
}

/// Writes a toy dataset in the MVTec layout plus `toy_meta.json`, as 16-bit
/// PNGs (8 bits would quantize at roughly the pixel noise scale). The
/// intensity range spans every exported value.
pub fn export_toy(root: &Path, data: &ToyExport<'_>) -> Result<ToyMeta> {
    let all = std::iter::once(data.train)
        .chain(std::iter::once(data.test_normal))
        .chain(data.test_anomalous.iter().map(|t| t.1));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in all {
        for &v in t.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("toy export values".into()));
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let meta = ToyMeta {
        spec: data.spec.clone(),
        lo,
        hi,
    };
    let write_set = |dir: &Path, t: &Tensor, masks: Option<(&Path, Option<&[Vec<bool>]>)>| -> Result<()> {
        fs::create_dir_all(dir)?;
        let [n, c, h, w] = t.dims4("export_toy")?;
        if let Some((mdir, _)) = masks {
            fs::create_dir_all(mdir)?;
        }
        for i in 0..n {
            let img = t.sample(i).reshape(&[c, h, w])?.map(|v| meta.to_unit(v));
            write_png16(&dir.join(format!("{i:04}.png")), &img)?;
            if let Some((mdir, m)) = masks {
                let full = vec![true; h * w];
                let mask = m.map(|m| m[i].as_slice()).unwrap_or(&full);
                write_mask(&mdir.join(format!("{i:04}_mask.png")), h, w, mask)?;
            }
        }
        Ok(())
    };
    write_set(&root.join("train/good"), data.train, None)?;
    write_set(&root.join("test/good"), data.test_normal, None)?;
    for (class, t, masks) in &data.test_anomalous {
        let gt = root.join("ground_truth").join(class);
        write_set(&root.join("test").join(class), t, Some((&gt, *masks)))?;
    }
    fs::write(root.join(ToyMeta::FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Training-image preparation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Recipe {
    /// Resize to `resize`², then crop a random `crop`² patch.
    Texture { resize: usize, crop: usize },
    /// Resize to `size`², then rotate by U(0, `max_rotation_deg`) degrees and
    /// translate by U(−t, t)·size per axis, `t = max_translate`.
    Object {
        size: usize,
        max_rotation_deg: f64,
        max_translate: f64,
    },
}

impl Recipe {
    pub fn texture() -> Self {
        Recipe::Texture { resize: 512, crop: 128 }
    }

    pub fn object() -> Self {
        Recipe::Object {
            size: 128,
            max_rotation_deg: 360.0,
            max_translate: 0.1,
        }
    }
}

fn resize(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = image.dims();
    if (d[1], d[2]) == (h, w) {
        return Ok(image.clone());
    }
    let b = image.reshape(&[1, d[0], d[1], d[2]])?;
    bilinear_resize(&b, h, w)?.reshape(&[d[0], h, w])
}

/// Prepares one training image `[C,H,W]`; deterministic given the RNG state.
pub fn prepare<R: Rng + ?Sized>(image: &Tensor, recipe: &Recipe, rng: &mut R) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(Error::Shape {
            op: "prepare",
            detail: format!("expected [C,H,W], got {:?}", image.dims()),
        });
    }
    match *recipe {
        Recipe::Texture { resize: size, crop } => {
            if crop > size || crop == 0 {
                return Err(Error::InvalidArgument(format!("crop {crop} does not fit in {size}")));
            }
            let big = resize(image, size, size)?;
            let c = big.dims()[0];
            let y0 = rng.gen_range(0..=size - crop);
            let x0 = rng.gen_range(0..=size - crop);
            let mut out = Vec::with_capacity(c * crop * crop);
            for ch in 0..c {
                for y in 0..crop {
                    let row = (ch * size + y0 + y) * size + x0;
                    out.extend_from_slice(&big.data()[row..row + crop]);
                }
            }
            Tensor::new(&[c, crop, crop], out)
        }
        Recipe::Object {
            size,
            max_rotation_deg,
            max_translate,
        } => {
            let base = resize(image, size, size)?;
            let angle = if max_rotation_deg > 0.0 {
                rng.gen_range(0.0..max_rotation_deg).to_radians()
            } else {
                0.0
            };
            let shift = |rng: &mut R| {
                if max_translate > 0.0 {
                    rng.gen_range(-max_translate..max_translate) * size as f64
                } else {
                    0.0
                }
            };
            let (tx, ty) = (shift(rng), shift(rng));
            if angle == 0.0 && tx == 0.0 && ty == 0.0 {
                return Ok(base);
            }
            Ok(rotate_translate(&base, angle, tx, ty))
        }
    }
}

/// Rotation about the image centre followed by a translation; bilinear
/// sampling with edge clamping.
fn rotate_translate(image: &Tensor, angle: f64, tx: f64, ty: f64) -> Tensor {
    let (c, h, w) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = angle.sin_cos();
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx - tx, y as f64 - cy - ty);
            let sx = (co * dx + s * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-s * dx + co * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[(ch * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_fn(&[c, h, w], |i| out[i])
}

/// Fixed-bin histogram; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// `bins` equal-width edges spanning every value of every group.
pub fn shared_edges(groups: &[&[f64]], bins: usize) -> Result<Vec<f64>> {
    let bins = bins.max(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in groups.iter().flat_map(|g| g.iter()) {
        if !v.is_finite() {
            return Err(Error::NonFinite("histogram input".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return Err(Error::InvalidArgument("histogram of no values".into()));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    edges[bins] = hi;
    Ok(edges)
}

pub fn histogram(values: &[f64], edges: &[f64]) -> Histogram {
    let bins = edges.len().saturating_sub(1);
    let mut counts = vec![0; bins];
    for &v in values {
        if bins == 0 || v < edges[0] || v > edges[bins] {
            continue;
        }
        let k = edges[1..].partition_point(|&e| e <= v).min(bins - 1);
        counts[k] += 1;
    }
    Histogram {
        edges: edges.to_vec(),
        counts,
    }
}

/// CSV `bin_lo,bin_hi,<group>...` for histograms sharing one set of edges.
pub fn write_histograms_csv<W: Write>(mut w: W, groups: &[(String, Histogram)]) -> Result<()> {
    let Some((_, first)) = groups.first() else {
        return Ok(());
    };
    let names: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
    writeln!(w, "bin_lo,bin_hi,{}", names.join(","))?;
    for b in 0..first.counts.len() {
        let counts: Vec<String> = groups.iter().map(|g| g.1.counts[b].to_string()).collect();
        writeln!(w, "{:.10e},{:.10e},{}", first.edges[b], first.edges[b + 1], counts.join(","))?;
    }
    Ok(())
}

/// Pooled score population for rank-based equalization.
pub struct Population {
    sorted: Vec<f64>,
}

impl Population {
    pub fn new(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut sorted: Vec<f64> = values.into_iter().collect();
        if sorted.is_empty() || sorted.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("population must be non-empty and NaN-free".into()));
        }
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    /// Mid-rank fraction of `v` in the population, in `[0,1]`.
    pub fn equalize(&self, v: f64) -> f64 {
        let below = self.sorted.partition_point(|&p| p < v);
        let upto = self.sorted.partition_point(|&p| p <= v);
        (below as f64 + 0.5 * (upto - below) as f64) / self.sorted.len() as f64
    }
}

/// Jet colormap for `t ∈ [0,1]`.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    EqualizedJet,
    Gray16,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equalized_jet" | "equalized-jet" | "jet" => Ok(RenderMode::EqualizedJet),
            "gray16" => Ok(RenderMode::Gray16),
            _ => Err(Error::Config(format!("unknown render mode {s:?}"))),
        }
    }
}

/// Equalized levels of a map against a population.
pub fn equalized(map: &AnomalyMap, population: &Population) -> Vec<f64> {
    map.values.iter().map(|&v| population.equalize(v)).collect()
}

/// Writes a map as PNG: jet colours of equalized ranks (RGB8) or the ranks
/// themselves as 16-bit grey.
pub fn render(map: &AnomalyMap, mode: RenderMode, population: &Population, path: &Path) -> Result<()> {
    let levels = equalized(map, population);
    let (w, h) = (map.width, map.height);
    match mode {
        RenderMode::EqualizedJet => {
            let bytes: Vec<u8> = levels.iter().flat_map(|&t| jet(t)).collect();
            let mut wr = png_writer(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight)?;
            wr.write_image_data(&bytes).map_err(|e| image_err(path, e.to_string()))
        }
        RenderMode::Gray16 => {
            let bytes: Vec<u8> = levels
                .iter()
                .flat_map(|&t| ((t * 65535.0).round() as u16).to_be_bytes())
                .collect();
            let mut wr = png_writer(path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
            wr.write_image_data(&bytes).map_err(|e| image_err(path, e.to_string()))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    /// Samples per class label.
    pub counts: BTreeMap<String, usize>,
    /// Image-score histograms per class, on shared edges.
    pub histograms: BTreeMap<String, Histogram>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Builds a report from per-image anomaly scores (higher = more
    /// anomalous) and optional maps/masks for localization.
    pub fn from_scores(
        scores: &[(Label, f64)],
        localization: Option<(&[AnomalyMap], &[Vec<bool>])>,
        bins: usize,
        config: serde_json::Value,
    ) -> Result<Self> {
        let pick = |l: Label| -> Vec<f64> { scores.iter().filter(|s| s.0 == l).map(|s| s.1).collect() };
        let (normal, anomalous) = (pick(Label::Normal), pick(Label::Anomalous));
        let image_auroc = if normal.is_empty() || anomalous.is_empty() {
            None
        } else {
            Some(auroc(&anomalous, &normal)?)
        };
        let pixel_auroc = localization.map(|(m, k)| pixel_auroc(m, k)).transpose()?;
        let mut counts = BTreeMap::new();
        let mut histograms = BTreeMap::new();
        if !scores.is_empty() {
            let edges = shared_edges(&[&normal, &anomalous], bins)?;
            for (name, v) in [("normal", &normal), ("anomalous", &anomalous)] {
                counts.insert(name.to_string(), v.len());
                histograms.insert(name.to_string(), histogram(v, &edges));
            }
        }
        Ok(Self {
            image_auroc,
            pixel_auroc,
            counts,
            histograms,
            config,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
