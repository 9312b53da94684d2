//! Dataset loading and batching for the commands.

use std::path::Path;

use favae::evalkit::{ingest, prepare, read_png, LabeledSample, Layout, Recipe, Split, ToyMeta};
use favae::tensor::kernels::bilinear_resize;
use favae::train::BatchSource;
use favae::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Samples of one split, with toy images mapped back to raw units when the
/// dataset carries a `toy_meta.json`.
pub fn load_split(root: &Path, layout: Layout, split: Split) -> Result<(Vec<LabeledSample>, Option<ToyMeta>)> {
    let meta = ToyMeta::load(root)?;
    let mut samples = ingest(root, layout, split)?;
    if let Some(m) = &meta {
        for s in &mut samples {
            s.image = s.image.map(|u| m.to_raw(u));
        }
    }
    Ok((samples, meta))
}

/// Reads one image as `[1,C,H,W]`, in raw toy units if `meta` is given.
pub fn read_input(path: &Path, meta: Option<&ToyMeta>) -> Result<Tensor> {
    let img = read_png(path)?;
    let img = match meta {
        Some(m) => img.map(|u| m.to_raw(u)),
        None => img,
    };
    as_batch(&[&img])
}

/// Stacks `[C,H,W]` images into `[N,C,H,W]`.
pub fn as_batch(images: &[&Tensor]) -> Result<Tensor> {
    let items = images
        .iter()
        .map(|t| {
            let mut d = vec![1];
            d.extend_from_slice(t.dims());
            t.reshape(&d)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Dimensions `(C, H, W)` shared by every image.
pub fn common_dims(samples: &[LabeledSample]) -> Result<(usize, usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset split is empty".into()))?;
    let d = first.image.dims().to_vec();
    if let Some(bad) = samples.iter().find(|s| s.image.dims() != d.as_slice()) {
        return Err(Error::Image {
            path: bad.path.clone(),
            detail: format!("dims {:?} differ from {:?}", bad.image.dims(), d),
        });
    }
    Ok((d[0], d[1], d[2]))
}

/// Training images visited in shuffled passes, each prepared by `recipe`.
pub struct ImageSource {
    images: Vec<Tensor>,
    recipe: Option<Recipe>,
    order: Vec<usize>,
    cursor: usize,
}

impl ImageSource {
    pub fn new(images: Vec<Tensor>, recipe: Option<Recipe>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        Ok(Self {
            images,
            recipe,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Dimensions `[C,H,W]` of a prepared image.
    pub fn output_dims(&self) -> Result<[usize; 3]> {
        let img = match &self.recipe {
            Some(r) => prepare(&self.images[0], r, &mut ChaCha8Rng::seed_from_u64(0))?,
            None => self.images[0].clone(),
        };
        let d = img.dims();
        Ok([d[0], d[1], d[2]])
    }
}

impl BatchSource for ImageSource {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut picked = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order = (0..self.images.len()).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let img = &self.images[self.order[self.cursor]];
            self.cursor += 1;
            picked.push(match &self.recipe {
                Some(r) => prepare(img, r, rng)?,
                None => img.clone(),
            });
        }
        as_batch(&picked.iter().collect::<Vec<_>>())
    }
}

/// Bilinear resize of `[C,H,W]` to `h×w`; a no-op at the same size.
pub fn fit(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let d = image.dims();
    if (d[1], d[2]) == (h, w) {
        return Ok(image.clone());
    }
    let b = image.reshape(&[1, d[0], d[1], d[2]])?;
    bilinear_resize(&b, h, w)?.reshape(&[d[0], h, w])
}

/// Nearest-neighbour resize of a row-major mask.
pub fn fit_mask(mask: &[bool], from: (usize, usize), h: usize, w: usize) -> Vec<bool> {
    if from == (h, w) {
        return mask.to_vec();
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = (2 * y + 1) * from.0 / (2 * h);
        for x in 0..w {
            let sx = (2 * x + 1) * from.1 / (2 * w);
            out.push(mask[sy.min(from.0 - 1) * from.1 + sx.min(from.1 - 1)]);
        }
    }
    out
}
