//! Procedural scenes with a planted class hierarchy.
//!
//! Classes come in groups. A group fixes the base colour of its shapes, and the
//! classes inside a group differ only in the orientation of a stripe texture
//! (plus a faint colour offset). A single pixel therefore tells the group but
//! not the class; telling classes apart needs a few stripe periods of context.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::segmetrics::{ClusterMap, Label, LabelGrid, DEFAULT_IGNORE_INDEX};
use crate::toynet::Tensor;

const MAGIC: &[u8; 4] = b"HS3D";
const VERSION: u32 = 1;

/// Mid-grey, subtracted from every pixel of a network input batch.
pub const INPUT_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_groups: usize,
    pub classes_per_group: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Side length (rectangles) or diameter (ellipses) range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub stripe_period: usize,
    pub stripe_contrast: f64,
    /// Colour offset separating classes of one group.
    pub class_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_groups: 3,
            classes_per_group: 4,
            min_shapes: 3,
            max_shapes: 6,
            min_size: 14,
            max_size: 30,
            noise: 0.05,
            stripe_period: 8,
            stripe_contrast: 0.25,
            class_jitter: 0.015,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.num_groups * self.classes_per_group
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_groups == 0 || self.classes_per_group == 0 {
            return bad("need at least one group and one class per group".into());
        }
        if self.num_classes() >= DEFAULT_IGNORE_INDEX as usize {
            return bad(format!("{} classes collide with the ignore label", self.num_classes()));
        }
        if self.height == 0 || self.width == 0 {
            return bad("empty image size".into());
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!("shape count range {}..={}", self.min_shapes, self.max_shapes));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("shape size range {}..={}", self.min_size, self.max_size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise level {}", self.noise));
        }
        if self.stripe_period < 2 {
            return bad(format!("stripe period {}", self.stripe_period));
        }
        Ok(())
    }

    /// Base colour of a group: evenly spaced hues around mid grey.
    pub fn group_colour(&self, group: usize) -> [f64; 3] {
        let h = 2.0 * PI * group as f64 / self.num_groups as f64 + 0.3;
        [0, 1, 2].map(|c| 0.5 + 0.2 * (h - 2.0 * PI * c as f64 / 3.0).cos())
    }

    fn class_colour(&self, class: usize) -> [f64; 3] {
        let g = class / self.classes_per_group;
        let j = class % self.classes_per_group;
        let base = self.group_colour(g);
        let centred = j as f64 - (self.classes_per_group - 1) as f64 / 2.0;
        [base[0] + self.class_jitter * centred, base[1], base[2] - self.class_jitter * centred]
    }

    /// Stripe texture in {-1, 1} for class `class` at pixel `(y, x)`.
    fn texture(&self, class: usize, y: f64, x: f64, phase: f64) -> f64 {
        let j = class % self.classes_per_group;
        let period = (self.stripe_period << (j / 4)) as f64;
        let u = match j % 4 {
            0 => y,
            1 => x,
            2 => return square((y + phase) / period) * square((x + phase) / period),
            _ => (x + y) / std::f64::consts::SQRT_2,
        };
        square((u + phase) / period)
    }
}

fn square(t: f64) -> f64 {
    if (2.0 * PI * t).sin() >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: usize,
    pub center_y: f64,
    pub center_x: f64,
    pub half_h: f64,
    pub half_w: f64,
    pub phase: f64,
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.center_y) / self.half_h;
        let dx = (x as f64 + 0.5 - self.center_x) / self.half_w;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

/// One image, `height × width × 3` interleaved in [0, 1], and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub labels: Vec<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

/// Class-to-group assignment the generator used.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedHierarchy {
    pub map: ClusterMap,
}

impl PlantedHierarchy {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        let assignment = (0..spec.num_classes()).map(|c| c / spec.classes_per_group).collect();
        Ok(Self {
            map: ClusterMap::new(spec.num_groups, assignment)?,
        })
    }
}

/// Renders scene `index` of the family defined by `spec`.
pub fn render_scene(spec: &SceneSpec, index: usize) -> (Sample, Vec<Shape>) {
    let (h, w) = (spec.height, spec.width);
    let k = spec.num_classes();
    let mut r = rng::indexed(spec.seed, "data", index as u64);
    let count = r.random_range(spec.min_shapes..=spec.max_shapes);
    let shapes: Vec<Shape> = (0..count)
        .map(|s| {
            let class = if s + 1 == count { index % k } else { r.random_range(0..k) };
            let sh = r.random_range(spec.min_size..=spec.max_size) as f64;
            let sw = r.random_range(spec.min_size..=spec.max_size) as f64;
            Shape {
                kind: if r.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Ellipse },
                class,
                center_y: r.random_range(0.0..h as f64),
                center_x: r.random_range(0.0..w as f64),
                half_h: sh / 2.0,
                half_w: sw / 2.0,
                phase: r.random_range(0.0..spec.stripe_period as f64),
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).expect("validated noise level");
    let mut image = vec![0f32; h * w * 3];
    let mut labels = vec![DEFAULT_IGNORE_INDEX; h * w];
    for y in 0..h {
        for x in 0..w {
            let top = shapes.iter().rev().find(|s| s.contains(y, x));
            let rgb = match top {
                Some(s) => {
                    labels[y * w + x] = s.class as Label;
                    let base = spec.class_colour(s.class);
                    let t = spec.stripe_contrast * spec.texture(s.class, y as f64, x as f64, s.phase);
                    base.map(|b| b + t)
                }
                None => [0.5; 3],
            };
            for c in 0..3 {
                let n = if spec.noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
                image[(y * w + x) * 3 + c] = (rgb[c] + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    (Sample { image, labels }, shapes)
}

pub fn generate(spec: &SceneSpec, count: usize) -> Result<(Dataset, PlantedHierarchy)> {
    generate_from(spec, 0, count)
}

/// Scenes `first..first + count`; disjoint ranges give disjoint datasets.
pub fn generate_from(spec: &SceneSpec, first: usize, count: usize) -> Result<(Dataset, PlantedHierarchy)> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let samples = (first..first + count).map(|i| render_scene(spec, i).0).collect();
    let ds = Dataset {
        height: spec.height,
        width: spec.width,
        num_classes: spec.num_classes(),
        samples,
    };
    Ok((ds, PlantedHierarchy::new(spec)?))
}

/// Seeded partition into `(reduced, analysis)`; `reduced` gets
/// `round(fraction·n)` samples. Both keep the original order.
pub fn split(ds: &Dataset, reduced_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(reduced_fraction > 0.0 && reduced_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {reduced_fraction} outside (0, 1)")));
    }
    let n = ds.len();
    let n_reduced = (reduced_fraction * n as f64).round() as usize;
    if n_reduced == 0 || n_reduced == n {
        return Err(Error::InvalidArgument(format!(
            "{n} samples at fraction {reduced_fraction} leave one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::named(seed, "split"));
    let (a, b) = idx.split_at(n_reduced);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.subset(&a), ds.subset(&b)))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn label_grid(&self, i: usize) -> LabelGrid {
        LabelGrid {
            height: self.height,
            width: self.width,
            labels: self.samples[i].labels.clone(),
        }
    }

    /// Images of `indices` as a `[batch, 3, h, w]` network input. Pixels are
    /// shifted by `-INPUT_OFFSET` so inputs are roughly zero-centred; with raw
    /// [0, 1] values a first-stage filter whose weights sum negative starts dead.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(&[indices.len(), 3, h, w]);
        for (b, &i) in indices.iter().enumerate() {
            let img = &self.samples[i].image;
            for c in 0..3 {
                let plane = t.plane_mut(b, c);
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = img[p * 3 + c] as f64 - INPUT_OFFSET;
                }
            }
        }
        t
    }

    /// Labels of `indices` stacked vertically into a `(batch·h) × w` grid.
    pub fn labels(&self, indices: &[usize]) -> LabelGrid {
        let mut labels = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            labels.extend_from_slice(&self.samples[i].labels);
        }
        LabelGrid {
            height: indices.len() * self.height,
            width: self.width,
            labels,
        }
    }

    /// Labelled pixel count of every class.
    pub fn class_pixels(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &l in &s.labels {
                if (l as usize) < self.num_classes {
                    counts[l as usize] += 1;
                }
            }
        }
        counts
    }

    /// Classes without a single labelled pixel.
    pub fn absent_classes(&self) -> Vec<usize> {
        self.class_pixels()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(24 + self.len() * h * w * 13);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, h as u32, w as u32, self.num_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            for v in &s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.labels);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic at byte 0)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version} at byte 4")));
        }
        let count = r.u32("sample count")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let num_classes = r.u32("class count")? as usize;
        if num_classes == 0 || num_classes >= DEFAULT_IGNORE_INDEX as usize {
            return Err(Error::Format(format!("class count {num_classes} at byte 20")));
        }
        let px = height * width;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let raw = r.take(px * 12, &format!("image of sample {i}"))?;
            let image = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let start = r.pos;
            let labels = r.take(px, &format!("labels of sample {i}"))?.to_vec();
            if let Some(p) = labels.iter().position(|&l| l as usize >= num_classes && l != DEFAULT_IGNORE_INDEX) {
                return Err(Error::Format(format!(
                    "label {} of sample {i} at byte {} is outside [0, {num_classes})",
                    labels[p],
                    start + p
                )));
            }
            samples.push(Sample { image, labels });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after byte {}", bytes.len() - r.pos, r.pos)));
        }
        Ok(Dataset {
            height,
            width,
            num_classes,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "file ends at byte {} while reading {what} ({n} bytes from byte {})",
                self.bytes.len(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
