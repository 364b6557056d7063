//! Synthetic multi-label tasks and the dataset container.
//!
//! Each generated entry is a pure function of `(seed, entry index)`, so
//! entries are produced in parallel without affecting the result.

mod format;
pub mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DmmError, Result};
use crate::image::{Image, Mask};
use raster::{rasterize, rasterize_ellipse, triangle_area, Point};

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Shapes,
    TwoMode,
    Custom,
}

impl Task {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Task::Shapes => 0,
            Task::TwoMode => 1,
            Task::Custom => 255,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Task::Shapes),
            1 => Some(Task::TwoMode),
            255 => Some(Task::Custom),
            _ => None,
        }
    }
}

/// An input together with its unordered (possibly repeating) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DmmEntry {
    pub input: Image,
    pub labels: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmmDataset {
    height: usize,
    width: usize,
    task: Task,
    seed: u64,
    entries: Vec<DmmEntry>,
}

impl DmmDataset {
    pub fn new(height: usize, width: usize, task: Task, seed: u64, entries: Vec<DmmEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.labels.is_empty() {
                return Err(DmmError::Contract(format!("entry {i} has no labels")));
            }
            let dims_ok = (e.input.height(), e.input.width()) == (height, width)
                && e.labels.iter().all(|l| (l.height(), l.width()) == (height, width));
            if !dims_ok {
                return Err(DmmError::dim("dataset", format!("entry {i} is not {height}x{width}")));
            }
        }
        Ok(Self {
            height,
            width,
            task,
            seed,
            entries,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[DmmEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of (input, label) pairs.
    pub fn pair_count(&self) -> usize {
        self.entries.iter().map(|e| e.labels.len()).sum()
    }
}

/// Per-entry RNG derived from the dataset seed.
fn entry_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn check_request(n: usize, size: usize) -> Result<()> {
    if size < 16 {
        return Err(DmmError::Config(format!("image size {size} is below the minimum of 16")));
    }
    if n == 0 {
        return Err(DmmError::Config("dataset needs at least one entry".into()));
    }
    Ok(())
}

/// Geometry behind one shapes entry.
#[derive(Clone, Copy, Debug)]
pub struct ShapeEntry {
    /// The vertex reflected through the midpoint of the opposite edge.
    pub a: Point,
    pub b: Point,
    pub c: Point,
    /// `b + c - a`, the fourth parallelogram vertex.
    pub d: Point,
}

impl ShapeEntry {
    pub fn triangle(&self) -> [Point; 3] {
        [self.a, self.b, self.c]
    }

    pub fn parallelogram(&self) -> [Point; 4] {
        [self.a, self.b, self.d, self.c]
    }

    pub fn area(&self) -> f64 {
        triangle_area(self.a, self.b, self.c)
    }
}

/// Draws a triangle with vertices in the central 80% of the frame, area at
/// least 5% of the frame, and a parallelogram completion that stays inside
/// the frame. The reflected vertex is the one furthest towards the lower
/// left, so the added half of the parallelogram points up and right.
pub fn sample_shape<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<ShapeEntry> {
    let s = size as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut v: [Point; 3] =
            std::array::from_fn(|_| Point::new(rng.random_range(0.1 * s..0.9 * s), rng.random_range(0.1 * s..0.9 * s)));
        if triangle_area(v[0], v[1], v[2]) < 0.05 * s * s {
            continue;
        }
        let ai = (0..3)
            .max_by(|&i, &j| (v[i].y - v[i].x).total_cmp(&(v[j].y - v[j].x)).then(j.cmp(&i)))
            .unwrap();
        v.swap(0, ai);
        let [a, b, c] = v;
        let d = b + c - a;
        if !(0.0..=s).contains(&d.x) || !(0.0..=s).contains(&d.y) {
            continue;
        }
        return Ok(ShapeEntry { a, b, c, d });
    }
    Err(DmmError::Generation(format!(
        "no admissible triangle after {MAX_ATTEMPTS} attempts"
    )))
}

fn shapes_entry(seed: u64, index: usize, size: usize) -> Result<DmmEntry> {
    let mut rng = entry_rng(seed, index);
    let geo = sample_shape(&mut rng, size)?;
    let tri = rasterize(&geo.triangle(), size, size);

    let u = rng.random_range(0.4..0.8);
    let centroid = Point::new(
        (geo.a.x + geo.b.x + geo.c.x) / 3.0,
        (geo.a.y + geo.b.y + geo.c.y) / 3.0,
    );
    let shrunk = geo.triangle().map(|p| centroid.lerp(p, u));
    let sub = rasterize(&shrunk, size, size).intersection(&tri);

    let para = rasterize(&geo.parallelogram(), size, size).union(&tri);
    let (s, t) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let cut = [geo.d, geo.d.lerp(geo.b, s), geo.d.lerp(geo.c, t)];
    let pentagon = para.difference(&rasterize(&cut, size, size)).union(&tri);

    Ok(DmmEntry {
        input: tri.to_image(),
        labels: vec![sub, tri.clone(), pentagon, para],
    })
}

/// Triangle inputs with four nested labels: a shrunken sub-triangle, the
/// triangle itself, the completing parallelogram with a corner cut away,
/// and the full parallelogram.
pub fn gen_shapes(n: usize, size: usize, seed: u64) -> Result<DmmDataset> {
    check_request(n, size)?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| shapes_entry(seed, i, size))
        .collect::<Result<Vec<_>>>()?;
    DmmDataset::new(size, size, Task::Shapes, seed, entries)
}

const BACKGROUND: f32 = 0.0;
const LUNG: f32 = 0.5;
const OCCLUSION_ALPHA: f32 = 0.7;

fn twomode_entry(seed: u64, index: usize, size: usize) -> DmmEntry {
    let mut rng = entry_rng(seed, index);
    let s = size as f64;
    let lung = |cx: std::ops::Range<f64>, rng: &mut ChaCha8Rng| {
        let center = Point::new(rng.random_range(cx) * s, rng.random_range(0.45..0.55) * s);
        let (rx, ry) = (rng.random_range(0.10..0.15) * s, rng.random_range(0.25..0.35) * s);
        (center, rx, ry)
    };
    let left = lung(0.28..0.36, &mut rng);
    let right = lung(0.64..0.72, &mut rng);
    let lungs = rasterize_ellipse(left.0, left.1, left.2, size, size)
        .union(&rasterize_ellipse(right.0, right.1, right.2, size, size));

    let mut occlusion = Mask::empty(size, size);
    for _ in 0..MAX_ATTEMPTS {
        let (center, rx, ry) = if rng.random_bool(0.5) { left } else { right };
        let c = Point::new(
            center.x + rng.random_range(-0.6..0.6) * rx,
            center.y + rng.random_range(-0.6..0.6) * ry,
        );
        let (ox, oy) = (rng.random_range(0.08..0.14) * s, rng.random_range(0.08..0.14) * s);
        occlusion = rasterize_ellipse(c, ox, oy, size, size);
        if occlusion.intersection(&lungs).count() > 0 {
            break;
        }
    }

    let mut input = Image::zeros(size, size);
    for (k, v) in input.data_mut().iter_mut().enumerate() {
        *v = if lungs.data()[k] == 1 { LUNG } else { BACKGROUND };
        if occlusion.data()[k] == 1 {
            *v = *v * (1.0 - OCCLUSION_ALPHA) + OCCLUSION_ALPHA;
        }
    }
    let trimmed = lungs.difference(&occlusion);
    DmmEntry {
        input,
        labels: vec![lungs, trimmed],
    }
}

/// Two-ellipse "lung" inputs with a bright occlusion. Label 1 is the full
/// mask, label 2 removes the occluded part.
pub fn gen_twomode(n: usize, size: usize, seed: u64) -> Result<DmmDataset> {
    check_request(n, size)?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| twomode_entry(seed, i, size))
        .collect();
    DmmDataset::new(size, size, Task::TwoMode, seed, entries)
}
