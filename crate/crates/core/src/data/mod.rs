//! Fundus datasets, patch extraction and training-patch sampling.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! training/images/NN.png   RGB fundus image      (NN = 21..40)
//! training/truth/NN.png    gray vessel labels    (>= 128 is vessel)
//! training/mask/NN.png     gray field of view    (>= 128 is inside)
//! test/{images,truth,mask}/NN.png                (NN = 01..20)
//! ```
//!
//! `.ppm` / `.pgm` files are accepted in place of `.png`.

pub mod raster;
pub mod synthetic;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};
use raster::{read_raster, Raster};

pub const PATCH_SIZE: usize = 31;
pub const PATCH_HALF: usize = PATCH_SIZE / 2;
pub const TRAIN_IDS: std::ops::RangeInclusive<u32> = 21..=40;
pub const TEST_IDS: std::ops::RangeInclusive<u32> = 1..=20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Training,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Test => "test",
        }
    }

    pub fn ids(self) -> Vec<u32> {
        match self {
            Split::Training => TRAIN_IDS.collect(),
            Split::Test => TEST_IDS.collect(),
        }
    }
}

/// One color fundus photograph with its vessel ground truth and
/// field-of-view mask, all of identical size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FundusSample {
    id: u32,
    width: usize,
    height: usize,
    image: Vec<u8>,
    truth: Vec<u8>,
    fov: Vec<u8>,
}

impl FundusSample {
    /// `image` is interleaved RGB; `truth` and `fov` hold one 0/1 byte per pixel.
    pub fn new(
        id: u32,
        width: usize,
        height: usize,
        image: Vec<u8>,
        truth: Vec<u8>,
        fov: Vec<u8>,
    ) -> Result<Self> {
        let n = width * height;
        if n == 0 || image.len() != 3 * n || truth.len() != n || fov.len() != n {
            return Err(Error::Data(format!(
                "sample {id}: rasters disagree for {width}x{height} (image {}, truth {}, fov {})",
                image.len(),
                truth.len(),
                fov.len()
            )));
        }
        if truth.iter().chain(&fov).any(|&v| v > 1) {
            return Err(Error::Data(format!(
                "sample {id}: truth and fov must be 0/1"
            )));
        }
        Ok(FundusSample {
            id,
            width,
            height,
            image,
            truth,
            fov,
        })
    }

    /// Builds a sample from decoded rasters, binarising truth and mask at 128.
    pub fn from_rasters(id: u32, image: &Raster, truth: &Raster, fov: &Raster) -> Result<Self> {
        if (image.width, image.height) != (truth.width, truth.height)
            || (image.width, image.height) != (fov.width, fov.height)
        {
            return Err(Error::Data(format!(
                "sample {id}: image {}x{}, truth {}x{}, mask {}x{}",
                image.width, image.height, truth.width, truth.height, fov.width, fov.height
            )));
        }
        let bin = |r: &Raster| {
            r.to_gray()
                .data
                .iter()
                .map(|&v| u8::from(v >= 128))
                .collect()
        };
        Self::new(
            id,
            image.width,
            image.height,
            image.to_rgb().data,
            bin(truth),
            bin(fov),
        )
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }

    pub fn truth(&self) -> &[u8] {
        &self.truth
    }

    pub fn fov(&self) -> &[u8] {
        &self.fov
    }

    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }

    pub fn fov_pixels(&self) -> usize {
        self.fov.iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of FOV pixels labelled vessel.
    pub fn vessel_fraction(&self) -> f64 {
        let vessels = self
            .truth
            .iter()
            .zip(&self.fov)
            .filter(|&(&t, &f)| t == 1 && f == 1)
            .count();
        vessels as f64 / self.fov_pixels().max(1) as f64
    }

    /// Rectangular sub-image (clipped to the bounds).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top >= self.height || left >= self.width {
            return Err(Error::Parameter(format!(
                "crop origin ({top},{left}) outside image"
            )));
        }
        let (h, w) = (height.min(self.height - top), width.min(self.width - left));
        let mut image = Vec::with_capacity(3 * h * w);
        let mut truth = Vec::with_capacity(h * w);
        let mut fov = Vec::with_capacity(h * w);
        for r in top..top + h {
            let a = r * self.width + left;
            image.extend_from_slice(&self.image[3 * a..3 * (a + w)]);
            truth.extend_from_slice(&self.truth[a..a + w]);
            fov.extend_from_slice(&self.fov[a..a + w]);
        }
        Self::new(self.id, w, h, image, truth, fov)
    }
}

/// Per-channel offset subtracted after `/255` scaling (zeros by default).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Normalization {
    pub channel_mean: [f32; 3],
}

impl Normalization {
    /// Mean of each channel (scaled to [0,1]) over all FOV pixels.
    pub fn fov_mean(samples: &[FundusSample]) -> Self {
        let mut sum = [0f64; 3];
        let mut n = 0usize;
        for s in samples {
            for (px, &f) in s.image.chunks_exact(3).zip(&s.fov) {
                if f == 1 {
                    for c in 0..3 {
                        sum[c] += px[c] as f64 / 255.0;
                    }
                    n += 1;
                }
            }
        }
        let n = n.max(1) as f64;
        Normalization {
            channel_mean: sum.map(|s| (s / n) as f32),
        }
    }
}

/// Center of a 3×31×31 neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
}

/// Writes the `[3,31,31]` patch centred at `spec` into `out`. Pixels are
/// scaled by 1/255; positions outside the image are zero.
pub fn write_patch<T: Scalar>(
    sample: &FundusSample,
    spec: PatchSpec,
    norm: &Normalization,
    out: &mut [T],
) -> Result<()> {
    if spec.row >= sample.height || spec.col >= sample.width {
        return Err(Error::Parameter(format!(
            "patch center ({}, {}) outside {}x{} image",
            spec.row, spec.col, sample.height, sample.width
        )));
    }
    assert_eq!(out.len(), 3 * PATCH_SIZE * PATCH_SIZE);
    out.iter_mut().for_each(|v| *v = T::zero());
    let scale = 1.0f32 / 255.0;
    for dy in 0..PATCH_SIZE {
        let r = spec.row as isize + dy as isize - PATCH_HALF as isize;
        if r < 0 || r >= sample.height as isize {
            continue;
        }
        for dx in 0..PATCH_SIZE {
            let c = spec.col as isize + dx as isize - PATCH_HALF as isize;
            if c < 0 || c >= sample.width as isize {
                continue;
            }
            let px = sample.rgb(r as usize, c as usize);
            for ch in 0..3 {
                let v = px[ch] as f32 * scale - norm.channel_mean[ch];
                out[(ch * PATCH_SIZE + dy) * PATCH_SIZE + dx] = T::of(v as f64);
            }
        }
    }
    Ok(())
}

pub fn extract_patch(sample: &FundusSample, spec: PatchSpec) -> Result<Tensor<f32>> {
    let mut buf = vec![0f32; 3 * PATCH_SIZE * PATCH_SIZE];
    write_patch(sample, spec, &Normalization::default(), &mut buf)?;
    Tensor::new(&[3, PATCH_SIZE, PATCH_SIZE], buf)
}

fn locate(root: &Path, split: Split, kind: &str, id: u32, fallback_ext: &str) -> Result<PathBuf> {
    let dir = root.join(split.dir()).join(kind);
    let png = dir.join(format!("{id:02}.png"));
    if png.is_file() {
        return Ok(png);
    }
    let alt = dir.join(format!("{id:02}.{fallback_ext}"));
    if alt.is_file() {
        return Ok(alt);
    }
    Err(Error::Ingestion {
        path: png,
        reason: "file not found".into(),
    })
}

pub fn load_sample(root: &Path, split: Split, id: u32) -> Result<FundusSample> {
    let image = read_raster(&locate(root, split, "images", id, "ppm")?)?;
    let truth = read_raster(&locate(root, split, "truth", id, "pgm")?)?;
    let fov = read_raster(&locate(root, split, "mask", id, "pgm")?)?;
    FundusSample::from_rasters(id, &image, &truth, &fov)
}

pub fn load_split(root: &Path, split: Split, ids: &[u32]) -> Result<Vec<FundusSample>> {
    ids.iter().map(|&id| load_sample(root, split, id)).collect()
}

/// Loads the full 20 training (21–40) and 20 test (01–20) samples.
pub fn load_drive(root: &Path) -> Result<(Vec<FundusSample>, Vec<FundusSample>)> {
    let train = load_split(root, Split::Training, &Split::Training.ids())?;
    let test = load_split(root, Split::Test, &Split::Test.ids())?;
    Ok((train, test))
}

/// Writes `sample` under `root` in the dataset layout.
pub fn save_sample(root: &Path, split: Split, sample: &FundusSample, pnm: bool) -> Result<()> {
    let (w, h) = (sample.width, sample.height);
    let gray = |v: &[u8]| Raster::new(w, h, 1, v.iter().map(|&b| b * 255).collect());
    let items = [
        ("images", Raster::new(w, h, 3, sample.image.clone())?, "ppm"),
        ("truth", gray(&sample.truth)?, "pgm"),
        ("mask", gray(&sample.fov)?, "pgm"),
    ];
    for (kind, r, ext) in items {
        let dir = root.join(split.dir()).join(kind);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!(
            "{:02}.{}",
            sample.id,
            if pnm { ext } else { "png" }
        ));
        std::fs::write(&path, raster::encode_for_path(&r, &path)?)?;
    }
    Ok(())
}

/// A sampled patch center with its label (the truth at the center).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledCenter {
    pub sample: usize,
    pub spec: PatchSpec,
    pub label: usize,
}

/// Labeled training patches. Patch tensors are materialised on demand
/// from the referenced samples, so a set of 60000 costs a few hundred
/// kilobytes rather than gigabytes.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    samples: &'a [FundusSample],
    entries: Vec<LabeledCenter>,
    seed: u64,
    norm: Normalization,
}

impl<'a> TrainingSet<'a> {
    pub fn from_entries(
        samples: &'a [FundusSample],
        entries: Vec<LabeledCenter>,
        seed: u64,
    ) -> Result<Self> {
        for e in &entries {
            let s = samples
                .get(e.sample)
                .ok_or_else(|| Error::Parameter(format!("entry references sample {}", e.sample)))?;
            if e.spec.row >= s.height || e.spec.col >= s.width {
                return Err(Error::Parameter(format!(
                    "entry center {:?} outside sample",
                    e.spec
                )));
            }
        }
        Ok(TrainingSet {
            samples,
            entries,
            seed,
            norm: Normalization::default(),
        })
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.norm = norm;
        self
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[LabeledCenter] {
        &self.entries
    }

    pub fn samples(&self) -> &'a [FundusSample] {
        self.samples
    }

    pub fn vessel_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }

    pub fn patch(&self, i: usize) -> Result<Tensor<f32>> {
        let (t, _) = self.batch::<f32>(&[i])?;
        t.reshape(&[3, PATCH_SIZE, PATCH_SIZE])
    }

    /// `[B,3,31,31]` tensor and labels for the given entry indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let plen = 3 * PATCH_SIZE * PATCH_SIZE;
        let mut data = vec![T::zero(); indices.len() * plen];
        let mut labels = Vec::with_capacity(indices.len());
        for (&i, out) in indices.iter().zip(data.chunks_exact_mut(plen)) {
            let e = self.entries[i];
            write_patch(&self.samples[e.sample], e.spec, &self.norm, out)?;
            labels.push(e.label);
        }
        Ok((
            Tensor::new(&[indices.len(), 3, PATCH_SIZE, PATCH_SIZE], data)?,
            labels,
        ))
    }
}

/// Draws `count` patch centers uniformly (with replacement) over the FOV
/// pixels of all `samples`. With `balance`, exactly ⌈count/2⌉ vessel and
/// ⌊count/2⌋ background centers are drawn, then shuffled together.
pub fn sample_training_set<'a>(
    samples: &'a [FundusSample],
    count: usize,
    rng: &mut Rng,
    balance: bool,
) -> Result<TrainingSet<'a>> {
    if count == 0 {
        return Err(Error::Parameter("patch count must be >= 1".into()));
    }
    let seed = rng.state();
    let mut pools: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
    let mut all = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for (p, (&f, &t)) in s.fov.iter().zip(&s.truth).enumerate() {
            if f == 1 {
                if balance {
                    pools[t as usize].push((si as u32, p as u32));
                } else {
                    all.push((si as u32, p as u32));
                }
            }
        }
    }
    let to_center = |(si, p): (u32, u32)| {
        let s = &samples[si as usize];
        let (row, col) = (p as usize / s.width, p as usize % s.width);
        LabeledCenter {
            sample: si as usize,
            spec: PatchSpec { row, col },
            label: s.truth[p as usize] as usize,
        }
    };
    let entries = if balance {
        if pools.iter().any(Vec::is_empty) {
            return Err(Error::Data(
                "class balancing requested but one class has no FOV pixels".into(),
            ));
        }
        let vessel = count.div_ceil(2);
        let mut entries: Vec<LabeledCenter> = (0..count)
            .map(|i| {
                let pool = &pools[usize::from(i < vessel)];
                to_center(pool[rng.below(pool.len() as u64) as usize])
            })
            .collect();
        rng.shuffle(&mut entries);
        entries
    } else {
        if all.is_empty() {
            return Err(Error::Data("no FOV pixels to sample from".into()));
        }
        (0..count)
            .map(|_| to_center(all[rng.below(all.len() as u64) as usize]))
            .collect()
    };
    Ok(TrainingSet {
        samples,
        entries,
        seed,
        norm: Normalization::default(),
    })
}
