//! Synthetic segmentation data: annuli, random-walk curves and separated
//! ellipses on a noisy background.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{betti_numbers, BinaryMask};
use crate::pgm::Pgm;
use crate::tensor::Tensor;

const BACKGROUND: f64 = 0.2;
const FOREGROUND: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Ring,
    Curve,
    Blobs,
}

/// Which kinds a dataset draws from, uniformly per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindMix {
    Ring,
    Curve,
    Blobs,
    #[default]
    RingCurve,
    Mix,
}

impl KindMix {
    pub fn kinds(self) -> &'static [SynthKind] {
        match self {
            KindMix::Ring => &[SynthKind::Ring],
            KindMix::Curve => &[SynthKind::Curve],
            KindMix::Blobs => &[SynthKind::Blobs],
            KindMix::RingCurve => &[SynthKind::Ring, SynthKind::Curve],
            KindMix::Mix => &[SynthKind::Ring, SynthKind::Curve, SynthKind::Blobs],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::invalid(format!(
                "unknown kind {s:?}; expected ring, curve, blobs, ring_curve or mix"
            ))
        })
    }
}

fn default_n() -> usize {
    100
}

fn default_side() -> usize {
    32
}

fn default_noise() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub kind: KindMix,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: default_n(),
            kind: KindMix::default(),
            height: default_side(),
            width: default_side(),
            noise_sigma: default_noise(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "images must be at least 16×16, got {}×{}",
                self.height, self.width
            )));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config("image sides must be even".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[1,H,W]`, values on the 8-bit grid `k/255`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub kind: SynthKind,
    pub seed: u64,
}

fn draw_ring(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    loop {
        let max_r = (h.min(w) as f64 / 2.0 - 2.0).min(12.0);
        let r_out = rng.gen_range(5.0..max_r.max(5.5));
        let thickness = rng.gen_range(2.0..(r_out / 2.0).clamp(2.5, 4.0));
        let r_in = r_out - thickness;
        let cy = rng.gen_range(r_out + 1.0..h as f64 - r_out - 2.0);
        let cx = rng.gen_range(r_out + 1.0..w as f64 - r_out - 2.0);
        let m = BinaryMask::from_fn(h, w, |y, x| {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            d >= r_in && d <= r_out
        });
        if betti_numbers(&m) == (1, 1) {
            return m;
        }
    }
}

fn draw_curves(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    const DIRS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    let mut m = BinaryMask::zeros(h, w);
    let curves = rng.gen_range(1..=2);
    for _ in 0..curves {
        let thick = rng.gen_bool(0.5);
        let mut y = rng.gen_range(2..h - 2) as isize;
        let mut x = rng.gen_range(2..w - 2) as isize;
        let mut dir = rng.gen_range(0..4);
        let len = rng.gen_range(h..2 * h);
        let mut path = vec![(y, x)];
        for _ in 0..len {
            if rng.gen_bool(0.3) {
                dir = (dir + if rng.gen_bool(0.5) { 1 } else { 3 }) % 4;
            }
            let (dy, dx) = DIRS[dir];
            let (ny, nx) = (y + dy, x + dx);
            if ny < 1 || nx < 1 || ny >= h as isize - 2 || nx >= w as isize - 2 {
                dir = (dir + 2) % 4;
                continue;
            }
            y = ny;
            x = nx;
            path.push((y, x));
        }
        for (py, px) in path {
            m.set(py as usize, px as usize, true);
            if thick {
                m.set(py as usize, px as usize + 1, true);
            }
        }
    }
    m
}

fn draw_blobs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let target = rng.gen_range(2..=4);
    let mut m = BinaryMask::zeros(h, w);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < target && attempts < 200 {
        attempts += 1;
        let ry = rng.gen_range(2.5..5.0);
        let rx = rng.gen_range(2.5..5.0);
        let cy = rng.gen_range(ry + 1.0..h as f64 - ry - 1.0);
        let cx = rng.gen_range(rx + 1.0..w as f64 - rx - 1.0);
        let blob = BinaryMask::from_fn(h, w, |y, x| {
            ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
        });
        // Keep a gap of at least two pixels between blobs.
        let clash = (0..h).any(|y| {
            (0..w).any(|x| {
                blob.get(y, x)
                    && (y.saturating_sub(2)..(y + 3).min(h))
                        .any(|yy| (x.saturating_sub(2)..(x + 3).min(w)).any(|xx| m.get(yy, xx)))
            })
        });
        if clash {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if blob.get(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        placed += 1;
    }
    m
}

/// One sample: structure drawn from `kind`, then
/// `clamp(0.2 + 0.6·mask + N(0, σ²))` quantized to 8 bits.
pub fn generate_sample(
    kind: SynthKind,
    h: usize,
    w: usize,
    noise_sigma: f64,
    seed: u64,
) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = match kind {
        SynthKind::Ring => draw_ring(h, w, &mut rng),
        SynthKind::Curve => draw_curves(h, w, &mut rng),
        SynthKind::Blobs => draw_blobs(h, w, &mut rng),
    };
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma >= 0");
    let data = mask
        .data()
        .iter()
        .map(|m| {
            let clean = BACKGROUND + (FOREGROUND - BACKGROUND) * *m as f64;
            let v = (clean + noise.sample(&mut rng)).clamp(0.0, 1.0);
            (v * 255.0).round() / 255.0
        })
        .collect();
    SynthSample {
        image: Tensor::new(&[1, h, w], data).expect("sized"),
        mask,
        kind,
        seed,
    }
}

/// `cfg.n` samples; sample seeds are drawn from a stream seeded by
/// `cfg.seed`, so the dataset is a pure function of the config.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kinds = cfg.kind.kinds();
    Ok((0..cfg.n)
        .map(|_| {
            let kind = *kinds.choose(&mut rng).expect("non-empty");
            let seed = rng.gen();
            generate_sample(kind, cfg.height, cfg.width, cfg.noise_sigma, seed)
        })
        .collect())
}

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image: String,
    pub mask: String,
    pub kind: Option<SynthKind>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: String,
    pub config: Option<DataConfig>,
    pub samples: Vec<IndexEntry>,
}

/// Write `img_%04d.pgm`, `msk_%04d.pgm` and `index.json` into `dir`.
pub fn save_dataset(
    dir: &Path,
    samples: &[SynthSample],
    cfg: Option<&DataConfig>,
    provenance: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("img_{i:04}.pgm");
        let mask = format!("msk_{i:04}.pgm");
        Pgm::from_unit_tensor(&s.image)?
            .with_comment(provenance)
            .write(&dir.join(&image))?;
        Pgm::from_mask(&s.mask)
            .with_comment(provenance)
            .write(&dir.join(&mask))?;
        entries.push(IndexEntry {
            image,
            mask,
            kind: Some(s.kind),
            seed: Some(s.seed),
        });
    }
    let index = DatasetIndex {
        version: crate::VERSION.to_string(),
        config: cfg.copied(),
        samples: entries,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`], or any directory with an
/// index listing image/mask PGM pairs of equal size.
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(index.samples.len());
    let mut dims = None;
    for e in &index.samples {
        let img = Pgm::read(&dir.join(&e.image))?;
        let msk = Pgm::read(&dir.join(&e.mask))?;
        if (img.height, img.width) != (msk.height, msk.width) {
            return Err(Error::shape(format!(
                "{} and {} differ in size",
                e.image, e.mask
            )));
        }
        if *dims.get_or_insert((img.height, img.width)) != (img.height, img.width) {
            return Err(Error::shape("dataset images differ in size".to_string()));
        }
        let t = img.to_unit_tensor();
        out.push(SynthSample {
            image: t.reshape(&[1, img.height, img.width])?,
            mask: msk.to_mask(),
            kind: e.kind.unwrap_or(SynthKind::Curve),
            seed: e.seed.unwrap_or(0),
        });
    }
    if out.is_empty() {
        return Err(Error::invalid("dataset index lists no samples"));
    }
    Ok(out)
}

/// Stack samples into `[B,1,H,W]` images and masks.
pub fn batch(samples: &[&SynthSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.mask.height(), first.mask.width());
    let mut img = Vec::with_capacity(samples.len() * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.mask.height(), s.mask.width()) != (h, w) {
            return Err(Error::shape("batch samples differ in size"));
        }
        img.extend_from_slice(s.image.data());
        msk.extend(s.mask.data().iter().map(|v| *v as f64));
    }
    let shape = [samples.len(), 1, h, w];
    Ok((Tensor::new(&shape, img)?, Tensor::new(&shape, msk)?))
}
