//! Synthetic 2-D densities and the IDX image container.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use dcd_autodiff::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::add_noise;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataset2D {
    #[serde(rename = "swissroll")]
    Swissroll,
    #[serde(rename = "circles")]
    Circles,
    #[serde(rename = "rings")]
    Rings,
    #[serde(rename = "moons")]
    Moons,
    #[serde(rename = "8gaussians")]
    EightGaussians,
    #[serde(rename = "2spirals")]
    TwoSpirals,
    #[serde(rename = "checkerboard")]
    Checkerboard,
}

impl Dataset2D {
    pub const ALL: [Dataset2D; 7] = [
        Dataset2D::Swissroll,
        Dataset2D::Circles,
        Dataset2D::Rings,
        Dataset2D::Moons,
        Dataset2D::EightGaussians,
        Dataset2D::TwoSpirals,
        Dataset2D::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset2D::Swissroll => "swissroll",
            Dataset2D::Circles => "circles",
            Dataset2D::Rings => "rings",
            Dataset2D::Moons => "moons",
            Dataset2D::EightGaussians => "8gaussians",
            Dataset2D::TwoSpirals => "2spirals",
            Dataset2D::Checkerboard => "checkerboard",
        }
    }

    /// Half-width of a square that holds the density up to rare noise tails.
    pub fn half_width(self) -> f64 {
        match self {
            Dataset2D::Swissroll => 4.0,
            Dataset2D::Circles | Dataset2D::Rings | Dataset2D::EightGaussians => 3.0,
            Dataset2D::Moons => 2.0,
            Dataset2D::TwoSpirals => 1.5,
            Dataset2D::Checkerboard => 4.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let [a, b] = self.point(rng);
            data.push(a);
            data.push(b);
        }
        Tensor::new(vec![n, 2], data).expect("n × 2")
    }

    fn point<R: Rng + ?Sized>(self, rng: &mut R) -> [f64; 2] {
        match self {
            Dataset2D::Swissroll => {
                let u: f64 = rng.gen();
                let t = 1.5 * PI * (1.0 + 2.0 * u);
                let (n1, n2) = (gauss(rng), gauss(rng));
                [(t * t.cos() + n1) / 5.0, (t * t.sin() + n2) / 5.0]
            }
            Dataset2D::Circles => {
                let r = if rng.gen::<bool>() { 1.0 } else { 2.0 };
                ring_point(r, 0.08, rng)
            }
            Dataset2D::Rings => {
                let r = [0.5, 1.0, 1.5, 2.0][rng.gen_range(0..4)];
                ring_point(r, 0.05, rng)
            }
            Dataset2D::Moons => {
                let th = rng.gen_range(0.0..PI);
                let upper = rng.gen::<bool>();
                let (x, y) = if upper {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                let (n1, n2) = (gauss(rng), gauss(rng));
                [x - 0.5 + 0.08 * n1, y - 0.25 + 0.08 * n2]
            }
            Dataset2D::EightGaussians => {
                let k = rng.gen_range(0..8) as f64;
                let a = 2.0 * PI * k / 8.0;
                let (n1, n2) = (gauss(rng), gauss(rng));
                [2.0 * a.cos() + 0.2 * n1, 2.0 * a.sin() + 0.2 * n2]
            }
            Dataset2D::TwoSpirals => {
                let u: f64 = rng.gen();
                let th = 3.0 * PI * u.sqrt();
                let r = th / (3.0 * PI);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let (n1, n2) = (gauss(rng), gauss(rng));
                [sign * r * th.cos() + 0.05 * n1, sign * r * th.sin() + 0.05 * n2]
            }
            Dataset2D::Checkerboard => {
                let x1 = rng.gen_range(-4.0..4.0);
                let i = ((x1 + 4.0f64).floor() as i64).clamp(0, 7);
                // the four rows j in 0..8 with i + j even
                let j = 2 * rng.gen_range(0..4) + (i % 2);
                let x2 = j as f64 - 4.0 + rng.gen::<f64>();
                [x1, x2]
            }
        }
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn ring_point<R: Rng + ?Sized>(r: f64, sd: f64, rng: &mut R) -> [f64; 2] {
    let a = rng.gen_range(0.0..2.0 * PI);
    let (n1, n2) = (gauss(rng), gauss(rng));
    [r * a.cos() + sd * n1, r * a.sin() + sd * n2]
}

impl fmt::Display for Dataset2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset2D {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Dataset2D::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| CoreError::UnknownDataset(s.to_string()))
    }
}

/// `n` samples from the named density.
pub fn sample_2d<R: Rng + ?Sized>(name: &str, n: usize, rng: &mut R) -> Result<Tensor> {
    Ok(name.parse::<Dataset2D>()?.sample(n, rng))
}

/// Writes rows as `x1,x2,…` comma-separated text with a header line.
pub fn write_csv(path: &Path, x: &Tensor) -> Result<()> {
    let io = |e| CoreError::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let header: Vec<String> = (1..=x.cols()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

// ---- IDX ------------------------------------------------------------------

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// A parsed unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let bad = |m: String| CoreError::Idx(m);
    if bytes.len() < 4 {
        return Err(bad("file shorter than the magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let rank = match magic {
        IDX_LABELS_MAGIC => 1,
        IDX_IMAGES_MAGIC => 3,
        other => return Err(bad(format!("bad magic 0x{other:08x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| bad(format!("dimensions {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() < total {
        return Err(bad(format!("truncated body: need {total} bytes, have {}", body.len())));
    }
    Ok(IdxArray {
        dims,
        data: body[..total].to_vec(),
    })
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let magic = if array.dims.len() == 1 {
        IDX_LABELS_MAGIC
    } else {
        IDX_IMAGES_MAGIC
    };
    let mut out = magic.to_be_bytes().to_vec();
    for d in &array.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Images flattened to rows and scaled to `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the Gaussian noise added after scaling (0 = none).
    pub sigma_pre: f64,
}

impl ImageSet {
    pub fn from_idx(array: &IdxArray) -> Result<Self> {
        if array.dims.len() != 3 {
            return Err(CoreError::Idx(format!("expected an image array, got dims {:?}", array.dims)));
        }
        let (n, h, w) = (array.dims[0], array.dims[1], array.dims[2]);
        let data = array.data.iter().map(|&b| b as f64 / 255.0 * 2.0 - 1.0).collect();
        Ok(Self {
            images: Tensor::new(vec![n, h * w], data)?,
            labels: None,
            height: h,
            width: w,
            sigma_pre: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// Keeps the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            let idx: Vec<usize> = (0..n).collect();
            self.images = self.images.select_rows(&idx);
            if let Some(l) = self.labels.as_mut() {
                l.truncate(n);
            }
        }
    }

    pub fn with_noise<R: Rng + ?Sized>(mut self, sigma: f64, rng: &mut R) -> Self {
        self.images = add_noise(&self.images, sigma * sigma, rng);
        self.sigma_pre = sigma;
        self
    }
}

/// Loads an IDX image file; `preprocess = Some(σ)` adds `N(0, σ²)` noise per
/// pixel after scaling.
pub fn load_idx<R: Rng + ?Sized>(path: &Path, preprocess: Option<f64>, rng: &mut R) -> Result<ImageSet> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let set = ImageSet::from_idx(&parse_idx(&bytes)?)?;
    Ok(match preprocess {
        Some(s) if s > 0.0 => set.with_noise(s, rng),
        _ => set,
    })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let arr = parse_idx(&bytes)?;
    if arr.dims.len() != 1 {
        return Err(CoreError::Idx("expected a label array".into()));
    }
    Ok(arr.data)
}
