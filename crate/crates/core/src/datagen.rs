//! Procedurally generated, fully factor-labelled image datasets.
//!
//! Sprites are hard-edged binary rasters on a square grid. Every combination
//! of factor values appears exactly once, stored row-major over the factor
//! grid (last factor fastest).

use std::f64::consts::PI;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const RFDS_MAGIC: &[u8; 4] = b"RFDS";
const RFDS_VERSION: u32 = 1;

/// Semi-major axis range as a fraction of the resolution.
const SCALE_RANGE: (f64, f64) = (0.15, 0.35);
const OVAL_ASPECT: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorSpace {
    pub factor_names: Vec<String>,
    pub cardinalities: Vec<usize>,
}

impl FactorSpace {
    pub fn new(names: &[&str], cardinalities: &[usize]) -> Result<Self> {
        if names.len() != cardinalities.len() || cardinalities.contains(&0) {
            return Err(Error::Construction(format!(
                "factor names {names:?} and cardinalities {cardinalities:?} disagree"
            )));
        }
        Ok(FactorSpace {
            factor_names: names.iter().map(|s| s.to_string()).collect(),
            cardinalities: cardinalities.to_vec(),
        })
    }

    pub fn num_factors(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn total(&self) -> usize {
        self.cardinalities.iter().product()
    }

    pub fn index_of(&self, tuple: &[usize]) -> Result<usize> {
        if tuple.len() != self.num_factors() {
            return Err(Error::Index(format!("tuple {tuple:?} has wrong length")));
        }
        let mut idx = 0;
        for (v, c) in tuple.iter().zip(&self.cardinalities) {
            if v >= c {
                return Err(Error::Index(format!("tuple {tuple:?} out of range")));
            }
            idx = idx * c + v;
        }
        Ok(idx)
    }

    pub fn tuple_of(&self, mut index: usize) -> Result<Vec<usize>> {
        if index >= self.total() {
            return Err(Error::Index(format!("index {index} of {}", self.total())));
        }
        let mut t = vec![0; self.num_factors()];
        for (slot, c) in t.iter_mut().zip(&self.cardinalities).rev() {
            *slot = index % c;
            index /= c;
        }
        Ok(t)
    }

    /// Factor values mapped to `[0, 1]` (`v / (card − 1)`, or 0 for a
    /// single-valued factor).
    pub fn scaled(&self, tuple: &[usize]) -> Vec<f64> {
        tuple
            .iter()
            .zip(&self.cardinalities)
            .map(|(&v, &c)| if c > 1 { v as f64 / (c - 1) as f64 } else { 0.0 })
            .collect()
    }

    fn check_factor(&self, j: usize, l: usize) -> Result<()> {
        if j >= self.num_factors() {
            return Err(Error::Index(format!(
                "factor {j} of {}",
                self.num_factors()
            )));
        }
        if l < 2 {
            return Err(Error::Contract(format!("sample size {l} < 2")));
        }
        Ok(())
    }

    /// `l` tuples sharing one random value of factor `j`; all other factors
    /// drawn i.i.d. uniformly (with replacement).
    pub fn sample_one_fixed(&self, j: usize, l: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        self.check_factor(j, l)?;
        let fixed = rng.below(self.cardinalities[j]);
        Ok((0..l)
            .map(|_| {
                self.cardinalities
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| if k == j { fixed } else { rng.below(c) })
                    .collect()
            })
            .collect())
    }

    /// `l` tuples where only factor `j` varies; the rest is one random
    /// base tuple.
    pub fn sample_one_varied(&self, j: usize, l: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        self.check_factor(j, l)?;
        if self.cardinalities[j] < 2 {
            return Err(Error::Construction(format!(
                "factor {j} has a single value; nothing can vary"
            )));
        }
        let base: Vec<usize> = self.cardinalities.iter().map(|&c| rng.below(c)).collect();
        Ok((0..l)
            .map(|_| {
                let mut t = base.clone();
                t[j] = rng.below(self.cardinalities[j]);
                t
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorDataset {
    pub name: String,
    pub space: FactorSpace,
    pub resolution: usize,
    /// `count × resolution²` pixels in `[0, 1]`.
    images: Vec<f64>,
}

impl FactorDataset {
    pub fn new(name: &str, space: FactorSpace, resolution: usize, images: Vec<f64>) -> Result<Self> {
        let pix = resolution * resolution;
        if images.len() != space.total() * pix {
            return Err(Error::Construction(format!(
                "{} pixels for {} images of {pix}",
                images.len(),
                space.total()
            )));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Construction("pixel outside [0, 1]".into()));
        }
        Ok(FactorDataset {
            name: name.to_string(),
            space,
            resolution,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.space.total()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[index * p..(index + 1) * p]
    }

    /// `[indices.len() × pixels]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), self.pixels()], data).expect("batch shape")
    }

    pub fn indices_of(&self, tuples: &[Vec<usize>]) -> Result<Vec<usize>> {
        tuples.iter().map(|t| self.space.index_of(t)).collect()
    }

    /// Scaled factor labels for every image, `count × factors`.
    pub fn labels(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.space.scaled(&self.space.tuple_of(i).unwrap()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(RFDS_MAGIC);
        w.u32(RFDS_VERSION);
        w.str(&self.name);
        w.u32(self.resolution as u32);
        w.u32(self.space.num_factors() as u32);
        for (name, card) in self.space.factor_names.iter().zip(&self.space.cardinalities) {
            w.str(name);
            w.u32(*card as u32);
        }
        let bytes: Vec<u8> = self
            .images
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        w.bytes(&bytes);
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(RFDS_MAGIC)?;
        let version = r.u32()?;
        if version != RFDS_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let name = r.str()?;
        let resolution = r.u32()? as usize;
        let nf = r.u32()? as usize;
        if nf > 64 {
            return r.fail(format!("implausible factor count {nf}"));
        }
        let mut names = Vec::with_capacity(nf);
        let mut cards = Vec::with_capacity(nf);
        for _ in 0..nf {
            names.push(r.str()?);
            let c = r.u32()? as usize;
            if c == 0 {
                return r.fail("zero cardinality");
            }
            cards.push(c);
        }
        let space = FactorSpace {
            factor_names: names,
            cardinalities: cards,
        };
        let n = space.total() * resolution * resolution;
        let raw = r.take(n)?;
        r.expect_end()?;
        let images = raw.iter().map(|&b| b as f64 / 255.0).collect();
        FactorDataset::new(&name, space, resolution, images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FactorDataset::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Oval,
    Square,
    Triangle,
}

impl Shape {
    /// Rotation period given the shape's symmetry.
    pub fn rotation_period(self) -> f64 {
        match self {
            Shape::Oval => PI,
            Shape::Square => PI / 2.0,
            Shape::Triangle => 2.0 * PI,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Oval => "oval",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// Geometry of the four continuous sprite factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpriteGeometry {
    pub resolution: usize,
    /// Cardinalities of scale, rotation, posX, posY.
    pub cardinalities: [usize; 4],
    pub antialias: bool,
}

impl SpriteGeometry {
    pub fn new(resolution: usize, cardinalities: [usize; 4]) -> Self {
        SpriteGeometry {
            resolution,
            cardinalities,
            antialias: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Construction(format!(
                "resolution {} < 8",
                self.resolution
            )));
        }
        if let Some(c) = self.cardinalities.iter().find(|&&c| c < 2) {
            return Err(Error::Construction(format!("cardinality {c} < 2")));
        }
        Ok(())
    }

    fn lerp(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }

    fn semi_major(&self, scale: usize) -> f64 {
        let r = self.resolution as f64;
        r * Self::lerp(SCALE_RANGE.0, SCALE_RANGE.1, scale, self.cardinalities[0])
    }

    /// Centre coordinate for a position index: the largest shape stays
    /// inside the frame at both ends of the range.
    fn centre(&self, k: usize, n: usize) -> f64 {
        let r = self.resolution as f64;
        let margin = r * SCALE_RANGE.1;
        Self::lerp(margin, r - margin, k, n)
    }

    fn params(&self, shape: Shape, t: [usize; 4]) -> ShapeParams {
        let [s, rot, px, py] = t;
        ShapeParams {
            shape,
            a: self.semi_major(s),
            theta: shape.rotation_period() * rot as f64 / self.cardinalities[1] as f64,
            cx: self.centre(px, self.cardinalities[2]),
            cy: self.centre(py, self.cardinalities[3]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ShapeParams {
    shape: Shape,
    a: f64,
    theta: f64,
    cx: f64,
    cy: f64,
}

impl ShapeParams {
    fn triangle(&self) -> [(f64, f64); 3] {
        // Isosceles, so the full 2π turn is the rotation period.
        let angles = [0.0, 2.4, -2.4];
        angles.map(|d: f64| {
            let t = self.theta + d;
            (self.a * t.cos(), self.a * t.sin())
        })
    }

    /// Half-extents of the bounding box around the centre.
    fn extents(&self) -> (f64, f64) {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        match self.shape {
            Shape::Oval => {
                let b = OVAL_ASPECT * self.a;
                (
                    (self.a * self.a * c * c + b * b * s * s).sqrt(),
                    (self.a * self.a * s * s + b * b * c * c).sqrt(),
                )
            }
            Shape::Square => {
                let h = self.a / std::f64::consts::SQRT_2;
                let e = h * (c.abs() + s.abs());
                (e, e)
            }
            Shape::Triangle => {
                let v = self.triangle();
                (
                    v.iter().map(|p| p.0.abs()).fold(0.0, f64::max),
                    v.iter().map(|p| p.1.abs()).fold(0.0, f64::max),
                )
            }
        }
    }

    /// Offset from the centre `(dx, dy)` lies inside the shape.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match self.shape {
            Shape::Oval => {
                let b = OVAL_ASPECT * self.a;
                (u / self.a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Square => {
                let h = self.a / std::f64::consts::SQRT_2;
                u.abs() <= h && v.abs() <= h
            }
            Shape::Triangle => {
                let p = self.triangle();
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
                };
                let e = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                e.iter().all(|&x| x >= 0.0) || e.iter().all(|&x| x <= 0.0)
            }
        }
    }
}

fn rasterize(p: &ShapeParams, res: usize, antialias: bool, out: &mut [f64]) {
    let sub = if antialias { 4 } else { 1 };
    let inv = 1.0 / sub as f64;
    for y in 0..res {
        for x in 0..res {
            let mut hits = 0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let px = x as f64 + (sx as f64 + 0.5) * inv;
                    let py = y as f64 + (sy as f64 + 0.5) * inv;
                    if p.contains(px - p.cx, py - p.cy) {
                        hits += 1;
                    }
                }
            }
            out[y * res + x] = hits as f64 / (sub * sub) as f64;
        }
    }
}

fn render_shape(geom: &SpriteGeometry, shape: Shape, t: [usize; 4], out: &mut [f64]) -> Result<()> {
    let p = geom.params(shape, t);
    let r = geom.resolution as f64;
    let (ex, ey) = p.extents();
    let tol = 1e-9;
    if p.cx - ex < -tol || p.cx + ex > r + tol || p.cy - ey < -tol || p.cy + ey > r + tol {
        return Err(Error::Construction(format!(
            "{} at factor tuple {t:?} clips the border",
            shape.name()
        )));
    }
    rasterize(&p, geom.resolution, geom.antialias, out);
    let on = out.iter().any(|&v| v >= 1.0 - 1e-12) || (geom.antialias && out.iter().any(|&v| v > 0.0));
    let off = out.iter().any(|&v| v == 0.0);
    if !on || !off {
        return Err(Error::Construction(format!(
            "{} at factor tuple {t:?} is empty or fills the frame",
            shape.name()
        )));
    }
    Ok(())
}

fn render_grid(geom: &SpriteGeometry, shapes: &[Shape]) -> Result<Vec<f64>> {
    let [s, r, x, y] = geom.cardinalities;
    let pix = geom.resolution * geom.resolution;
    let mut images = vec![0.0; shapes.len() * s * r * x * y * pix];
    let mut chunks = images.chunks_exact_mut(pix);
    for &shape in shapes {
        for si in 0..s {
            for ri in 0..r {
                for xi in 0..x {
                    for yi in 0..y {
                        let out = chunks.next().expect("grid size");
                        render_shape(geom, shape, [si, ri, xi, yi], out)?;
                    }
                }
            }
        }
    }
    Ok(images)
}

const GEOMETRIC_FACTORS: [&str; 4] = ["scale", "rotation", "pos_x", "pos_y"];

/// Oval-only sprites over (scale, rotation, posX, posY).
pub fn make_oval_sprites(geom: SpriteGeometry) -> Result<FactorDataset> {
    geom.validate()?;
    let space = FactorSpace::new(&GEOMETRIC_FACTORS, &geom.cardinalities)?;
    let images = render_grid(&geom, &[Shape::Oval])?;
    FactorDataset::new("oval_sprites", space, geom.resolution, images)
}

/// Oval, square and triangle sprites with a leading discrete shape factor.
pub fn make_multishape_sprites(geom: SpriteGeometry) -> Result<FactorDataset> {
    geom.validate()?;
    let mut names = vec!["shape"];
    names.extend(GEOMETRIC_FACTORS);
    let mut cards = vec![3];
    cards.extend(geom.cardinalities);
    let space = FactorSpace::new(&names, &cards)?;
    let images = render_grid(&geom, &[Shape::Oval, Shape::Square, Shape::Triangle])?;
    FactorDataset::new("multishape_sprites", space, geom.resolution, images)
}

/// Observations from a linear map of discrete-grid factors plus noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianSet {
    /// `count × d_true`, each coordinate on the grid `{0, 1/9, …, 1}`.
    pub factors: Vec<Vec<f64>>,
    /// `count × d_obs`.
    pub observations: Vec<Vec<f64>>,
    /// `d_obs × d_true`.
    pub map: Vec<Vec<f64>>,
}

pub const LINEAR_GAUSSIAN_LEVELS: usize = 10;

pub fn make_linear_gaussian(
    d_true: usize,
    d_obs: usize,
    noise_std: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<LinearGaussianSet> {
    if d_true > d_obs {
        return Err(Error::Contract(format!("d_true {d_true} > d_obs {d_obs}")));
    }
    let map: Vec<Vec<f64>> = (0..d_obs)
        .map(|_| (0..d_true).map(|_| rng.normal()).collect())
        .collect();
    make_linear_gaussian_with_map(map, d_true, noise_std, count, rng)
}

pub fn make_linear_gaussian_with_map(
    map: Vec<Vec<f64>>,
    d_true: usize,
    noise_std: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<LinearGaussianSet> {
    if noise_std < 0.0 || map.iter().any(|row| row.len() != d_true) {
        return Err(Error::Contract("invalid linear-gaussian map or noise".into()));
    }
    let levels = (LINEAR_GAUSSIAN_LEVELS - 1) as f64;
    let mut factors = Vec::with_capacity(count);
    let mut observations = Vec::with_capacity(count);
    for _ in 0..count {
        let f: Vec<f64> = (0..d_true)
            .map(|_| rng.below(LINEAR_GAUSSIAN_LEVELS) as f64 / levels)
            .collect();
        let obs = map
            .iter()
            .map(|row| {
                let clean: f64 = row.iter().zip(&f).map(|(a, b)| a * b).sum();
                if noise_std > 0.0 {
                    clean + noise_std * rng.normal()
                } else {
                    clean
                }
            })
            .collect();
        factors.push(f);
        observations.push(obs);
    }
    Ok(LinearGaussianSet {
        factors,
        observations,
        map,
    })
}

/// Equal-width ten-bin discretization of continuous labels.
pub fn discretize_ten_bins(values: &[f64]) -> Vec<usize> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / 10.0;
    values
        .iter()
        .map(|&v| {
            if width > 0.0 {
                (((v - lo) / width) as usize).min(9)
            } else {
                0
            }
        })
        .collect()
}
