//! Paired training data: a synthetic rain generator and a PNG folder loader.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the additive rain-streak model. Ranges are inclusive
/// `[min, max]`; each streak draws its own values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainSynthSpec {
    pub streaks: [usize; 2],
    /// Tilt from vertical, degrees.
    pub angle_deg: [f64; 2],
    pub length: [f64; 2],
    /// Half-width of the streak profile, pixels.
    pub width: [f64; 2],
    pub intensity: [f64; 2],
    /// Coarsest value-noise cell size of the background, pixels.
    pub background_cell: usize,
}

impl Default for RainSynthSpec {
    fn default() -> Self {
        Self {
            streaks: [10, 20],
            angle_deg: [-15.0, 15.0],
            length: [6.0, 14.0],
            width: [0.6, 1.2],
            intensity: [0.1, 0.3],
            background_cell: 16,
        }
    }
}

impl RainSynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if self.streaks[0] > self.streaks[1]
            || !ordered(self.angle_deg)
            || !ordered(self.length)
            || !ordered(self.width)
            || !ordered(self.intensity)
        {
            return Err(Error::Config("rain spec ranges must be ordered [min, max]".into()));
        }
        if self.intensity[0] < 0.0 || self.width[0] <= 0.0 || self.length[0] < 0.0 || self.background_cell == 0 {
            return Err(Error::Config(
                "rain spec widths must be positive, intensities and lengths nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Smooth colour background in `[0.1, 0.9]`, `[1, 3, h, w]`.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let coarse = value_noise(rng, h, w, cell);
        let fine = value_noise(rng, h, w, (cell / 2).max(1));
        out.extend(coarse.iter().zip(&fine).map(|(c, f)| 0.1 + 0.8 * (0.7 * c + 0.3 * f)));
    }
    out
}

/// Additive rain layer (grey, shared by all channels), `h × w`, values ≥ 0.
fn rain_layer(rng: &mut ChaCha8Rng, spec: &RainSynthSpec, h: usize, w: usize) -> Vec<f64> {
    let mut layer = vec![0.0; h * w];
    let count = rng.gen_range(spec.streaks[0]..=spec.streaks[1]);
    for _ in 0..count {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let angle = uniform(rng, spec.angle_deg).to_radians();
        let half = 0.5 * uniform(rng, spec.length);
        let width = uniform(rng, spec.width);
        let intensity = uniform(rng, spec.intensity);
        let (dx, dy) = (angle.sin(), angle.cos());
        let reach = half + width + 1.0;
        let (y_lo, y_hi) = (
            (cy - reach).floor().max(0.0) as usize,
            ((cy + reach).ceil() as usize).min(h),
        );
        let (x_lo, x_hi) = (
            (cx - reach).floor().max(0.0) as usize,
            ((cx + reach).ceil() as usize).min(w),
        );
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = (px * dx + py * dy).clamp(-half, half);
                let dist = ((px - along * dx).powi(2) + (py - along * dy).powi(2)).sqrt();
                let profile = (1.0 - dist / width).max(0.0);
                layer[y * w + x] += intensity * profile;
            }
        }
    }
    layer
}

/// Clean background and its rain-degraded version, each `[1, 3, h, w]`.
/// Deterministic per `(spec, seed)`.
pub fn synth_rain_pair(spec: &RainSynthSpec, height: usize, width: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = background(&mut rng, height, width, spec.background_cell);
    let rain = rain_layer(&mut rng, spec, height, width);
    let hw = height * width;
    let degraded: Vec<f32> = clean
        .iter()
        .enumerate()
        .map(|(i, &c)| (c + rain[i % hw]).clamp(0.0, 1.0) as f32)
        .collect();
    let clean: Vec<f32> = clean.into_iter().map(|v| v as f32).collect();
    let shape = vec![1, 3, height, width];
    (
        Tensor::new(shape.clone(), degraded).expect("synthetic shape"),
        Tensor::new(shape, clean).expect("synthetic shape"),
    )
}

/// Decodes an 8- or 16-bit PNG into `[1, 3, h, w]` values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.into_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c];
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Writes the first image of `[n, 3, h, w]` as an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != 3 {
        return Err(Error::shape("write_png", format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.insert(name.to_string());
            }
        }
    }
    Ok(names)
}

/// Degraded/clean image pairs held in memory.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub names: Vec<String>,
    pub degraded: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
}

impl PairDataset {
    /// `count` synthetic pairs; pair `i` uses seed `seed + i`.
    pub fn synthetic(spec: &RainSynthSpec, count: usize, height: usize, width: usize, seed: u64) -> Self {
        let (degraded, clean) = (0..count)
            .map(|i| synth_rain_pair(spec, height, width, seed.wrapping_add(i as u64)))
            .unzip();
        Self {
            names: (0..count).map(|i| format!("synth_{i:04}")).collect(),
            degraded,
            clean,
        }
    }

    /// Pairs PNG files with identical names in the two directories.
    pub fn load(dir_degraded: &Path, dir_clean: &Path) -> Result<Self> {
        let deg = png_names(dir_degraded)?;
        let clean = png_names(dir_clean)?;
        if deg.is_empty() && clean.is_empty() {
            return Err(Error::Dataset(format!("no PNG images in {}", dir_degraded.display())));
        }
        if let Some(name) = deg.symmetric_difference(&clean).next() {
            return Err(Error::Dataset(format!(
                "{name} has no counterpart in the other directory"
            )));
        }
        let mut out = Self {
            names: Vec::new(),
            degraded: Vec::new(),
            clean: Vec::new(),
        };
        for name in deg {
            let d = read_png(&dir_degraded.join(&name))?;
            let c = read_png(&dir_clean.join(&name))?;
            if d.shape() != c.shape() {
                return Err(Error::Dataset(format!(
                    "{name}: sizes differ ({:?} vs {:?})",
                    d.shape(),
                    c.shape()
                )));
            }
            out.names.push(name);
            out.degraded.push(d);
            out.clean.push(c);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Random `patch × patch` crop of pair `index`, optionally flipped horizontally.
    pub fn sample(
        &self,
        index: usize,
        patch: usize,
        flip: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (_, _, h, w) = self.degraded[index].dims4()?;
        if h < patch || w < patch {
            return Err(Error::Dataset(format!(
                "{} is {h}x{w}, smaller than the {patch}x{patch} patch",
                self.names[index]
            )));
        }
        let y0 = rng.gen_range(0..=h - patch);
        let x0 = rng.gen_range(0..=w - patch);
        let mirror = flip && rng.gen::<bool>();
        let crop = |t: &Tensor<f32>| {
            let d = t.data();
            Tensor::from_fn(vec![1, 3, patch, patch], |i| {
                let (c, y, x) = (i / (patch * patch), (i / patch) % patch, i % patch);
                let sx = if mirror { patch - 1 - x } else { x };
                d[(c * h + y0 + y) * w + x0 + sx]
            })
        };
        Ok((crop(&self.degraded[index]), crop(&self.clean[index])))
    }

    /// Stacks samples of the given indices into `[len, 3, patch, patch]` pairs.
    pub fn batch(
        &self,
        indices: &[usize],
        patch: usize,
        flip: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut degraded = Vec::with_capacity(indices.len());
        let mut clean = Vec::with_capacity(indices.len());
        for &i in indices {
            let (d, c) = self.sample(i, patch, flip, rng)?;
            degraded.push(d);
            clean.push(c);
        }
        Ok((Tensor::stack_batch(&degraded)?, Tensor::stack_batch(&clean)?))
    }

    /// Whole images stacked, for evaluation; all pairs must share one size.
    pub fn full_batch(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((Tensor::stack_batch(&self.degraded)?, Tensor::stack_batch(&self.clean)?))
    }
}

/// Source of training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: RainSynthSpec,
        count: usize,
        /// Generated image side; defaults to the training patch.
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    Folders {
        degraded: PathBuf,
        clean: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            spec: RainSynthSpec::default(),
            count: 8,
            size: None,
            seed: 0,
        }
    }
}

impl DataSource {
    pub fn load(&self, patch: usize) -> Result<PairDataset> {
        match self {
            Self::Synthetic {
                spec,
                count,
                size,
                seed,
            } => {
                spec.validate()?;
                if *count == 0 {
                    return Err(Error::Dataset("synthetic dataset with zero pairs".into()));
                }
                let side = size.unwrap_or(patch);
                Ok(PairDataset::synthetic(spec, *count, side, side, *seed))
            }
            Self::Folders { degraded, clean } => PairDataset::load(degraded, clean),
        }
    }
}
