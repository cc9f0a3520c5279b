//! Deterministic generator of a confounded multi-label image benchmark.
//!
//! Each active class stamps its own pattern somewhere in the image. Each
//! configured confounder artifact is coupled to one label: with probability
//! `rho` it is present exactly when that label is active, otherwise its
//! presence is a fair coin. Train and validation splits use `rho_train`, the
//! test split uses `rho_test`.

mod io;
pub mod patterns;

pub use io::{generate_dataset, Dataset, DatasetManifest, SampleRecord, SplitInfo, MANIFEST_FILE};
pub use patterns::BBox;

use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{indexed, Stream};
use patterns::{class_template, glyph_template, MAX_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfounderKind {
    /// Fixed bitmap letter in the top-left corner.
    Glyph,
    /// A random margin band along one edge is zeroed.
    BorderCrop,
    /// Bright rectangle with a thin wire running to the image edge.
    Device,
}

impl ConfounderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Glyph => "glyph",
            Self::BorderCrop => "border_crop",
            Self::Device => "device",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "glyph" => Ok(Self::Glyph),
            "border_crop" => Ok(Self::BorderCrop),
            "device" => Ok(Self::Device),
            other => Err(Error::Spec(format!("unknown confounder kind {other}"))),
        }
    }
}

/// A confounder artifact and the label it is coupled to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confounder {
    pub kind: ConfounderKind,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Manifest(format!("unknown split {other}"))),
        }
    }

    fn counter_base(self) -> u32 {
        match self {
            Self::Train => 0,
            Self::Val => 0x4000_0000,
            Self::Test => 0x8000_0000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    /// Symmetric `C×C` matrix. Off-diagonal `m[i][j] > 0` (with `i < j`) makes
    /// class `i` drive class `j`: `P(j | i) = m[i][j]` while `P(j)` stays at its
    /// class frequency. Zero means uncoupled; the diagonal is 1 by convention.
    pub cooccurrence: Vec<Vec<f64>>,
    pub class_frequencies: Vec<f64>,
    /// Empty means no confounders.
    pub confounders: Vec<Confounder>,
    pub noise_level: f64,
    /// Intensity of class patterns above the background level.
    pub pattern_contrast: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let c = 4;
        let mut co = identity(c);
        co[0][2] = 0.6;
        co[2][0] = 0.6;
        Self {
            image_size: 64,
            num_classes: c,
            train_size: 2000,
            val_size: 500,
            test_size: 1000,
            rho_train: 0.9,
            rho_test: 0.0,
            cooccurrence: co,
            class_frequencies: vec![0.3, 0.5, 0.3, 0.3],
            confounders: vec![Confounder {
                kind: ConfounderKind::Glyph,
                class: 1,
            }],
            noise_level: 0.1,
            pattern_contrast: 0.15,
            seed: 0,
        }
    }
}

pub fn identity(c: usize) -> Vec<Vec<f64>> {
    (0..c).map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

const BACKGROUND: f64 = 0.1;
const ARTIFACT: f64 = 1.0;

impl BenchmarkSpec {
    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
        }
    }

    pub fn rho(&self, split: Split) -> f64 {
        match split {
            Split::Test => self.rho_test,
            _ => self.rho_train,
        }
    }

    /// `(driver, follower, P(follower | driver))` for every coupled pair.
    pub fn couplings(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.num_classes {
            for j in i + 1..self.num_classes {
                if self.cooccurrence[i][j] > 0.0 {
                    out.push((i, j, self.cooccurrence[i][j]));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        let c = self.num_classes;
        if c == 0 || c > MAX_CLASSES {
            return bad(format!("num_classes must be in 1..={MAX_CLASSES}, got {c}"));
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return bad(format!("image_size must be a multiple of 8 and at least 32, got {}", self.image_size));
        }
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("{name} = {rho} outside [0, 1]"));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be non-negative, got {}", self.noise_level));
        }
        if !(self.pattern_contrast > 0.0 && BACKGROUND + self.pattern_contrast <= 1.0) {
            return bad(format!("pattern_contrast must lie in (0, {}]", 1.0 - BACKGROUND));
        }
        if self.class_frequencies.len() != c {
            return bad(format!("{} class frequencies for {c} classes", self.class_frequencies.len()));
        }
        if let Some(f) = self.class_frequencies.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad(format!("class frequency {f} outside [0, 1]"));
        }
        if self.cooccurrence.len() != c || self.cooccurrence.iter().any(|r| r.len() != c) {
            return bad(format!("cooccurrence must be {c}x{c}"));
        }
        for i in 0..c {
            if self.cooccurrence[i][i] != 1.0 {
                return bad(format!("cooccurrence diagonal ({i},{i}) must be 1"));
            }
            for j in 0..c {
                let v = self.cooccurrence[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("cooccurrence ({i},{j}) = {v} outside [0, 1]"));
                }
                if v != self.cooccurrence[j][i] {
                    return bad(format!("cooccurrence is not symmetric at ({i},{j})"));
                }
            }
        }
        let mut driver = vec![None; c];
        for (i, j, p) in self.couplings() {
            if let Some(prev) = driver[j] {
                return bad(format!("class {j} is coupled to both class {prev} and class {i}; at most one lower-index partner is allowed"));
            }
            driver[j] = Some(i);
            let (fi, fj) = (self.class_frequencies[i], self.class_frequencies[j]);
            if fi * p > fj + 1e-12 {
                return bad(format!(
                    "cooccurrence mass f[{i}]·m[{i}][{j}] = {:.4} exceeds class frequency f[{j}] = {fj}",
                    fi * p
                ));
            }
            if fi < 1.0 && fj - fi * p > 1.0 - fi + 1e-12 {
                return bad(format!(
                    "class {j} needs P({j} | not {i}) = {:.4} > 1",
                    (fj - fi * p) / (1.0 - fi)
                ));
            }
            if fi == 1.0 && (p - fj).abs() > 1e-12 {
                return bad(format!("class {i} is always active, so m[{i}][{j}] must equal f[{j}]"));
            }
        }
        let mut seen = Vec::new();
        for conf in &self.confounders {
            if conf.class >= c {
                return bad(format!("confounder {} coupled to missing class {}", conf.kind.as_str(), conf.class));
            }
            if seen.contains(&conf.kind) {
                return bad(format!("confounder {} listed twice", conf.kind.as_str()));
            }
            seen.push(conf.kind);
        }
        Ok(())
    }
}

/// One generated sample with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[1, S, S]`, values are multiples of 1/255 in `[0, 1]`.
    pub pixels: Tensor,
    pub labels: Vec<u8>,
    /// Presence of each configured confounder, in configuration order.
    pub artifacts: Vec<bool>,
    /// Row-major `S×S` mask of planted artifact pixels.
    pub confounder_mask: Vec<bool>,
    /// `(class, box)` for every active class.
    pub causal_boxes: Vec<(usize, BBox)>,
}

impl LabeledImage {
    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

fn draw_labels(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let c = spec.num_classes;
    let mut driver = vec![None; c];
    for (i, j, p) in spec.couplings() {
        driver[j] = Some((i, p));
    }
    let mut labels = vec![0u8; c];
    for j in 0..c {
        let fj = spec.class_frequencies[j];
        let p = match driver[j] {
            None => fj,
            Some((i, m)) if labels[i] == 1 => m,
            Some((i, m)) => {
                let fi = spec.class_frequencies[i];
                ((fj - fi * m) / (1.0 - fi)).clamp(0.0, 1.0)
            }
        };
        labels[j] = u8::from(rng.gen::<f64>() < p);
    }
    labels
}

fn stamp(img: &mut [f64], size: usize, x0: usize, y0: usize, w: usize, h: usize, mask: &[bool], value: f64) {
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                img[(y0 + y) * size + x0 + x] = value;
            }
        }
    }
}

fn mark(region: &mut [bool], size: usize, b: &BBox) {
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            region[y * size + x] = true;
        }
    }
}

fn plant_device(img: &mut [f64], mask: &mut [bool], size: usize, rng: &mut ChaCha8Rng) {
    let s = size / 64;
    let (w, h) = (10 * s.max(1), 6 * s.max(1));
    let x0 = rng.gen_range(size / 8..size - w - size / 8);
    let y0 = rng.gen_range(size / 8..size - h - size / 8);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            img[y * size + x] = ARTIFACT;
            mask[y * size + x] = true;
        }
    }
    // Wire: straight down from the rectangle to a random row, then sideways
    // to the nearest vertical edge.
    let wx = x0 + w / 2;
    let turn = rng.gen_range(y0 + h..size);
    for y in y0 + h..=turn.min(size - 1) {
        img[y * size + wx] = ARTIFACT;
        mask[y * size + wx] = true;
    }
    let row = turn.min(size - 1);
    let xs: Box<dyn Iterator<Item = usize>> = if wx < size / 2 { Box::new(0..wx) } else { Box::new(wx..size) };
    for x in xs {
        img[row * size + x] = ARTIFACT;
        mask[row * size + x] = true;
    }
}

/// Band along one edge that gets zeroed; returns it as a box.
fn crop_band(size: usize, rng: &mut ChaCha8Rng) -> BBox {
    let width = rng.gen_range(size / 16..=size / 6);
    match rng.gen_range(0..4) {
        0 => BBox { x0: 0, y0: 0, x1: size, y1: width },
        1 => BBox { x0: 0, y0: size - width, x1: size, y1: size },
        2 => BBox { x0: 0, y0: 0, x1: width, y1: size },
        _ => BBox { x0: size - width, y0: 0, x1: size, y1: size },
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    size: usize,
    w: usize,
    h: usize,
    area: BBox,
    taken: &[BBox],
    blocked: &[bool],
) -> Option<BBox> {
    if area.width() < w || area.height() < h {
        return None;
    }
    for _ in 0..2000 {
        let x0 = rng.gen_range(area.x0..=area.x1 - w);
        let y0 = rng.gen_range(area.y0..=area.y1 - h);
        let b = BBox { x0, y0, x1: x0 + w, y1: y0 + h };
        if taken.iter().any(|t| t.intersects(&b, 2)) {
            continue;
        }
        let grown = BBox {
            x0: x0.saturating_sub(1),
            y0: y0.saturating_sub(1),
            x1: (x0 + w + 1).min(size),
            y1: (y0 + h + 1).min(size),
        };
        let clear = (grown.y0..grown.y1).all(|y| (grown.x0..grown.x1).all(|x| !blocked[y * size + x]));
        if clear {
            return Some(b);
        }
    }
    None
}

/// Generates sample `index` of `split`. Depends only on `(spec, split, index)`.
pub fn generate_sample(spec: &BenchmarkSpec, split: Split, index: usize) -> Result<LabeledImage> {
    let size = spec.image_size;
    let mut rng = indexed(spec.seed, Stream::Data, split.counter_base() + index as u32);
    let labels = draw_labels(spec, &mut rng);
    let rho = spec.rho(split);
    let artifacts: Vec<bool> = spec
        .confounders
        .iter()
        .map(|conf| {
            if rng.gen::<f64>() < rho {
                labels[conf.class] == 1
            } else {
                rng.gen::<bool>()
            }
        })
        .collect();

    let mut img = vec![BACKGROUND; size * size];
    let mut mask = vec![false; size * size];
    let mut crop = None;
    for (conf, &present) in spec.confounders.iter().zip(&artifacts) {
        if !present {
            continue;
        }
        match conf.kind {
            ConfounderKind::Glyph => {
                let (w, h, m) = glyph_template(size);
                let off = 3 * (size / 64).max(1);
                stamp(&mut img, size, off, off, w, h, &m, ARTIFACT);
                for y in 0..h {
                    for x in 0..w {
                        if m[y * w + x] {
                            mask[(off + y) * size + off + x] = true;
                        }
                    }
                }
            }
            ConfounderKind::Device => plant_device(&mut img, &mut mask, size, &mut rng),
            ConfounderKind::BorderCrop => {
                let band = crop_band(size, &mut rng);
                mark(&mut mask, size, &band);
                crop = Some(band);
            }
        }
    }

    // The glyph corner is reserved whether or not the glyph is drawn, so the
    // pattern layout carries no information about artifact presence.
    let mut blocked = mask.clone();
    if spec.confounders.iter().any(|c| c.kind == ConfounderKind::Glyph) {
        let (w, h, _) = glyph_template(size);
        let off = 3 * (size / 64).max(1);
        mark(&mut blocked, size, &BBox { x0: 0, y0: 0, x1: off + w + 1, y1: off + h + 1 });
    }
    let full = BBox { x0: 0, y0: 0, x1: size, y1: size };
    let mut boxes: Vec<(usize, BBox)> = Vec::new();
    for k in (0..spec.num_classes).filter(|&k| labels[k] == 1) {
        let (w, h, m) = class_template(k, size);
        let area = if k == 0 {
            let half = size / 2;
            let (qx, qy) = (rng.gen_range(0..2) * half, rng.gen_range(0..2) * half);
            BBox { x0: qx, y0: qy, x1: qx + half, y1: qy + half }
        } else {
            full
        };
        let taken: Vec<BBox> = boxes.iter().map(|(_, b)| *b).collect();
        let b = place(&mut rng, size, w, h, area, &taken, &blocked)
            .or_else(|| place(&mut rng, size, w, h, full, &taken, &blocked))
            .ok_or_else(|| Error::Spec(format!("could not place the class-{k} pattern in a {size}px image")))?;
        stamp(&mut img, size, b.x0, b.y0, w, h, &m, BACKGROUND + spec.pattern_contrast);
        boxes.push((k, b));
    }

    if spec.noise_level > 0.0 {
        for v in img.iter_mut() {
            *v += spec.noise_level * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if let Some(band) = crop {
        for y in band.y0..band.y1 {
            for x in band.x0..band.x1 {
                img[y * size + x] = 0.0;
            }
        }
    }
    let pixels = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Ok(LabeledImage {
        pixels: Tensor::new(vec![1, size, size], pixels)?,
        labels,
        artifacts,
        confounder_mask: mask,
        causal_boxes: boxes,
    })
}

pub fn generate_split(spec: &BenchmarkSpec, split: Split) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    (0..spec.split_size(split)).map(|i| generate_sample(spec, split, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            train_size: 50,
            val_size: 10,
            test_size: 20,
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        BenchmarkSpec::default().validate().unwrap();
    }

    #[test]
    fn rejects_excess_cooccurrence_mass() {
        let mut s = small();
        s.class_frequencies = vec![0.8, 0.5, 0.2, 0.3];
        s.cooccurrence[0][2] = 0.9;
        s.cooccurrence[2][0] = 0.9;
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("cooccurrence mass"), "{msg}");
    }

    #[test]
    fn rejects_asymmetric_and_out_of_range() {
        let mut s = small();
        s.cooccurrence[1][3] = 0.5;
        assert!(s.validate().is_err());
        let mut s = small();
        s.rho_train = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn masks_and_boxes_are_disjoint() {
        let mut s = small();
        s.confounders = vec![
            Confounder { kind: ConfounderKind::Glyph, class: 1 },
            Confounder { kind: ConfounderKind::Device, class: 2 },
            Confounder { kind: ConfounderKind::BorderCrop, class: 3 },
        ];
        s.rho_train = 0.5;
        for img in generate_split(&s, Split::Train).unwrap() {
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for (_, b) in &img.causal_boxes {
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        assert!(!img.confounder_mask[y * 64 + x]);
                    }
                }
            }
            let active: Vec<usize> = (0..4).filter(|&k| img.labels[k] == 1).collect();
            let boxed: Vec<usize> = img.causal_boxes.iter().map(|(k, _)| *k).collect();
            assert_eq!(active, boxed);
        }
    }

    #[test]
    fn rho_one_is_exact_coupling() {
        let mut s = small();
        s.rho_train = 1.0;
        for img in generate_split(&s, Split::Train).unwrap() {
            assert_eq!(img.artifacts[0], img.labels[1] == 1);
        }
    }

    #[test]
    fn samples_are_reproducible() {
        let s = small();
        assert_eq!(generate_sample(&s, Split::Val, 3).unwrap(), generate_sample(&s, Split::Val, 3).unwrap());
        assert_ne!(generate_sample(&s, Split::Val, 3).unwrap(), generate_sample(&s, Split::Test, 3).unwrap());
    }
}
