//! On-disk dataset layout.
//!
//! Each split `<name>` is stored as `<name>.img` and `<name>.mask` next to a
//! `manifest.txt`.
//!
//! `.img` header (little endian, 24 bytes): magic `CXRI`, version `u32`,
//! count `u32`, size `u32`, channels `u32`, dtype `u32` (1 = u8). Then one
//! row-major `channels×size×size` block of bytes per sample; pixel value is
//! `byte / 255`.
//!
//! `.mask` header (16 bytes): magic `CXRM`, version, count, size. Then one
//! block of `ceil(size²/8)` bytes per sample holding the confounder mask,
//! row-major, least significant bit first.
//!
//! The manifest is line-oriented text: a version line, `spec key=value` (benchmark settings)
//! lines, one `split` line per split with sizes, checksums and label counts,
//! then one `sample` line per sample.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{generate_split, BBox, BenchmarkSpec, Confounder, ConfounderKind, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const IMG_MAGIC: &[u8; 4] = b"CXRI";
const MASK_MAGIC: &[u8; 4] = b"CXRM";
const FORMAT_VERSION: u32 = 1;
const IMG_HEADER: usize = 24;
const MASK_HEADER: usize = 16;
const MANIFEST_HEADER: &str = "causal-cxr dataset v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub labels: Vec<u8>,
    pub artifacts: Vec<bool>,
    pub boxes: Vec<(usize, BBox)>,
    pub pixel_offset: u64,
    pub mask_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitInfo {
    pub split: Split,
    pub count: usize,
    pub img_sha256: String,
    pub mask_sha256: String,
    pub label_counts: Vec<usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub spec: BenchmarkSpec,
    pub splits: Vec<SplitInfo>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Result<&SplitInfo> {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .ok_or_else(|| Error::Manifest(format!("manifest has no {} split", split.as_str())))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Spec(format!("bad {what} entry {t:?}"))))
        .collect()
}

impl BenchmarkSpec {
    /// `(key, value)` pairs in a fixed order; `set` accepts every key.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let co = self.cooccurrence.iter().map(|r| fmt_list(r)).collect::<Vec<_>>().join(";");
        let conf = if self.confounders.is_empty() {
            "none".to_string()
        } else {
            self.confounders
                .iter()
                .map(|c| format!("{}:{}", c.kind.as_str(), c.class))
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("image_size", self.image_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("train_size", self.train_size.to_string()),
            ("val_size", self.val_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("rho_train", self.rho_train.to_string()),
            ("rho_test", self.rho_test.to_string()),
            ("class_frequencies", fmt_list(&self.class_frequencies)),
            ("cooccurrence", co),
            ("confounders", conf),
            ("noise_level", self.noise_level.to_string()),
            ("pattern_contrast", self.pattern_contrast.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from text. Returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Spec(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "train_size" => self.train_size = num(key, value)?,
            "val_size" => self.val_size = num(key, value)?,
            "test_size" => self.test_size = num(key, value)?,
            "rho_train" => self.rho_train = num(key, value)?,
            "rho_test" => self.rho_test = num(key, value)?,
            "noise_level" => self.noise_level = num(key, value)?,
            "pattern_contrast" => self.pattern_contrast = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "class_frequencies" => self.class_frequencies = parse_list(value, key)?,
            "cooccurrence" => {
                self.cooccurrence = value
                    .split(';')
                    .map(|row| parse_list(row, key))
                    .collect::<Result<_>>()?
            }
            "confounders" => {
                self.confounders = if value.trim() == "none" || value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|item| {
                            let (kind, class) = item
                                .trim()
                                .split_once(':')
                                .ok_or_else(|| Error::Spec(format!("confounder {item:?} is not kind:class")))?;
                            Ok(Confounder {
                                kind: ConfounderKind::parse(kind)?,
                                class: num("confounders", class)?,
                            })
                        })
                        .collect::<Result<_>>()?
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn img_bytes(size: usize, samples: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMG_HEADER + samples.len() * size * size);
    out.extend_from_slice(IMG_MAGIC);
    for v in [FORMAT_VERSION, samples.len() as u32, size as u32, 1, 1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        out.extend(s.pixels.data().iter().map(|v| (v * 255.0).round() as u8));
    }
    out
}

fn mask_block(size: usize) -> usize {
    (size * size).div_ceil(8)
}

fn mask_bytes(size: usize, samples: &[LabeledImage]) -> Vec<u8> {
    let block = mask_block(size);
    let mut out = Vec::with_capacity(MASK_HEADER + samples.len() * block);
    out.extend_from_slice(MASK_MAGIC);
    for v in [FORMAT_VERSION, samples.len() as u32, size as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        let mut bits = vec![0u8; block];
        for (i, _) in s.confounder_mask.iter().enumerate().filter(|(_, &m)| m) {
            bits[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
    }
    out
}

fn fmt_boxes(boxes: &[(usize, BBox)]) -> String {
    if boxes.is_empty() {
        return "-".into();
    }
    boxes
        .iter()
        .map(|(k, b)| format!("{k}:{},{},{},{}", b.x0, b.y0, b.x1, b.y1))
        .collect::<Vec<_>>()
        .join(";")
}

fn bits(v: impl Iterator<Item = bool>) -> String {
    let s: String = v.map(|b| if b { '1' } else { '0' }).collect();
    if s.is_empty() {
        "-".into()
    } else {
        s
    }
}

/// Generates every split of `spec` and writes it under `dir`.
pub fn generate_dataset(spec: &BenchmarkSpec, dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    let size = spec.image_size;
    let mut splits = Vec::new();
    let mut blobs = Vec::new();
    for split in Split::ALL {
        let samples = generate_split(spec, split)?;
        let img = img_bytes(size, &samples);
        let mask = mask_bytes(size, &samples);
        let mut label_counts = vec![0usize; spec.num_classes];
        for s in &samples {
            for (c, &l) in label_counts.iter_mut().zip(&s.labels) {
                *c += l as usize;
            }
        }
        let records = samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleRecord {
                labels: s.labels.clone(),
                artifacts: s.artifacts.clone(),
                boxes: s.causal_boxes.clone(),
                pixel_offset: (IMG_HEADER + i * size * size) as u64,
                mask_offset: (MASK_HEADER + i * mask_block(size)) as u64,
            })
            .collect();
        splits.push(SplitInfo {
            split,
            count: samples.len(),
            img_sha256: sha256_hex(&img),
            mask_sha256: sha256_hex(&mask),
            label_counts,
            samples: records,
        });
        blobs.push((split, img, mask));
    }
    let manifest = DatasetManifest { spec: spec.clone(), splits };
    fs::create_dir_all(dir)?;
    for (split, img, mask) in blobs {
        fs::write(dir.join(format!("{}.img", split.as_str())), img)?;
        fs::write(dir.join(format!("{}.mask", split.as_str())), mask)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(Dataset { dir: dir.to_path_buf(), manifest })
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MANIFEST_HEADER}").unwrap();
        for (k, v) in self.spec.to_pairs() {
            writeln!(out, "spec {k}={v}").unwrap();
        }
        for s in &self.splits {
            writeln!(
                out,
                "split {} count={} img={}.img img_sha256={} mask={}.mask mask_sha256={} label_counts={}",
                s.split.as_str(),
                s.count,
                s.split.as_str(),
                s.img_sha256,
                s.split.as_str(),
                s.mask_sha256,
                fmt_list(&s.label_counts)
            )
            .unwrap();
        }
        for s in &self.splits {
            for (i, r) in s.samples.iter().enumerate() {
                writeln!(
                    out,
                    "sample {} {i} labels={} artifacts={} pixel_offset={} mask_offset={} boxes={}",
                    s.split.as_str(),
                    bits(r.labels.iter().map(|&l| l == 1)),
                    bits(r.artifacts.iter().copied()),
                    r.pixel_offset,
                    r.mask_offset,
                    fmt_boxes(&r.boxes)
                )
                .unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Manifest(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            _ => return Err(err(1, format!("expected {MANIFEST_HEADER:?}"))),
        }
        let mut spec = BenchmarkSpec::default();
        let mut splits: Vec<SplitInfo> = Vec::new();
        for (n, line) in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| err(n, "missing record type".into()))?;
            match kind {
                "spec" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| err(n, "expected key=value".into()))?;
                    if !spec.set(k, v).map_err(|e| err(n, e.to_string()))? {
                        return Err(err(n, format!("unknown spec key {k}")));
                    }
                }
                "split" => {
                    let mut parts = rest.split(' ');
                    let name = parts.next().unwrap_or_default();
                    let kv: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
                    let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(n, format!("split line lacks {k}")));
                    splits.push(SplitInfo {
                        split: Split::parse(name)?,
                        count: get("count")?.parse().map_err(|_| err(n, "bad count".into()))?,
                        img_sha256: get("img_sha256")?.to_string(),
                        mask_sha256: get("mask_sha256")?.to_string(),
                        label_counts: parse_list(get("label_counts")?, "label_counts").map_err(|e| err(n, e.to_string()))?,
                        samples: Vec::new(),
                    });
                }
                "sample" => {
                    let mut parts = rest.split(' ');
                    let split = Split::parse(parts.next().unwrap_or_default())?;
                    let index: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(n, "bad sample index".into()))?;
                    let kv: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
                    let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(n, format!("sample line lacks {k}")));
                    let flags = |s: &str| -> Vec<bool> {
                        if s == "-" {
                            Vec::new()
                        } else {
                            s.chars().map(|c| c == '1').collect()
                        }
                    };
                    let boxes = parse_boxes(get("boxes")?).ok_or_else(|| err(n, "bad boxes".into()))?;
                    let info = splits
                        .iter_mut()
                        .find(|s| s.split == split)
                        .ok_or_else(|| err(n, "sample before its split line".into()))?;
                    if index != info.samples.len() {
                        return Err(err(n, format!("sample {index} out of order")));
                    }
                    info.samples.push(SampleRecord {
                        labels: flags(get("labels")?).into_iter().map(u8::from).collect(),
                        artifacts: flags(get("artifacts")?),
                        boxes,
                        pixel_offset: get("pixel_offset")?.parse().map_err(|_| err(n, "bad offset".into()))?,
                        mask_offset: get("mask_offset")?.parse().map_err(|_| err(n, "bad offset".into()))?,
                    });
                }
                other => return Err(err(n, format!("unknown record {other}"))),
            }
        }
        for s in &splits {
            if s.samples.len() != s.count {
                return Err(Error::Manifest(format!(
                    "{} split lists {} samples but declares {}",
                    s.split.as_str(),
                    s.samples.len(),
                    s.count
                )));
            }
        }
        Ok(Self { spec, splits })
    }
}

fn parse_boxes(s: &str) -> Option<Vec<(usize, BBox)>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split(';')
        .map(|item| {
            let (k, coords) = item.split_once(':')?;
            let c: Vec<usize> = coords.split(',').map(|v| v.parse().ok()).collect::<Option<_>>()?;
            if c.len() != 4 {
                return None;
            }
            Some((k.parse().ok()?, BBox { x0: c[0], y0: c[1], x1: c[2], y1: c[3] }))
        })
        .collect()
}

/// A dataset directory with a parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self { dir: dir.to_path_buf(), manifest: DatasetManifest::parse(&text)? })
    }

    /// Hex sha256 of the manifest file as written.
    pub fn manifest_sha256(&self) -> Result<String> {
        Ok(sha256_hex(&fs::read(self.dir.join(MANIFEST_FILE))?))
    }

    pub fn spec(&self) -> &BenchmarkSpec {
        &self.manifest.spec
    }

    fn read_checked(&self, file: &str, expected: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let actual = sha256_hex(&bytes);
        if actual != expected {
            return Err(Error::Corruption(format!("{file}: checksum {actual} does not match manifest {expected}")));
        }
        Ok(bytes)
    }

    /// All samples of `split` in manifest order, after checksum verification.
    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledImage>> {
        let info = self.manifest.split(split)?;
        let size = self.spec().image_size;
        let img = self.read_checked(&format!("{}.img", split.as_str()), &info.img_sha256)?;
        let mask = self.read_checked(&format!("{}.mask", split.as_str()), &info.mask_sha256)?;
        check_header(&img, IMG_MAGIC, info.count, size)?;
        check_header(&mask, MASK_MAGIC, info.count, size)?;
        let block = mask_block(size);
        info.samples
            .iter()
            .map(|r| {
                let p = r.pixel_offset as usize;
                let m = r.mask_offset as usize;
                let px = img
                    .get(p..p + size * size)
                    .ok_or_else(|| Error::Corruption("pixel block past end of file".into()))?;
                let mb = mask
                    .get(m..m + block)
                    .ok_or_else(|| Error::Corruption("mask block past end of file".into()))?;
                Ok(LabeledImage {
                    pixels: Tensor::new(vec![1, size, size], px.iter().map(|&b| b as f64 / 255.0).collect())?,
                    labels: r.labels.clone(),
                    artifacts: r.artifacts.clone(),
                    confounder_mask: (0..size * size).map(|i| mb[i / 8] >> (i % 8) & 1 == 1).collect(),
                    causal_boxes: r.boxes.clone(),
                })
            })
            .collect()
    }

    pub fn load_sample(&self, split: Split, index: usize) -> Result<LabeledImage> {
        let count = self.manifest.split(split)?.count;
        if index >= count {
            return Err(Error::Manifest(format!("index {index} out of range for {} split of {count}", split.as_str())));
        }
        Ok(self.load_split(split)?.swap_remove(index))
    }
}

fn check_header(bytes: &[u8], magic: &[u8; 4], count: usize, size: usize) -> Result<()> {
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if bytes.len() < MASK_HEADER || &bytes[..4] != magic {
        return Err(Error::Corruption("bad magic".into()));
    }
    if word(0) != FORMAT_VERSION || word(1) as usize != count || word(2) as usize != size {
        return Err(Error::Corruption(format!(
            "header (version {}, count {}, size {}) disagrees with manifest",
            word(0),
            word(1),
            word(2)
        )));
    }
    Ok(())
}
