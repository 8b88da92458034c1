use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::analysis::{delta_sup_from_g, CurveSet};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, ModelWeights};
use crate::precision::PrecisionProfile;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Flattened images in `[0, 1]` with zero-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            width: self.width,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let chunk = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Truncated { path: path.to_path_buf(), needed: at + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

/// Parses a big-endian IDX image/label pair. Pixels map to `p / 255`.
/// `limit` truncates to the first `limit` samples.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img = read_all(images)?;
    let lab = read_all(labels)?;
    check_magic(&img, IMAGE_MAGIC, images)?;
    check_magic(&lab, LABEL_MAGIC, labels)?;

    let n_img = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let n_lab = be_u32(&lab, 4, labels)? as usize;
    if n_img != n_lab {
        return Err(Error::CountMismatch { images: n_img, labels: n_lab });
    }
    let width = rows * cols;
    let n = limit.map_or(n_img, |l| l.min(n_img));

    let img_needed = 16 + n_img * width;
    if img.len() < img_needed {
        return Err(Error::Truncated { path: images.to_path_buf(), needed: img_needed, found: img.len() });
    }
    let lab_needed = 8 + n_lab;
    if lab.len() < lab_needed {
        return Err(Error::Truncated { path: labels.to_path_buf(), needed: lab_needed, found: lab.len() });
    }

    let pixels = &img[16..16 + n * width];
    let images_out: Vec<Vec<f32>> = if width == 0 {
        vec![Vec::new(); n]
    } else {
        pixels.chunks(width).map(|c| c.iter().map(|&p| p as f32 / 255.0).collect()).collect()
    };
    let labels_out: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels_out.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    Ok(Dataset {
        name: images.file_name().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned()),
        images: images_out,
        labels: labels_out,
        classes,
        width,
    })
}

/// Standard file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

pub fn load_mnist(dir: &Path, train: bool, limit: Option<usize>) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, train);
    let mut ds = load_idx(&images, &labels, limit)?;
    ds.name = format!("mnist-{}", if train { "train" } else { "test" });
    ds.classes = 10;
    Ok(ds)
}

/// Standard deviation of every blob, per coordinate.
pub const BLOB_SIGMA: f64 = 0.1;

/// Seeded Gaussian clusters clipped to `[0, 1]^d`, `per_class` samples per
/// class, interleaved by class.
///
/// Classes sit in pairs on opposite sides of the cube centre along one axis:
/// class `k` has centre `0.5 ± separation·σ` on axis `(k / 2) mod d`, so for
/// two classes each centre lies `separation` standard deviations from the
/// separating hyperplane.
pub fn synth_blobs(seed: u64, classes: usize, per_class: usize, dim: usize, separation: f64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::TooFewClasses { needed: 2, got: classes });
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::InvalidConfig("blobs need at least one sample and one dimension".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidConfig("separation must be finite and non-negative".into()));
    }
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut c = vec![0.5; dim];
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            c[(k / 2) % dim] += sign * separation * BLOB_SIGMA;
            c
        })
        .collect();
    let noise = Normal::new(0.0, BLOB_SIGMA).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (k, centre) in centres.iter().enumerate() {
            images.push(centre.iter().map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect());
            labels.push(k);
        }
    }
    Ok(Dataset { name: format!("blobs-{classes}x{per_class}-d{dim}"), images, labels, classes, width: dim })
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_report<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(payload).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_all(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub const CURVE_HEADER: &str = "t,g,delta_sup_16,delta_sup_32,delta_sup_64,t_star_marker";

/// One row per distinct `t` across all profile curves. The marker column lists
/// the bit widths (joined by `;`) whose optimum lies at that `t`.
pub fn curves_to_csv(set: &CurveSet, profiles: &[PrecisionProfile; 3]) -> String {
    let mut rows: BTreeMap<u64, f64> = BTreeMap::new();
    for curve in &set.curves {
        for p in &curve.points {
            // Positive floats order like their bit patterns.
            rows.insert(p.t.to_bits(), p.g);
        }
    }
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (bits, g) in rows {
        let t = f64::from_bits(bits);
        let marker: Vec<String> = set
            .curves
            .iter()
            .filter(|c| c.t_star == t)
            .map(|c| c.profile.bits.to_string())
            .collect();
        let _ = write!(out, "{t},{g}");
        for p in profiles {
            let _ = write!(out, ",{}", delta_sup_from_g(g, p));
        }
        let _ = writeln!(out, ",{}", marker.join(";"));
    }
    out
}

pub fn write_curves(path: &Path, set: &CurveSet, profiles: &[PrecisionProfile; 3]) -> Result<()> {
    write_atomic(path, curves_to_csv(set, profiles).as_bytes())
}

/// Parsed form of a curve CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub t: f64,
    pub g: f64,
    pub delta_sup: [f64; 3],
    pub markers: Vec<u32>,
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Manifest { path: path.into(), reason };
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(bad("unexpected curve header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let markers = f[5]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u32>().map_err(|_| bad(format!("bad marker {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(CurveRow {
                t: num(f[0])?,
                g: num(f[1])?,
                delta_sup: [num(f[2])?, num(f[3])?, num(f[4])?],
                markers,
            })
        })
        .collect()
}

/// Extra manifest fields carried alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsMeta {
    pub seed: u64,
    pub precision: u32,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (key = value manifest) and `<path>.bin` (32-bit
/// little-endian floats, layer by layer, weight then bias).
pub fn save_weights(path: &Path, model: &ModelWeights, meta: &WeightsMeta) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut manifest = String::new();
    let widths: Vec<String> = model.widths().iter().map(|w| w.to_string()).collect();
    let acts: Vec<&str> = model.layers.iter().map(|l| l.activation.name()).collect();
    let _ = writeln!(manifest, "arch = dense");
    let _ = writeln!(manifest, "widths = {}", widths.join(","));
    let _ = writeln!(manifest, "activations = {}", acts.join(","));
    let _ = writeln!(manifest, "seed = {}", meta.seed);
    let _ = writeln!(manifest, "precision = {}", meta.precision);
    let _ = writeln!(
        manifest,
        "blob = {}",
        blob.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    );
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, values) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            let _ = writeln!(manifest, "layer{i}.{name} = {},{}", bytes.len(), values.len());
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(&blob, &bytes)?;
    write_atomic(path, manifest.as_bytes())
}

pub fn load_weights(path: &Path) -> Result<(ModelWeights, WeightsMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Manifest { path: path.into(), reason };
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("no '=' in {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
    if get("arch")? != "dense" {
        return Err(bad("only dense models are supported".into()));
    }
    let widths = get("widths")?
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad(format!("bad width {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let acts = get("activations")?
        .split(',')
        .map(|s| Activation::parse(s.trim()).ok_or_else(|| bad(format!("bad activation {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if widths.len() < 2 || acts.len() != widths.len() - 1 {
        return Err(bad("widths and activations do not chain".into()));
    }
    let meta = WeightsMeta {
        seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
        precision: get("precision")?.parse().map_err(|_| bad("bad precision".into()))?,
    };
    let blob = path.with_file_name(get("blob")?);
    let bytes = read_all(&blob)?;
    let slice = |key: String, expected: usize| -> Result<Vec<f32>> {
        let spec = get(&key)?;
        let (off, len) = spec.split_once(',').ok_or_else(|| bad(format!("bad entry for {key}")))?;
        let off: usize = off.trim().parse().map_err(|_| bad(format!("bad offset for {key}")))?;
        let len: usize = len.trim().parse().map_err(|_| bad(format!("bad length for {key}")))?;
        if len != expected {
            return Err(Error::ShapeMismatch { expected, got: len });
        }
        let end = off + 4 * len;
        let raw = bytes
            .get(off..end)
            .ok_or_else(|| Error::Truncated { path: blob.clone(), needed: end, found: bytes.len() })?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let layers = widths
        .windows(2)
        .zip(&acts)
        .enumerate()
        .map(|(i, (w, &activation))| {
            Ok(DenseLayer {
                inputs: w[0],
                outputs: w[1],
                weight: slice(format!("layer{i}.weight"), w[0] * w[1])?,
                bias: slice(format!("layer{i}.bias"), w[1])?,
                activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ModelWeights::new(layers)?, meta))
}
