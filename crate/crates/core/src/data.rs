//! Dataset ingestion: PNG image IO, bicubic degradation with the a = −0.5
//! kernel, aligned high/low-resolution pair cropping, dihedral-8
//! augmentation, and a stateless deterministic patch sampler.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::types::FeatureMap;

// ---------------------------------------------------------------------------
// PNG IO
// ---------------------------------------------------------------------------

/// Decodes an 8-bit RGB PNG into a 3 × H × W map with values in [0,1].
pub fn load_png(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let decoded = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(m) => m,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit RGB, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    FeatureMap::from_shape_fn(3, h as usize, w as usize, |c, y, x| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Clamps to [0,1], quantizes to 8 bits, and writes an RGB PNG.
pub fn save_png(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = map.shape();
    if c != 3 {
        return Err(Error::Shape(format!("PNG output needs 3 channels, got {c}")));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |ch: usize| {
            (map.data()[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([q(0), q(1), q(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

/// The a = −0.5 cubic convolution kernel (support [−2, 2]).
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Per-output-pixel source taps along one axis. `scale` is the in/out length
/// ratio; minification stretches the kernel by `scale` for antialiasing.
/// Out-of-range taps clamp to the edge and weights renormalize to sum 1.
fn axis_taps(n_in: usize, n_out: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1).max(0) as usize);
            let mut total = 0.0;
            for j in lo..=hi {
                let weight = cubic_kernel((j as f64 - center) / filter_scale);
                if weight != 0.0 {
                    let src = j.clamp(0, n_in as isize - 1) as usize;
                    taps.push((src, weight));
                    total += weight;
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn resample_rows(data: &Array3<f64>, taps: &[Vec<(usize, f64)>]) -> Array3<f64> {
    let (c, _, w) = data.dim();
    Array3::from_shape_fn((c, taps.len(), w), |(ch, y, x)| {
        taps[y].iter().map(|&(src, wt)| wt * data[[ch, src, x]]).sum()
    })
}

fn resample_cols(data: &Array3<f64>, taps: &[Vec<(usize, f64)>]) -> Array3<f64> {
    let (c, h, _) = data.dim();
    Array3::from_shape_fn((c, h, taps.len()), |(ch, y, x)| {
        taps[x].iter().map(|&(src, wt)| wt * data[[ch, y, src]]).sum()
    })
}

/// Bicubic reduction by an integer factor with antialiasing; output values
/// are clipped to [0,1].
pub fn bicubic_downscale(img: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 0 {
        return Err(Error::Parameter("scale factor must be at least 1".into()));
    }
    if s == 1 {
        return Ok(img.clone());
    }
    let (_, h, w) = img.shape();
    if h % s != 0 || w % s != 0 {
        return Err(Error::Dimension(format!(
            "dimensions {h}x{w} not divisible by scale {s}"
        )));
    }
    let rows = axis_taps(h, h / s, s as f64);
    let cols = axis_taps(w, w / s, s as f64);
    let out = resample_cols(&resample_rows(img.data(), &rows), &cols)
        .mapv(|v| v.clamp(0.0, 1.0));
    Ok(FeatureMap::from_array_unchecked(out))
}

/// Bicubic enlargement by an integer factor; output values are clipped to
/// [0,1].
pub fn bicubic_upscale(img: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 0 {
        return Err(Error::Parameter("scale factor must be at least 1".into()));
    }
    if s == 1 {
        return Ok(img.clone());
    }
    let (_, h, w) = img.shape();
    let rows = axis_taps(h, h * s, 1.0 / s as f64);
    let cols = axis_taps(w, w * s, 1.0 / s as f64);
    let out = resample_cols(&resample_rows(img.data(), &rows), &cols)
        .mapv(|v| v.clamp(0.0, 1.0));
    Ok(FeatureMap::from_array_unchecked(out))
}

/// Crops bottom/right so both spatial dimensions are multiples of `s`.
pub fn modcrop(img: &FeatureMap, s: usize) -> Result<FeatureMap> {
    if s == 0 {
        return Err(Error::Parameter("scale factor must be at least 1".into()));
    }
    let (c, h, w) = img.shape();
    let (ch, cw) = (h - h % s, w - w % s);
    if ch == 0 || cw == 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} smaller than scale {s}"
        )));
    }
    let mut out = Array3::zeros((c, ch, cw));
    out.assign(&img.data().slice(ndarray::s![.., ..ch, ..cw]));
    Ok(FeatureMap::from_array_unchecked(out))
}

// ---------------------------------------------------------------------------
// Dihedral-8 augmentation
// ---------------------------------------------------------------------------

fn rot90(img: &FeatureMap) -> FeatureMap {
    let (c, h, w) = img.shape();
    let out = Array3::from_shape_fn((c, w, h), |(ch, y, x)| img.data()[[ch, x, w - 1 - y]]);
    FeatureMap::from_array_unchecked(out)
}

fn hflip(img: &FeatureMap) -> FeatureMap {
    let (c, h, w) = img.shape();
    let out = Array3::from_shape_fn((c, h, w), |(ch, y, x)| img.data()[[ch, y, w - 1 - x]]);
    FeatureMap::from_array_unchecked(out)
}

/// Applies element `k` of the dihedral-8 group: an optional horizontal flip
/// (bit 2) followed by `k mod 4` counter-clockwise quarter turns.
pub fn dihedral(img: &FeatureMap, k: usize) -> Result<FeatureMap> {
    if k >= 8 {
        return Err(Error::Parameter(format!("dihedral element {k} out of 0..8")));
    }
    let mut out = if k & 4 != 0 { hflip(img) } else { img.clone() };
    for _ in 0..(k & 3) {
        out = rot90(&out);
    }
    Ok(out)
}

/// Applies one random dihedral-8 element to both halves of an aligned pair.
pub fn augment(lr: &FeatureMap, hr: &FeatureMap, rng: &mut impl Rng) -> (FeatureMap, FeatureMap) {
    let k = rng.random_range(0..8);
    (dihedral(lr, k).expect("k < 8"), dihedral(hr, k).expect("k < 8"))
}

// ---------------------------------------------------------------------------
// Image pairs and cropping
// ---------------------------------------------------------------------------

/// An aligned high/low resolution pair with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hr: FeatureMap,
    pub lr: FeatureMap,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, hr: FeatureMap, lr: FeatureMap, scale: usize) -> Result<Self> {
        let id = id.into();
        let (hc, hh, hw) = hr.shape();
        let (lc, lh, lw) = lr.shape();
        if hc != 3 || lc != 3 {
            return Err(Error::Shape(format!("{id}: pairs must be RGB")));
        }
        if hh != lh * scale || hw != lw * scale {
            return Err(Error::Shape(format!(
                "{id}: {hh}x{hw} does not match {lh}x{lw} at scale {scale}"
            )));
        }
        for (name, map) in [("hr", &hr), ("lr", &lr)] {
            if map.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Numeric(format!("{id}: {name} values outside [0,1]")));
            }
        }
        Ok(ImagePair { id, hr, lr })
    }
}

/// Deterministic aligned crop with the low-resolution corner at `(r, c)`.
pub fn crop_pair_at(
    pair: &ImagePair,
    lr_patch: usize,
    r: usize,
    c: usize,
    scale: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    let (_, lh, lw) = pair.lr.shape();
    if lr_patch == 0 {
        return Err(Error::Parameter("patch size must be at least 1".into()));
    }
    if lh < lr_patch || lw < lr_patch {
        return Err(Error::Dimension(format!(
            "{}: {lh}x{lw} smaller than the {lr_patch} patch",
            pair.id
        )));
    }
    if r + lr_patch > lh || c + lr_patch > lw {
        return Err(Error::Dimension(format!(
            "{}: corner ({r},{c}) overruns {lh}x{lw}",
            pair.id
        )));
    }
    let lr = pair
        .lr
        .data()
        .slice(ndarray::s![.., r..r + lr_patch, c..c + lr_patch])
        .to_owned();
    let (hr_r, hr_c, hr_p) = (scale * r, scale * c, scale * lr_patch);
    let hr = pair
        .hr
        .data()
        .slice(ndarray::s![.., hr_r..hr_r + hr_p, hr_c..hr_c + hr_p])
        .to_owned();
    Ok((
        FeatureMap::from_array_unchecked(lr),
        FeatureMap::from_array_unchecked(hr),
    ))
}

/// Uniformly random aligned crop; the high-resolution corner is the scaled
/// low-resolution corner. Returns (lr, hr).
pub fn crop_pair(
    pair: &ImagePair,
    lr_patch: usize,
    scale: usize,
    rng: &mut impl Rng,
) -> Result<(FeatureMap, FeatureMap)> {
    let (_, lh, lw) = pair.lr.shape();
    if lh < lr_patch || lw < lr_patch {
        return Err(Error::Dimension(format!(
            "{}: {lh}x{lw} smaller than the {lr_patch} patch",
            pair.id
        )));
    }
    let r = rng.random_range(0..=lh - lr_patch);
    let c = rng.random_range(0..=lw - lr_patch);
    crop_pair_at(pair, lr_patch, r, c, scale)
}

// ---------------------------------------------------------------------------
// Manifests and datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    pub lr: Option<PathBuf>,
}

/// A list of image files to train or evaluate on. Line-oriented text
/// (`hr_path [lr_path]`, `#` comments) or JSON
/// (`{"scale": s, "entries": [{"hr": ..., "lr": ...}]}`).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub scale: usize,
}

#[derive(Deserialize)]
struct JsonManifest {
    scale: Option<usize>,
    entries: Vec<JsonEntry>,
}

#[derive(Deserialize)]
struct JsonEntry {
    hr: PathBuf,
    #[serde(default)]
    lr: Option<PathBuf>,
}

impl DatasetManifest {
    /// Reads a manifest, resolving entries against the manifest's directory
    /// and verifying every listed file exists.
    pub fn load(path: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();

        let entries = if path.extension().is_some_and(|e| e == "json") {
            let parsed: JsonManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
            if let Some(s) = parsed.scale {
                if s != scale {
                    return Err(Error::Incompatible(format!(
                        "manifest {} declares scale {s} but the run uses {scale}",
                        path.display()
                    )));
                }
            }
            parsed
                .entries
                .into_iter()
                .map(|e| ManifestEntry { hr: e.hr, lr: e.lr })
                .collect()
        } else {
            let mut entries = Vec::new();
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut fields = line.split_whitespace();
                let hr = PathBuf::from(fields.next().expect("non-empty line"));
                let lr = fields.next().map(PathBuf::from);
                if let Some(extra) = fields.next() {
                    return Err(Error::Format(format!(
                        "manifest {}: unexpected third field {extra:?}",
                        path.display()
                    )));
                }
                entries.push(ManifestEntry { hr, lr });
            }
            entries
        };

        if entries.is_empty() {
            return Err(Error::Format(format!(
                "manifest {} lists no images",
                path.display()
            )));
        }
        let manifest = DatasetManifest { root, entries, scale };
        for entry in &manifest.entries {
            for p in std::iter::once(&entry.hr).chain(entry.lr.as_ref()) {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::Format(format!(
                        "manifest references missing file {}",
                        full.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Loaded pairs ready for sampling or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
}

/// One sampled training batch with diagnostic identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub lr: Vec<FeatureMap>,
    pub hr: Vec<FeatureMap>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless per-draw generator: the stream for `(seed, iter, slot)` never
/// depends on how many draws earlier iterations made, so training can resume
/// mid-run with a bit-identical sample sequence.
pub fn stream_rng(seed: u64, iter: u64, slot: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ iter);
    h = splitmix64(h ^ slot);
    ChaCha8Rng::seed_from_u64(h)
}

impl Dataset {
    /// Loads every pair in the manifest. Missing low-resolution images are
    /// derived by modcrop + bicubic downscale of the high-resolution image.
    pub fn load(manifest: &DatasetManifest) -> Result<Dataset> {
        let mut pairs = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let hr_path = manifest.resolve(&entry.hr);
            let id = hr_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| hr_path.display().to_string());
            let hr = modcrop(&load_png(&hr_path)?, manifest.scale)?;
            let lr = match &entry.lr {
                Some(lr_rel) => load_png(manifest.resolve(lr_rel))?,
                None => bicubic_downscale(&hr, manifest.scale)?,
            };
            pairs.push(ImagePair::new(id, hr, lr, manifest.scale)?);
        }
        Ok(Dataset { pairs, scale: manifest.scale })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Draws `batch_size` augmented crops for one training iteration. The
    /// draw depends only on `(seed, iter, slot)`.
    pub fn sample_batch(
        &self,
        seed: u64,
        iter: u64,
        batch_size: usize,
        lr_patch: usize,
    ) -> Result<Batch> {
        if self.pairs.is_empty() {
            return Err(Error::Parameter("dataset holds no images".into()));
        }
        let mut batch = Batch { ids: Vec::new(), lr: Vec::new(), hr: Vec::new() };
        for slot in 0..batch_size {
            let mut rng = stream_rng(seed, iter, slot as u64);
            let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
            let (_, lh, lw) = pair.lr.shape();
            let r = rng.random_range(0..=lh.saturating_sub(lr_patch));
            let c = rng.random_range(0..=lw.saturating_sub(lr_patch));
            let (lr, hr) = crop_pair_at(pair, lr_patch, r, c, self.scale)?;
            let k = rng.random_range(0..8);
            let lr = dihedral(&lr, k).expect("k < 8");
            let hr = dihedral(&hr, k).expect("k < 8");
            let mut id = String::new();
            write!(id, "{}:r{r}c{c}k{k}", pair.id).expect("string write");
            batch.ids.push(id);
            batch.lr.push(lr);
            batch.hr.push(hr);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::loop_bicubic_downscale;
    use tempfile::tempdir;

    fn gradient_map(c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_shape_fn(c, h, w, |ch, y, x| {
            ((ch + 1) as f64 * 0.11 + y as f64 * 0.017 + x as f64 * 0.013).fract()
        })
        .unwrap()
    }

    fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max)
    }

    #[test]
    fn kernel_has_interpolating_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(-1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert_eq!(cubic_kernel(2.5), 0.0);
        for i in 0..50 {
            let x = i as f64 * 0.04;
            assert!((cubic_kernel(x) - cubic_kernel(-x)).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_partitions_unity() {
        // integer translates of the kernel sum to 1 everywhere
        for i in 0..100 {
            let x = i as f64 * 0.01;
            let total: f64 = (-2..=2).map(|n| cubic_kernel(x - n as f64)).sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total} at offset {x}");
        }
    }

    #[test]
    fn downscale_keeps_constants() {
        let img = FeatureMap::from_shape_fn(3, 12, 8, |_, _, _| 0.37).unwrap();
        let out = bicubic_downscale(&img, 2).unwrap();
        assert_eq!(out.shape(), (3, 6, 4));
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn downscale_by_one_is_identity() {
        let img = gradient_map(3, 7, 9);
        let out = bicubic_downscale(&img, 1).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn downscale_rejects_indivisible_dims() {
        let img = gradient_map(3, 7, 8);
        assert!(matches!(bicubic_downscale(&img, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn downscale_matches_direct_convolve_oracle() {
        // horizontal ramp, the contract's 1-D case
        let ramp = FeatureMap::from_shape_fn(1, 4, 16, |_, _, x| x as f64 / 15.0).unwrap();
        let fast = bicubic_downscale(&ramp, 2).unwrap();
        let slow = loop_bicubic_downscale(&ramp, 2);
        assert!(max_abs_diff(&fast, &slow) < 1e-9);

        for s in [2, 3, 4] {
            let img = gradient_map(3, 12, 12);
            let fast = bicubic_downscale(&img, s).unwrap();
            let slow = loop_bicubic_downscale(&img, s);
            assert!(max_abs_diff(&fast, &slow) < 1e-9, "scale {s}");
        }
    }

    #[test]
    fn downscale_interior_of_ramp_stays_linear() {
        // cubic convolution reproduces degree-1 polynomials away from edges
        let img = FeatureMap::from_shape_fn(1, 4, 32, |_, _, x| 0.01 + x as f64 * 0.02).unwrap();
        let out = bicubic_downscale(&img, 2).unwrap();
        for ox in 2..14 {
            let expect = 0.01 + ((ox as f64 + 0.5) * 2.0 - 0.5) * 0.02;
            let got = out.data()[[0, 1, ox]];
            assert!((got - expect).abs() < 1e-12, "at {ox}: {got} vs {expect}");
        }
    }

    #[test]
    fn upscale_keeps_constants_and_shape() {
        let img = FeatureMap::from_shape_fn(3, 5, 6, |_, _, _| 0.6).unwrap();
        let out = bicubic_upscale(&img, 3).unwrap();
        assert_eq!(out.shape(), (3, 15, 18));
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn upscale_interior_of_ramp_stays_linear() {
        let img = FeatureMap::from_shape_fn(1, 2, 16, |_, _, x| 0.05 + x as f64 * 0.04).unwrap();
        let out = bicubic_upscale(&img, 2).unwrap();
        for ox in 6..26 {
            let src = (ox as f64 + 0.5) / 2.0 - 0.5;
            let expect = 0.05 + src * 0.04;
            assert!((out.data()[[0, 1, ox]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_output_stays_in_unit_range() {
        // step edges overshoot before clipping
        let img = FeatureMap::from_shape_fn(1, 8, 8, |_, _, x| if x < 4 { 0.0 } else { 1.0 })
            .unwrap();
        for v in bicubic_upscale(&img, 4).unwrap().data().iter() {
            assert!((0.0..=1.0).contains(v));
        }
        for v in bicubic_downscale(&img, 2).unwrap().data().iter() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn modcrop_trims_to_multiples() {
        let img = gradient_map(3, 11, 14);
        let out = modcrop(&img, 4).unwrap();
        assert_eq!(out.shape(), (3, 8, 12));
        assert_eq!(
            out.data()[[2, 7, 11]],
            img.data()[[2, 7, 11]]
        );
        assert!(matches!(modcrop(&gradient_map(3, 3, 3), 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn dihedral_identity_and_group_law() {
        let img = gradient_map(3, 5, 7);
        assert_eq!(dihedral(&img, 0).unwrap().data(), img.data());

        // two quarter turns equal one half turn
        let twice = dihedral(&dihedral(&img, 1).unwrap(), 1).unwrap();
        let half = dihedral(&img, 2).unwrap();
        assert_eq!(twice.data(), half.data());

        // the flip is an involution
        let back = hflip(&hflip(&img));
        assert_eq!(back.data(), img.data());

        assert!(matches!(dihedral(&img, 8), Err(Error::Parameter(_))));
    }

    #[test]
    fn dihedral_elements_are_distinct_and_value_preserving() {
        let img = gradient_map(1, 4, 6);
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for k in 0..8 {
            let out = dihedral(&img, k).unwrap();
            let mut values: Vec<u64> = out.data().iter().map(|v| v.to_bits()).collect();
            let fingerprint = values.clone();
            assert!(!seen.contains(&fingerprint), "element {k} repeats an earlier one");
            seen.push(fingerprint);
            values.sort_unstable();
            let mut original: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
            original.sort_unstable();
            assert_eq!(values, original, "element {k} changed the pixel multiset");
        }
    }

    #[test]
    fn augmentation_commutes_with_downscaling() {
        let hr = gradient_map(3, 16, 24);
        for k in 0..8 {
            let a = bicubic_downscale(&dihedral(&hr, k).unwrap(), 2).unwrap();
            let b = dihedral(&bicubic_downscale(&hr, 2).unwrap(), k).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-6, "element {k} does not commute");
        }
    }

    #[test]
    fn augment_applies_the_same_element_to_both() {
        let hr = gradient_map(3, 8, 8);
        let lr = bicubic_downscale(&hr, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..16 {
            let (alr, ahr) = augment(&lr, &hr, &mut rng);
            let down = bicubic_downscale(&ahr, 2).unwrap();
            assert!(max_abs_diff(&alr, &down) < 1e-6);
        }
    }

    fn demo_pair() -> ImagePair {
        let hr = gradient_map(3, 16, 12);
        let lr = bicubic_downscale(&hr, 2).unwrap();
        ImagePair::new("demo", hr, lr, 2).unwrap()
    }

    #[test]
    fn pair_validation_catches_misalignment_and_range() {
        let hr = gradient_map(3, 16, 12);
        let lr = gradient_map(3, 7, 6);
        assert!(matches!(ImagePair::new("bad", hr, lr, 2), Err(Error::Shape(_))));

        let hr = gradient_map(3, 8, 8);
        let mut lr = bicubic_downscale(&hr, 2).unwrap().into_inner();
        lr[[0, 0, 0]] = 1.5;
        let lr = FeatureMap::new(lr).unwrap();
        assert!(matches!(ImagePair::new("hot", hr, lr, 2), Err(Error::Numeric(_))));
    }

    #[test]
    fn full_size_crop_is_deterministic() {
        let hr = gradient_map(3, 12, 12);
        let lr = bicubic_downscale(&hr, 2).unwrap();
        let pair = ImagePair::new("square", hr, lr, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lr, hr) = crop_pair(&pair, 6, 2, &mut rng).unwrap();
        assert_eq!(lr.data(), pair.lr.data());
        assert_eq!(hr.data(), pair.hr.data());
    }

    #[test]
    fn crop_corners_align_at_scale() {
        let pair = demo_pair();
        let (lr, hr) = crop_pair_at(&pair, 3, 2, 1, 2).unwrap();
        assert_eq!(lr.shape(), (3, 3, 3));
        assert_eq!(hr.shape(), (3, 6, 6));
        assert_eq!(lr.data()[[1, 0, 0]], pair.lr.data()[[1, 2, 1]]);
        assert_eq!(hr.data()[[1, 0, 0]], pair.hr.data()[[1, 4, 2]]);
    }

    #[test]
    fn random_crops_stay_in_bounds() {
        let pair = demo_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (lr, hr) = crop_pair(&pair, 4, 2, &mut rng).unwrap();
            assert_eq!(lr.shape(), (3, 4, 4));
            assert_eq!(hr.shape(), (3, 8, 8));
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let pair = demo_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(crop_pair(&pair, 9, 2, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn png_round_trip_is_bitwise_on_the_8bit_grid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = FeatureMap::from_shape_fn(3, 6, 5, |c, y, x| {
            ((41 * c + 17 * y + 7 * x) % 256) as f64 / 255.0
        })
        .unwrap();
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn png_rejects_wrong_channel_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray = image::GrayImage::from_fn(4, 4, |x, y| image::Luma([(x + y) as u8]));
        gray.save_with_format(&path, image::ImageFormat::Png).unwrap();
        assert!(matches!(load_png(&path), Err(Error::Format(_))));

        let map = FeatureMap::zeros(1, 4, 4);
        assert!(matches!(save_png(dir.path().join("x.png"), &map), Err(Error::Shape(_))));
    }

    fn write_demo_corpus(dir: &Path, n: usize) -> Vec<String> {
        (0..n)
            .map(|i| {
                let name = format!("img{i}.png");
                let img = FeatureMap::from_shape_fn(3, 16, 16, |c, y, x| {
                    (((i + 1) * (c + 2) * (y + 3) * (x + 5)) % 251) as f64 / 250.0
                })
                .unwrap();
                save_png(dir.join(&name), &img).unwrap();
                name
            })
            .collect()
    }

    #[test]
    fn text_manifest_parses_and_checks_files() {
        let dir = tempdir().unwrap();
        let names = write_demo_corpus(dir.path(), 2);
        let manifest_path = dir.path().join("list.txt");
        std::fs::write(
            &manifest_path,
            format!("# demo corpus\n{}\n\n{}\n", names[0], names[1]),
        )
        .unwrap();
        let manifest = DatasetManifest::load(&manifest_path, 2).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert_eq!(manifest.scale, 2);

        std::fs::write(&manifest_path, "missing.png\n").unwrap();
        let err = DatasetManifest::load(&manifest_path, 2).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "err was: {err}");
    }

    #[test]
    fn json_manifest_parses_and_validates_scale() {
        let dir = tempdir().unwrap();
        let names = write_demo_corpus(dir.path(), 1);
        let manifest_path = dir.path().join("list.json");
        std::fs::write(
            &manifest_path,
            format!(r#"{{"scale": 2, "entries": [{{"hr": "{}"}}]}}"#, names[0]),
        )
        .unwrap();
        assert_eq!(DatasetManifest::load(&manifest_path, 2).unwrap().entries.len(), 1);
        assert!(matches!(
            DatasetManifest::load(&manifest_path, 4),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn dataset_derives_missing_lr_by_downscale() {
        let dir = tempdir().unwrap();
        let names = write_demo_corpus(dir.path(), 2);
        let manifest_path = dir.path().join("list.txt");
        std::fs::write(&manifest_path, names.join("\n")).unwrap();
        let manifest = DatasetManifest::load(&manifest_path, 4).unwrap();
        let ds = Dataset::load(&manifest).unwrap();
        assert_eq!(ds.len(), 2);
        for pair in &ds.pairs {
            assert_eq!(pair.hr.shape(), (3, 16, 16));
            assert_eq!(pair.lr.shape(), (3, 4, 4));
        }
        let again = Dataset::load(&manifest).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn batch_sampling_is_stateless_and_deterministic() {
        let dir = tempdir().unwrap();
        let names = write_demo_corpus(dir.path(), 3);
        let manifest_path = dir.path().join("list.txt");
        std::fs::write(&manifest_path, names.join("\n")).unwrap();
        let ds = Dataset::load(&DatasetManifest::load(&manifest_path, 2).unwrap()).unwrap();

        let a = ds.sample_batch(11, 42, 4, 6).unwrap();
        let b = ds.sample_batch(11, 42, 4, 6).unwrap();
        assert_eq!(a, b);

        let c = ds.sample_batch(11, 43, 4, 6).unwrap();
        assert_ne!(a, c);

        for (lr, hr) in a.lr.iter().zip(&a.hr) {
            assert_eq!(lr.shape(), (3, 6, 6));
            assert_eq!(hr.shape(), (3, 12, 12));
            assert!(lr.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(a.ids.len(), 4);
        assert!(a.ids[0].contains(':'));
    }

    #[test]
    fn stream_rng_is_reproducible_and_slot_separated() {
        let mut a = stream_rng(1, 2, 3);
        let mut b = stream_rng(1, 2, 3);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        let mut c = stream_rng(1, 2, 4);
        assert_ne!(stream_rng(1, 2, 3).random::<u64>(), c.random::<u64>());
    }
}
