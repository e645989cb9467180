//! Dataset ingestion: image folders with aligned label masks, label
//! remapping, pixel augmentation, and the toy dataset generator.

pub mod config;
pub mod toy;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Image;

pub use config::RunConfig;
pub use toy::{generate_toy_dataset, ShiftSpec, ToyDataset};

/// One image plus its aligned label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Image,
    pub label: Array2<u8>,
    pub num_classes: usize,
    pub ignore_index: u8,
}

impl SegSample {
    pub fn new(image: Image, label: Array2<u8>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        if label.dim() != (image.height(), image.width()) {
            return Err(Error::ShapeMismatch {
                context: "SegSample",
                expected: format!("label {}x{}", image.height(), image.width()),
                actual: format!("label {}x{}", label.dim().0, label.dim().1),
            });
        }
        for v in label.iter() {
            if (*v as usize) >= num_classes && *v != ignore_index {
                return Err(Error::validation(format!(
                    "label value {v} outside [0,{num_classes}) and not ignore ({ignore_index})"
                )));
            }
        }
        Ok(SegSample {
            image,
            label,
            num_classes,
            ignore_index,
        })
    }
}

/// Raw-id to train-id table. Raw values without an entry are a remap
/// violation; mapped values must land in `[0, K)` or on the ignore index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapTable {
    /// Keys serialized as strings so the table embeds in TOML and JSON alike.
    #[serde(with = "u8_key_map")]
    pub map: BTreeMap<u8, u8>,
}

mod u8_key_map {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<u8, u8>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.to_string(), *v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<u8, u8>, D::Error> {
        let raw = BTreeMap::<String, u8>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<u8>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("non-u8 remap key '{k}'")))
            })
            .collect()
    }
}

impl RemapTable {
    pub fn validate(&self, num_classes: usize, ignore_index: u8) -> Result<()> {
        for (raw, train) in &self.map {
            if (*train as usize) >= num_classes && *train != ignore_index {
                return Err(Error::validation(format!(
                    "remap {raw} -> {train} lands outside [0,{num_classes}) and ignore"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, label: &Array2<u8>, path: &Path) -> Result<Array2<u8>> {
        let mut out = label.clone();
        for v in out.iter_mut() {
            match self.map.get(v) {
                Some(t) => *v = *t,
                None => {
                    return Err(Error::format(
                        path.display().to_string(),
                        format!("raw label id {v} has no remap entry"),
                    ))
                }
            }
        }
        Ok(out)
    }
}

/// Remap table for the standard 19-class urban layout (34 raw ids).
pub fn cityscapes19_remap() -> RemapTable {
    let table: BTreeMap<u8, u8> =
        serde_json::from_str::<BTreeMap<String, u8>>(include_str!("remap/cityscapes19.json"))
            .expect("bundled remap parses")
            .into_iter()
            .map(|(k, v)| (k.parse::<u8>().expect("u8 key"), v))
            .collect();
    RemapTable { map: table }
}

/// Where a dataset lives and how to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: String,
    /// Image directory relative to root.
    pub image_dir: String,
    /// Label directory relative to root.
    pub label_dir: String,
    /// Filename suffix of images, e.g. ".png" or "_leftImg8bit.png".
    pub image_suffix: String,
    /// Filename suffix of labels, substituted for the image suffix.
    pub label_suffix: String,
    pub num_classes: usize,
    pub ignore_index: u8,
    #[serde(default)]
    pub remap: Option<RemapTable>,
}

impl DatasetSpec {
    /// The standard 19-class source layout.
    pub fn cityscapes(root: impl Into<PathBuf>, split: &str) -> Self {
        DatasetSpec {
            root: root.into(),
            split: split.to_string(),
            image_dir: format!("leftImg8bit/{split}"),
            label_dir: format!("gtFine/{split}"),
            image_suffix: "_leftImg8bit.png".into(),
            label_suffix: "_gtFine_labelIds.png".into(),
            num_classes: 19,
            ignore_index: 255,
            remap: Some(cityscapes19_remap()),
        }
    }

    fn image_root(&self) -> PathBuf {
        self.root.join(&self.image_dir)
    }

    fn label_root(&self) -> PathBuf {
        self.root.join(&self.label_dir)
    }
}

fn walk_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Error::io(d.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(d.display().to_string(), e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Resolve the (image, label) path pairs of a spec. Errors on an empty
/// directory or any image without its label.
pub fn list_samples(spec: &DatasetSpec) -> Result<Vec<(PathBuf, PathBuf)>> {
    if let Some(remap) = &spec.remap {
        remap.validate(spec.num_classes, spec.ignore_index)?;
    }
    let images = walk_files(&spec.image_root(), &spec.image_suffix)?;
    if images.is_empty() {
        return Err(Error::validation(format!(
            "no '{}' images under {}",
            spec.image_suffix,
            spec.image_root().display()
        )));
    }
    let mut pairs = Vec::with_capacity(images.len());
    for img in images {
        let rel = img
            .strip_prefix(spec.image_root())
            .expect("walked under image root");
        let rel_str = rel.to_str().ok_or_else(|| {
            Error::format(img.display().to_string(), "non-utf8 filename".to_string())
        })?;
        let label_rel = rel_str
            .strip_suffix(&spec.image_suffix)
            .map(|stem| format!("{stem}{}", spec.label_suffix))
            .expect("suffix matched during walk");
        let label = spec.label_root().join(label_rel);
        if !label.exists() {
            return Err(Error::format(
                label.display().to_string(),
                "label file missing for image".to_string(),
            ));
        }
        pairs.push((img, label));
    }
    Ok(pairs)
}

pub fn decode_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.display().to_string(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = Array3::<f64>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            values[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Image::new(values)
}

pub fn decode_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.display().to_string(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32).0[0]))
}

fn decode_sample(spec: &DatasetSpec, img_path: &Path, label_path: &Path) -> Result<SegSample> {
    let image = decode_image(img_path)?;
    let mut label = decode_label(label_path)?;
    if let Some(remap) = &spec.remap {
        label = remap.apply(&label, label_path)?;
    }
    SegSample::new(image, label, spec.num_classes, spec.ignore_index)
}

/// Lazily streams decoded samples in deterministic (sorted-path) order.
pub struct DatasetStream<'a> {
    spec: &'a DatasetSpec,
    pairs: std::vec::IntoIter<(PathBuf, PathBuf)>,
}

impl<'a> Iterator for DatasetStream<'a> {
    type Item = Result<SegSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let (img, label) = self.pairs.next()?;
        Some(decode_sample(self.spec, &img, &label))
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<DatasetStream<'_>> {
    Ok(DatasetStream {
        spec,
        pairs: list_samples(spec)?.into_iter(),
    })
}

/// Decode the whole split into memory (desk-scale convenience).
pub fn load_all(spec: &DatasetSpec) -> Result<Vec<SegSample>> {
    load_dataset(spec)?.collect()
}

// ---- pixel augmentation used by source training ----

/// Aligned random crop.
pub(crate) fn random_crop(
    image: &Image,
    label: &Array2<u8>,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (Image, Array2<u8>) {
    let (h, w) = (image.height(), image.width());
    if h <= size && w <= size {
        return (image.clone(), label.clone());
    }
    let y0 = if h > size { rng.random_range(0..=h - size) } else { 0 };
    let x0 = if w > size { rng.random_range(0..=w - size) } else { 0 };
    let img = image
        .values()
        .slice(ndarray::s![.., y0..y0 + size.min(h), x0..x0 + size.min(w)])
        .to_owned();
    let lab = label.slice(ndarray::s![y0..y0 + size.min(h), x0..x0 + size.min(w)]).to_owned();
    (Image::new(img).expect("crop of valid image"), lab)
}

/// Aligned horizontal flip.
pub(crate) fn hflip(image: &Image, label: &Array2<u8>) -> (Image, Array2<u8>) {
    let img = image.values().slice(ndarray::s![.., .., ..;-1]).to_owned();
    let lab = label.slice(ndarray::s![.., ..;-1]).to_owned();
    (Image::new(img).expect("flip of valid image"), lab)
}

/// Brightness / contrast / saturation jitter with factors in [0.75, 1.25].
pub(crate) fn color_jitter(image: &Image, rng: &mut ChaCha8Rng) -> Image {
    let b: f64 = rng.random_range(0.75..1.25);
    let c: f64 = rng.random_range(0.75..1.25);
    let s: f64 = rng.random_range(0.75..1.25);
    let v = image.values();
    let (_, h, w) = v.dim();
    let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
    let mut out = Array3::<f64>::zeros(v.dim());
    for y in 0..h {
        for x in 0..w {
            let gray = (v[[0, y, x]] + v[[1, y, x]] + v[[2, y, x]]) / 3.0;
            for ch in 0..3 {
                let mut val = v[[ch, y, x]] * b;
                val = mean + (val - mean) * c;
                val = gray + (val - gray) * s;
                out[[ch, y, x]] = val.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out).expect("jitter of valid image")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    #[test]
    fn cityscapes_remap_is_valid_and_total_on_34_ids() {
        let remap = cityscapes19_remap();
        remap.validate(19, 255).unwrap();
        for raw in 0..=33u8 {
            assert!(remap.map.contains_key(&raw), "raw id {raw} unmapped");
        }
        assert_eq!(remap.map[&7], 0);
        assert_eq!(remap.map[&33], 18);
        assert_eq!(remap.map[&0], 255);
    }

    #[test]
    fn cityscapes_spec_declares_19_classes() {
        let spec = DatasetSpec::cityscapes("/data/cs", "train");
        assert_eq!(spec.num_classes, 19);
    }

    #[test]
    fn remap_is_idempotent_on_remapped_data() {
        // remap composed with the identity-on-train-ids table
        let remap = cityscapes19_remap();
        let raw = Array2::from_shape_vec((1, 4), vec![7u8, 26, 0, 33]).unwrap();
        let once = remap.apply(&raw, Path::new("x")).unwrap();
        let mut idmap = BTreeMap::new();
        for v in 0..19u8 {
            idmap.insert(v, v);
        }
        idmap.insert(255, 255);
        let id = RemapTable { map: idmap };
        let twice = id.apply(&once, Path::new("x")).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn missing_remap_entry_is_an_error() {
        let remap = RemapTable {
            map: BTreeMap::from([(0u8, 0u8)]),
        };
        let raw = Array2::from_shape_vec((1, 2), vec![0u8, 9]).unwrap();
        assert!(remap.apply(&raw, Path::new("x")).is_err());
    }

    #[test]
    fn empty_directory_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images/train")).unwrap();
        fs::create_dir_all(dir.path().join("labels/train")).unwrap();
        let spec = DatasetSpec {
            root: dir.path().to_path_buf(),
            split: "train".into(),
            image_dir: "images/train".into(),
            label_dir: "labels/train".into(),
            image_suffix: ".png".into(),
            label_suffix: ".png".into(),
            num_classes: 4,
            ignore_index: 255,
            remap: None,
        };
        assert!(list_samples(&spec).is_err());
    }

    #[test]
    fn sample_rejects_misaligned_label() {
        let image = Image::new(Array3::zeros((3, 4, 4))).unwrap();
        let label = Array2::<u8>::zeros((4, 5));
        assert!(SegSample::new(image, label, 2, 255).is_err());
    }

    #[test]
    fn sample_rejects_out_of_range_label() {
        let image = Image::new(Array3::zeros((3, 2, 2))).unwrap();
        let label = Array2::from_elem((2, 2), 9u8);
        assert!(SegSample::new(image, label, 4, 255).is_err());
    }

    #[test]
    fn hflip_is_aligned_involution() {
        let mut rng = rng_for(1, Stream::ToyData, 0);
        let img = Image::new(Array3::from_shape_fn((3, 4, 6), |_| rng.random_range(0.0..1.0)))
            .unwrap();
        let label = Array2::from_shape_fn((4, 6), |(y, x)| (y * 6 + x) as u8 % 3);
        let (fi, fl) = hflip(&img, &label);
        let (bi, bl) = hflip(&fi, &fl);
        assert_eq!(bi, img);
        assert_eq!(bl, label);
        assert_eq!(fl[[0, 0]], label[[0, 5]]);
    }
}
