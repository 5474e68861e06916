//! Deterministic generator for a miniature open-vocabulary detection benchmark.
//!
//! Scenes are colored geometric shapes on a textured background. Categories
//! are (shape, color) pairs split into base (seen) and novel (unseen), so
//! novel classes share visual factors with base ones. The train split hides
//! novel annotations; a sealed copy keeps the full ground truth for
//! evaluation tooling only.

pub mod codec;

use crate::error::{Error, Result};
use crate::geom::PixelBox;
use crate::hash;
use crate::rng;
use codec::{AnnotationFile, BoxEntry, CategoryEntry, ImageEntry, BACKGROUND};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Ordered category vocabulary with the base/novel partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
    base_flags: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl CategorySet {
    pub fn new(names: Vec<String>, base_flags: Vec<bool>) -> Result<Self> {
        if names.len() != base_flags.len() {
            return Err(Error::Config("names/base_flags length mismatch".into()));
        }
        if names.is_empty() {
            return Err(Error::Config("category set is empty".into()));
        }
        let mut index = BTreeMap::new();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Config("empty category name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate category name '{name}'")));
            }
        }
        if !base_flags.iter().any(|b| *b) {
            return Err(Error::Config("no base category".into()));
        }
        if !base_flags.iter().any(|b| !*b) {
            return Err(Error::Config("no novel category".into()));
        }
        Ok(Self {
            names,
            base_flags,
            index,
        })
    }

    pub fn from_entries(entries: &[CategoryEntry]) -> Result<Self> {
        CategorySet::new(
            entries.iter().map(|e| e.name.clone()).collect(),
            entries.iter().map(|e| e.is_base).collect(),
        )
    }

    pub fn to_entries(&self) -> Vec<CategoryEntry> {
        self.names
            .iter()
            .zip(&self.base_flags)
            .map(|(name, is_base)| CategoryEntry {
                name: name.clone(),
                is_base: *is_base,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_base(&self, i: usize) -> bool {
        self.base_flags[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.base_flags[i]).collect()
    }

    /// All categories outside the base set (the pseudo-labeling targets).
    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.base_flags[i]).collect()
    }
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub id: u32,
    /// H×W×3, values in [0,1].
    pub pixels: Array3<f32>,
}

/// Ground truth for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub image_id: u32,
    pub boxes: Vec<PixelBox>,
    pub class_ids: Vec<usize>,
    /// H×W category index per pixel, [`BACKGROUND`] where no object was painted.
    pub dense_mask: Array2<u16>,
}

impl SceneAnnotation {
    /// Checks every structural invariant the generator promises.
    pub fn validate(&self, n_categories: usize) -> Result<()> {
        let (h, w) = self.dense_mask.dim();
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Input("boxes/class_ids length mismatch".into()));
        }
        for (bx, &cls) in self.boxes.iter().zip(&self.class_ids) {
            if !bx.is_valid(w as u32, h as u32) {
                return Err(Error::Input(format!("invalid box {bx:?} for {w}x{h}")));
            }
            if cls >= n_categories {
                return Err(Error::Input(format!("class id {cls} out of range")));
            }
            let mut visible = 0usize;
            for y in bx.y1..bx.y2 {
                for x in bx.x1..bx.x2 {
                    if self.dense_mask[[y as usize, x as usize]] == cls as u16 {
                        visible += 1;
                    }
                }
            }
            if visible == 0 {
                return Err(Error::Input(format!(
                    "box {bx:?} of class {cls} has no visible pixel"
                )));
            }
        }
        Ok(())
    }

    /// Category covering the most pixels; ties broken by lowest index.
    pub fn dominant_category(&self) -> Option<usize> {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &v in self.dense_mask.iter() {
            if v != BACKGROUND {
                *counts.entry(v).or_insert(0) += 1;
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(cls, _)| cls as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

/// One renderable category: a (shape, color) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f32; 3],
    pub is_base: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub height: u32,
    pub width: u32,
    pub classes: Vec<ObjectClass>,
    pub min_objects: u32,
    pub max_objects: u32,
    /// Shape half-extent range in pixels.
    pub min_half_extent: u32,
    pub max_half_extent: u32,
    /// Amplitude of the per-pixel background noise.
    pub background_noise: f32,
    /// Per-object color jitter amplitude.
    pub color_jitter: f32,
}

impl DatasetConfig {
    /// The fixed desk-scale benchmark: 4 shapes x 4 colors, 12 base + 4 novel.
    ///
    /// The novel set is a perfect matching over (shape, color), so every novel
    /// class shares its shape and its color with several base classes.
    pub fn reference() -> Self {
        let shapes = [
            (ShapeKind::Circle, "circle"),
            (ShapeKind::Square, "square"),
            (ShapeKind::Triangle, "triangle"),
            (ShapeKind::Cross, "cross"),
        ];
        let colors = [
            ("red", [0.85f32, 0.10, 0.10]),
            ("green", [0.10, 0.75, 0.15]),
            ("blue", [0.15, 0.20, 0.85]),
            ("yellow", [0.90, 0.85, 0.10]),
        ];
        // novel: one color per shape, diagonal matching
        let novel = [
            (ShapeKind::Circle, "yellow"),
            (ShapeKind::Square, "blue"),
            (ShapeKind::Triangle, "red"),
            (ShapeKind::Cross, "green"),
        ];
        let mut classes = Vec::new();
        for (shape, shape_name) in shapes {
            for (color_name, rgb) in colors {
                let is_base = !novel.contains(&(shape, color_name));
                classes.push(ObjectClass {
                    name: format!("{color_name}-{shape_name}"),
                    shape,
                    color: rgb,
                    is_base,
                });
            }
        }
        Self {
            height: 40,
            width: 40,
            classes,
            min_objects: 1,
            max_objects: 2,
            min_half_extent: 7,
            max_half_extent: 11,
            background_noise: 0.04,
            color_jitter: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("config has zero categories".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("config has zero image area".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if self.min_half_extent == 0 || self.min_half_extent > self.max_half_extent {
            return Err(Error::Config("bad half-extent range".into()));
        }
        if 2 * self.max_half_extent + 1 > self.width.min(self.height) {
            return Err(Error::Config("objects larger than the image".into()));
        }
        Ok(())
    }

    pub fn category_set(&self) -> Result<CategorySet> {
        CategorySet::new(
            self.classes.iter().map(|c| c.name.clone()).collect(),
            self.classes.iter().map(|c| c.is_base).collect(),
        )
    }

    pub fn config_hash(&self) -> String {
        hash::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

const MIN_VISIBLE_PIXELS: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Generate one scene. Deterministic for a fixed `(config, seed)`.
///
/// Objects are painted in order; later objects overwrite earlier pixels in
/// the dense mask. Placements that would bury an earlier object below
/// [`MIN_VISIBLE_PIXELS`] visible pixels are resampled.
pub fn generate_scene(
    config: &DatasetConfig,
    seed: u64,
    image_id: u32,
) -> Result<(SceneImage, SceneAnnotation)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height as usize, config.width as usize);

    // textured background: soft diagonal ramp plus per-pixel noise
    let mut pixels = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let ramp = 0.30 + 0.12 * (x + y) as f32 / (h + w) as f32;
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-config.background_noise..=config.background_noise);
                pixels[[y, x, c]] = (ramp + 0.02 * c as f32 + noise).clamp(0.0, 1.0);
            }
        }
    }

    let mut dense_mask = Array2::<u16>::from_elem((h, w), BACKGROUND);
    let mut boxes: Vec<PixelBox> = Vec::new();
    let mut class_ids: Vec<usize> = Vec::new();

    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);
    for _ in 0..n_objects {
        let mut placed = false;
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let cls = rng.gen_range(0..config.classes.len());
            let extent = rng.gen_range(config.min_half_extent..=config.max_half_extent) as i64;
            let cx = rng.gen_range(extent..config.width as i64 - extent);
            let cy = rng.gen_range(extent..config.height as i64 - extent);
            let footprint = rasterize(config.classes[cls].shape, cx, cy, extent);
            if footprint.len() < MIN_VISIBLE_PIXELS {
                continue;
            }
            if !placement_keeps_earlier_visible(&dense_mask, &boxes, &class_ids, &footprint) {
                continue;
            }

            let jitter = config.color_jitter;
            let base = config.classes[cls].color;
            let color = [
                (base[0] + rng.gen_range(-jitter..=jitter)).clamp(0.05, 1.0),
                (base[1] + rng.gen_range(-jitter..=jitter)).clamp(0.05, 1.0),
                (base[2] + rng.gen_range(-jitter..=jitter)).clamp(0.05, 1.0),
            ];

            let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0u32, 0u32);
            for &(x, y) in &footprint {
                dense_mask[[y as usize, x as usize]] = cls as u16;
                for c in 0..3 {
                    pixels[[y as usize, x as usize, c]] = color[c];
                }
                x1 = x1.min(x as u32);
                y1 = y1.min(y as u32);
                x2 = x2.max(x as u32 + 1);
                y2 = y2.max(y as u32 + 1);
            }
            boxes.push(PixelBox::new(x1, y1, x2, y2));
            class_ids.push(cls);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(
                "could not place an object without burying an earlier one".into(),
            ));
        }
    }

    let image = SceneImage {
        id: image_id,
        pixels,
    };
    let annotation = SceneAnnotation {
        image_id,
        boxes,
        class_ids,
        dense_mask,
    };
    Ok((image, annotation))
}

fn placement_keeps_earlier_visible(
    mask: &Array2<u16>,
    boxes: &[PixelBox],
    class_ids: &[usize],
    footprint: &[(i64, i64)],
) -> bool {
    use std::collections::HashSet;
    let covered: HashSet<(i64, i64)> = footprint.iter().copied().collect();
    for (bx, &cls) in boxes.iter().zip(class_ids) {
        let mut visible = 0usize;
        'scan: for y in bx.y1..bx.y2 {
            for x in bx.x1..bx.x2 {
                if mask[[y as usize, x as usize]] == cls as u16
                    && !covered.contains(&(x as i64, y as i64))
                {
                    visible += 1;
                    if visible >= MIN_VISIBLE_PIXELS {
                        break 'scan;
                    }
                }
            }
        }
        if visible < MIN_VISIBLE_PIXELS {
            return false;
        }
    }
    true
}

fn rasterize(shape: ShapeKind, cx: i64, cy: i64, e: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    let arm = (e / 3).max(1);
    for y in (cy - e)..=(cy + e) {
        for x in (cx - e)..=(cx + e) {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match shape {
                ShapeKind::Circle => dx * dx + dy * dy <= e * e,
                ShapeKind::Square => true,
                ShapeKind::Triangle => {
                    // apex at the top row, base at the bottom
                    let row = y - (cy - e); // 0..=2e
                    dx.abs() * 2 <= row
                }
                ShapeKind::Cross => dx.abs() <= arm || dy.abs() <= arm,
            };
            if inside {
                out.push((x, y));
            }
        }
    }
    out
}

// ---- dataset writing -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub annotations: FileEntry,
    /// Full ground truth (novel boxes and mask pixels included); present only
    /// where the public annotations are filtered.
    pub sealed_annotations: Option<FileEntry>,
    pub images: Vec<FileEntry>,
    pub masks: Vec<FileEntry>,
    pub sealed_masks: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub splits: BTreeMap<String, SplitManifest>,
}

impl DatasetManifest {
    pub fn checksum(&self) -> String {
        hash::sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_vec_pretty(self)?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Generate and write the full benchmark to `out_dir`.
///
/// Layout:
/// ```text
/// out_dir/manifest.json
/// out_dir/{train,val}/annotations.json
/// out_dir/{train,val}/images/img_XXXXXX.p3img
/// out_dir/{train,val}/masks/img_XXXXXX.p3mask
/// out_dir/train/sealed/annotations.json      (full ground truth)
/// out_dir/train/sealed/masks/img_XXXXXX.p3mask
/// ```
///
/// Train annotations expose only base-class boxes and the public train masks
/// blank novel pixels to background; the sealed copies keep everything.
pub fn generate_dataset(
    config: &DatasetConfig,
    n_train: usize,
    n_val: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let categories = config.category_set()?;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config("n_train and n_val must be >= 1".into()));
    }

    let mut splits = BTreeMap::new();
    let mut next_id = 0u32;
    for (split, count, filter_novel) in [("train", n_train, true), ("val", n_val, false)] {
        let split_dir = out_dir.join(split);
        std::fs::create_dir_all(split_dir.join("images"))?;
        std::fs::create_dir_all(split_dir.join("masks"))?;
        if filter_novel {
            std::fs::create_dir_all(split_dir.join("sealed").join("masks"))?;
        }

        let ids: Vec<u32> = (0..count).map(|i| next_id + i as u32).collect();
        next_id += count as u32;
        let scenes: Vec<(SceneImage, SceneAnnotation)> = ids
            .par_iter()
            .enumerate()
            .map(|(i, &id)| {
                let scene_seed = rng::derive_seed(seed, &format!("data/scene/{split}/{i}"));
                generate_scene(config, scene_seed, id)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut sealed_masks = Vec::new();
        let mut image_entries = Vec::new();
        let mut public_boxes = Vec::new();
        let mut sealed_boxes = Vec::new();

        for (image, annotation) in &scenes {
            let file = format!("img_{:06}.p3img", image.id);
            let mask_file = format!("img_{:06}.p3mask", image.id);
            let img_path = split_dir.join("images").join(&file);
            codec::write_image(&img_path, &image.pixels)?;
            images.push(file_entry(out_dir, &img_path)?);
            image_entries.push(ImageEntry {
                id: image.id,
                file: file.clone(),
                height: config.height,
                width: config.width,
            });

            let public_mask = if filter_novel {
                let mut m = annotation.dense_mask.clone();
                for v in m.iter_mut() {
                    if *v != BACKGROUND && !categories.is_base(*v as usize) {
                        *v = BACKGROUND;
                    }
                }
                m
            } else {
                annotation.dense_mask.clone()
            };
            let mask_path = split_dir.join("masks").join(&mask_file);
            codec::write_mask(&mask_path, &public_mask)?;
            masks.push(file_entry(out_dir, &mask_path)?);

            if filter_novel {
                let sealed_path = split_dir.join("sealed").join("masks").join(&mask_file);
                codec::write_mask(&sealed_path, &annotation.dense_mask)?;
                sealed_masks.push(file_entry(out_dir, &sealed_path)?);
            }

            for (bx, &cls) in annotation.boxes.iter().zip(&annotation.class_ids) {
                let entry = BoxEntry {
                    image_id: image.id,
                    bbox: [bx.x1, bx.y1, bx.x2, bx.y2],
                    category_index: cls,
                };
                sealed_boxes.push(entry.clone());
                if !filter_novel || categories.is_base(cls) {
                    public_boxes.push(entry);
                }
            }
        }

        let annotation_file = AnnotationFile {
            categories: categories.to_entries(),
            images: image_entries.clone(),
            annotations: public_boxes,
        };
        let anno_path = split_dir.join("annotations.json");
        annotation_file.write(&anno_path)?;

        let sealed_annotations = if filter_novel {
            let sealed_file = AnnotationFile {
                categories: categories.to_entries(),
                images: image_entries,
                annotations: sealed_boxes,
            };
            let sealed_path = split_dir.join("sealed").join("annotations.json");
            sealed_file.write(&sealed_path)?;
            Some(file_entry(out_dir, &sealed_path)?)
        } else {
            None
        };

        splits.insert(
            split.to_string(),
            SplitManifest {
                annotations: file_entry(out_dir, &anno_path)?,
                sealed_annotations,
                images,
                masks,
                sealed_masks,
            },
        );
    }

    let manifest = DatasetManifest {
        config_hash: config.config_hash(),
        seed,
        splits,
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn file_entry(root: &Path, path: &Path) -> Result<FileEntry> {
    let rel = path
        .strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(FileEntry {
        path: rel,
        sha256: hash::sha256_file(path)?,
    })
}

// ---- loading ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub image: SceneImage,
    pub annotation: SceneAnnotation,
}

#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub categories: CategorySet,
    pub scenes: Vec<LoadedScene>,
}

/// Read a split back from disk (`dir` is e.g. `out_dir/train` or
/// `out_dir/train/sealed` paired with the public image dir).
pub fn load_split(split_dir: &Path) -> Result<LoadedSplit> {
    load_split_with(split_dir, split_dir)
}

/// Read annotations/masks from `anno_dir` but images from `image_dir`.
/// Lets callers pair sealed ground truth with the shared image files.
pub fn load_split_with(anno_dir: &Path, image_dir: &Path) -> Result<LoadedSplit> {
    let file = AnnotationFile::read(&anno_dir.join("annotations.json"))?;
    let categories = CategorySet::from_entries(&file.categories)?;

    let mut scenes = Vec::with_capacity(file.images.len());
    for entry in &file.images {
        let pixels = codec::read_image(&image_dir.join("images").join(&entry.file))?;
        let mask_file = entry.file.replace(".p3img", ".p3mask");
        let dense_mask = codec::read_mask(&anno_dir.join("masks").join(&mask_file))?;
        let mut boxes = Vec::new();
        let mut class_ids = Vec::new();
        for b in file.annotations.iter().filter(|b| b.image_id == entry.id) {
            boxes.push(b.pixel_box());
            class_ids.push(b.category_index);
        }
        scenes.push(LoadedScene {
            image: SceneImage {
                id: entry.id,
                pixels,
            },
            annotation: SceneAnnotation {
                image_id: entry.id,
                boxes,
                class_ids,
                dense_mask,
            },
        });
    }
    Ok(LoadedSplit { categories, scenes })
}

/// Standard split directories for a dataset root.
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn val(&self) -> PathBuf {
        self.root.join("val")
    }

    pub fn train_sealed(&self) -> PathBuf {
        self.root.join("train").join("sealed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_class_config() -> DatasetConfig {
        DatasetConfig {
            classes: vec![ObjectClass {
                name: "red-circle".into(),
                shape: ShapeKind::Circle,
                color: [0.85, 0.1, 0.1],
                is_base: true,
            }],
            ..DatasetConfig::reference()
        }
    }

    #[test]
    fn single_category_mask_only_carries_index_zero() {
        let (_, anno) = generate_scene(&one_class_config(), 0, 0).unwrap();
        assert!(anno
            .dense_mask
            .iter()
            .all(|&v| v == BACKGROUND || v == 0));
        assert!(!anno.boxes.is_empty());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DatasetConfig::reference();
        let (img_a, anno_a) = generate_scene(&cfg, 42, 7).unwrap();
        let (img_b, anno_b) = generate_scene(&cfg, 42, 7).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(anno_a, anno_b);
        let (img_c, _) = generate_scene(&cfg, 43, 7).unwrap();
        assert_ne!(img_a, img_c);
    }

    #[test]
    fn zero_categories_is_config_error() {
        let mut cfg = DatasetConfig::reference();
        cfg.classes.clear();
        assert!(matches!(
            generate_scene(&cfg, 0, 0),
            Err(Error::Config(_))
        ));
        let mut cfg = DatasetConfig::reference();
        cfg.width = 0;
        assert!(matches!(generate_scene(&cfg, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn thousand_seeds_pass_revalidation() {
        let mut cfg = DatasetConfig::reference();
        cfg.max_objects = 3;
        let n_cat = cfg.classes.len();
        for seed in 0..1000u64 {
            let (_, anno) = generate_scene(&cfg, seed, seed as u32).unwrap();
            let count = anno.boxes.len() as u32;
            assert!(count >= cfg.min_objects && count <= cfg.max_objects, "seed {seed}");
            anno.validate(n_cat).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let cfg = DatasetConfig::reference();
        for seed in 0..20u64 {
            let (img, _) = generate_scene(&cfg, seed, 0).unwrap();
            assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dominant_category_prefers_larger_then_lower_index() {
        let mut mask = Array2::<u16>::from_elem((4, 4), BACKGROUND);
        mask[[0, 0]] = 2;
        mask[[0, 1]] = 2;
        mask[[1, 0]] = 5;
        let anno = SceneAnnotation {
            image_id: 0,
            boxes: vec![],
            class_ids: vec![],
            dense_mask: mask,
        };
        assert_eq!(anno.dominant_category(), Some(2));
    }

    #[test]
    fn dataset_round_trip_and_split_hygiene() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatasetConfig::reference();
        cfg.min_objects = 1;
        cfg.max_objects = 2;
        let manifest = generate_dataset(&cfg, 4, 3, 11, dir.path()).unwrap();
        assert_eq!(manifest.splits.len(), 2);

        let categories = cfg.category_set().unwrap();
        let train = load_split(&dir.path().join("train")).unwrap();
        assert_eq!(train.scenes.len(), 4);
        // leakage check: public train annotations carry only base classes
        for scene in &train.scenes {
            for &cls in &scene.annotation.class_ids {
                assert!(categories.is_base(cls));
            }
            for &v in scene.annotation.dense_mask.iter() {
                assert!(v == BACKGROUND || categories.is_base(v as usize));
            }
        }

        // sealed split restores the full ground truth
        let sealed = load_split_with(
            &dir.path().join("train").join("sealed"),
            &dir.path().join("train"),
        )
        .unwrap();
        let novel = categories.novel_indices();
        let sealed_has_novel = sealed.scenes.iter().any(|s| {
            s.annotation
                .class_ids
                .iter()
                .any(|c| novel.contains(c))
        });
        // with 4 scenes of 1-2 objects over 16 classes this can be flaky for
        // an unlucky seed; seed 11 was checked to include a novel object
        assert!(sealed_has_novel);

        let val = load_split(&dir.path().join("val")).unwrap();
        assert_eq!(val.scenes.len(), 3);

        // deterministic regeneration: manifest checksum stable
        let dir2 = tempfile::tempdir().unwrap();
        let manifest2 = generate_dataset(&cfg, 4, 3, 11, dir2.path()).unwrap();
        assert_eq!(manifest.checksum(), manifest2.checksum());
    }

    #[test]
    fn codec_round_trip_equals_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::reference();
        generate_dataset(&cfg, 2, 1, 5, dir.path()).unwrap();

        // regenerate the same scenes and compare against what load_split read
        let train = load_split(&dir.path().join("train")).unwrap();
        for (i, scene) in train.scenes.iter().enumerate() {
            let seed = rng::derive_seed(5, &format!("data/scene/train/{i}"));
            let (img, _) = generate_scene(&cfg, seed, scene.image.id).unwrap();
            assert_eq!(img.pixels, scene.image.pixels);
        }
    }

    #[test]
    fn zero_train_scenes_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::reference();
        assert!(matches!(
            generate_dataset(&cfg, 0, 1, 0, dir.path()),
            Err(Error::Config(_))
        ));
    }
}
