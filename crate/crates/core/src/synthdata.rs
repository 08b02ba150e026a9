//! Synthetic multi-dataset benchmark: category vocabulary, biased scene
//! generation, rendering, image-level labeling and the line-delimited JSON
//! dataset format.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::seed;

pub const DATASET_VERSION: u64 = 1;
/// Amplitude of the zero-mean texture modulation painted on objects.
pub const TEXTURE_AMPLITUDE: f64 = 0.12;
const BACKGROUND_NOISE: f64 = 0.04;
const CLUTTER_NOISE: f64 = 0.1;
const MAX_PAIR_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub color: [f64; 3],
    pub texture: u8,
    pub is_novel: bool,
    /// `(base index, weight)` pairs; present only on novel categories.
    pub mixture: Option<Vec<(usize, f64)>>,
}

/// Ordered category list. Base categories come first so their indices are
/// stable when novel ones are appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<CategorySpec>,
}

const PALETTE: [(&str, [f64; 3], u8); 8] = [
    ("red", [0.85, 0.15, 0.15], 0),
    ("green", [0.15, 0.85, 0.15], 1),
    ("blue", [0.15, 0.15, 0.85], 2),
    ("yellow", [0.85, 0.85, 0.15], 3),
    ("cyan", [0.15, 0.85, 0.85], 0),
    ("magenta", [0.85, 0.15, 0.85], 1),
    ("white", [0.85, 0.85, 0.85], 2),
    ("black", [0.15, 0.15, 0.15], 3),
];

/// Novel categories as equal-weight blends of two palette entries.
const NOVEL_BLENDS: [(&str, &str, &str); 4] = [
    ("orange", "red", "yellow"),
    ("purple", "blue", "magenta"),
    ("lime", "green", "yellow"),
    ("teal", "cyan", "blue"),
];

impl Vocabulary {
    /// Built-in vocabulary with `n_base` palette categories and `n_novel`
    /// mixture-defined categories.
    pub fn builtin(n_base: usize, n_novel: usize) -> Result<Self> {
        if n_base == 0 || n_base > PALETTE.len() {
            return Err(Error::Config(format!("base category count must be in 1..={}", PALETTE.len())));
        }
        let mut categories: Vec<CategorySpec> = PALETTE[..n_base]
            .iter()
            .map(|&(name, color, texture)| CategorySpec {
                name: name.to_string(),
                color,
                texture,
                is_novel: false,
                mixture: None,
            })
            .collect();
        let mut added = 0;
        for (name, a, b) in NOVEL_BLENDS {
            if added == n_novel {
                break;
            }
            let ia = categories.iter().position(|c| c.name == a);
            let ib = categories.iter().position(|c| c.name == b);
            if let (Some(ia), Some(ib)) = (ia, ib) {
                categories.push(novel_category(name, &categories, vec![(ia, 0.5), (ib, 0.5)]));
                added += 1;
            }
        }
        if added < n_novel {
            return Err(Error::Config(format!(
                "only {added} novel categories available for {n_base} base categories"
            )));
        }
        Ok(Vocabulary { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.categories[i].is_novel).collect()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.categories[i].is_novel).collect()
    }

    /// The base categories only (indices unchanged since bases come first).
    pub fn base_only(&self) -> Vocabulary {
        Vocabulary {
            categories: self.categories.iter().filter(|c| !c.is_novel).cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::DuplicateName(c.name.clone()));
            }
            match (&c.mixture, c.is_novel) {
                (None, false) => {}
                (Some(mix), true) => {
                    let total: f64 = mix.iter().map(|&(_, w)| w).sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(Error::Config(format!("mixture of `{}` sums to {total}", c.name)));
                    }
                    if mix.iter().any(|&(j, w)| j >= i || self.categories[j].is_novel || w < 0.0) {
                        return Err(Error::Config(format!("mixture of `{}` must weight earlier base categories", c.name)));
                    }
                }
                _ => return Err(Error::Config(format!("category `{}`: novel iff mixture-defined", c.name))),
            }
        }
        Ok(())
    }

    /// Parse the vocabulary file format: one category per line, either a
    /// bare name (base) or `name = base:weight base:weight ...` (novel).
    /// Blank lines and `#` comments are ignored. Base names found in the
    /// built-in palette take its appearance; others get a hashed colour.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut categories: Vec<CategorySpec> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message,
            };
            match line.split_once('=') {
                None => {
                    let name = line.to_string();
                    let (color, texture) = PALETTE
                        .iter()
                        .find(|p| p.0 == name)
                        .map(|p| (p.1, p.2))
                        .unwrap_or_else(|| hashed_appearance(&name));
                    categories.push(CategorySpec {
                        name,
                        color,
                        texture,
                        is_novel: false,
                        mixture: None,
                    });
                }
                Some((name, rhs)) => {
                    let mut mix = Vec::new();
                    for term in rhs.split_whitespace() {
                        let (base, w) = term
                            .split_once(':')
                            .ok_or_else(|| parse_err(format!("expected base:weight, got `{term}`")))?;
                        let w: f64 = w.parse().map_err(|_| parse_err(format!("bad weight `{w}`")))?;
                        let j = categories
                            .iter()
                            .position(|c| c.name == base && !c.is_novel)
                            .ok_or_else(|| parse_err(format!("unknown base category `{base}`")))?;
                        mix.push((j, w));
                    }
                    if mix.is_empty() {
                        return Err(parse_err("empty mixture".into()));
                    }
                    categories.push(novel_category(name.trim(), &categories, mix));
                }
            }
        }
        let vocab = Vocabulary { categories };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for c in &self.categories {
            match &c.mixture {
                None => out.push_str(&c.name),
                Some(mix) => {
                    out.push_str(&c.name);
                    out.push_str(" =");
                    for &(j, w) in mix {
                        out.push_str(&format!(" {}:{}", self.categories[j].name, w));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn novel_category(name: &str, bases: &[CategorySpec], mixture: Vec<(usize, f64)>) -> CategorySpec {
    let mut color = [0.0; 3];
    for &(j, w) in &mixture {
        for (k, c) in color.iter_mut().enumerate() {
            *c += w * bases[j].color[k];
        }
    }
    CategorySpec {
        name: name.to_string(),
        color,
        texture: 0,
        is_novel: true,
        mixture: Some(mixture),
    }
}

fn hashed_appearance(name: &str) -> ([f64; 3], u8) {
    let mut rng = seed::rng(seed::derive_str(0xC010_0125, name));
    let color = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    (color, rng.gen_range(0..4))
}

/// Zero-mean periodic pattern in `[-1, 1]`, anchored at the object's corner.
pub fn texture_value(texture: u8, dx: usize, dy: usize) -> f64 {
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    match texture {
        1 => sign((dy / 2) % 2 == 0),
        2 => sign((dx / 2) % 2 == 0),
        3 => sign(((dx / 2) + (dy / 2)) % 2 == 0),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Centered,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub name: String,
    /// Inclusive object-count range.
    pub count: (usize, usize),
    /// Object size as `sqrt(area)` over image side.
    pub scale: (f64, f64),
    pub placement: Placement,
    pub brightness: f64,
    /// Expected number of clutter rectangles per image.
    pub clutter: f64,
    /// Zipf exponent over category index; 0 draws categories uniformly.
    pub category_skew: f64,
}

impl BiasProfile {
    /// One large centred object on a dark, mostly clean background.
    pub fn object_centric() -> Self {
        BiasProfile {
            name: "object-centric".into(),
            count: (1, 1),
            scale: (0.4, 0.7),
            placement: Placement::Centered,
            brightness: 0.25,
            clutter: 0.5,
            category_skew: 0.0,
        }
    }

    /// Several small objects anywhere on a bright, cluttered background.
    pub fn scene_centric() -> Self {
        BiasProfile {
            name: "scene-centric".into(),
            count: (2, 6),
            scale: (0.15, 0.35),
            placement: Placement::Uniform,
            brightness: 0.65,
            clutter: 4.0,
            category_skew: 0.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "object-centric" | "object" => Some(Self::object_centric()),
            "scene-centric" | "scene" => Some(Self::scene_centric()),
            _ => None,
        }
    }

    pub fn with_skew(mut self, skew: f64) -> Self {
        self.category_skew = skew;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub bbox: BBox,
    pub category: usize,
    pub jitter: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<ObjectInstance>,
    pub dataset_id: u32,
    pub brightness: f64,
    pub clutter: f64,
    /// Seeds background noise and clutter layout.
    pub render_seed: u64,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn present_categories(&self) -> Vec<usize> {
        let mut cats: Vec<usize> = self.objects.iter().map(|o| o.category).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }
}

pub const IMAGE_SIZE: usize = 64;

/// Sample a scene. Objects whose placement fails after repeated attempts
/// are dropped, so the result can hold fewer objects than requested.
pub fn gen_scene(profile: &BiasProfile, vocab: &Vocabulary, rng_seed: u64) -> Scene {
    assert!(!vocab.is_empty(), "gen_scene: empty vocabulary");
    let (h, w) = (IMAGE_SIZE, IMAGE_SIZE);
    let mut rng = seed::rng(rng_seed);
    let count = rng.gen_range(profile.count.0..=profile.count.1);
    let weights: Vec<f64> = (0..vocab.len())
        .map(|k| 1.0 / ((k + 1) as f64).powf(profile.category_skew))
        .collect();
    let total_weight: f64 = weights.iter().sum();

    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(count);
    'objects: for _ in 0..count {
        let mut u = rng.gen::<f64>() * total_weight;
        let mut category = vocab.len() - 1;
        for (k, &wk) in weights.iter().enumerate() {
            if u < wk {
                category = k;
                break;
            }
            u -= wk;
        }
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = rng.gen_range(profile.scale.0..=profile.scale.1);
            let aspect: f64 = rng.gen_range(0.8..1.25);
            let bw = ((s * w as f64 * aspect.sqrt()).round() as usize).clamp(4, w - 2);
            let bh = ((s * h as f64 / aspect.sqrt()).round() as usize).clamp(4, h - 2);
            let (x0, y0) = match profile.placement {
                Placement::Centered => {
                    let cx = w as f64 / 2.0 + rng.gen_range(-0.1..=0.1) * w as f64;
                    let cy = h as f64 / 2.0 + rng.gen_range(-0.1..=0.1) * h as f64;
                    let x0 = (cx - bw as f64 / 2.0).round().clamp(1.0, (w - 1 - bw) as f64);
                    let y0 = (cy - bh as f64 / 2.0).round().clamp(1.0, (h - 1 - bh) as f64);
                    (x0 as usize, y0 as usize)
                }
                Placement::Uniform => (rng.gen_range(1..=w - 1 - bw), rng.gen_range(1..=h - 1 - bh)),
            };
            let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_PAIR_IOU) {
                let jitter = [rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1)];
                objects.push(ObjectInstance { bbox, category, jitter });
                continue 'objects;
            }
        }
        break;
    }
    Scene {
        height: h,
        width: w,
        objects,
        dataset_id: 0,
        brightness: profile.brightness,
        clutter: profile.clutter,
        render_seed: seed::derive(rng_seed, 0x5CE7E),
    }
}

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
    }

    /// Mean colour over the pixels whose centres lie in `bbox`.
    pub fn mean_color(&self, bbox: &BBox) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if bbox.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += f64::from(self.get(y, x, c));
                    }
                    n += 1;
                }
            }
        }
        acc.map(|a| if n == 0 { 0.0 } else { a / n as f64 })
    }
}

fn pixel_range(lo: f64, hi: f64, limit: usize) -> std::ops::Range<usize> {
    // pixels whose centre p + 0.5 lies in [lo, hi)
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    start..end.max(start)
}

/// Render the scene: noisy background, clutter rectangles in non-category
/// colours, then objects in order (later ones paint over earlier ones).
pub fn render(scene: &Scene, vocab: &Vocabulary) -> Image {
    let (h, w) = (scene.height, scene.width);
    let mut img = Image::filled(h, w, 0.0);
    let mut rng = seed::rng(scene.render_seed);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = scene.brightness + rng.gen_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
                img.set(y, x, c, v);
            }
        }
    }

    let whole = scene.clutter.floor() as usize;
    let n_clutter = whole + usize::from(rng.gen::<f64>() < scene.clutter - whole as f64);
    for _ in 0..n_clutter {
        let cw = rng.gen_range(3..=10usize);
        let ch = rng.gen_range(3..=10usize);
        let x0 = rng.gen_range(0..=w - cw);
        let y0 = rng.gen_range(0..=h - ch);
        let color = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                for (c, &base) in color.iter().enumerate() {
                    img.set(y, x, c, base + rng.gen_range(-CLUTTER_NOISE..=CLUTTER_NOISE));
                }
            }
        }
    }

    for obj in &scene.objects {
        let spec = &vocab.categories[obj.category];
        let textures: Vec<(u8, f64)> = match &spec.mixture {
            Some(mix) => mix.iter().map(|&(j, wj)| (vocab.categories[j].texture, wj)).collect(),
            None => vec![(spec.texture, 1.0)],
        };
        let ys = pixel_range(obj.bbox.y0, obj.bbox.y1, h);
        let xs = pixel_range(obj.bbox.x0, obj.bbox.x1, w);
        let (ox, oy) = (xs.start, ys.start);
        for y in ys.clone() {
            for x in xs.clone() {
                let pattern: f64 = textures.iter().map(|&(t, wt)| wt * texture_value(t, x - ox, y - oy)).sum();
                for c in 0..3 {
                    img.set(y, x, c, spec.color[c] + obj.jitter[c] + TEXTURE_AMPLITUDE * pattern);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelPolicy {
    Full,
    /// Each present category is kept with this probability.
    Federated(f64),
}

/// Raw federated keep draws for the present categories plus whether the
/// one-label floor had to force a label back in.
pub fn federated_mask(present: &[usize], p_keep: f64, rng: &mut impl Rng) -> (Vec<bool>, bool) {
    let mut keep: Vec<bool> = present.iter().map(|_| rng.gen::<f64>() < p_keep).collect();
    let forced = !present.is_empty() && !keep.iter().any(|&k| k);
    if forced {
        let i = rng.gen_range(0..present.len());
        keep[i] = true;
    }
    (keep, forced)
}

/// Image-level label vector of length `n_categories`.
pub fn label_image(scene: &Scene, policy: LabelPolicy, n_categories: usize, label_seed: u64) -> Vec<u8> {
    let present = scene.present_categories();
    let mut y = vec![0u8; n_categories];
    match policy {
        LabelPolicy::Full => {
            for c in present {
                y[c] = 1;
            }
        }
        LabelPolicy::Federated(p_keep) => {
            assert!(p_keep > 0.0 && p_keep <= 1.0, "p_keep must be in (0, 1]");
            let mut rng = seed::rng(label_seed);
            let (keep, _) = federated_mask(&present, p_keep, &mut rng);
            for (c, k) in present.into_iter().zip(keep) {
                if k {
                    y[c] = 1;
                }
            }
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "cat")]
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image: Image,
    pub labels: Vec<u8>,
    pub dataset_id: u32,
    /// Hidden ground truth: read by the oracle segmenter and evaluators only.
    pub gt: Vec<GtObject>,
}

impl ImageRecord {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gt.iter().map(|g| g.bbox).collect()
    }

    pub fn labeled_categories(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c] == 1).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub profile: BiasProfile,
    pub vocab: Vocabulary,
    pub images: usize,
    pub policy: LabelPolicy,
    pub seed: u64,
    pub dataset_id: u32,
}

/// Generate records for image indices `0..spec.images`; image `i` depends only
/// on `(spec, i)`.
pub fn generate(spec: &GenSpec) -> Vec<ImageRecord> {
    (0..spec.images)
        .map(|i| {
            let image_seed = seed::derive(spec.seed, i as u64);
            let mut scene = gen_scene(&spec.profile, &spec.vocab, seed::derive(image_seed, 1));
            scene.dataset_id = spec.dataset_id;
            let labels = label_image(&scene, spec.policy, spec.vocab.len(), seed::derive(image_seed, 2));
            ImageRecord {
                image: render(&scene, &spec.vocab),
                labels,
                dataset_id: spec.dataset_id,
                gt: scene
                    .objects
                    .iter()
                    .map(|o| GtObject {
                        bbox: o.bbox,
                        category: o.category,
                    })
                    .collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageStorage {
    Inline,
    /// Sibling little-endian f32 files next to the dataset file.
    Binary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    version: u64,
    dataset_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<Vec<Vec<Vec<f32>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<[usize; 3]>,
    labels: Vec<u8>,
    gt: Vec<GtObject>,
}

fn image_file_name(dataset: &Path, index: usize) -> String {
    let stem = dataset.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    format!("{stem}.{index:06}.f32")
}

fn sibling(dataset: &Path, name: &str) -> PathBuf {
    dataset.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

pub fn write_dataset(path: &Path, records: &[ImageRecord], storage: ImageStorage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (i, rec) in records.iter().enumerate() {
        let img = &rec.image;
        let mut line = RecordLine {
            version: DATASET_VERSION,
            dataset_id: rec.dataset_id,
            image: None,
            image_file: None,
            shape: None,
            labels: rec.labels.clone(),
            gt: rec.gt.clone(),
        };
        match storage {
            ImageStorage::Inline => {
                line.image = Some(
                    (0..img.height)
                        .map(|y| (0..img.width).map(|x| (0..3).map(|c| img.get(y, x, c)).collect()).collect())
                        .collect(),
                );
            }
            ImageStorage::Binary => {
                let name = image_file_name(path, i);
                let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                let target = sibling(path, &name);
                fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
                line.image_file = Some(name);
                line.shape = Some([img.height, img.width, 3]);
            }
        }
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.version != DATASET_VERSION {
            return Err(Error::Version {
                found: rec.version,
                expected: DATASET_VERSION,
            });
        }
        let image = match (rec.image, rec.image_file, rec.shape) {
            (Some(rows), None, None) => {
                let height = rows.len();
                let width = rows.first().map_or(0, Vec::len);
                let mut data = Vec::with_capacity(height * width * 3);
                for row in rows {
                    if row.len() != width {
                        return Err(parse_err("ragged image rows".into()));
                    }
                    for px in row {
                        if px.len() != 3 {
                            return Err(parse_err("pixel must have 3 channels".into()));
                        }
                        data.extend(px);
                    }
                }
                Image { height, width, data }
            }
            (None, Some(name), Some([height, width, 3])) => {
                let target = sibling(path, &name);
                let bytes = fs::read(&target).map_err(|e| Error::io(&target, e))?;
                if bytes.len() != height * width * 3 * 4 {
                    return Err(parse_err(format!("{name}: expected {} bytes, found {}", height * width * 12, bytes.len())));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Image { height, width, data }
            }
            _ => return Err(parse_err("record needs either `image` or `image_file` with `shape` [H,W,3]".into())),
        };
        records.push(ImageRecord {
            image,
            labels: rec.labels,
            dataset_id: rec.dataset_id,
            gt: rec.gt,
        });
    }
    Ok(records)
}
