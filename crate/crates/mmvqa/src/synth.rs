//! Synthetic image+caption+VQA dataset generator.
//!
//! Every image shows one colored shape (circle, square, or cross) on a dark
//! noisy background. A punched-hole texture inside the shape encodes the
//! plane label by density (axial = solid, coronal = sparse, sagittal =
//! dense), so color, shape, and plane are all recoverable only from the
//! object pixels — which also keeps every question's visual evidence
//! inside the recorded bounding box. Captions follow the template
//! `a <color> <shape> in the <plane> plane` with exactly those three words
//! as keywords, which makes masked keywords image-determined by
//! construction. Splits partition disjoint id ranges. Output is fully
//! deterministic for a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use mmvqa_core::vision::{encode_ppm, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::AppError;

const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.88, 0.82, 0.15]),
    ("magenta", [0.80, 0.15, 0.75]),
    ("cyan", [0.15, 0.78, 0.80]),
];

const SHAPES: [&str; 3] = ["circle", "square", "cross"];
const PLANES: [&str; 3] = ["axial", "coronal", "sagittal"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub canvas: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub planes: Vec<String>,
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            canvas: 96,
            colors: ["red", "green", "blue", "yellow"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
            planes: PLANES.iter().map(|s| s.to_string()).collect(),
            n_pretrain: 2000,
            n_train: 300,
            n_val: 100,
            n_test: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), AppError> {
        if self.canvas < 32 {
            return Err(AppError::usage(format!(
                "canvas {} below the 32-pixel minimum",
                self.canvas
            )));
        }
        for (name, values) in [
            ("colors", &self.colors),
            ("shapes", &self.shapes),
            ("planes", &self.planes),
        ] {
            if values.len() < 2 {
                return Err(AppError::usage(format!(
                    "{name} needs at least 2 values for non-degenerate questions"
                )));
            }
        }
        for c in &self.colors {
            if !PALETTE.iter().any(|(n, _)| n == c) {
                let known: Vec<&str> = PALETTE.iter().map(|(n, _)| *n).collect();
                return Err(AppError::usage(format!(
                    "unknown color {c:?}; known: {}",
                    known.join(", ")
                )));
            }
        }
        for s in &self.shapes {
            if !SHAPES.contains(&s.as_str()) {
                return Err(AppError::usage(format!(
                    "unknown shape {s:?}; known: {}",
                    SHAPES.join(", ")
                )));
            }
        }
        for p in &self.planes {
            if !PLANES.contains(&p.as_str()) {
                return Err(AppError::usage(format!(
                    "unknown plane {p:?}; known: {}",
                    PLANES.join(", ")
                )));
            }
        }
        if self.n_pretrain == 0 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(AppError::usage("every split needs at least one image"));
        }
        Ok(())
    }

    /// Expected masked-token accuracy of a predictor that never sees the
    /// image: attributes are sampled uniformly and every caption masks one
    /// keyword per attribute, so the best any text-only model can do is
    /// guess one value per slot.
    pub fn text_only_ceiling(&self) -> f64 {
        let per_slot = [
            1.0 / self.colors.len() as f64,
            1.0 / self.shapes.len() as f64,
            1.0 / self.planes.len() as f64,
        ];
        per_slot.iter().sum::<f64>() / per_slot.len() as f64
    }
}

/// One generated sample (also used by tests to reason about ground truth).
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image_rel: String,
    pub color: String,
    pub shape: String,
    pub plane: String,
    pub bbox: (usize, usize, usize, usize),
}

#[derive(Debug)]
pub struct SynthOutput {
    pub out_dir: PathBuf,
    pub corpus: PathBuf,
    pub vqa_train: PathBuf,
    pub vqa_val: PathBuf,
    pub vqa_test: PathBuf,
    pub boxes: PathBuf,
}

fn palette_rgb(name: &str) -> [f32; 3] {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, rgb)| *rgb)
        .expect("validated color")
}

fn render(spec: &SyntheticSpec, sample: &SynthSample, rng: &mut ChaCha8Rng) -> ImageTensor {
    let s = spec.canvas;
    // flat background: texture statistics stay attributable to the object
    let mut img = ImageTensor::filled(s, s, 0.09);
    let (x0, y0, x1, y1) = sample.bbox;
    let cx = (x0 + x1) as f32 / 2.0;
    let cy = (y0 + y1) as f32 / 2.0;
    let r = (x1 - x0) as f32 / 2.0;
    let rgb = palette_rgb(&sample.color);
    let inside_shape = |x: usize, y: usize| -> bool {
        let dx = x as f32 + 0.5 - cx;
        let dy = y as f32 + 0.5 - cy;
        match sample.shape.as_str() {
            "circle" => dx * dx + dy * dy <= r * r,
            "square" => dx.abs() <= r && dy.abs() <= r,
            "cross" => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            _ => unreachable!(),
        }
    };
    for y in y0..y1 {
        for x in x0..x1 {
            if inside_shape(x, y) {
                img.set_pixel(y, x, rgb);
            }
        }
    }
    // plane marker: punched-hole texture density (axial solid, coronal
    // sparse, sagittal dense) — a global statistic that survives pooling
    let holes = match sample.plane.as_str() {
        "axial" => 0usize,
        "coronal" => 5,
        "sagittal" => 18,
        _ => unreachable!(),
    };
    let hole_r = 3.0f32;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < holes && attempts < holes * 12 {
        attempts += 1;
        let hx = cx + rng.random_range(-(r - hole_r)..=(r - hole_r));
        let hy = cy + rng.random_range(-(r - hole_r)..=(r - hole_r));
        if !inside_shape(hx as usize, hy as usize) {
            continue;
        }
        placed += 1;
        let lo_y = (hy - hole_r).floor().max(0.0) as usize;
        let hi_y = ((hy + hole_r).ceil() as usize).min(s - 1);
        let lo_x = (hx - hole_r).floor().max(0.0) as usize;
        let hi_x = ((hx + hole_r).ceil() as usize).min(s - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let ddx = x as f32 + 0.5 - hx;
                let ddy = y as f32 + 0.5 - hy;
                if ddx * ddx + ddy * ddy <= hole_r * hole_r && inside_shape(x, y) {
                    img.set_pixel(y, x, [0.02, 0.02, 0.02]);
                }
            }
        }
    }
    img
}

fn sample_for_id(spec: &SyntheticSpec, id: usize) -> (SynthSample, ChaCha8Rng) {
    // per-id stream so the dataset is identical regardless of write order
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let color = spec.colors[rng.random_range(0..spec.colors.len())].clone();
    let shape = spec.shapes[rng.random_range(0..spec.shapes.len())].clone();
    let plane = spec.planes[rng.random_range(0..spec.planes.len())].clone();
    let s = spec.canvas;
    // fixed extent: attribute statistics stay comparable across samples
    let r = s / 5;
    let cx = rng.random_range(r + 2..s - r - 2);
    let cy = rng.random_range(r + 2..s - r - 2);
    let bbox = (cx - r, cy - r, cx + r, cy + r);
    let sample = SynthSample {
        image_rel: format!("images/img_{id:06}.ppm"),
        color,
        shape,
        plane,
        bbox,
    };
    (sample, rng)
}

fn caption_line(sample: &SynthSample) -> String {
    format!(
        "{}\ta {} {} in the {} plane\t{};{};{}",
        sample.image_rel, sample.color, sample.shape, sample.plane,
        sample.color, sample.shape, sample.plane
    )
}

fn vqa_lines(sample: &SynthSample) -> [String; 4] {
    let yesno = if sample.shape == "circle" { "yes" } else { "no" };
    [
        format!("{}\tmodality\twhat shape is shown?\t{}", sample.image_rel, sample.shape),
        format!("{}\tplane\twhat is the plane of the image?\t{}", sample.image_rel, sample.plane),
        format!("{}\torgan\twhat color is the object?\t{}", sample.image_rel, sample.color),
        format!("{}\tyesno\tis this a circle?\t{yesno}", sample.image_rel),
    ]
}

/// Generate the full dataset tree under `out_dir`.
pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<SynthOutput, AppError> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let total = spec.n_pretrain + spec.n_train + spec.n_val + spec.n_test;
    let mut corpus = String::new();
    let mut vqa = [String::new(), String::new(), String::new(), String::new()];
    let mut boxes = String::new();

    for id in 0..total {
        let (sample, mut rng) = sample_for_id(spec, id);
        let img = render(spec, &sample, &mut rng);
        fs::write(out_dir.join(&sample.image_rel), encode_ppm(&img))?;
        let (x0, y0, x1, y1) = sample.bbox;
        boxes.push_str(&format!("{}\t{x0}\t{y0}\t{x1}\t{y1}\n", sample.image_rel));
        if id < spec.n_pretrain {
            corpus.push_str(&caption_line(&sample));
            corpus.push('\n');
        } else {
            let split = if id < spec.n_pretrain + spec.n_train {
                1
            } else if id < spec.n_pretrain + spec.n_train + spec.n_val {
                2
            } else {
                3
            };
            for line in vqa_lines(&sample) {
                vqa[split].push_str(&line);
                vqa[split].push('\n');
            }
        }
    }

    let paths = SynthOutput {
        out_dir: out_dir.to_path_buf(),
        corpus: out_dir.join("pretrain.tsv"),
        vqa_train: out_dir.join("vqa_train.tsv"),
        vqa_val: out_dir.join("vqa_val.tsv"),
        vqa_test: out_dir.join("vqa_test.tsv"),
        boxes: out_dir.join("boxes.tsv"),
    };
    fs::write(&paths.corpus, corpus)?;
    fs::write(&paths.vqa_train, &vqa[1])?;
    fs::write(&paths.vqa_val, &vqa[2])?;
    fs::write(&paths.vqa_test, &vqa[3])?;
    fs::write(&paths.boxes, boxes)?;
    Ok(paths)
}

/// Parse the bounding-box sidecar: `image_rel x0 y0 x1 y1` per line.
pub fn load_boxes(path: &Path) -> Result<std::collections::BTreeMap<String, (usize, usize, usize, usize)>, AppError> {
    let text = fs::read_to_string(path)?;
    let mut out = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(AppError::data(format!(
                "{}: line {} has {} fields, expected 5",
                path.display(),
                i + 1,
                f.len()
            )));
        }
        let parse = |s: &str| -> Result<usize, AppError> {
            s.parse()
                .map_err(|_| AppError::data(format!("bad box coordinate {s:?}")))
        };
        out.insert(
            f[0].to_string(),
            (parse(f[1])?, parse(f[2])?, parse(f[3])?, parse(f[4])?),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_caption_corpus, load_vqa_dataset, DEFAULT_CATEGORIES};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            canvas: 48,
            n_pretrain: 6,
            n_train: 3,
            n_val: 2,
            n_test: 2,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generates_consistent_tree() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&tiny_spec(), dir.path()).unwrap();
        let (corpus, _) = load_caption_corpus(&out.corpus).unwrap();
        assert_eq!(corpus.len(), 6);
        // every keyword survives the substring invariant
        for r in &corpus {
            assert_eq!(r.keywords.len(), 3, "caption {:?}", r.caption);
            assert!(r.image.exists());
        }
        let cats: Vec<String> = DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect();
        let (train, _) = load_vqa_dataset(&out.vqa_train, &cats).unwrap();
        assert_eq!(train.len(), 12); // 3 images x 4 questions
        let boxes = load_boxes(&out.boxes).unwrap();
        assert_eq!(boxes.len(), 13);
    }

    #[test]
    fn split_image_sets_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&tiny_spec(), dir.path()).unwrap();
        let cats: Vec<String> = DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect();
        let (corpus, _) = load_caption_corpus(&out.corpus).unwrap();
        let (train, _) = load_vqa_dataset(&out.vqa_train, &cats).unwrap();
        let (test, _) = load_vqa_dataset(&out.vqa_test, &cats).unwrap();
        let corpus_set: std::collections::BTreeSet<_> =
            corpus.iter().map(|r| r.image.clone()).collect();
        let train_set: std::collections::BTreeSet<_> =
            train.iter().map(|r| r.image.clone()).collect();
        let test_set: std::collections::BTreeSet<_> =
            test.iter().map(|r| r.image.clone()).collect();
        assert!(corpus_set.is_disjoint(&train_set));
        assert!(corpus_set.is_disjoint(&test_set));
        assert!(train_set.is_disjoint(&test_set));
    }

    #[test]
    fn fixed_seed_reproduces_byte_identical_trees() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&tiny_spec(), d1.path()).unwrap();
        generate(&tiny_spec(), d2.path()).unwrap();
        let mut entries1: Vec<_> = walk(d1.path());
        let mut entries2: Vec<_> = walk(d2.path());
        entries1.sort();
        entries2.sort();
        assert_eq!(entries1.len(), entries2.len());
        for (a, b) in entries1.iter().zip(&entries2) {
            assert_eq!(
                a.strip_prefix(&d1.path().to_string_lossy().to_string())
                    .unwrap_or(a),
                b.strip_prefix(&d2.path().to_string_lossy().to_string())
                    .unwrap_or(b)
            );
            let ba = fs::read(a).unwrap();
            let bb = fs::read(b).unwrap();
            assert_eq!(ba, bb, "files differ: {a} vs {b}");
        }
    }

    fn walk(dir: &Path) -> Vec<String> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p.to_string_lossy().to_string());
            }
        }
        out
    }

    #[test]
    fn keywords_are_single_attribute_words() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&tiny_spec(), dir.path()).unwrap();
        let (corpus, _) = load_caption_corpus(&out.corpus).unwrap();
        for r in &corpus {
            for kw in &r.keywords {
                assert!(!kw.contains(' '));
            }
        }
    }

    #[test]
    fn ceiling_matches_uniform_attribute_sampling() {
        let spec = tiny_spec();
        // 4 colors, 3 shapes, 3 planes
        let expected = (0.25 + 1.0 / 3.0 + 1.0 / 3.0) / 3.0;
        assert!((spec.text_only_ceiling() - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        let spec = SyntheticSpec {
            shapes: vec!["circle".into()],
            ..tiny_spec()
        };
        let err = generate(&spec, Path::new("/nonexistent")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
