//! Incremental scenario splits over COCO-style annotation files.
//!
//! A scenario spec names an ordered list of class-id steps; splitting
//! produces one annotation file per step containing only that step's
//! class annotations (and only images that keep at least one
//! annotation), mirroring the incremental rule that earlier steps'
//! boxes are unavailable when later steps are trained.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: i64,
    #[serde(default)]
    pub file_name: String,
    #[serde(default)]
    pub width: i64,
    #[serde(default)]
    pub height: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    #[serde(default)]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

/// In-memory annotation set: the three COCO arrays this pipeline uses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Image-id predicate for carving a train (or test) subset out of the
/// source before splitting. Bounds are inclusive; a missing bound is
/// unbounded.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageIdFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_image_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_image_id: Option<i64>,
}

impl ImageIdFilter {
    fn accepts(&self, id: i64) -> bool {
        self.min_image_id.is_none_or(|lo| id >= lo)
            && self.max_image_id.is_none_or(|hi| id <= hi)
    }
}

/// A named scenario: ordered steps of class ids over a source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub steps: Vec<Vec<i64>>,
    pub source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_filter: Option<ImageIdFilter>,
}

impl ScenarioSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: ScenarioSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::SpecError("no steps".into()));
        }
        let mut seen = HashSet::new();
        for step in &self.steps {
            if step.is_empty() {
                return Err(Error::SpecError("empty step".into()));
            }
            for &c in step {
                if !seen.insert(c) {
                    return Err(Error::SpecError(format!("class {c} appears in two steps")));
                }
            }
        }
        Ok(())
    }
}

/// Accounting for one produced step file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub step: usize,
    pub path: PathBuf,
    pub image_count: usize,
    pub annotation_count: usize,
    pub class_ids: Vec<i64>,
}

/// Accounting for a whole split run; written next to the step files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_filter: Option<ImageIdFilter>,
    pub steps: Vec<StepManifest>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Per-check outcome of [`validate_split`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl ValidationReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.passed &= passed;
        self.checks.push(CheckResult { name: name.to_string(), passed, detail });
    }
}

/// Parses a COCO-style file without reference validation.
fn parse_annotations(path: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a COCO-style file and validates id uniqueness plus
/// image/category references.
pub fn load_annotations(path: &Path) -> Result<CocoDataset> {
    let ds = parse_annotations(path)?;
    let mut image_ids = HashSet::new();
    for img in &ds.images {
        if !image_ids.insert(img.id) {
            return Err(Error::DuplicateId { kind: "image", id: img.id });
        }
    }
    let mut cat_ids = HashSet::new();
    for cat in &ds.categories {
        if !cat_ids.insert(cat.id) {
            return Err(Error::DuplicateId { kind: "category", id: cat.id });
        }
    }
    let mut ann_ids = HashSet::new();
    for ann in &ds.annotations {
        if !ann_ids.insert(ann.id) {
            return Err(Error::DuplicateId { kind: "annotation", id: ann.id });
        }
        if !image_ids.contains(&ann.image_id) {
            return Err(Error::DanglingReference { kind: "image", id: ann.image_id });
        }
        if !cat_ids.contains(&ann.category_id) {
            return Err(Error::DanglingReference { kind: "category", id: ann.category_id });
        }
    }
    Ok(ds)
}

pub fn save_annotations(ds: &CocoDataset, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(ds)?)?;
    Ok(())
}

/// Splits `source` into per-step annotation files under `out_dir`.
///
/// Step `k` keeps exactly the annotations whose class is in
/// `spec.steps[k]` (and whose image passes the spec's filter, when one is
/// set); an image is included iff it keeps at least one annotation; the
/// category table is restricted to the step's classes. Returns the
/// manifest, which is also written as `<name>_manifest.json`.
pub fn split_by_steps(
    source: &CocoDataset,
    spec: &ScenarioSpec,
    out_dir: &Path,
) -> Result<SplitManifest> {
    spec.validate()?;
    let cat_ids: HashSet<i64> = source.categories.iter().map(|c| c.id).collect();
    for step in &spec.steps {
        for &c in step {
            if !cat_ids.contains(&c) {
                return Err(Error::SpecError(format!("class {c} not present in source")));
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    let filter = spec.test_filter.clone().unwrap_or_default();

    let mut steps = Vec::with_capacity(spec.steps.len());
    for (k, step_classes) in spec.steps.iter().enumerate() {
        let classes: HashSet<i64> = step_classes.iter().copied().collect();
        let annotations: Vec<CocoAnnotation> = source
            .annotations
            .iter()
            .filter(|a| classes.contains(&a.category_id) && filter.accepts(a.image_id))
            .cloned()
            .collect();
        let kept_images: HashSet<i64> = annotations.iter().map(|a| a.image_id).collect();
        let images: Vec<CocoImage> =
            source.images.iter().filter(|i| kept_images.contains(&i.id)).cloned().collect();
        let categories: Vec<CocoCategory> =
            source.categories.iter().filter(|c| classes.contains(&c.id)).cloned().collect();

        let path = out_dir.join(format!("{}_step{}.json", spec.name, k + 1));
        let ds = CocoDataset { images, annotations, categories };
        save_annotations(&ds, &path)?;
        steps.push(StepManifest {
            step: k + 1,
            path,
            image_count: ds.images.len(),
            annotation_count: ds.annotations.len(),
            class_ids: step_classes.clone(),
        });
    }

    let manifest = SplitManifest {
        name: spec.name.clone(),
        source: spec.source.clone(),
        test_filter: spec.test_filter.clone(),
        steps,
    };
    fs::write(
        out_dir.join(format!("{}_manifest.json", spec.name)),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Re-derives every split invariant from the written files and the
/// source: class membership per step, counts, image inclusion,
/// cross-step disjointness, and conservation of the class-restricted
/// annotation set. Order-insensitive.
pub fn validate_split(manifest: &SplitManifest, source: &CocoDataset) -> Result<ValidationReport> {
    let mut report = ValidationReport { passed: true, checks: Vec::new() };
    let filter = manifest.test_filter.clone().unwrap_or_default();
    let source_anns: HashMap<i64, &CocoAnnotation> =
        source.annotations.iter().map(|a| (a.id, a)).collect();

    let mut seen_ids: HashMap<i64, usize> = HashMap::new();
    let mut total_kept = 0usize;

    for step in &manifest.steps {
        let label = format!("step{}", step.step);
        // parse leniently so membership problems surface as checks, not
        // reference errors
        let ds = match parse_annotations(&step.path) {
            Ok(ds) => ds,
            Err(e) => {
                report.push(&label, false, format!("unreadable: {e}"));
                continue;
            }
        };
        let classes: HashSet<i64> = step.class_ids.iter().copied().collect();

        let mut file_cats: Vec<i64> = ds.categories.iter().map(|c| c.id).collect();
        file_cats.sort_unstable();
        let mut want_cats: Vec<i64> = step.class_ids.clone();
        want_cats.sort_unstable();
        report.push(
            &format!("{label} categories"),
            file_cats == want_cats,
            format!("{} categories", file_cats.len()),
        );

        let strays: Vec<i64> = ds
            .annotations
            .iter()
            .filter(|a| !classes.contains(&a.category_id))
            .map(|a| a.id)
            .collect();
        report.push(
            &format!("{label} class membership"),
            strays.is_empty(),
            if strays.is_empty() {
                "all annotations in step classes".into()
            } else {
                format!("out-of-step annotation ids {strays:?}")
            },
        );

        let unknown: Vec<i64> = ds
            .annotations
            .iter()
            .filter(|a| !source_anns.contains_key(&a.id))
            .map(|a| a.id)
            .collect();
        report.push(
            &format!("{label} provenance"),
            unknown.is_empty(),
            if unknown.is_empty() {
                "all annotations trace to source".into()
            } else {
                format!("annotation ids not in source {unknown:?}")
            },
        );

        report.push(
            &format!("{label} counts"),
            ds.annotations.len() == step.annotation_count && ds.images.len() == step.image_count,
            format!("{} annotations, {} images", ds.annotations.len(), ds.images.len()),
        );

        let with_ann: HashSet<i64> = ds.annotations.iter().map(|a| a.image_id).collect();
        let empty_images: Vec<i64> =
            ds.images.iter().filter(|i| !with_ann.contains(&i.id)).map(|i| i.id).collect();
        report.push(
            &format!("{label} image inclusion"),
            empty_images.is_empty(),
            if empty_images.is_empty() {
                "every image keeps an annotation".into()
            } else {
                format!("images without annotations {empty_images:?}")
            },
        );

        for a in &ds.annotations {
            if let Some(prev) = seen_ids.insert(a.id, step.step) {
                report.push(
                    "disjointness",
                    false,
                    format!("annotation {} appears in step {} and step {}", a.id, prev, step.step),
                );
            }
        }
        total_kept += ds.annotations.len();
    }

    let spec_classes: HashSet<i64> =
        manifest.steps.iter().flat_map(|s| s.class_ids.iter().copied()).collect();
    let expected = source
        .annotations
        .iter()
        .filter(|a| spec_classes.contains(&a.category_id) && filter.accepts(a.image_id))
        .count();
    report.push(
        "conservation",
        total_kept == expected,
        format!("kept {total_kept}, source restricted to spec classes has {expected}"),
    );
    Ok(report)
}

/// Deterministic toy dataset: `num_classes` categories spread over
/// `images` images with `anns_per_image` annotations each, every class
/// guaranteed to appear. Intended for demos, fixtures and tests.
pub fn toy_dataset(num_classes: usize, images: usize, anns_per_image: usize, seed: u64) -> CocoDataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let categories = (0..num_classes)
        .map(|c| CocoCategory {
            id: c as i64 + 1,
            name: format!("player_{:02}", c + 1),
            supercategory: "player".into(),
        })
        .collect();
    let image_list: Vec<CocoImage> = (0..images)
        .map(|i| CocoImage {
            id: i as i64 + 1,
            file_name: format!("frame_{:05}.jpg", i + 1),
            width: 1280,
            height: 720,
        })
        .collect();
    let mut annotations = Vec::new();
    let mut next_id = 1i64;
    for (i, img) in image_list.iter().enumerate() {
        for j in 0..anns_per_image {
            // cycle the first pass through all classes so each appears
            let flat = i * anns_per_image + j;
            let cat = if flat < num_classes {
                flat as i64 + 1
            } else {
                rng.random_range(0..num_classes as i64) + 1
            };
            let x = rng.random_range(0.0..1100.0);
            let y = rng.random_range(0.0..600.0);
            let w = rng.random_range(40.0..160.0);
            let h = rng.random_range(60.0..120.0);
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: img.id,
                category_id: cat,
                bbox: [x, y, w, h],
                area: w * h,
                iscrowd: 0,
            });
            next_id += 1;
        }
    }
    CocoDataset { images: image_list, annotations, categories }
}
