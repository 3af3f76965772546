//! Seeded generator of ambiguous retrieval scenes.
//!
//! Each scene has a prompt direction `q`, one true target and a handful of
//! distractors that the prompt prefers over the target. Distractors come in
//! one to `max_clusters` tight concept clusters centred `cluster_offset_deg`
//! away from `q`, each cluster along its own axis orthogonal to `q`. The target
//! sits `target_offset_deg` from `q`, rotated by `target_azimuth_deg` away from
//! the first cluster axis (90 puts it orthogonal to every cluster). The rest of
//! the regions are background at `background_*_deg` from `q`, in directions
//! orthogonal to all of the above.
//!
//! Rejecting one distractor therefore suppresses its whole cluster but barely
//! touches the other clusters, so scenes with several clusters need several
//! turns.
//!
//! Randomness: `ChaCha8Rng::seed_from_u64(seed)`, with scene `i` drawn from
//! stream `i`, so scenes do not depend on each other or on thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_bundle_with_sidecar, write_json, write_jsonl, Bbox, Bundle, Detection, GroundTruth, Query, Region,
    RegionId,
};
use crate::error::{Error, Result};
use crate::vecmath::Embedding;

pub const SPLIT_LABELS: [&str; 3] = ["rare", "common", "frequent"];
pub const BACKGROUND_CATEGORY: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub scenes: usize,
    /// Candidate regions per scene.
    pub regions: usize,
    pub dim: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub max_clusters: usize,
    pub cluster_offset_deg: f64,
    /// Distractors are spread uniformly over a cap of this radius around their cluster centre.
    pub spread_deg: f64,
    pub target_offset_deg: f64,
    pub target_azimuth_deg: f64,
    pub background_min_deg: f64,
    pub background_max_deg: f64,
    pub categories: usize,
    /// Side of the square synthetic image, in pixels.
    pub image_size: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            scenes: 200,
            regions: 100,
            dim: crate::DEFAULT_DIM,
            distractors_min: 3,
            distractors_max: 9,
            max_clusters: 3,
            cluster_offset_deg: 10.0,
            spread_deg: 4.0,
            target_offset_deg: 20.0,
            target_azimuth_deg: 90.0,
            background_min_deg: 40.0,
            background_max_deg: 90.0,
            categories: 30,
            image_size: 640.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn needs_azimuth_axis(&self) -> bool {
        self.target_azimuth_deg.to_radians().sin().abs() > 1e-12
    }

    /// Orthonormal directions a scene needs besides the background ones.
    fn basis_size(&self) -> usize {
        1 + self.max_clusters.min(self.distractors_max) + usize::from(self.needs_azimuth_axis())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenes == 0 {
            return bad("scenes must be positive".into());
        }
        if self.distractors_min == 0 || self.distractors_min > self.distractors_max {
            return bad(format!(
                "distractor range {}..={} is empty or starts at zero",
                self.distractors_min, self.distractors_max
            ));
        }
        if self.max_clusters == 0 {
            return bad("max_clusters must be positive".into());
        }
        if self.regions < 1 + self.distractors_max {
            return bad(format!(
                "{} regions cannot hold a target and {} distractors",
                self.regions, self.distractors_max
            ));
        }
        if self.categories == 0 {
            return bad("categories must be positive".into());
        }
        for (name, v) in [
            ("cluster_offset_deg", self.cluster_offset_deg),
            ("spread_deg", self.spread_deg),
            ("target_offset_deg", self.target_offset_deg),
            ("target_azimuth_deg", self.target_azimuth_deg),
            ("background_min_deg", self.background_min_deg),
            ("background_max_deg", self.background_max_deg),
        ] {
            if !(v.is_finite() && (0.0..=360.0).contains(&v)) {
                return bad(format!("{name} must be in [0, 360], got {v}"));
            }
        }
        if self.background_min_deg > self.background_max_deg {
            return bad("background_min_deg exceeds background_max_deg".into());
        }
        if !(self.image_size.is_finite() && self.image_size > 0.0) {
            return bad("image_size must be positive".into());
        }
        let has_background = self.regions > 1 + self.distractors_min;
        let needed = self.basis_size().max(2) + usize::from(has_background);
        if self.dim < needed {
            return bad(format!("dim {} is too small, these parameters need {needed}", self.dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bundle: Bundle,
    pub query: Query,
    pub ground_truth: GroundTruth,
    /// Probe output: every region, ordered by cosine to the prompt.
    pub detections: Vec<Detection>,
    pub target: RegionId,
    pub distractors: Vec<RegionId>,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub params: SynthParams,
    pub scenes: Vec<Scene>,
    /// Category to split label.
    pub splits: BTreeMap<String, String>,
}

impl SynthDataset {
    pub fn pairs(&self) -> Vec<(Bundle, Query)> {
        self.scenes
            .iter()
            .map(|s| (s.bundle.clone(), s.query.clone()))
            .collect()
    }
}

type Vector = Vec<f64>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(mut v: Vector) -> Option<Vector> {
    let n = dot(&v, &v).sqrt();
    if n < 1e-9 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

fn combine(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vector {
    x.iter().zip(y).map(|(p, q)| a * p + b * q).collect()
}

/// A random unit vector orthogonal to every vector in `against` (assumed orthonormal).
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize, against: &[&[f64]]) -> Vector {
    loop {
        let mut v: Vector = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // two passes keep the result orthogonal to machine precision
        for _ in 0..2 {
            for b in against {
                let p = dot(&v, b);
                v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= p * y);
            }
        }
        if let Some(v) = normalize(v) {
            return v;
        }
    }
}

fn category_name(idx: usize) -> String {
    format!("concept-{idx:03}")
}

fn split_of(idx: usize, categories: usize) -> &'static str {
    SPLIT_LABELS[idx * SPLIT_LABELS.len() / categories]
}

/// Region `id`'s box: cell `id` of a row-major square grid, inset by a tenth.
fn grid_box(id: usize, regions: usize, image_size: f64) -> Bbox {
    let cols = (regions as f64).sqrt().ceil() as usize;
    let cell = image_size / cols as f64;
    let (row, col) = (id / cols, id % cols);
    let inset = cell * 0.1;
    Bbox::new(col as f64 * cell + inset, row as f64 * cell + inset, cell - 2.0 * inset, cell - 2.0 * inset)
        .expect("grid cells have positive extent")
}

fn scene(p: &SynthParams, index: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);
    let dim = p.dim;

    let n_distractors = rng.random_range(p.distractors_min..=p.distractors_max);
    let n_clusters = rng.random_range(1..=p.max_clusters).min(n_distractors);
    let category_idx = rng.random_range(0..p.categories);

    let n_axes = 1 + n_clusters + usize::from(p.needs_azimuth_axis());
    let mut basis: Vec<Vector> = Vec::with_capacity(n_axes);
    while basis.len() < n_axes {
        let refs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
        let v = random_orthogonal(&mut rng, dim, &refs);
        basis.push(v);
    }
    let q = basis[0].clone();
    let axes = &basis[1..1 + n_clusters];

    let mut sizes = vec![1usize; n_clusters];
    for _ in n_clusters..n_distractors {
        sizes[rng.random_range(0..n_clusters)] += 1;
    }

    let (co, so) = (p.cluster_offset_deg.to_radians().cos(), p.cluster_offset_deg.to_radians().sin());
    let spread = p.spread_deg.to_radians();
    let mut rows: Vec<Vector> = Vec::with_capacity(p.regions);

    let (ct, st) = (p.target_offset_deg.to_radians().cos(), p.target_offset_deg.to_radians().sin());
    let phi = p.target_azimuth_deg.to_radians();
    let mut heading: Vector = axes[0].iter().map(|x| x * phi.cos()).collect();
    if p.needs_azimuth_axis() {
        heading = combine(1.0, &heading, phi.sin(), &basis[1 + n_clusters]);
    }
    rows.push(combine(ct, &q, st, &heading));

    for (axis, &n) in axes.iter().zip(&sizes) {
        let centre = combine(co, &q, so, axis);
        for _ in 0..n {
            let z = random_orthogonal(&mut rng, dim, &[&centre]);
            let s = spread * rng.random::<f64>().sqrt();
            rows.push(combine(s.cos(), &centre, s.sin(), &z));
        }
    }

    let (bmin, bmax) = (p.background_min_deg.to_radians(), p.background_max_deg.to_radians());
    let refs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
    while rows.len() < p.regions {
        let z = random_orthogonal(&mut rng, dim, &refs);
        let theta = if bmax > bmin { rng.random_range(bmin..=bmax) } else { bmin };
        rows.push(combine(theta.cos(), &q, theta.sin(), &z));
    }

    let mut ids: Vec<u32> = (0..p.regions as u32).collect();
    ids.shuffle(&mut rng);

    let image_id = format!("scene-{index:04}");
    let category = category_name(category_idx);
    let mut regions = Vec::with_capacity(p.regions);
    for (row, &id) in rows.into_iter().zip(&ids) {
        regions.push(Region {
            id: RegionId(id),
            bbox: grid_box(id as usize, p.regions, p.image_size),
            embedding: Embedding::new(row)?,
        });
    }
    regions.sort_by_key(|r| r.id);
    let target = RegionId(ids[0]);
    let mut distractors: Vec<RegionId> = ids[1..1 + n_distractors].iter().map(|&i| RegionId(i)).collect();
    distractors.sort();

    let q = Embedding::new(q)?;
    let gt_bbox = grid_box(target.0 as usize, p.regions, p.image_size);
    let mut detections: Vec<(f64, &Region)> =
        regions.iter().map(|r| (r.embedding.cosine_unchecked(&q), r)).collect();
    detections.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    let detections = detections
        .into_iter()
        .map(|(conf, r)| Detection {
            image_id: image_id.clone(),
            bbox: r.bbox,
            confidence: conf,
            category: if r.id == target || distractors.binary_search(&r.id).is_ok() {
                category.clone()
            } else {
                BACKGROUND_CATEGORY.to_owned()
            },
        })
        .collect();

    let bundle = Bundle::new(image_id.clone(), None, dim, regions)?;
    Ok(Scene {
        query: Query {
            query_id: format!("{image_id}/0"),
            image_id: image_id.clone(),
            text: Some(category.clone()),
            text_embedding: Some(q),
            ref_image_embedding: None,
            gt_bbox,
            category: category.clone(),
        },
        ground_truth: GroundTruth {
            image_id,
            bbox: gt_bbox,
            category,
        },
        bundle,
        detections,
        target,
        distractors,
        clusters: n_clusters,
    })
}

pub fn generate(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    let scenes = (0..params.scenes)
        .into_par_iter()
        .map(|i| scene(params, i))
        .collect::<Result<Vec<_>>>()?;
    let splits = (0..params.categories)
        .map(|i| (category_name(i), split_of(i, params.categories).to_owned()))
        .collect();
    Ok(SynthDataset {
        params: params.clone(),
        scenes,
        splits,
    })
}

/// File layout of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn bundles(&self) -> PathBuf {
        self.root.join("bundles")
    }

    pub fn queries(&self) -> PathBuf {
        self.root.join("queries.jsonl")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("gt.jsonl")
    }

    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.jsonl")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn params(&self) -> PathBuf {
        self.root.join("params.json")
    }
}

/// Writes the dataset under `root`. Region embeddings go to `f32` sidecars.
pub fn write_dataset(ds: &SynthDataset, root: impl AsRef<Path>) -> Result<DatasetLayout> {
    let layout = DatasetLayout::new(root.as_ref());
    let bundles = layout.bundles();
    std::fs::create_dir_all(&bundles).map_err(|e| Error::io(&bundles, e))?;
    ds.scenes.par_iter().try_for_each(|s| {
        let name = s.bundle.image_id();
        save_bundle_with_sidecar(&s.bundle, bundles.join(format!("{name}.json")), &format!("{name}.f32"))
    })?;
    let queries: Vec<&Query> = ds.scenes.iter().map(|s| &s.query).collect();
    write_jsonl(layout.queries(), &queries)?;
    let gt: Vec<&GroundTruth> = ds.scenes.iter().map(|s| &s.ground_truth).collect();
    write_jsonl(layout.ground_truth(), &gt)?;
    let dets: Vec<&Detection> = ds.scenes.iter().flat_map(|s| &s.detections).collect();
    write_jsonl(layout.detections(), &dets)?;
    write_json(layout.splits(), &ds.splits)?;
    write_json(layout.params(), &ds.params)?;
    Ok(layout)
}
