//! Geometry, ingestion of precomputed region bundles, and the
//! ambiguous-subset mining procedure.

mod bbox;
mod io;
mod mining;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intent::RegionLookup;
use crate::vecmath::Embedding;

pub use bbox::{iou, Bbox};
pub use io::{
    load_bundle, load_bundle_dir, load_queries, read_json, read_jsonl, save_bundle, save_bundle_with_sidecar,
    write_json, write_jsonl, BundleManifest, RegionRecord,
};
pub use mining::{
    group_detections, mine_ambiguous, AmbiguousSample, DistractorCheck, MiningConfig,
    MiningReport, SkipReason, SkippedObject,
};

/// Identifier of a candidate region, unique within its bundle.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RegionId(pub u32);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for RegionId {
    fn from(v: u32) -> Self {
        RegionId(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: RegionId,
    pub bbox: Bbox,
    pub embedding: Embedding,
}

/// One target image's candidate regions with their embeddings.
#[derive(Debug, Clone)]
pub struct Bundle {
    image_id: String,
    image_uri: Option<String>,
    dim: usize,
    regions: Vec<Region>,
    index: HashMap<RegionId, usize>,
}

impl PartialEq for Bundle {
    fn eq(&self, other: &Self) -> bool {
        self.image_id == other.image_id
            && self.image_uri == other.image_uri
            && self.dim == other.dim
            && self.regions == other.regions
    }
}

impl Bundle {
    pub fn new(
        image_id: impl Into<String>,
        image_uri: Option<String>,
        dim: usize,
        regions: Vec<Region>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let ctx = || format!("bundle {image_id}");
        if dim == 0 {
            return Err(Error::format(ctx(), "dim must be positive"));
        }
        if regions.is_empty() {
            return Err(Error::format(ctx(), "bundle has no regions"));
        }
        let mut index = HashMap::with_capacity(regions.len());
        for (pos, r) in regions.iter().enumerate() {
            if r.embedding.dim() != dim {
                return Err(Error::format(
                    ctx(),
                    format!(
                        "region {} has dimension {}, bundle declares {dim}",
                        r.id,
                        r.embedding.dim()
                    ),
                ));
            }
            if index.insert(r.id, pos).is_some() {
                return Err(Error::format(ctx(), format!("duplicate region id {}", r.id)));
            }
        }
        Ok(Self {
            image_id,
            image_uri,
            dim,
            regions,
            index,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn image_uri(&self) -> Option<&str> {
        self.image_uri.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, id: RegionId) -> Option<&Region> {
        self.index.get(&id).map(|&pos| &self.regions[pos])
    }
}

impl RegionLookup for Bundle {
    fn region_embedding(&self, id: RegionId) -> Option<&Embedding> {
        self.region(id).map(|r| &r.embedding)
    }
}

/// The initial prompt of one retrieval query plus its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryRecord", into = "QueryRecord")]
pub struct Query {
    pub query_id: String,
    pub image_id: String,
    pub text: Option<String>,
    pub text_embedding: Option<Embedding>,
    pub ref_image_embedding: Option<Embedding>,
    pub gt_bbox: Bbox,
    pub category: String,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    query_id: String,
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_embedding: Option<Embedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ref_image_embedding: Option<Embedding>,
    gt_bbox: Bbox,
    category: String,
}

impl TryFrom<QueryRecord> for Query {
    type Error = Error;

    fn try_from(r: QueryRecord) -> Result<Self> {
        if r.text_embedding.is_none() && r.ref_image_embedding.is_none() {
            return Err(Error::EmptyQuery);
        }
        Ok(Query {
            query_id: r.query_id,
            image_id: r.image_id,
            text: r.text,
            text_embedding: r.text_embedding,
            ref_image_embedding: r.ref_image_embedding,
            gt_bbox: r.gt_bbox,
            category: r.category,
        })
    }
}

impl From<Query> for QueryRecord {
    fn from(q: Query) -> Self {
        QueryRecord {
            query_id: q.query_id,
            image_id: q.image_id,
            text: q.text,
            text_embedding: q.text_embedding,
            ref_image_embedding: q.ref_image_embedding,
            gt_bbox: q.gt_bbox,
            category: q.category,
        }
    }
}

/// An annotated object, as consumed by mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    #[serde(alias = "gt_bbox")]
    pub bbox: Bbox,
    pub category: String,
}

/// One entry of a probe detector's ranked output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: Bbox,
    pub confidence: f64,
    pub category: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(id: u32, v: &[f64]) -> Region {
        Region {
            id: RegionId(id),
            bbox: Bbox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            embedding: Embedding::new(v.to_vec()).unwrap(),
        }
    }

    #[test]
    fn bundle_rejects_duplicate_ids_and_bad_dims() {
        let dup = Bundle::new("img", None, 2, vec![region(1, &[1.0, 0.0]), region(1, &[0.0, 1.0])]);
        assert!(matches!(dup, Err(Error::Format { .. })));
        let dims = Bundle::new("img", None, 3, vec![region(1, &[1.0, 0.0])]);
        assert!(matches!(dims, Err(Error::Format { .. })));
        assert!(Bundle::new("img", None, 2, vec![]).is_err());
    }

    #[test]
    fn bundle_lookup_by_id() {
        let b = Bundle::new("img", None, 2, vec![region(4, &[1.0, 0.0]), region(9, &[0.0, 1.0])])
            .unwrap();
        assert_eq!(b.region(RegionId(9)).unwrap().embedding.as_slice(), &[0.0, 1.0]);
        assert!(b.region(RegionId(5)).is_none());
    }

    #[test]
    fn query_requires_an_embedding() {
        let json = r#"{"query_id":"q","image_id":"i","gt_bbox":[0,0,1,1],"category":"cup"}"#;
        assert!(serde_json::from_str::<Query>(json).is_err());
        let json = r#"{"query_id":"q","image_id":"i","text_embedding":[3,4],"gt_bbox":[0,0,1,1],"category":"cup"}"#;
        let q: Query = serde_json::from_str(json).unwrap();
        assert_eq!(q.text_embedding.unwrap().as_slice(), &[0.6, 0.8]);
    }
}
