//! Dataset bookkeeping: sources, tiles, feature tables, the manifest and
//! alignment of per-source tables into bags.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of one embedding source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub native_dim: usize,
    #[serde(default)]
    pub display_name: String,
}

impl SourceDescriptor {
    pub fn new(source_id: impl Into<String>, native_dim: usize) -> Self {
        let source_id = source_id.into();
        Self {
            display_name: source_id.clone(),
            source_id,
            native_dim,
        }
    }
}

/// A tile's identity and grid position on its slide.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub tile_id: u64,
    pub slide_id: String,
    pub grid_x: i64,
    pub grid_y: i64,
}

impl TileRef {
    /// Canonical ordering key: row, then column, then id.
    pub fn sort_key(&self) -> (i64, i64, u64) {
        (self.grid_y, self.grid_x, self.tile_id)
    }
}

/// Raw (or pooled) embeddings of one source, one row per tile.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub source: SourceDescriptor,
    pub tile_ids: Vec<u64>,
    pub dim: usize,
    /// Row-major, `tile_ids.len() * dim` entries.
    pub values: Vec<f32>,
}

impl FeatureTable {
    pub fn new(
        source: SourceDescriptor,
        tile_ids: Vec<u64>,
        dim: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let t = Self {
            source,
            tile_ids,
            dim,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tile_ids.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.tile_ids.len() * self.dim {
            return Err(Error::ShapeMismatch {
                expected: (self.tile_ids.len(), self.dim),
                actual: (self.values.len() / self.dim.max(1), self.dim),
            });
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                source_id: self.source.source_id.clone(),
                row: pos / self.dim,
                col: pos % self.dim,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::ConfigInvalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Manifest entry for a source: its descriptor plus the feature file path
/// (relative to the manifest directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source_id: String,
    pub native_dim: usize,
    #[serde(default)]
    pub display_name: String,
    pub path: String,
}

impl SourceEntry {
    pub fn descriptor(&self) -> SourceDescriptor {
        SourceDescriptor {
            source_id: self.source_id.clone(),
            native_dim: self.native_dim,
            display_name: self.display_name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: u64,
    pub x: i64,
    pub y: i64,
    /// Per-tile regression targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    /// Class index (classification only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub sources: Vec<SourceEntry>,
    pub slides: BTreeMap<String, SlideRecord>,
    /// Slide-level split assignment; slides without an entry count as train.
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn split_of(&self, slide_id: &str) -> Split {
        self.splits.get(slide_id).copied().unwrap_or(Split::Train)
    }

    pub fn class_count(&self) -> usize {
        self.num_classes.unwrap_or_else(|| {
            self.slides
                .values()
                .filter_map(|s| s.label)
                .max()
                .map_or(0, |m| m + 1)
        })
    }

    /// Number of regression targets per tile (0 for classification).
    pub fn target_count(&self) -> usize {
        self.slides
            .values()
            .flat_map(|s| s.tiles.iter())
            .find_map(|t| t.targets.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Structural checks that do not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ManifestInvalid(msg));
        if self.sources.is_empty() {
            return bad("no sources".to_string());
        }
        let mut ids = BTreeSet::new();
        for s in &self.sources {
            if !ids.insert(s.source_id.as_str()) {
                return Err(Error::DuplicateSource(s.source_id.clone()));
            }
            if s.native_dim == 0 {
                return bad(format!("source `{}` has native_dim 0", s.source_id));
            }
        }
        let classes = self.class_count();
        let genes = self.target_count();
        let mut tile_ids = BTreeSet::new();
        for (slide_id, rec) in &self.slides {
            let mut cells = BTreeSet::new();
            for t in &rec.tiles {
                if !tile_ids.insert(t.id) {
                    return Err(Error::DuplicateTile(t.id));
                }
                if !cells.insert((t.x, t.y)) {
                    return bad(format!(
                        "slide `{slide_id}` has two tiles at ({}, {})",
                        t.x, t.y
                    ));
                }
            }
            match self.task_kind {
                TaskKind::Classification => match rec.label {
                    Some(l) if l < classes => {}
                    Some(l) => {
                        return Err(Error::LabelOutOfRange { label: l, classes });
                    }
                    None => return bad(format!("slide `{slide_id}` has no class label")),
                },
                TaskKind::Regression => {
                    for t in &rec.tiles {
                        match &t.targets {
                            Some(v) if v.len() == genes && v.iter().all(|x| x.is_finite()) => {}
                            _ => {
                                return bad(format!(
                                    "tile {} of slide `{slide_id}` lacks {genes} finite targets",
                                    t.id
                                ))
                            }
                        }
                    }
                }
            }
        }
        for slide in self.splits.keys() {
            if !self.slides.contains_key(slide) {
                return bad(format!("split refers to unknown slide `{slide}`"));
            }
        }
        Ok(())
    }
}

/// Slide-level label of a bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BagLabel {
    Class(usize),
    /// One target vector per tile, in bag tile order.
    Targets(Vec<Vec<f64>>),
}

/// A slide as an ordered bag of tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub tiles: Vec<TileRef>,
    pub label: BagLabel,
}

impl Bag {
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }
}

/// Location of a raw row: index into the table list and row inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRef {
    pub table: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBag {
    pub bag: Bag,
    pub split: Split,
    /// `rows[source][tile]` locates the raw embedding of each bag tile.
    pub rows: Vec<Vec<RowRef>>,
}

/// Groups the tables by manifest source and intersects their tile sets per
/// slide. Tiles missing from any source are dropped.
pub fn align_bags(tables: &[FeatureTable], manifest: &DatasetManifest) -> Result<Vec<AlignedBag>> {
    let mut index: Vec<BTreeMap<u64, RowRef>> = Vec::with_capacity(manifest.sources.len());
    for src in &manifest.sources {
        let mut map = BTreeMap::new();
        let mut seen_table = false;
        for (ti, table) in tables.iter().enumerate() {
            if table.source.source_id != src.source_id {
                continue;
            }
            seen_table = true;
            for (row, &id) in table.tile_ids.iter().enumerate() {
                if map.insert(id, RowRef { table: ti, row }).is_some() {
                    return Err(Error::DuplicateTile(id));
                }
            }
        }
        if !seen_table {
            return Err(Error::MissingSource(src.source_id.clone()));
        }
        index.push(map);
    }

    let mut bags = Vec::with_capacity(manifest.slides.len());
    for (slide_id, rec) in &manifest.slides {
        let mut kept: Vec<&TileEntry> = rec
            .tiles
            .iter()
            .filter(|t| index.iter().all(|m| m.contains_key(&t.id)))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyIntersection(slide_id.clone()));
        }
        kept.sort_by_key(|t| (t.y, t.x, t.id));
        let tiles: Vec<TileRef> = kept
            .iter()
            .map(|t| TileRef {
                tile_id: t.id,
                slide_id: slide_id.clone(),
                grid_x: t.x,
                grid_y: t.y,
            })
            .collect();
        let rows = index
            .iter()
            .map(|m| kept.iter().map(|t| m[&t.id]).collect())
            .collect();
        let label = match manifest.task_kind {
            TaskKind::Classification => BagLabel::Class(rec.label.ok_or_else(|| {
                Error::ManifestInvalid(format!("slide `{slide_id}` has no class label"))
            })?),
            TaskKind::Regression => BagLabel::Targets(
                kept.iter()
                    .map(|t| t.targets.clone().unwrap_or_default())
                    .collect(),
            ),
        };
        bags.push(AlignedBag {
            bag: Bag {
                slide_id: slide_id.clone(),
                tiles,
                label,
            },
            split: manifest.split_of(slide_id),
            rows,
        });
    }
    Ok(bags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn manifest(slides: &[(&str, &[(u64, i64, i64)])]) -> DatasetManifest {
        DatasetManifest {
            task_kind: TaskKind::Classification,
            num_classes: Some(2),
            sources: vec![
                SourceEntry {
                    source_id: "a".into(),
                    native_dim: 1,
                    display_name: String::new(),
                    path: "a.pft".into(),
                },
                SourceEntry {
                    source_id: "b".into(),
                    native_dim: 1,
                    display_name: String::new(),
                    path: "b.pft".into(),
                },
            ],
            slides: slides
                .iter()
                .map(|(id, tiles)| {
                    (
                        id.to_string(),
                        SlideRecord {
                            label: Some(0),
                            tiles: tiles
                                .iter()
                                .map(|&(id, x, y)| TileEntry {
                                    id,
                                    x,
                                    y,
                                    targets: None,
                                })
                                .collect(),
                        },
                    )
                })
                .collect(),
            splits: BTreeMap::new(),
        }
    }

    fn table(src: &str, ids: &[u64]) -> FeatureTable {
        FeatureTable::new(
            SourceDescriptor::new(src, 1),
            ids.to_vec(),
            1,
            ids.iter().map(|&i| i as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_tile_sets_are_kept() {
        let m = manifest(&[("s", &[(1, 0, 0), (2, 1, 0)])]);
        let bags = align_bags(&[table("a", &[1, 2]), table("b", &[2, 1])], &m).unwrap();
        let ids: Vec<u64> = bags[0].bag.tiles.iter().map(|t| t.tile_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(bags[0].rows[1][0], RowRef { table: 1, row: 1 });
    }

    #[test]
    fn partial_overlap_is_intersected() {
        let m = manifest(&[("s", &[(1, 0, 0), (2, 1, 0), (3, 2, 0), (4, 3, 0)])]);
        let bags = align_bags(&[table("a", &[1, 2, 3]), table("b", &[2, 3, 4])], &m).unwrap();
        let ids: Vec<u64> = bags[0].bag.tiles.iter().map(|t| t.tile_id).collect();
        assert_eq!(ids, vec![2, 3]);
    }

    #[test]
    fn missing_slide_tiles_is_an_error() {
        let m = manifest(&[("s", &[(1, 0, 0)]), ("t", &[(2, 0, 0)])]);
        let err = align_bags(&[table("a", &[1, 2]), table("b", &[1])], &m).unwrap_err();
        assert_eq!(err, Error::EmptyIntersection("t".into()));
    }

    #[test]
    fn canonical_order_is_row_then_column() {
        let m = manifest(&[("s", &[(9, 1, 0), (8, 0, 1), (7, 0, 0)])]);
        let bags = align_bags(&[table("a", &[9, 8, 7]), table("b", &[7, 8, 9])], &m).unwrap();
        let ids: Vec<u64> = bags[0].bag.tiles.iter().map(|t| t.tile_id).collect();
        assert_eq!(ids, vec![7, 9, 8]);
    }

    #[test]
    fn manifest_validation_rejects_bad_labels() {
        let mut m = manifest(&[("s", &[(1, 0, 0)])]);
        m.slides.get_mut("s").unwrap().label = Some(5);
        assert!(matches!(m.validate(), Err(Error::LabelOutOfRange { .. })));
        m.slides.get_mut("s").unwrap().label = None;
        assert!(matches!(m.validate(), Err(Error::ManifestInvalid(_))));
    }

    #[test]
    fn non_finite_values_are_located() {
        let err = FeatureTable::new(
            SourceDescriptor::new("a", 2),
            vec![1, 2],
            2,
            vec![0.0, 1.0, f32::NAN, 0.0],
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::NonFiniteValue {
                source_id: "a".into(),
                row: 1,
                col: 0
            }
        );
    }
}
