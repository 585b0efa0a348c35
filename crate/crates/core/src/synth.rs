//! Synthetic multi-source datasets with planted per-phenotype specialisation.
//!
//! Every tile has a phenotype, and each phenotype is carried by exactly one
//! source. That source shows a class (or latent) dependent mean shift on a
//! quarter of its dimensions; every other source emits pure noise for the
//! tile.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetManifest, FeatureTable, SlideRecord, SourceEntry, Split, TaskKind, TileEntry,
};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub task: TaskKind,
    /// Native width of each source; its length is the source count.
    pub native_dims: Vec<usize>,
    pub phenotypes: usize,
    /// Inclusive range of tiles per bag.
    pub tiles_per_bag: (usize, usize),
    /// Bags generated per class; for regression, the total bag count.
    pub bags_per_class: usize,
    pub classes: usize,
    /// Regression targets per tile.
    pub genes: usize,
    /// Latent factors driving the regression targets.
    pub latent: usize,
    pub signal: f64,
    pub noise: f64,
    /// Probability that a tile carries its bag's base class.
    pub tile_purity: f64,
    /// Phenotype -> informative source index.
    pub specialization: Vec<usize>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            native_dims: vec![64, 96, 128],
            phenotypes: 3,
            tiles_per_bag: (2, 6),
            bags_per_class: 1200,
            classes: 2,
            genes: 4,
            latent: 4,
            signal: 2.0,
            noise: 1.0,
            tile_purity: 1.0,
            specialization: vec![0, 1, 2],
            val_fraction: 0.0,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn sources(&self) -> usize {
        self.native_dims.len()
    }

    pub fn source_id(i: usize) -> String {
        format!("src{i}")
    }

    fn groups(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.classes,
            TaskKind::Regression => self.latent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        let n = self.sources();
        if n == 0 {
            return bad("no sources".into());
        }
        if self.phenotypes < n {
            return bad(format!("{} phenotypes for {n} sources", self.phenotypes));
        }
        if self.specialization.len() != self.phenotypes {
            return bad(format!(
                "specialization map has {} entries for {} phenotypes",
                self.specialization.len(),
                self.phenotypes
            ));
        }
        if let Some(&s) = self.specialization.iter().find(|&&s| s >= n) {
            return bad(format!("specialization names source {s} of {n}"));
        }
        if let Some(s) = (0..n).find(|s| !self.specialization.contains(s)) {
            return bad(format!("source {s} is informative for no phenotype"));
        }
        let (lo, hi) = self.tiles_per_bag;
        if lo == 0 || lo > hi {
            return bad(format!("tiles per bag range {lo}..={hi}"));
        }
        if self.bags_per_class == 0 {
            return bad("no bags".into());
        }
        match self.task {
            TaskKind::Classification if self.classes < 2 => {
                return bad(format!("{} classes", self.classes))
            }
            TaskKind::Regression if self.genes == 0 || self.latent == 0 => {
                return bad("regression needs genes and latent factors".into())
            }
            _ => {}
        }
        let groups = self.groups();
        if let Some(&d) = self.native_dims.iter().find(|&&d| d % (4 * groups) != 0) {
            return bad(format!(
                "native dim {d} is not a multiple of {}",
                4 * groups
            ));
        }
        if !(self.signal >= 0.0 && self.noise >= 0.0)
            || !self.signal.is_finite()
            || !self.noise.is_finite()
        {
            return bad("signal and noise must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.tile_purity) {
            return bad(format!("tile purity {}", self.tile_purity));
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return bad(format!("split fractions val {v} test {t}"));
        }
        Ok(())
    }
}

/// Ground truth for one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileTruth {
    pub phenotype: usize,
    pub source: usize,
    /// Tile class (classification only).
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// Raw tables, one per source, in source order.
    pub tables: Vec<FeatureTable>,
    pub truth: BTreeMap<u64, TileTruth>,
    /// Regression read-out matrix (`genes x latent`, row-major).
    pub readout: Vec<f64>,
}

/// Index of the most frequent entry; ties go to the lowest index.
fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Native columns shifted for signal group `g`: every fourth column of the
/// group's contiguous region, so a quarter of the source's dims carry signal.
fn signal_columns(native: usize, groups: usize, g: usize) -> impl Iterator<Item = usize> {
    let width = native / groups;
    (g * width..(g + 1) * width).step_by(4)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let n = cfg.sources();
    let groups = cfg.groups();
    let bag_count = match cfg.task {
        TaskKind::Classification => cfg.bags_per_class * cfg.classes,
        TaskKind::Regression => cfg.bags_per_class,
    };

    let mut readout = Vec::new();
    if cfg.task == TaskKind::Regression {
        let mut r = rng::stream(cfg.seed, purpose::SYNTH, &[u64::MAX - 1]);
        let scale = 1.0 / libm::sqrt(cfg.latent as f64);
        readout = (0..cfg.genes * cfg.latent)
            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
            .collect();
    }

    let mut values: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut ids: Vec<u64> = Vec::new();
    let mut slides = BTreeMap::new();
    let mut truth = BTreeMap::new();
    let mut base_class = Vec::with_capacity(bag_count);
    let mut next_id = 0u64;

    for b in 0..bag_count {
        let mut r = rng::stream(cfg.seed, purpose::SYNTH, &[b as u64]);
        let base = b % cfg.classes.max(1);
        base_class.push(if cfg.task == TaskKind::Classification {
            base
        } else {
            0
        });
        let count = r.random_range(cfg.tiles_per_bag.0..=cfg.tiles_per_bag.1);
        let width = (1..).find(|w| w * w >= count).unwrap_or(1);
        let mut tiles = Vec::with_capacity(count);
        let mut class_counts = vec![0usize; cfg.classes.max(1)];
        for k in 0..count {
            let phenotype = r.random_range(0..cfg.phenotypes);
            let source = cfg.specialization[phenotype];
            // Per-chunk offsets applied to the informative source.
            let mut shift = vec![0.0f64; groups];
            let mut class = None;
            let mut targets = None;
            match cfg.task {
                TaskKind::Classification => {
                    let c = if r.random::<f64>() < cfg.tile_purity {
                        base
                    } else {
                        let other = r.random_range(0..cfg.classes - 1);
                        if other >= base {
                            other + 1
                        } else {
                            other
                        }
                    };
                    class_counts[c] += 1;
                    shift[c] = cfg.signal;
                    class = Some(c);
                }
                TaskKind::Regression => {
                    let z: Vec<f64> = (0..cfg.latent).map(|_| r.sample(StandardNormal)).collect();
                    for (s, zj) in shift.iter_mut().zip(&z) {
                        *s = cfg.signal * (1.0 + zj);
                    }
                    let y = (0..cfg.genes)
                        .map(|g| {
                            (0..cfg.latent)
                                .map(|j| readout[g * cfg.latent + j] * z[j])
                                .sum()
                        })
                        .collect();
                    targets = Some(y);
                }
            }
            for (s, &native) in cfg.native_dims.iter().enumerate() {
                let start = values[s].len();
                for _ in 0..native {
                    let e: f64 = r.sample(StandardNormal);
                    values[s].push((cfg.noise * e) as f32);
                }
                if s == source {
                    for (g, &off) in shift.iter().enumerate() {
                        for c in signal_columns(native, groups, g) {
                            let v = &mut values[s][start + c];
                            *v = (*v as f64 + off) as f32;
                        }
                    }
                }
            }
            let id = next_id;
            next_id += 1;
            ids.push(id);
            truth.insert(
                id,
                TileTruth {
                    phenotype,
                    source,
                    class,
                },
            );
            tiles.push(TileEntry {
                id,
                x: (k % width) as i64,
                y: (k / width) as i64,
                targets,
            });
        }
        let label = match cfg.task {
            TaskKind::Classification => Some(majority(&class_counts)),
            TaskKind::Regression => None,
        };
        slides.insert(slide_name(b), SlideRecord { label, tiles });
    }

    // Stratified by base class so every split sees every class.
    let mut splits = BTreeMap::new();
    let mut r = rng::stream(cfg.seed, purpose::SYNTH, &[u64::MAX]);
    let group_count = if cfg.task == TaskKind::Classification {
        cfg.classes
    } else {
        1
    };
    for g in 0..group_count {
        let mut members: Vec<usize> = (0..bag_count).filter(|&b| base_class[b] == g).collect();
        members.shuffle(&mut r);
        let m = members.len() as f64;
        let n_test = libm::round(m * cfg.test_fraction) as usize;
        let n_val = libm::round(m * cfg.val_fraction) as usize;
        for (i, &b) in members.iter().enumerate() {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            splits.insert(slide_name(b), split);
        }
    }

    let sources: Vec<SourceEntry> = cfg
        .native_dims
        .iter()
        .enumerate()
        .map(|(i, &d)| SourceEntry {
            source_id: SynthConfig::source_id(i),
            native_dim: d,
            display_name: format!("Synthetic source {i}"),
            path: format!("{}.pft", SynthConfig::source_id(i)),
        })
        .collect();
    let tables = sources
        .iter()
        .zip(values)
        .map(|(s, v)| FeatureTable::new(s.descriptor(), ids.clone(), s.native_dim, v))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        task_kind: cfg.task,
        num_classes: (cfg.task == TaskKind::Classification).then_some(cfg.classes),
        sources,
        slides,
        splits,
    };
    manifest.validate()?;
    Ok(SyntheticDataset {
        manifest,
        tables,
        truth,
        readout,
    })
}

fn slide_name(b: usize) -> String {
    format!("slide_{b:04}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.phenotypes = 2;
        c.specialization = vec![0, 1];
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = ok.clone();
        c.specialization = vec![0, 0, 1];
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = ok;
        c.tiles_per_bag = (5, 4);
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn majority_ties_to_lowest() {
        assert_eq!(majority(&[2, 3, 3]), 1);
        assert_eq!(majority(&[0, 0]), 0);
    }

    #[test]
    fn deterministic_and_labelled_by_majority() {
        let cfg = SynthConfig {
            bags_per_class: 4,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        for slide in a.manifest.slides.values() {
            let mut counts = vec![0; cfg.classes];
            for t in &slide.tiles {
                counts[a.truth[&t.id].class.unwrap()] += 1;
            }
            assert_eq!(slide.label, Some(majority(&counts)));
        }
        assert_eq!(
            a.manifest
                .splits
                .values()
                .filter(|&&s| s == Split::Test)
                .count(),
            2
        );
    }

    #[test]
    fn noiseless_tiles_are_exact() {
        let cfg = SynthConfig {
            bags_per_class: 1,
            noise: 0.0,
            signal: 2.0,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for (row, id) in ds.tables[0].tile_ids.iter().enumerate() {
            let t = ds.truth[id];
            for (s, table) in ds.tables.iter().enumerate() {
                let v = table.row(row);
                let nonzero: Vec<usize> = (0..v.len()).filter(|&c| v[c] != 0.0).collect();
                if s == t.source {
                    assert_eq!(
                        nonzero,
                        signal_columns(table.dim, 2, t.class.unwrap()).collect::<Vec<_>>()
                    );
                    assert!(nonzero.iter().all(|&c| v[c] == 2.0));
                } else {
                    assert!(nonzero.is_empty());
                }
            }
        }
    }

    #[test]
    fn regression_targets_follow_readout() {
        let cfg = SynthConfig {
            task: TaskKind::Regression,
            bags_per_class: 3,
            noise: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.manifest.target_count(), cfg.genes);
        assert_eq!(ds.readout.len(), cfg.genes * cfg.latent);
        for slide in ds.manifest.slides.values() {
            assert!(slide.label.is_none());
            assert!(slide
                .tiles
                .iter()
                .all(|t| t.targets.as_ref().map(Vec::len) == Some(cfg.genes)));
        }
    }
}
