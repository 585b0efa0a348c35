//! Per-tile source contribution maps and their raster rendering.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::train::FusedBag;
use crate::tuner::contribution_scores;

/// Source colours, indexed by source order (wrapping past six sources).
pub const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [245, 130, 48],
];

pub const BACKGROUND: [u8; 3] = [255, 255, 255];

pub fn source_color(index: usize) -> [u8; 3] {
    PALETTE[index % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub grid_x: i64,
    pub grid_y: i64,
    pub scores: Vec<f64>,
    pub argmax_source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionMap {
    pub slide_id: String,
    pub source_ids: Vec<String>,
    pub records: Vec<ContributionRecord>,
}

impl ContributionMap {
    pub fn colors(&self) -> Vec<[u8; 3]> {
        (0..self.source_ids.len()).map(source_color).collect()
    }
}

/// Runs the tuner on every unmasked tile of `bag` and records the row-mean
/// gate of each source.
pub fn compute_contribution_map(model: &FusionModel, bag: &FusedBag) -> Result<ContributionMap> {
    let tuner = model
        .tuner()
        .ok_or_else(|| Error::VariantHasNoTuner(model.spec.variant.to_string()))?;
    let records = bag
        .bag
        .tiles
        .iter()
        .zip(&bag.tiles)
        .map(|(t, x)| {
            let (gate, _) = tuner.forward(x)?;
            let c = contribution_scores(&gate);
            Ok(ContributionRecord {
                grid_x: t.grid_x,
                grid_y: t.grid_y,
                scores: c.scores,
                argmax_source: c.argmax_source,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContributionMap {
        slide_id: bag.bag.slide_id.clone(),
        source_ids: model.spec.source_ids.clone(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMode {
    Argmax,
    /// Grey level of one source's score.
    Source(usize),
}

/// RGB raster, row-major from the top-left corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }
}

/// Paints a `cell x cell` block per tile at its grid position; cells with no
/// tile stay white.
pub fn render_heatmap(map: &ContributionMap, mode: HeatmapMode, cell: usize) -> Result<Raster> {
    if map.records.is_empty() {
        return Err(Error::EmptyMap);
    }
    if cell == 0 {
        return Err(Error::ConfigInvalid("cell size 0".into()));
    }
    if let HeatmapMode::Source(s) = mode {
        if s >= map.source_ids.len() {
            return Err(Error::ConfigInvalid(alloc::format!(
                "source {s} of {}",
                map.source_ids.len()
            )));
        }
    }
    if let Some(r) = map.records.iter().find(|r| r.grid_x < 0 || r.grid_y < 0) {
        return Err(Error::NegativeCoordinate(r.grid_x, r.grid_y));
    }
    let cols = map.records.iter().map(|r| r.grid_x).max().unwrap_or(0) as usize + 1;
    let rows = map.records.iter().map(|r| r.grid_y).max().unwrap_or(0) as usize + 1;
    let (width, height) = (cols * cell, rows * cell);
    let mut pixels = vec![BACKGROUND; width * height];
    for r in &map.records {
        let color = match mode {
            HeatmapMode::Argmax => source_color(r.argmax_source),
            HeatmapMode::Source(s) => {
                let g = libm::round(r.scores[s].clamp(0.0, 1.0) * 255.0) as u8;
                [g, g, g]
            }
        };
        let (x0, y0) = (r.grid_x as usize * cell, r.grid_y as usize * cell);
        for y in y0..y0 + cell {
            pixels[y * width + x0..y * width + x0 + cell].fill(color);
        }
    }
    Ok(Raster {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuner::argmax;

    fn map(records: Vec<(i64, i64, Vec<f64>)>) -> ContributionMap {
        ContributionMap {
            slide_id: "s".into(),
            source_ids: vec!["a".into(), "b".into()],
            records: records
                .into_iter()
                .map(|(x, y, s)| ContributionRecord {
                    grid_x: x,
                    grid_y: y,
                    argmax_source: argmax(&s),
                    scores: s,
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_argmax_grid() {
        let m = map((0..4).map(|k| (k % 2, k / 2, vec![0.9, 0.1])).collect());
        let r = render_heatmap(&m, HeatmapMode::Argmax, 2).unwrap();
        assert_eq!((r.width, r.height), (4, 4));
        assert!(r.pixels.iter().all(|&p| p == PALETTE[0]));
    }

    #[test]
    fn mid_grey_and_background() {
        let m = map(vec![(0, 0, vec![0.5, 0.5]), (2, 1, vec![0.5, 0.5])]);
        let r = render_heatmap(&m, HeatmapMode::Source(1), 1).unwrap();
        assert_eq!(r.pixel(0, 0), [128, 128, 128]);
        assert_eq!(r.pixel(2, 1), [128, 128, 128]);
        assert_eq!(r.pixel(1, 0), BACKGROUND);
        assert_eq!(r.pixel(0, 1), BACKGROUND);
    }

    #[test]
    fn errors() {
        assert_eq!(
            render_heatmap(&map(vec![]), HeatmapMode::Argmax, 1),
            Err(Error::EmptyMap)
        );
        let neg = map(vec![(-1, 0, vec![0.5, 0.5])]);
        assert_eq!(
            render_heatmap(&neg, HeatmapMode::Argmax, 1),
            Err(Error::NegativeCoordinate(-1, 0))
        );
    }
}
