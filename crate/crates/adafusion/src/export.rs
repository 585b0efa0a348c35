//! CSV reports and binary pixmaps.

use std::fs;
use std::path::Path;

use adafusion_core::interp::{ContributionMap, ContributionRecord, Raster};
use adafusion_core::metrics::MetricReport;
use adafusion_core::train::EpochRecord;
use adafusion_core::tuner::argmax;
use adafusion_core::Split;

use crate::error::{Error, Result};

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

/// `epoch, split, loss, metric`; an undefined metric is left empty.
pub fn write_loss_curve(curve: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    w.write_record(["epoch", "split", "loss", "metric"])?;
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            split_name(r.split).into(),
            r.loss.to_string(),
            opt(r.metric),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_metrics(reports: &[(Split, MetricReport)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = writer(path.as_ref())?;
    w.write_record([
        "method",
        "split",
        "n",
        "loss",
        "acc",
        "auc",
        "pcc",
        "per_output",
    ])?;
    for (split, r) in reports {
        let per: Vec<String> = r.per_output.iter().map(|&x| opt(x)).collect();
        w.write_record([
            r.method.clone(),
            split_name(*split).into(),
            r.n.to_string(),
            r.loss.to_string(),
            opt(r.acc),
            opt(r.auc),
            opt(r.pcc),
            per.join(";"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// `slide_id, grid_x, grid_y, s_<source_id>..., argmax_source`. Scores are
/// written in shortest round-trip form, so reading back is exact.
pub fn write_contribution_csv(maps: &[ContributionMap], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let Some(first) = maps.first() else {
        return Err(Error::Core(adafusion_core::Error::EmptyMap));
    };
    let ids = &first.source_ids;
    if maps.iter().any(|m| &m.source_ids != ids) {
        return Err(Error::Invalid(
            "contribution maps disagree on sources".into(),
        ));
    }
    let mut w = writer(path)?;
    let mut header = vec!["slide_id".to_string(), "grid_x".into(), "grid_y".into()];
    header.extend(ids.iter().map(|id| format!("s_{id}")));
    header.push("argmax_source".into());
    w.write_record(&header)?;
    for m in maps {
        for r in &m.records {
            let mut row = vec![
                m.slide_id.clone(),
                r.grid_x.to_string(),
                r.grid_y.to_string(),
            ];
            row.extend(r.scores.iter().map(|s| s.to_string()));
            row.push(ids[r.argmax_source].clone());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_contribution_csv`]; slides keep their file order.
pub fn read_contribution_csv(path: impl AsRef<Path>) -> Result<Vec<ContributionMap>> {
    let path = path.as_ref();
    let bad = |msg: String| Error::Invalid(format!("{}: {msg}", path.display()));
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let n = header.len().saturating_sub(4);
    if header.len() < 5 || &header[0] != "slide_id" || &header[header.len() - 1] != "argmax_source"
    {
        return Err(bad("not a contribution map".into()));
    }
    let ids: Vec<String> = (0..n)
        .map(|i| {
            header[3 + i]
                .strip_prefix("s_")
                .map(str::to_string)
                .ok_or_else(|| bad(format!("column `{}`", &header[3 + i])))
        })
        .collect::<Result<_>>()?;
    let mut maps: Vec<ContributionMap> = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |k: usize| {
            row[k]
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number `{}`", &row[k])))
        };
        let int = |k: usize| {
            row[k]
                .parse::<i64>()
                .map_err(|_| bad(format!("bad integer `{}`", &row[k])))
        };
        let scores = (0..n).map(|i| num(3 + i)).collect::<Result<Vec<_>>>()?;
        let argmax_source = ids
            .iter()
            .position(|id| id == &row[3 + n])
            .ok_or_else(|| bad(format!("unknown source `{}`", &row[3 + n])))?;
        let rec = ContributionRecord {
            grid_x: int(1)?,
            grid_y: int(2)?,
            scores,
            argmax_source,
        };
        match maps.last_mut() {
            Some(m) if m.slide_id == row[0] => m.records.push(rec),
            _ => maps.push(ContributionMap {
                slide_id: row[0].to_string(),
                source_ids: ids.clone(),
                records: vec![rec],
            }),
        }
    }
    Ok(maps)
}

/// Checks that every record's `argmax_source` agrees with its scores.
pub fn check_argmax(map: &ContributionMap) -> Result<()> {
    match map
        .records
        .iter()
        .find(|r| argmax(&r.scores) != r.argmax_source)
    {
        Some(r) => Err(Error::Invalid(format!(
            "tile ({}, {}) of `{}`: argmax column disagrees with scores",
            r.grid_x, r.grid_y, map.slide_id
        ))),
        None => Ok(()),
    }
}

pub fn encode_ppm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend(raster.pixels.iter().flatten());
    out
}

pub fn write_ppm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(raster)).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let magic = || Error::BadMagic {
        path: path.to_path_buf(),
        offset: 0,
    };
    if !bytes.starts_with(b"P6") {
        return Err(magic());
    }
    // Three whitespace-separated header fields after the magic, then one
    // whitespace byte before the pixels.
    let mut at = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && bytes[at].is_ascii_digit() {
            at += 1;
        }
        *f = std::str::from_utf8(&bytes[start..at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                offset: start as u64,
                reason: "bad header field".into(),
            })?;
    }
    let [width, height, max] = fields;
    if max != 255 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: at as u64,
            reason: format!("max value {max}"),
        });
    }
    at += 1;
    let expected = at + 3 * width * height;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            expected: expected as u64,
        });
    }
    let pixels = bytes[at..expected]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Raster {
        width,
        height,
        pixels,
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(path, &bytes)
}
