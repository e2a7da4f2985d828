use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{load_splits, write_atomic, ExperimentConfig, CONFIG_COPY};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct DecisionRow {
    pub sample: usize,
    pub label: usize,
    #[serde(rename = "final")]
    pub final_class: usize,
}

pub fn read_decision_log(path: &Path) -> Result<Vec<DecisionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Misclassified {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
}

/// Rows whose final class differs from the dataset's label. The log must
/// cover exactly the samples of `test`.
pub fn report_misclassified(rows: &[DecisionRow], test: &Dataset) -> Result<Vec<Misclassified>> {
    if let Some(r) = rows.iter().find(|r| r.sample >= test.len()) {
        return Err(Error::IndexOutOfRange { index: r.sample, len: test.len() });
    }
    if rows.len() != test.len() {
        return Err(Error::IndexOutOfRange { index: rows.len().max(1) - 1, len: test.len() });
    }
    Ok(rows
        .iter()
        .filter(|r| r.final_class != test.labels()[r.sample])
        .map(|r| Misclassified { index: r.sample, label: test.labels()[r.sample], predicted: r.final_class })
        .collect())
}

// 3x5 glyphs, one row per u8 (low 3 bits, left = 0b100)
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 3, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 2, 2],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];
const ARROW: [u8; 5] = [4, 2, 1, 2, 4];

const TILES_PER_ROW: usize = 10;
const GAP: usize = 2;
const STRIP: usize = 7;

fn glyph(c: char) -> [u8; 5] {
    match c.to_digit(10) {
        Some(d) => DIGITS[d as usize],
        None => ARROW,
    }
}

/// Binary PGM (P5) with one tile per misclassified image, each captioned
/// `label>predicted` underneath. No items gives a 0x0 image.
pub fn render_contact_sheet(items: &[Misclassified], test: &Dataset) -> Result<Vec<u8>> {
    let (h, w) = test.image_dims().unwrap_or((0, 0));
    let (width, height) = if items.is_empty() {
        (0, 0)
    } else {
        let cols = items.len().min(TILES_PER_ROW);
        let rows = items.len().div_ceil(TILES_PER_ROW);
        let tile_w = w.max(12);
        (cols * (tile_w + GAP) + GAP, rows * (h + STRIP + GAP) + GAP)
    };
    let mut canvas = vec![0u8; width * height];
    let tile_w = w.max(12);
    for (n, m) in items.iter().enumerate() {
        let image = test.images().get(m.index).ok_or(Error::IndexOutOfRange { index: m.index, len: test.len() })?;
        let x0 = GAP + (n % TILES_PER_ROW) * (tile_w + GAP);
        let y0 = GAP + (n / TILES_PER_ROW) * (h + STRIP + GAP);
        for r in 0..h {
            for c in 0..w {
                canvas[(y0 + r) * width + x0 + c] = (image.get(r, c) * 255.0).round() as u8;
            }
        }
        let caption = format!("{}>{}", m.label, m.predicted);
        for (k, ch) in caption.chars().enumerate() {
            let g = glyph(ch);
            for (gr, bits) in g.iter().enumerate() {
                for gc in 0..3 {
                    let x = x0 + 1 + k * 4 + gc;
                    if bits & (4 >> gc) != 0 && x < x0 + tile_w {
                        canvas[(y0 + h + 1 + gr) * width + x] = 255;
                    }
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&canvas);
    Ok(out)
}

fn misclassified_csv(items: &[Misclassified]) -> String {
    let mut s = String::from("index,label,predicted\n");
    for m in items {
        let _ = writeln!(s, "{},{},{}", m.index, m.label, m.predicted);
    }
    s
}

/// Render the sheet and index CSV for run `run` of an experiment directory.
/// Returns the two written paths.
pub fn report_run(dir: &Path, run: usize) -> Result<(PathBuf, PathBuf)> {
    let cfg: ExperimentConfig =
        serde_json::from_slice(&fs::read(dir.join(CONFIG_COPY))?).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let (_, _, test) = load_splits(&cfg)?;
    let log = dir.join(format!("run-{run:03}")).join("decisions.csv");
    let rows = read_decision_log(&log)?;
    let items = report_misclassified(&rows, &test)?;
    let sheet = dir.join(format!("misclassified-run-{run:03}.pgm"));
    let csv = dir.join(format!("misclassified-run-{run:03}.csv"));
    write_atomic(&sheet, &render_contact_sheet(&items, &test)?)?;
    write_atomic(&csv, misclassified_csv(&items).as_bytes())?;
    Ok((sheet, csv))
}
