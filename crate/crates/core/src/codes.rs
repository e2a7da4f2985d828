//! Class binarization: OVA, OVO and ECOC code matrices, per-column binary
//! datasets, and minimum-Hamming-distance decoding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// `n_classes x n_columns` table with entries in {-1, 0, +1}. A zero means
/// the class does not take part in that column's dichotomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMatrix {
    n_classes: usize,
    n_columns: usize,
    entries: Vec<i8>,
}

/// Code families selectable from configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Ova,
    Ovo,
    Ecoc,
}

impl CodeKind {
    pub fn matrix(self, n_classes: usize) -> Result<CodeMatrix> {
        match self {
            CodeKind::Ova => ova_matrix(n_classes),
            CodeKind::Ovo => ovo_matrix(n_classes),
            CodeKind::Ecoc if n_classes == 10 => Ok(ecoc_matrix_10x15()),
            CodeKind::Ecoc => {
                Err(Error::InvalidSpec(format!("the embedded ECOC code covers 10 classes, not {n_classes}")))
            }
        }
    }
}

impl CodeMatrix {
    /// Validates entries and the matrix invariants (distinct rows, every
    /// column separates something).
    pub fn new(n_classes: usize, n_columns: usize, entries: Vec<i8>) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::TooFewClasses(n_classes));
        }
        if entries.len() != n_classes * n_columns {
            return Err(Error::LengthMismatch { expected: n_classes * n_columns, found: entries.len() });
        }
        if entries.iter().any(|e| !(-1..=1).contains(e)) {
            return Err(Error::InvalidSpec("code entries must be -1, 0 or +1".into()));
        }
        let m = Self { n_classes, n_columns, entries };
        for a in 0..n_classes {
            for b in a + 1..n_classes {
                if m.row(a) == m.row(b) {
                    return Err(Error::InvalidSpec(format!("classes {a} and {b} share a codeword")));
                }
            }
        }
        for j in 0..n_columns {
            let col = m.column(j);
            if !(col.contains(&1) && col.contains(&-1)) {
                return Err(Error::InvalidSpec(format!("column {j} does not separate any classes")));
            }
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn get(&self, class: usize, column: usize) -> i8 {
        self.entries[class * self.n_columns + column]
    }

    pub fn row(&self, class: usize) -> &[i8] {
        &self.entries[class * self.n_columns..(class + 1) * self.n_columns]
    }

    pub fn column(&self, column: usize) -> Vec<i8> {
        (0..self.n_classes).map(|c| self.get(c, column)).collect()
    }

    /// Positions where both rows are nonzero and differ.
    pub fn row_distance(&self, a: usize, b: usize) -> usize {
        self.row(a).iter().zip(self.row(b)).filter(|(&x, &y)| x != 0 && y != 0 && x != y).count()
    }

    pub fn min_row_distance(&self) -> usize {
        let mut best = usize::MAX;
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                best = best.min(self.row_distance(a, b));
            }
        }
        best
    }

    /// Rows are classes, entries in {-1, 0, 1}.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in 0..self.n_classes {
            let row: Vec<String> = self.row(c).iter().map(i8::to_string).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: Vec<i8> = line
                .split(',')
                .map(|v| v.trim().parse::<i8>().map_err(|e| Error::InvalidSpec(format!("bad code entry '{v}': {e}"))))
                .collect::<Result<_>>()?;
            if *cols.get_or_insert(row.len()) != row.len() {
                return Err(Error::InvalidSpec("ragged code matrix".into()));
            }
            entries.extend(row);
            rows += 1;
        }
        Self::new(rows, cols.unwrap_or(0), entries)
    }
}

pub fn ova_matrix(n_classes: usize) -> Result<CodeMatrix> {
    if n_classes < 2 {
        return Err(Error::TooFewClasses(n_classes));
    }
    let entries = (0..n_classes * n_classes).map(|i| if i / n_classes == i % n_classes { 1 } else { -1 }).collect();
    CodeMatrix::new(n_classes, n_classes, entries)
}

/// Class pairs `(a, b)`, `a < b`, in OVO column order.
pub fn ovo_pairs(n_classes: usize) -> Vec<(usize, usize)> {
    (0..n_classes).flat_map(|a| (a + 1..n_classes).map(move |b| (a, b))).collect()
}

pub fn ovo_matrix(n_classes: usize) -> Result<CodeMatrix> {
    if n_classes < 2 {
        return Err(Error::TooFewClasses(n_classes));
    }
    let pairs = ovo_pairs(n_classes);
    let m = pairs.len();
    let mut entries = vec![0i8; n_classes * m];
    for (j, &(a, b)) in pairs.iter().enumerate() {
        entries[a * m + j] = 1;
        entries[b * m + j] = -1;
    }
    CodeMatrix::new(n_classes, m, entries)
}

/// The embedded 10-class, 15-column code; equals
/// `generate_balanced_code(10, 15)`. Minimum row distance 7.
const ECOC_10X15: [&str; 10] = [
    "+++++++++++++++",
    "-++--++--++--++",
    "++-+-+-+-+-+-+-",
    "+-++--++--++--+",
    "+---++++----+++",
    "-+++----++++---",
    "-+--++--+-+-+-+",
    "--+-+-+-++--++-",
    "---++--++------",
    "+----------++--",
];

pub fn ecoc_matrix_10x15() -> CodeMatrix {
    let entries = ECOC_10X15.iter().flat_map(|row| row.bytes().map(|b| if b == b'+' { 1 } else { -1 })).collect();
    CodeMatrix::new(10, 15, entries).expect("embedded code is valid")
}

/// Balanced columns of the exhaustive code: every split of the classes into
/// two halves, with class 0 fixed on the +1 side so no column is the
/// complement of another. Lexicographic order of the other +1 classes.
fn balanced_columns(n_classes: usize) -> Vec<Vec<i8>> {
    fn combos(start: usize, end: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..end {
            cur.push(i);
            combos(i + 1, end, k, cur, out);
            cur.pop();
        }
    }
    let mut sets = Vec::new();
    combos(1, n_classes, n_classes / 2 - 1, &mut Vec::new(), &mut sets);
    sets.into_iter()
        .map(|set| {
            let mut col = vec![-1i8; n_classes];
            col[0] = 1;
            for c in set {
                col[c] = 1;
            }
            col
        })
        .collect()
}

/// (min pairwise row distance, -number of pairs at that minimum); larger is
/// better.
fn code_quality(n_classes: usize, cols: &[Vec<i8>]) -> (usize, isize) {
    let mut min = usize::MAX;
    let mut at_min = 0isize;
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            let d = cols.iter().filter(|c| c[a] != c[b]).count();
            match d.cmp(&min) {
                std::cmp::Ordering::Less => {
                    min = d;
                    at_min = 1;
                }
                std::cmp::Ordering::Equal => at_min += 1,
                std::cmp::Ordering::Greater => {}
            }
        }
    }
    (min, -at_min)
}

/// Deterministically select `n_columns` balanced columns of the exhaustive
/// code: greedy selection on [`code_quality`], then first-improvement column
/// swaps until no swap helps. Ties go to the earliest candidate.
pub fn generate_balanced_code(n_classes: usize, n_columns: usize) -> Result<CodeMatrix> {
    if n_classes < 2 {
        return Err(Error::TooFewClasses(n_classes));
    }
    let cands = balanced_columns(n_classes);
    if n_columns > cands.len() {
        return Err(Error::InvalidSpec(format!("only {} balanced columns exist", cands.len())));
    }
    let mut cols: Vec<Vec<i8>> = Vec::with_capacity(n_columns);
    for _ in 0..n_columns {
        let mut best: Option<((usize, isize), usize)> = None;
        for (i, c) in cands.iter().enumerate() {
            if cols.contains(c) {
                continue;
            }
            cols.push(c.clone());
            let q = code_quality(n_classes, &cols);
            cols.pop();
            if best.is_none_or(|(bq, _)| q > bq) {
                best = Some((q, i));
            }
        }
        cols.push(cands[best.expect("candidates remain").1].clone());
    }
    'climb: loop {
        let current = code_quality(n_classes, &cols);
        for j in 0..n_columns {
            for c in &cands {
                if cols.contains(c) {
                    continue;
                }
                let old = std::mem::replace(&mut cols[j], c.clone());
                if code_quality(n_classes, &cols) > current {
                    continue 'climb;
                }
                cols[j] = old;
            }
        }
        break;
    }
    let entries = (0..n_classes).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
    CodeMatrix::new(n_classes, n_columns, entries)
}

/// Binary problem induced by one code column.
#[derive(Debug, Clone)]
pub struct DichotomyDataset {
    /// Two-class dataset: label 1 for target +1, label 0 for target -1.
    pub data: Dataset,
    pub targets: Vec<i8>,
    /// Index of each sample in the source dataset.
    pub source_indices: Vec<usize>,
    pub column: usize,
}

pub fn target_to_label(t: i8) -> usize {
    usize::from(t > 0)
}

pub fn derive_dichotomy(data: &Dataset, matrix: &CodeMatrix, column: usize) -> Result<DichotomyDataset> {
    if column >= matrix.n_columns() {
        return Err(Error::ColumnOutOfRange { column, columns: matrix.n_columns() });
    }
    if data.n_classes() != matrix.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} classes, code matrix {}",
            data.n_classes(),
            matrix.n_classes()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut targets = Vec::new();
    let mut source_indices = Vec::new();
    for (i, (im, &l)) in data.images().iter().zip(data.labels()).enumerate() {
        let t = matrix.get(l, column);
        if t != 0 {
            images.push(im.clone());
            labels.push(target_to_label(t));
            targets.push(t);
            source_indices.push(i);
        }
    }
    let data = Dataset::new(images, labels, 2, format!("{}-col{column}", data.split_name()))?;
    Ok(DichotomyDataset { data, targets, source_indices, column })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub class: usize,
    pub distances: Vec<f64>,
    pub tie: bool,
}

fn check_outputs(matrix: &CodeMatrix, outputs: &[f64]) -> Result<()> {
    if outputs.len() != matrix.n_columns() {
        return Err(Error::LengthMismatch { expected: matrix.n_columns(), found: outputs.len() });
    }
    if let Some((index, &value)) = outputs.iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::OutputOutOfRange { index, value });
    }
    Ok(())
}

fn nearest(distances: Vec<f64>) -> Decoded {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let class = distances.iter().position(|&d| d == min).expect("nonempty");
    let tie = distances.iter().filter(|&&d| d == min).count() > 1;
    Decoded { class, distances, tie }
}

/// Harden outputs to signs (0 becomes +1) and return the class whose codeword
/// is nearest in Hamming distance, skipping zero code entries. Ties go to the
/// lowest class index and are flagged.
pub fn hamming_decode(matrix: &CodeMatrix, outputs: &[f64]) -> Result<Decoded> {
    check_outputs(matrix, outputs)?;
    let signs: Vec<i8> = outputs.iter().map(|&o| if o >= 0.0 { 1 } else { -1 }).collect();
    let distances = (0..matrix.n_classes())
        .map(|c| matrix.row(c).iter().zip(&signs).filter(|(&code, &s)| code != 0 && code != s).count() as f64)
        .collect();
    Ok(nearest(distances))
}

/// L1 distance between raw outputs and codewords, zero entries skipped.
pub fn soft_decode(matrix: &CodeMatrix, outputs: &[f64]) -> Result<Decoded> {
    check_outputs(matrix, outputs)?;
    let distances = (0..matrix.n_classes())
        .map(|c| {
            matrix
                .row(c)
                .iter()
                .zip(outputs)
                .filter(|(&code, _)| code != 0)
                .map(|(&code, &o)| (f64::from(code) - o).abs())
                .sum()
        })
        .collect();
    Ok(nearest(distances))
}
