//! Patch-probability heatmaps as plain text.
//!
//! ```text
//! # s4mil heatmap v1
//! bag <id>
//! origin <row> <col>
//! size <rows> <cols>
//! <rows lines of <cols> space-separated values>
//! ```
//!
//! `origin` is the smallest `(row, col)` among the patch coordinates. Cells
//! without a patch hold `-1`. Values use Rust's shortest round-trip float
//! formatting, so parsing restores them bit for bit.

use std::fmt::Write as _;

use crate::error::{CliError, CliResult};

pub const HEATMAP_MAGIC: &str = "# s4mil heatmap v1";
pub const EMPTY_CELL: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub bag_id: String,
    pub origin: (i64, i64),
    /// Row-major cells.
    pub cells: Vec<Vec<f64>>,
}

impl Heatmap {
    /// Places `values[i]` at `coords[i]` within the coordinates' bounding box.
    pub fn from_patches(bag_id: &str, coords: &[(i64, i64)], values: &[f64]) -> CliResult<Self> {
        if coords.is_empty() || coords.len() != values.len() {
            return Err(CliError::Heatmap(format!(
                "{} coordinates for {} values",
                coords.len(),
                values.len()
            )));
        }
        let r0 = coords.iter().map(|c| c.0).min().expect("non-empty");
        let c0 = coords.iter().map(|c| c.1).min().expect("non-empty");
        let rows = coords.iter().map(|c| c.0 - r0).max().expect("non-empty") as usize + 1;
        let cols = coords.iter().map(|c| c.1 - c0).max().expect("non-empty") as usize + 1;
        if rows.checked_mul(cols).is_none_or(|n| n > 1 << 28) {
            return Err(CliError::Heatmap(format!("{rows} x {cols} grid is too large")));
        }
        let mut cells = vec![vec![EMPTY_CELL; cols]; rows];
        for (&(r, c), &v) in coords.iter().zip(values) {
            let cell = &mut cells[(r - r0) as usize][(c - c0) as usize];
            if *cell != EMPTY_CELL {
                return Err(CliError::Heatmap(format!("two patches share cell ({r}, {c})")));
            }
            *cell = v;
        }
        Ok(Self {
            bag_id: bag_id.to_string(),
            origin: (r0, c0),
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEATMAP_MAGIC}").unwrap();
        writeln!(out, "bag {}", self.bag_id).unwrap();
        writeln!(out, "origin {} {}", self.origin.0, self.origin.1).unwrap();
        writeln!(out, "size {} {}", self.rows(), self.cols()).unwrap();
        for row in &self.cells {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let bad = |line: usize, what: &str| CliError::Heatmap(format!("heatmap line {line}: {what}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == HEATMAP_MAGIC => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut field = |name: &str| -> CliResult<(usize, String)> {
            let (n, l) = lines.next().ok_or_else(|| bad(0, &format!("missing `{name}` line")))?;
            l.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|rest| (n, rest.to_string()))
                .ok_or_else(|| bad(n, &format!("expected `{name}`")))
        };
        let (_, bag_id) = field("bag")?;
        let pair = |(n, s): (usize, String)| -> CliResult<(i64, i64)> {
            let parts: Vec<&str> = s.split(' ').collect();
            match parts.as_slice() {
                [a, b] => Ok((
                    a.parse().map_err(|_| bad(n, "bad integer"))?,
                    b.parse().map_err(|_| bad(n, "bad integer"))?,
                )),
                _ => Err(bad(n, "expected two integers")),
            }
        };
        let origin = pair(field("origin")?)?;
        let (n, size) = field("size")?;
        let (rows, cols) = pair((n, size))?;
        if rows < 1 || cols < 1 {
            return Err(bad(n, "grid must be at least 1 x 1"));
        }
        let mut cells = Vec::with_capacity(rows as usize);
        for (n, l) in lines {
            let row: Vec<f64> = l
                .split(' ')
                .map(|v| v.parse::<f64>().map_err(|_| bad(n, &format!("bad value `{v}`"))))
                .collect::<CliResult<_>>()?;
            if row.len() != cols as usize {
                return Err(bad(n, &format!("expected {cols} values, found {}", row.len())));
            }
            cells.push(row);
        }
        if cells.len() != rows as usize {
            return Err(bad(0, &format!("expected {rows} rows, found {}", cells.len())));
        }
        Ok(Self { bag_id, origin, cells })
    }
}
