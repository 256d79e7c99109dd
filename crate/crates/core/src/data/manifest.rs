use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::seqf::{read_integer_file, read_sequence_file, write_integer_file, write_sequence_file};
use super::Bag;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "id,label,features,patch_labels,coords";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub label: usize,
    pub features: String,
    #[serde(default)]
    pub patch_labels: String,
    #[serde(default)]
    pub coords: String,
}

/// Parsed manifest. Relative file paths resolve against `base`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub base: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header = text.lines().next().unwrap_or_default().trim();
        if header != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "{}: header must be `{MANIFEST_HEADER}`, found `{header}`",
                path.display()
            )));
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let rows: Vec<ManifestRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate bag id `{}`", row.id)));
            }
        }
        Ok(Self {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    fn resolve(&self, cell: &str) -> PathBuf {
        let p = Path::new(cell);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Loads every bag in row order.
    pub fn load(&self) -> Result<Vec<Bag>> {
        for row in &self.rows {
            for cell in [&row.features, &row.patch_labels, &row.coords] {
                if !cell.is_empty() && !self.resolve(cell).is_file() {
                    return Err(Error::Manifest(format!(
                        "bag `{}` references missing file {}",
                        row.id,
                        self.resolve(cell).display()
                    )));
                }
            }
        }
        self.rows.iter().map(|row| self.load_row(row)).collect()
    }

    fn load_row(&self, row: &ManifestRow) -> Result<Bag> {
        let features = read_sequence_file(self.resolve(&row.features))?;
        let mut bag = Bag::new(row.id.clone(), features, row.label)?;
        if !row.patch_labels.is_empty() {
            let labels = read_integer_file(self.resolve(&row.patch_labels), 1)?
                .into_iter()
                .map(|r| {
                    usize::try_from(r[0])
                        .map_err(|_| Error::Manifest(format!("bag `{}` has a negative patch label", row.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            bag = bag.with_patch_labels(labels)?;
        }
        if !row.coords.is_empty() {
            let coords = read_integer_file(self.resolve(&row.coords), 2)?
                .into_iter()
                .map(|r| (r[0], r[1]))
                .collect();
            bag = bag.with_coords(coords)?;
        }
        Ok(bag)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Bag>> {
    Manifest::read(path)?.load()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes every bag as `SEQF` files under `dir` plus `dir/manifest.csv`.
/// Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, bags: &[Bag]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)?;
    for bag in bags {
        let stem = file_stem(&bag.id);
        let features = format!("{stem}.features.seqf");
        write_sequence_file(dir.join(&features), &bag.features)?;
        let patch_labels = match &bag.patch_labels {
            Some(labels) => {
                let name = format!("{stem}.labels.seqf");
                let rows: Vec<Vec<i64>> = labels.iter().map(|&l| vec![l as i64]).collect();
                write_integer_file(dir.join(&name), &rows, 1)?;
                name
            }
            None => String::new(),
        };
        let coords = match &bag.coords {
            Some(c) => {
                let name = format!("{stem}.coords.seqf");
                let rows: Vec<Vec<i64>> = c.iter().map(|&(r, col)| vec![r, col]).collect();
                write_integer_file(dir.join(&name), &rows, 2)?;
                name
            }
            None => String::new(),
        };
        writer.serialize(ManifestRow {
            id: bag.id.clone(),
            label: bag.slide_label,
            features,
            patch_labels,
            coords,
        })?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
