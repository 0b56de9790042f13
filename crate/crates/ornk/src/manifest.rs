//! Dataset manifest: a CSV listing sample ids, image paths, optional
//! labels and optional disc boxes. Test-time rows may omit the label;
//! rows without a box can only feed the full-frame region.

use std::collections::HashSet;

use crate::preprocess::DiscBox;
use crate::{Error, Result};

pub const MANIFEST_HEADER: [&str; 7] = ["id", "path", "label", "x0", "y0", "x1", "y1"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: Option<usize>,
    pub disc_box: Option<DiscBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Highest label + 1, if any row is labeled.
    pub fn classes(&self) -> Option<usize> {
        self.rows.iter().filter_map(|r| r.label).max().map(|m| m + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for r in &self.rows {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            let bx = match &r.disc_box {
                Some(b) => format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1),
                None => ",,,".to_string(),
            };
            out.push_str(&format!("{},{},{label},{bx}\n", r.id, r.path));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        parse_manifest(&bytes)
    }
}

fn parse_cell<T: std::str::FromStr>(cell: &str, what: &str, row: usize) -> Result<T> {
    cell.parse().map_err(|_| {
        Error::parse("manifest", format!("row {row}: {what} {cell:?} is not a valid number"))
    })
}

/// Parses manifest CSV bytes. Never touches the filesystem.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::parse("manifest", e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_HEADER {
        return Err(Error::parse(
            "manifest",
            format!("header {got:?} does not match {MANIFEST_HEADER:?}"),
        ));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse("manifest", e.to_string()))?;
        let row = i + 2; // 1-based, after the header line
        if record.len() != MANIFEST_HEADER.len() {
            return Err(Error::parse(
                "manifest",
                format!("row {row}: {} fields, expected {}", record.len(), MANIFEST_HEADER.len()),
            ));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::parse("manifest", format!("row {row}: empty id")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::parse("manifest", format!("row {row}: duplicate id {id:?}")));
        }
        let path = record[1].to_string();
        if path.is_empty() {
            return Err(Error::parse("manifest", format!("row {row}: empty path")));
        }
        let label = if record[2].is_empty() {
            None
        } else {
            Some(parse_cell::<usize>(&record[2], "label", row)?)
        };
        let box_cells = [&record[3], &record[4], &record[5], &record[6]];
        let empties = box_cells.iter().filter(|c| c.is_empty()).count();
        let disc_box = match empties {
            4 => None,
            0 => {
                let b = DiscBox {
                    x0: parse_cell(box_cells[0], "x0", row)?,
                    y0: parse_cell(box_cells[1], "y0", row)?,
                    x1: parse_cell(box_cells[2], "x1", row)?,
                    y1: parse_cell(box_cells[3], "y1", row)?,
                };
                b.validate().map_err(|e| {
                    Error::parse("manifest", format!("row {row}: {e}"))
                })?;
                Some(b)
            }
            _ => {
                return Err(Error::parse(
                    "manifest",
                    format!("row {row}: disc box needs all four coordinates or none"),
                ))
            }
        };
        rows.push(ManifestRow { id, path, label, disc_box });
    }
    Ok(Manifest { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            rows: vec![
                ManifestRow {
                    id: "a1".into(),
                    path: "a1.png".into(),
                    label: Some(0),
                    disc_box: Some(DiscBox { x0: 10, y0: 12, x1: 40, y1: 44 }),
                },
                ManifestRow {
                    id: "b2".into(),
                    path: "imgs/b2.png".into(),
                    label: None,
                    disc_box: None,
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let csv = m.to_csv();
        let back = parse_manifest(csv.as_bytes()).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn classes_from_labels() {
        let mut m = sample();
        assert_eq!(m.classes(), Some(1));
        m.rows[1].label = Some(2);
        assert_eq!(m.classes(), Some(3));
    }

    #[test]
    fn duplicate_id_rejected() {
        let csv = "id,path,label,x0,y0,x1,y1\nx,f.png,0,,,,\nx,g.png,1,,,,\n";
        let err = parse_manifest(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn wrong_header_rejected() {
        let csv = "id,file,label,x0,y0,x1,y1\nx,f.png,0,,,,\n";
        assert!(parse_manifest(csv.as_bytes()).is_err());
    }

    #[test]
    fn partial_box_rejected() {
        let csv = "id,path,label,x0,y0,x1,y1\nx,f.png,0,1,2,3,\n";
        let err = parse_manifest(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("all four"), "{err}");
    }

    #[test]
    fn bad_numbers_rejected() {
        let csv = "id,path,label,x0,y0,x1,y1\nx,f.png,banana,,,,\n";
        assert!(parse_manifest(csv.as_bytes()).is_err());
        let csv = "id,path,label,x0,y0,x1,y1\nx,f.png,0,5,5,4,9\n";
        assert!(parse_manifest(csv.as_bytes()).is_err());
    }

    #[test]
    fn empty_manifest_parses() {
        let m = parse_manifest(b"id,path,label,x0,y0,x1,y1\n").unwrap();
        assert!(m.is_empty());
        assert_eq!(m.classes(), None);
    }
}
