//! Reading raw interaction files and persisting split bundles.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, GraphError, Interaction, InteractionGraph, SplitBundle, SplitKind};

/// Shape of a delimited interaction file. Columns are always in the order
/// user, item, rating, timestamp; the trailing two may be absent.
#[derive(Debug, Clone, Copy)]
pub struct FileFormat {
    pub delimiter: char,
    pub has_header: bool,
    pub has_rating: bool,
    pub has_timestamp: bool,
}

impl Default for FileFormat {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            has_header: false,
            has_rating: true,
            has_timestamp: true,
        }
    }
}

impl FileFormat {
    fn expected_columns(&self) -> usize {
        2 + usize::from(self.has_rating) + usize::from(self.has_timestamp)
    }
}

/// Reads every row of a delimited interaction file in order, without any
/// filtering. Line numbers in errors are 1-based file lines.
pub fn load_interactions(path: &Path, format: &FileFormat) -> Result<Vec<Interaction>, GraphError> {
    let file = File::open(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if idx == 0 && format.has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(format.delimiter).collect();
        if cols.len() != format.expected_columns() {
            return Err(GraphError::Parse {
                line: line_no,
                message: format!(
                    "expected {} columns, found {}",
                    format.expected_columns(),
                    cols.len()
                ),
            });
        }
        let mut col = cols.iter();
        let user_id = col.next().unwrap().trim().to_string();
        let item_id = col.next().unwrap().trim().to_string();
        let rating = if format.has_rating {
            let raw = col.next().unwrap().trim();
            raw.parse::<f64>().map_err(|_| GraphError::Parse {
                line: line_no,
                message: format!("non-numeric rating {raw:?}"),
            })?
        } else {
            1.0
        };
        let timestamp = if format.has_timestamp {
            let raw = col.next().unwrap().trim();
            raw.parse::<i64>().map_err(|_| GraphError::Parse {
                line: line_no,
                message: format!("non-numeric timestamp {raw:?}"),
            })?
        } else {
            0
        };
        out.push(Interaction {
            user_id,
            item_id,
            rating,
            timestamp,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    kind: SplitKind,
    seed: u64,
    ood_fraction: f64,
    n_users: usize,
    n_items: usize,
    counts: SplitCounts,
}

#[derive(Serialize, Deserialize)]
struct SplitCounts {
    train: usize,
    valid: usize,
    test_iid: usize,
    test_ood: usize,
}

fn write_edge_list(path: &Path, edges: &[Edge]) -> Result<(), GraphError> {
    let io_err = |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for e in edges {
        writeln!(w, "{}\t{}\t{}", e.user, e.item, e.timestamp).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_edge_list(path: &Path) -> Result<Vec<Edge>, GraphError> {
    let file = File::open(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(GraphError::Parse {
                line: idx + 1,
                message: format!("expected 3 columns in edge list, found {}", parts.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<i64, GraphError> {
            s.trim().parse::<i64>().map_err(|_| GraphError::Parse {
                line: idx + 1,
                message: format!("non-numeric {what} {s:?}"),
            })
        };
        out.push(Edge::new(
            parse(parts[0], "user")? as u32,
            parse(parts[1], "item")? as u32,
            parse(parts[2], "timestamp")?,
        ));
    }
    Ok(out)
}

/// Writes the four edge lists plus `manifest.json` into `dir`.
pub fn save_split(dir: &Path, bundle: &SplitBundle) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, edges) in bundle.parts() {
        write_edge_list(&dir.join(format!("{name}.tsv")), edges)?;
    }
    let manifest = SplitManifest {
        kind: bundle.kind,
        seed: bundle.seed,
        ood_fraction: bundle.ood_fraction,
        n_users: bundle.train.n_users(),
        n_items: bundle.train.n_items(),
        counts: SplitCounts {
            train: bundle.train.n_edges(),
            valid: bundle.valid.len(),
            test_iid: bundle.test_iid.len(),
            test_ood: bundle.test_ood.len(),
        },
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| GraphError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a bundle back from `save_split` output.
pub fn load_split(dir: &Path) -> Result<SplitBundle, GraphError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|source| GraphError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: SplitManifest =
        serde_json::from_str(&raw).map_err(|e| GraphError::Manifest(e.to_string()))?;
    let train_edges = read_edge_list(&dir.join("train.tsv"))?;
    let valid = read_edge_list(&dir.join("valid.tsv"))?;
    let test_iid = read_edge_list(&dir.join("test_iid.tsv"))?;
    let test_ood = read_edge_list(&dir.join("test_ood.tsv"))?;
    let expected = [
        (train_edges.len(), manifest.counts.train, "train"),
        (valid.len(), manifest.counts.valid, "valid"),
        (test_iid.len(), manifest.counts.test_iid, "test_iid"),
        (test_ood.len(), manifest.counts.test_ood, "test_ood"),
    ];
    for (actual, declared, name) in expected {
        if actual != declared {
            return Err(GraphError::Manifest(format!(
                "{name} holds {actual} edges but manifest declares {declared}"
            )));
        }
    }
    let train = InteractionGraph::new(manifest.n_users, manifest.n_items, train_edges)?;
    Ok(SplitBundle {
        train,
        valid,
        test_iid,
        test_ood,
        kind: manifest.kind,
        seed: manifest.seed,
        ood_fraction: manifest.ood_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows_pass_through_in_order() {
        let f = write_temp("u1\ti1\t5\t100\nu2\ti2\t3\t200\nu1\ti2\t4\t300\n");
        let rows = load_interactions(f.path(), &FileFormat::default()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].user_id, "u1");
        assert_eq!(rows[1].rating, 3.0);
        assert_eq!(rows[2].timestamp, 300);
    }

    #[test]
    fn empty_file_gives_empty_sequence() {
        let f = write_temp("");
        let rows = load_interactions(f.path(), &FileFormat::default()).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn bad_rating_names_line_two() {
        let f = write_temp("u1\ti1\t5\t100\nu2\ti2\tbad\t200\n");
        let err = load_interactions(f.path(), &FileFormat::default()).unwrap_err();
        match err {
            GraphError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("rating"), "message: {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn header_and_csv_and_missing_columns() {
        let f = write_temp("user,item\nu1,i1\nu2,i2\n");
        let fmt = FileFormat {
            delimiter: ',',
            has_header: true,
            has_rating: false,
            has_timestamp: false,
        };
        let rows = load_interactions(f.path(), &fmt).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rating, 1.0);
        assert_eq!(rows[0].timestamp, 0);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_interactions(Path::new("/nonexistent/file.tsv"), &FileFormat::default())
            .unwrap_err();
        assert!(matches!(err, GraphError::Io { .. }));
    }
}
