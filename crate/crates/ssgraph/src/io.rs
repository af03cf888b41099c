//! On-disk dataset formats.
//!
//! A dataset directory holds four files:
//!
//! * `edges.txt` — one edge per line, two whitespace-separated node ids;
//!   lines starting with `#` are comments. Edges are symmetrized, duplicates
//!   merged and self-loops dropped on load.
//! * `features.bin` — magic `SSGFEAT1`, little-endian `u64` rows and
//!   columns, then `f32` values in row-major order.
//! * `labels.txt` — one integer per node, `-1` for unlabeled.
//! * `splits.txt` (optional) — one of `train`, `val`, `test`, `none` per node.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ssgraph_core::graph::random_split;
use ssgraph_core::{Dataset, Features, Graph, SplitMask};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"SSGFEAT1";
pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.txt";

/// Split fractions used when a dataset ships without a split file.
pub const DEFAULT_SPLIT: (f64, f64) = (0.1, 0.1);

fn lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| l.map(|l| (i + 1, l)).map_err(|e| Error::io(path, e))))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Reads an edge list for a graph of `num_nodes` nodes.
pub fn read_edges(path: &Path, num_nodes: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for item in lines(path)? {
        let (no, line) = item?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids: Vec<&str> = line.split_whitespace().collect();
        if ids.len() != 2 {
            return Err(parse_err(path, no, format!("expected two node ids, found {:?}", line)));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, no, format!("bad node id {s:?}")));
        let (a, b) = (parse(ids[0])?, parse(ids[1])?);
        for id in [a, b] {
            if id >= num_nodes {
                log::error!("{}:{no}: node id {id} out of range", path.display());
                return Err(ssgraph_core::Error::Index { index: id, num_nodes }.into());
            }
        }
        edges.push((a, b));
    }
    Ok(Graph::from_edges(num_nodes, edges)?)
}

/// Writes each undirected edge once, smaller id first.
pub fn write_edges(path: &Path, graph: &Graph) -> Result<()> {
    write_text(path, |w| {
        writeln!(w, "# {} nodes, {} edges", graph.num_nodes(), graph.num_undirected_edges())?;
        for (a, b) in graph.undirected_edges() {
            writeln!(w, "{a} {b}")?;
        }
        Ok(())
    })
}

pub fn read_features(path: &Path) -> Result<Features> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    if bytes.len() < 24 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing SSGFEAT1 header".into()));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(1), word(2));
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).map(|n| n + 24);
    if expected != Some(bytes.len()) {
        return Err(bad(format!("{rows}×{cols} header does not match {} payload bytes", bytes.len() - 24)));
    }
    let data = bytes[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Features::new(rows, cols, data)?)
}

pub fn write_features(path: &Path, features: &Features) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 4 * features.as_slice().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for v in features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let mut labels = Vec::new();
    for item in lines(path)? {
        let (no, line) = item?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let l: i64 = line.parse().map_err(|_| parse_err(path, no, format!("bad label {line:?}")))?;
        if l < -1 {
            return Err(parse_err(path, no, format!("label {l} below -1")));
        }
        labels.push(l);
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    write_text(path, |w| labels.iter().try_for_each(|l| writeln!(w, "{l}")))
}

pub fn read_splits(path: &Path) -> Result<SplitMask> {
    let mut tags = Vec::new();
    for item in lines(path)? {
        let (no, line) = item?;
        let tag = match line.trim() {
            "" => continue,
            "train" => 0,
            "val" => 1,
            "test" => 2,
            "none" => 3,
            other => return Err(parse_err(path, no, format!("unknown split {other:?}"))),
        };
        tags.push(tag);
    }
    let mut s = SplitMask::none(tags.len());
    for (i, t) in tags.into_iter().enumerate() {
        match t {
            0 => s.train[i] = true,
            1 => s.val[i] = true,
            2 => s.test[i] = true,
            _ => {}
        }
    }
    Ok(s)
}

pub fn write_splits(path: &Path, splits: &SplitMask) -> Result<()> {
    write_text(path, |w| {
        (0..splits.len()).try_for_each(|i| {
            let tag = if splits.train[i] {
                "train"
            } else if splits.val[i] {
                "val"
            } else if splits.test[i] {
                "test"
            } else {
                "none"
            };
            writeln!(w, "{tag}")
        })
    })
}

fn write_text(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|()| w.flush()).map_err(|e| Error::io(path, e))
}

/// Loads a dataset from explicit files. Without a split file the nodes are
/// split 10/10/80 with `split_seed`.
pub fn load_dataset(
    edges: &Path,
    features: &Path,
    labels: &Path,
    splits: Option<&Path>,
    split_seed: u64,
) -> Result<Dataset> {
    let features = read_features(features)?;
    let n = features.rows();
    let graph = read_edges(edges, n)?;
    let label_values = read_labels(labels)?;
    if label_values.len() != n {
        return Err(ssgraph_core::Error::Shape(format!("{} labels for {n} feature rows", label_values.len())).into());
    }
    let splits = match splits {
        Some(p) => {
            let s = read_splits(p)?;
            if s.len() != n {
                return Err(ssgraph_core::Error::Shape(format!("{} split rows for {n} nodes", s.len())).into());
            }
            s
        }
        None => random_split(n, DEFAULT_SPLIT, split_seed)?,
    };
    Ok(Dataset::new(graph, features, label_values, splits)?)
}

pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub splits: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            edges: dir.join(EDGES_FILE),
            features: dir.join(FEATURES_FILE),
            labels: dir.join(LABELS_FILE),
            splits: dir.join(SPLITS_FILE),
        }
    }
}

pub fn load_dataset_dir(dir: &Path, split_seed: u64) -> Result<Dataset> {
    let p = DatasetPaths::in_dir(dir);
    let splits = p.splits.exists().then_some(p.splits.as_path());
    load_dataset(&p.edges, &p.features, &p.labels, splits, split_seed)
}

pub fn save_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = DatasetPaths::in_dir(dir);
    write_edges(&p.edges, &ds.graph)?;
    write_features(&p.features, &ds.features)?;
    write_labels(&p.labels, &ds.labels)?;
    write_splits(&p.splits, &ds.splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn edges_are_symmetrized_and_cleaned() {
        let d = tmp();
        let p = d.path().join("e.txt");
        fs::write(&p, "# comment\n0 1\n1 2\n\n1 1\n2 1\n").unwrap();
        let g = read_edges(&p, 3).unwrap();
        assert_eq!(g.num_arcs(), 4);
        assert!(g.has_arc(0, 1) && g.has_arc(1, 0) && g.has_arc(1, 2) && g.has_arc(2, 1));
        assert!(!g.has_arc(1, 1));
    }

    #[test]
    fn malformed_edge_lines_report_line_numbers() {
        let d = tmp();
        let p = d.path().join("e.txt");
        fs::write(&p, "0 1\n0 x\n").unwrap();
        match read_edges(&p, 3) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "0 1 2\n").unwrap();
        assert!(matches!(read_edges(&p, 3), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "0 3\n").unwrap();
        assert!(matches!(read_edges(&p, 3), Err(Error::Core(ssgraph_core::Error::Index { index: 3, num_nodes: 3 }))));
    }

    #[test]
    fn feature_file_round_trip_and_layout() {
        let d = tmp();
        let p = d.path().join("f.bin");
        let f = Features::new(2, 3, vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]).unwrap();
        write_features(&p, &f).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"SSGFEAT1");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), -2.5);
        assert_eq!(read_features(&p).unwrap(), f);
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_and_splits_round_trip() {
        let d = tmp();
        let (lp, sp) = (d.path().join("l.txt"), d.path().join("s.txt"));
        write_labels(&lp, &[0, -1, 2]).unwrap();
        assert_eq!(read_labels(&lp).unwrap(), vec![0, -1, 2]);
        fs::write(&lp, "0\n-2\n").unwrap();
        assert!(matches!(read_labels(&lp), Err(Error::Parse { line: 2, .. })));
        let s = random_split(20, (0.3, 0.2), 1).unwrap();
        write_splits(&sp, &s).unwrap();
        assert_eq!(read_splits(&sp).unwrap(), s);
        fs::write(&sp, "train\nbogus\n").unwrap();
        assert!(matches!(read_splits(&sp), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn row_count_mismatch_is_a_shape_error() {
        let d = tmp();
        let paths = DatasetPaths::in_dir(d.path());
        fs::write(&paths.edges, "0 1\n").unwrap();
        write_features(&paths.features, &Features::zeros(3, 2)).unwrap();
        write_labels(&paths.labels, &[0, 1]).unwrap();
        assert!(matches!(load_dataset_dir(d.path(), 0), Err(Error::Core(ssgraph_core::Error::Shape(_)))));
        write_labels(&paths.labels, &[0, 1, 1]).unwrap();
        let ds = load_dataset_dir(d.path(), 0).unwrap();
        assert_eq!((ds.num_nodes(), ds.graph.num_arcs()), (3, 2));
    }
}
