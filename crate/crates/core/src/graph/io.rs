//! Plain-text graph format.
//!
//! ```text
//! N M F d
//! u v            (M lines, 0-based, u < v)
//! x_1 ... x_F    (N lines)
//! label          (N lines, only when d > 0; -1 marks an unlabeled node)
//! ```
//!
//! A graph set is a directory with an `index.txt` whose lines read
//! `<file> [label ...]`; every line carries the same number of labels.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Graph, GraphSet, UNLABELED};
use crate::error::{GraphError, ParseError, ParseErrorKind};

pub const GRAPH_SET_INDEX: &str = "index.txt";

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_graph(&text).map_err(GraphError::Parse)
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let path = path.as_ref();
    fs::write(path, write_graph(g)).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Serializes a graph. Floats use the shortest representation that parses
/// back to the same bits.
pub fn write_graph(g: &Graph) -> String {
    let mut out = String::new();
    let d = if g.node_labels().is_some() {
        g.num_classes().max(1)
    } else {
        0
    };
    writeln!(out, "{} {} {} {}", g.n_nodes(), g.n_edges(), g.signal_dim(), d).unwrap();
    for &(u, v) in g.edges() {
        writeln!(out, "{u} {v}").unwrap();
    }
    for row in g.signals().rows() {
        let mut first = true;
        for x in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{x:?}").unwrap();
        }
        out.push('\n');
    }
    if let Some(labels) = g.node_labels() {
        for l in labels {
            writeln!(out, "{l}").unwrap();
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &'static str) -> Result<(usize, &'a str), ParseError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(ParseError::new(
                self.last + 1,
                ParseErrorKind::UnexpectedEof(what),
            )),
        }
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, ParseError> {
    tok.parse()
        .map_err(|_| ParseError::new(line, ParseErrorKind::BadNumber(tok.to_string())))
}

pub fn parse_graph(text: &str) -> Result<Graph, ParseError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (ln, header) = lines.next("header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(ParseError::new(
            ln,
            ParseErrorKind::MalformedHeader(header.to_string()),
        ));
    }
    let parse_header = |tok: &str| -> Result<usize, ParseError> {
        tok.parse()
            .map_err(|_| ParseError::new(ln, ParseErrorKind::MalformedHeader(header.to_string())))
    };
    let n = parse_header(fields[0])?;
    let m = parse_header(fields[1])?;
    let f = parse_header(fields[2])?;
    let d = parse_header(fields[3])?;

    let mut edges = Vec::with_capacity(m);
    let mut seen = HashSet::with_capacity(m);
    for _ in 0..m {
        let (ln, line) = lines.next("edge line")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(ParseError::new(
                ln,
                ParseErrorKind::FieldCount {
                    expected: 2,
                    found: toks.len(),
                },
            ));
        }
        let u: usize = parse_field(toks[0], ln)?;
        let v: usize = parse_field(toks[1], ln)?;
        if u >= n || v >= n {
            return Err(ParseError::new(
                ln,
                ParseErrorKind::EndpointOutOfRange { u, v, n },
            ));
        }
        if u == v {
            return Err(ParseError::new(ln, ParseErrorKind::SelfLoop(u)));
        }
        if u > v {
            return Err(ParseError::new(ln, ParseErrorKind::UnorderedEdge { u, v }));
        }
        if !seen.insert((u, v)) {
            return Err(ParseError::new(ln, ParseErrorKind::DuplicateEdge { u, v }));
        }
        edges.push((u, v));
    }

    let mut signals = Array2::zeros((n, f));
    for i in 0..n {
        let (ln, line) = lines.next("signal row")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != f {
            return Err(ParseError::new(
                ln,
                ParseErrorKind::RowLength {
                    expected: f,
                    found: toks.len(),
                },
            ));
        }
        for (j, tok) in toks.iter().enumerate() {
            let x: f64 = parse_field(tok, ln)?;
            if !x.is_finite() {
                return Err(ParseError::new(ln, ParseErrorKind::BadNumber(tok.to_string())));
            }
            signals[[i, j]] = x;
        }
    }

    let labels = if d > 0 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines.next("label line")?;
            let l: i64 = parse_field(line.trim(), ln)?;
            if l != UNLABELED && (l < 0 || l as usize >= d) {
                return Err(ParseError::new(ln, ParseErrorKind::LabelOutOfRange { label: l, d }));
            }
            labels.push(l);
        }
        Some(labels)
    } else {
        None
    };

    for (i, line) in lines.inner.by_ref() {
        if !line.trim().is_empty() {
            return Err(ParseError::new(i + 1, ParseErrorKind::TrailingData));
        }
    }

    Graph::with_classes(n, edges, signals, labels, d)
        .map_err(|e| ParseError::new(1, ParseErrorKind::Invalid(e.to_string())))
}

pub fn load_graph_set(dir: impl AsRef<Path>) -> Result<GraphSet, GraphError> {
    let dir = dir.as_ref();
    let index_path = dir.join(GRAPH_SET_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| GraphError::Io {
        path: index_path.display().to_string(),
        source: e,
    })?;
    let mut graphs = Vec::new();
    let mut labels: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let file = toks.next().unwrap();
        let row = toks
            .map(|t| parse_field::<f64>(t, ln))
            .collect::<Result<Vec<_>, _>>()
            .map_err(GraphError::Parse)?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(GraphError::Parse(ParseError::new(
                    ln,
                    ParseErrorKind::FieldCount {
                        expected: w + 1,
                        found: row.len() + 1,
                    },
                )))
            }
            _ => {}
        }
        graphs.push(load_graph(dir.join(file))?);
        labels.push(row);
    }
    let graph_labels = match width {
        Some(w) if w > 0 => Some(
            Array2::from_shape_vec((labels.len(), w), labels.into_iter().flatten().collect())
                .expect("rows checked to equal width"),
        ),
        _ => None,
    };
    GraphSet::new(graphs, graph_labels)
}

pub fn save_graph_set(set: &GraphSet, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| GraphError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut index = String::new();
    for (i, g) in set.graphs().iter().enumerate() {
        let name = format!("graph_{i:05}.txt");
        save_graph(g, dir.join(&name))?;
        index.push_str(&name);
        if let Some(labels) = set.graph_labels() {
            for x in labels.row(i) {
                write!(index, " {x:?}").unwrap();
            }
        }
        index.push('\n');
    }
    let path = dir.join(GRAPH_SET_INDEX);
    fs::write(&path, index).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
