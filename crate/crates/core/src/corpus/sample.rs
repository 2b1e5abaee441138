use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abstract syntax tree as labeled nodes plus parent→child edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstGraph {
    pub node_labels: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl AstGraph {
    pub fn len(&self) -> usize {
        self.node_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_labels.is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.node_labels.is_empty() {
            return Err("AST has no nodes".into());
        }
        let q = self.node_labels.len();
        for &(p, c) in &self.edges {
            if p >= q || c >= q {
                return Err(format!("edge ({p}, {c}) out of range for {q} nodes"));
            }
            if p == c {
                return Err(format!("self-loop on node {p}"));
            }
        }
        Ok(())
    }

    /// True when the edges form one tree: q−1 edges, one root, every node
    /// reachable from it and no node with two parents.
    pub fn is_tree(&self) -> bool {
        let q = self.node_labels.len();
        if self.validate().is_err() || self.edges.len() + 1 != q {
            return false;
        }
        let mut parent = vec![None; q];
        for &(p, c) in &self.edges {
            if parent[c].replace(p).is_some() {
                return false;
            }
        }
        let roots: Vec<usize> = (0..q).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return false;
        }
        let mut children = vec![Vec::new(); q];
        for &(p, c) in &self.edges {
            children[p].push(c);
        }
        let mut seen = vec![false; q];
        let mut stack = vec![roots[0]];
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                return false;
            }
            stack.extend(&children[n]);
        }
        seen.into_iter().all(|s| s)
    }
}

/// One code/summary pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSample {
    pub id: String,
    pub code_tokens: Vec<String>,
    pub ast: AstGraph,
    pub summary_tokens: Vec<String>,
}

impl CodeSample {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidSample {
            id: self.id.clone(),
            msg,
        };
        if self.code_tokens.is_empty() {
            return Err(bad("no code tokens".into()));
        }
        if self.summary_tokens.is_empty() {
            return Err(bad("no summary tokens".into()));
        }
        self.ast.validate().map_err(bad)
    }
}

/// On-disk JSONL record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    code_tokens: Vec<String>,
    ast_nodes: Vec<String>,
    ast_edges: Vec<(usize, usize)>,
    summary_tokens: Vec<String>,
}

impl From<Record> for CodeSample {
    fn from(r: Record) -> Self {
        Self {
            id: r.id,
            code_tokens: r.code_tokens,
            ast: AstGraph {
                node_labels: r.ast_nodes,
                edges: r.ast_edges,
            },
            summary_tokens: r.summary_tokens,
        }
    }
}

impl From<&CodeSample> for Record {
    fn from(s: &CodeSample) -> Self {
        Self {
            id: s.id.clone(),
            code_tokens: s.code_tokens.clone(),
            ast_nodes: s.ast.node_labels.clone(),
            ast_edges: s.ast.edges.clone(),
            summary_tokens: s.summary_tokens.clone(),
        }
    }
}

pub fn to_json_line(sample: &CodeSample) -> String {
    serde_json::to_string(&Record::from(sample)).expect("record serializes")
}

/// Load a JSONL dataset. Blank lines are skipped; line numbers are 1-based.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<CodeSample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let sample = CodeSample::from(record);
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[CodeSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        writeln!(w, "{}", to_json_line(s))?;
    }
    w.flush()?;
    Ok(())
}
