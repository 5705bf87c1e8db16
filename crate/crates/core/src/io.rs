//! Text formats shared with the command-line tool.
//!
//! * Tensor file: a `#shape I_1 ... I_K` header, then one `i_1,...,i_K,value`
//!   line per observed cell (0-based). Absent cells are unobserved. Writers
//!   emit cells in canonical order; readers accept any order.
//! * Mask file: the tensor format listing every cell with value `1`
//!   (observed) or `0`.
//! * Adjacency: dense CSV matrix, one row per line.
//! * Feature (POI) file: `entity_id,f_1,...,f_m` per line.
//! * Edge file: `i,j` per line.
//! * Model export: JSON with `rank`, `shape`, `weights` and row-major
//!   `factors`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WdgError};
use crate::graph::Adjacency;
use crate::tensor::{multi_index, tensor_from_entries, CpModel, DenseTensor, ObservationMask};

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(WdgError::Parse { line, msg: msg.into() })
}

/// Formats a float so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => parse_err(line, format!("non-finite value '{}'", field.trim())),
        Err(_) => parse_err(line, format!("cannot parse '{}' as a number", field.trim())),
    }
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .or_else(|_| parse_err(line, format!("cannot parse '{}' as a non-negative integer", field.trim())))
}

/// Non-blank lines with 1-based line numbers.
fn numbered_lines(reader: impl BufRead) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        Ok(s) => Some(Ok((i + 1, s))),
        Err(e) => Some(Err(WdgError::Io(e))),
    })
}

pub fn read_tensor(reader: impl BufRead) -> Result<(DenseTensor, ObservationMask)> {
    let mut lines = numbered_lines(reader);
    let (hline, header) = match lines.next() {
        Some(r) => r?,
        None => return parse_err(1, "empty file; expected '#shape' header"),
    };
    let Some(dims) = header.trim().strip_prefix("#shape") else {
        return parse_err(hline, "first line must start with '#shape'");
    };
    let shape = dims
        .split_whitespace()
        .map(|d| parse_usize(d, hline))
        .collect::<Result<Vec<_>>>()?;
    let k = shape.len();
    let mut entries = Vec::new();
    for item in lines {
        let (ln, line) = item?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return parse_err(ln, format!("expected {} comma-separated fields, got {}", k + 1, fields.len()));
        }
        let index = fields[..k]
            .iter()
            .map(|f| parse_usize(f, ln))
            .collect::<Result<Vec<_>>>()?;
        let value = parse_f64(fields[k], ln)?;
        entries.push((ln, index, value));
    }
    let plain: Vec<(Vec<usize>, f64)> = entries.iter().map(|(_, i, v)| (i.clone(), *v)).collect();
    tensor_from_entries(&shape, &plain).map_err(|e| {
        // Re-run to find the offending line for a useful diagnostic.
        let mut seen = std::collections::HashSet::new();
        for (ln, index, _) in &entries {
            let ok = index.len() == shape.len() && index.iter().zip(&shape).all(|(i, d)| i < d);
            if !ok {
                return WdgError::Parse { line: *ln, msg: format!("index {index:?} outside shape {shape:?}") };
            }
            if !seen.insert(index.clone()) {
                return WdgError::Parse { line: *ln, msg: format!("duplicate index {index:?}") };
            }
        }
        WdgError::Parse { line: hline, msg: e.to_string() }
    })
}

pub fn parse_tensor(text: &str) -> Result<(DenseTensor, ObservationMask)> {
    read_tensor(text.as_bytes())
}

fn write_header(out: &mut String, shape: &[usize]) {
    out.push_str("#shape");
    for d in shape {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
}

fn write_cell(out: &mut String, idx: &[usize], value: &str) {
    for i in idx {
        let _ = write!(out, "{i},");
    }
    out.push_str(value);
    out.push('\n');
}

/// Renders `t` in the tensor format; with `mask`, only observed cells.
pub fn tensor_to_string(t: &DenseTensor, mask: Option<&ObservationMask>) -> Result<String> {
    if let Some(m) = mask {
        if m.shape() != t.shape() {
            return Err(WdgError::Shape(format!("tensor {:?} vs mask {:?}", t.shape(), m.shape())));
        }
    }
    let mut out = String::new();
    write_header(&mut out, t.shape());
    let mut idx = vec![0; t.ndim()];
    for (offset, &v) in t.values().iter().enumerate() {
        if mask.is_some_and(|m| !m.flags()[offset]) {
            continue;
        }
        multi_index(t.shape(), offset, &mut idx);
        write_cell(&mut out, &idx, &fmt_f64(v));
    }
    Ok(out)
}

pub fn write_tensor(mut w: impl Write, t: &DenseTensor, mask: Option<&ObservationMask>) -> Result<()> {
    w.write_all(tensor_to_string(t, mask)?.as_bytes())?;
    Ok(())
}

pub fn mask_to_string(mask: &ObservationMask) -> String {
    let mut out = String::new();
    write_header(&mut out, mask.shape());
    let mut idx = vec![0; mask.shape().len()];
    for (offset, &f) in mask.flags().iter().enumerate() {
        multi_index(mask.shape(), offset, &mut idx);
        write_cell(&mut out, &idx, if f { "1" } else { "0" });
    }
    out
}

/// Reads a mask file: listed cells with a nonzero value are `true`.
pub fn read_mask(reader: impl BufRead) -> Result<ObservationMask> {
    let (t, listed) = read_tensor(reader)?;
    let flags = t.values().iter().zip(listed.flags()).map(|(&v, &l)| l && v != 0.0).collect();
    ObservationMask::new(t.shape().to_vec(), flags)
}

fn csv_rows(reader: impl BufRead) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    for item in numbered_lines(reader) {
        let (ln, line) = item?;
        if line.trim_start().starts_with('#') {
            continue;
        }
        let row = line.split(',').map(|f| parse_f64(f, ln)).collect::<Result<Vec<_>>>()?;
        rows.push((ln, row));
    }
    Ok(rows)
}

pub fn read_adjacency(reader: impl BufRead) -> Result<Adjacency> {
    let rows = csv_rows(reader)?;
    let n = rows.len();
    if n == 0 {
        return parse_err(1, "adjacency file has no rows");
    }
    for (ln, row) in &rows {
        if row.len() != n {
            return parse_err(*ln, format!("row has {} columns, expected {n}", row.len()));
        }
    }
    Adjacency::new(DMatrix::from_fn(n, n, |i, j| rows[i].1[j]))
}

pub fn adjacency_to_string(a: &Adjacency) -> String {
    let w = a.weights();
    let mut out = String::new();
    for i in 0..a.n() {
        let row: Vec<String> = (0..a.n()).map(|j| fmt_f64(w[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads `entity_id,f_1,...,f_m` rows into feature vectors ordered by id.
///
/// Ids must be exactly `0..n`. A first line whose id field is not an integer
/// is taken as a header and skipped.
pub fn read_poi(reader: impl BufRead) -> Result<Vec<Vec<f64>>> {
    let mut by_id: Vec<Option<Vec<f64>>> = Vec::new();
    let mut first = true;
    let mut last_line = 0;
    for item in numbered_lines(reader) {
        let (ln, line) = item?;
        last_line = ln;
        let mut fields = line.split(',');
        let id_field = fields.next().unwrap_or_default();
        let id = match id_field.trim().parse::<usize>() {
            Ok(id) => id,
            Err(_) if first => {
                first = false;
                continue;
            }
            Err(_) => return parse_err(ln, format!("bad entity id '{}'", id_field.trim())),
        };
        first = false;
        let features = fields.map(|f| parse_f64(f, ln)).collect::<Result<Vec<_>>>()?;
        if id >= by_id.len() {
            by_id.resize(id + 1, None);
        }
        if by_id[id].replace(features).is_some() {
            return parse_err(ln, format!("duplicate entity id {id}"));
        }
    }
    by_id
        .into_iter()
        .enumerate()
        .map(|(id, f)| f.ok_or_else(|| WdgError::Parse { line: last_line, msg: format!("entity id {id} missing") }))
        .collect()
}

pub fn read_edges(reader: impl BufRead) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for item in numbered_lines(reader) {
        let (ln, line) = item?;
        if line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return parse_err(ln, format!("expected 'i,j', got '{line}'"));
        }
        edges.push((parse_usize(fields[0], ln)?, parse_usize(fields[1], ln)?));
    }
    Ok(edges)
}

/// Serialized form of a [`CpModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelExport {
    pub rank: usize,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    /// One `I_k x rank` matrix per mode, flattened row by row.
    pub factors: Vec<Vec<f64>>,
}

impl ModelExport {
    pub fn from_model(m: &CpModel) -> Self {
        let factors = m
            .factors()
            .iter()
            .map(|f| {
                let mut flat = Vec::with_capacity(f.len());
                for i in 0..f.nrows() {
                    flat.extend(f.row(i).iter());
                }
                flat
            })
            .collect();
        Self {
            rank: m.rank(),
            shape: m.mode_sizes(),
            weights: m.weights().to_vec(),
            factors,
        }
    }

    pub fn to_model(&self) -> Result<CpModel> {
        if self.weights.len() != self.rank || self.factors.len() != self.shape.len() {
            return Err(WdgError::Input("model export fields are inconsistent".into()));
        }
        let factors = self
            .factors
            .iter()
            .zip(&self.shape)
            .map(|(flat, &n)| {
                if flat.len() != n * self.rank {
                    return Err(WdgError::Input(format!("factor has {} entries, expected {}", flat.len(), n * self.rank)));
                }
                Ok(DMatrix::from_row_slice(n, self.rank, flat))
            })
            .collect::<Result<Vec<_>>>()?;
        CpModel::new(self.weights.clone(), factors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model export serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| WdgError::Parse { line: e.line(), msg: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_text_layout() {
        let (t, m) = parse_tensor("#shape 2 2\n1,1,4.5\n0,0,-1\n\n").unwrap();
        assert_eq!(t.values(), &[-1.0, 0.0, 0.0, 4.5]);
        assert_eq!(m.observed_count(), 2);
        assert_eq!(
            tensor_to_string(&t, Some(&m)).unwrap(),
            "#shape 2 2\n0,0,-1.0\n1,1,4.5\n"
        );
    }

    #[test]
    fn tensor_parse_errors_carry_line_numbers() {
        let line_of = |text: &str| match parse_tensor(text) {
            Err(WdgError::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of(""), 1);
        assert_eq!(line_of("shape 2 2\n"), 1);
        assert_eq!(line_of("#shape 2 2\n0,0,1\n0,1\n"), 3);
        assert_eq!(line_of("#shape 2 2\n0,0,x\n"), 2);
        assert_eq!(line_of("#shape 2 2\n0,0,1\n0,2,1\n"), 3);
        assert_eq!(line_of("#shape 2 2\n0,0,1\n1,1,1\n0,0,2\n"), 4);
        assert_eq!(line_of("#shape 2 2\n0,0,inf\n"), 2);
    }

    #[test]
    fn mask_text() {
        let m = ObservationMask::new(vec![2, 1], vec![false, true]).unwrap();
        let s = mask_to_string(&m);
        assert_eq!(s, "#shape 2 1\n0,0,0\n1,0,1\n");
        assert_eq!(read_mask(s.as_bytes()).unwrap(), m);
    }

    #[test]
    fn adjacency_csv() {
        let a = read_adjacency("0,0.5\n0.5,0\n".as_bytes()).unwrap();
        assert_eq!(a.weights()[(0, 1)], 0.5);
        assert_eq!(adjacency_to_string(&a), "0.0,0.5\n0.5,0.0\n");
        assert!(read_adjacency("0,1\n0,0\n".as_bytes()).is_err());
        assert!(matches!(read_adjacency("0,1,2\n1,0\n".as_bytes()), Err(WdgError::Parse { line: 1, .. })));
    }

    #[test]
    fn poi_rows() {
        let v = read_poi("id,hotel,school\n1,0,2\n0,3,1\n".as_bytes()).unwrap();
        assert_eq!(v, vec![vec![3.0, 1.0], vec![0.0, 2.0]]);
        assert!(read_poi("0,1\n2,1\n".as_bytes()).is_err());
        assert!(read_poi("0,1\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn edges() {
        assert_eq!(read_edges("0,1\n# comment\n2, 1\n".as_bytes()).unwrap(), vec![(0, 1), (2, 1)]);
        assert!(matches!(read_edges("0,1,2\n".as_bytes()), Err(WdgError::Parse { line: 1, .. })));
    }

    #[test]
    fn model_export_layout() {
        let m = CpModel::new(
            vec![2.0, -0.1],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), DMatrix::from_row_slice(1, 2, &[0.1, 0.3])],
        )
        .unwrap();
        let e = ModelExport::from_model(&m);
        assert_eq!(e.factors[0], vec![1.0, 2.0, 3.0, 4.0]);
        let back = ModelExport::from_json(&e.to_json()).unwrap().to_model().unwrap();
        assert_eq!(back, m);
    }
}
