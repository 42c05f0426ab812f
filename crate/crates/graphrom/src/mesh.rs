//! Triangulated surface meshes and the plain-text mesh/field file formats.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// An unstructured triangulated surface mesh.
///
/// Cell areas and outward unit normals are derived from the node coordinates
/// and the cell winding order at construction time and kept consistent with
/// the geometry thereafter.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    nodes: Vec<[f64; 3]>,
    cells: Vec<[usize; 3]>,
    cell_areas: Vec<f64>,
    cell_normals: Vec<[f64; 3]>,
}

/// Smallest cell area accepted before a cell is considered degenerate.
const MIN_CELL_AREA: f64 = 1e-300;

impl SurfaceMesh {
    /// Build a mesh from raw nodes and triangles, validating connectivity.
    ///
    /// Rejects out-of-range cell indices, repeated indices within a cell,
    /// zero-area cells and nodes that no cell references.
    pub fn new(nodes: Vec<[f64; 3]>, cells: Vec<[usize; 3]>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidMesh("mesh has no nodes".into()));
        }
        let n = nodes.len();
        let mut referenced = vec![false; n];
        for (c, cell) in cells.iter().enumerate() {
            let [i, j, k] = *cell;
            if i >= n || j >= n || k >= n {
                return Err(Error::InvalidMesh(format!(
                    "cell {c} references node out of range (n_nodes = {n})"
                )));
            }
            if i == j || j == k || i == k {
                return Err(Error::InvalidMesh(format!(
                    "cell {c} repeats a node index"
                )));
            }
            referenced[i] = true;
            referenced[j] = true;
            referenced[k] = true;
        }
        if let Some(orphan) = referenced.iter().position(|r| !r) {
            return Err(Error::InvalidMesh(format!(
                "node {orphan} does not belong to any cell"
            )));
        }

        let mut cell_areas = Vec::with_capacity(cells.len());
        let mut cell_normals = Vec::with_capacity(cells.len());
        for (c, &[i, j, k]) in cells.iter().enumerate() {
            let cross = triangle_cross(&nodes[i], &nodes[j], &nodes[k]);
            let norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            let area = 0.5 * norm;
            if !(area > MIN_CELL_AREA) {
                return Err(Error::InvalidMesh(format!("cell {c} is degenerate")));
            }
            cell_areas.push(area);
            cell_normals.push([cross[0] / norm, cross[1] / norm, cross[2] / norm]);
        }

        Ok(SurfaceMesh {
            nodes,
            cells,
            cell_areas,
            cell_normals,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    /// Area of each triangle (half the cross-product norm).
    pub fn cell_areas(&self) -> &[f64] {
        &self.cell_areas
    }

    /// Unit normal of each triangle, oriented by the cell winding order.
    pub fn cell_normals(&self) -> &[[f64; 3]] {
        &self.cell_normals
    }

    pub fn total_area(&self) -> f64 {
        self.cell_areas.iter().sum()
    }

    /// Lumped node areas: each node receives one third of the area of every
    /// incident cell. Sums to the total surface area.
    pub fn node_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.nodes.len()];
        for (c, cell) in self.cells.iter().enumerate() {
            let share = self.cell_areas[c] / 3.0;
            for &i in cell {
                areas[i] += share;
            }
        }
        areas
    }

    /// Parse a mesh from the plain-text format:
    ///
    /// ```text
    /// nodes <n> cells <m>
    /// x y z        (n lines)
    /// i j k        (m lines, 0-based node indices)
    /// ```
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "nodes" || toks[2] != "cells" {
            return Err(Error::parse(
                path,
                line_no + 1,
                "expected header `nodes <n> cells <m>`",
            ));
        }
        let n: usize = parse_tok(toks[1], path, line_no + 1)?;
        let m: usize = parse_tok(toks[3], path, line_no + 1)?;

        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let (lno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, n + 1, "unexpected end of node block"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 3 {
                return Err(Error::parse(path, lno + 1, "expected `x y z`"));
            }
            nodes.push([
                parse_tok(vals[0], path, lno + 1)?,
                parse_tok(vals[1], path, lno + 1)?,
                parse_tok(vals[2], path, lno + 1)?,
            ]);
        }

        let mut cells = Vec::with_capacity(m);
        for _ in 0..m {
            let (lno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, n + m + 1, "unexpected end of cell block"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != 3 {
                return Err(Error::parse(path, lno + 1, "expected `i j k`"));
            }
            cells.push([
                parse_tok(vals[0], path, lno + 1)?,
                parse_tok(vals[1], path, lno + 1)?,
                parse_tok(vals[2], path, lno + 1)?,
            ]);
        }

        for (lno, line) in lines {
            if !line.trim().is_empty() {
                return Err(Error::parse(path, lno + 1, "trailing content after cell block"));
            }
        }

        Self::new(nodes, cells)
    }

    /// Write the mesh in the plain-text format read by [`SurfaceMesh::load`].
    ///
    /// Floats are printed with shortest round-trip formatting, so a
    /// save/load cycle reproduces the coordinates bit for bit.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let _ = writeln!(out, "nodes {} cells {}", self.n_nodes(), self.n_cells());
        for p in &self.nodes {
            let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
        }
        for c in &self.cells {
            let _ = writeln!(out, "{} {} {}", c[0], c[1], c[2]);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn triangle_cross(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> [f64; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn parse_tok<T: std::str::FromStr>(tok: &str, path: &Path, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(path, line, format!("cannot parse `{tok}`")))
}

/// Named per-node field columns, stored as an `n_nodes x n_channels` array.
#[derive(Debug, Clone)]
pub struct FieldSet {
    names: Vec<String>,
    values: Array2<f64>,
}

impl FieldSet {
    pub fn new(names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} field names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        Ok(FieldSet { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    /// Column with the given name, if present.
    pub fn channel(&self, name: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(self.values.column(idx))
    }

    /// Parse fields from the plain-text format:
    ///
    /// ```text
    /// fields <n> <c> names <name1> ... <namec>
    /// v1 ... vc    (n lines)
    /// ```
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (line_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() < 4 || toks[0] != "fields" || toks[3] != "names" {
            return Err(Error::parse(
                path,
                line_no + 1,
                "expected header `fields <n> <c> names <name...>`",
            ));
        }
        let n: usize = parse_tok(toks[1], path, line_no + 1)?;
        let c: usize = parse_tok(toks[2], path, line_no + 1)?;
        if toks.len() != 4 + c {
            return Err(Error::parse(
                path,
                line_no + 1,
                format!("expected {c} field names, found {}", toks.len() - 4),
            ));
        }
        let names: Vec<String> = toks[4..].iter().map(|s| s.to_string()).collect();

        let mut values = Array2::zeros((n, c));
        for i in 0..n {
            let (lno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, n + 1, "unexpected end of value block"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != c {
                return Err(Error::parse(
                    path,
                    lno + 1,
                    format!("expected {c} values, found {}", vals.len()),
                ));
            }
            for (j, v) in vals.iter().enumerate() {
                values[[i, j]] = parse_tok(v, path, lno + 1)?;
            }
        }
        for (lno, line) in lines {
            if !line.trim().is_empty() {
                return Err(Error::parse(path, lno + 1, "trailing content after value block"));
            }
        }

        FieldSet::new(names, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let _ = write!(out, "fields {} {} names", self.values.nrows(), self.values.ncols());
        for name in &self.names {
            let _ = write!(out, " {name}");
        }
        let _ = writeln!(out);
        for row in self.values.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
                first = false;
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
