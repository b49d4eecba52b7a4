//! Network topology, bus admittance matrix and the constant matrices that
//! express every measurement as a linear or quadratic form in the
//! rectangular state `v = [Re V; Im V]`.
//!
//! Buses are indexed `0..N` internally; `Grid::bus_labels` keeps the ids
//! from the case file. Every matrix here is `2N x 2N` but touches at most a
//! bus and its neighbours, so it is stored as a small dense block over an
//! explicit index set ([`LocalMatrix`]).

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A transmission line in the Pi model. `from < to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series admittance `Y_nm`.
    pub series: Complex64,
    /// Shunt admittance-to-ground at each end, `Ybar_nm`.
    pub shunt: Complex64,
}

/// A line seen from its measuring end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedLine {
    pub from: usize,
    pub to: usize,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct Grid {
    n_buses: usize,
    lines: Vec<Line>,
    bus_labels: Vec<i64>,
    neighbors: Vec<Vec<usize>>,
    directed: Vec<DirectedLine>,
}

impl Grid {
    /// Validates topology: indices in range, no self loops, no duplicate
    /// pairs, connected.
    pub fn new(n_buses: usize, mut lines: Vec<Line>) -> Result<Self> {
        if n_buses == 0 {
            return Err(Error::InvalidGrid("grid has no buses".into()));
        }
        for l in lines.iter_mut() {
            if l.from >= n_buses || l.to >= n_buses {
                return Err(Error::InvalidGrid(format!(
                    "line ({}, {}) references a bus outside 0..{n_buses}",
                    l.from, l.to
                )));
            }
            if l.from == l.to {
                return Err(Error::InvalidGrid(format!("self loop at bus {}", l.from)));
            }
            if l.from > l.to {
                std::mem::swap(&mut l.from, &mut l.to);
            }
        }
        lines.sort_by_key(|l| (l.from, l.to));
        if let Some(w) = lines.windows(2).find(|w| (w[0].from, w[0].to) == (w[1].from, w[1].to)) {
            return Err(Error::InvalidGrid(format!(
                "duplicate line between buses {} and {}",
                w[0].from, w[0].to
            )));
        }

        let mut neighbors = vec![Vec::new(); n_buses];
        for l in &lines {
            neighbors[l.from].push(l.to);
            neighbors[l.to].push(l.from);
        }
        for nb in neighbors.iter_mut() {
            nb.sort_unstable();
        }

        let mut seen = vec![false; n_buses];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(b) = queue.pop_front() {
            for &m in &neighbors[b] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidGrid(format!(
                "network is disconnected (bus {b} unreachable); state not estimable"
            )));
        }

        let mut directed = Vec::with_capacity(2 * lines.len());
        for (idx, l) in lines.iter().enumerate() {
            directed.push(DirectedLine { from: l.from, to: l.to, line: idx });
            directed.push(DirectedLine { from: l.to, to: l.from, line: idx });
        }
        directed.sort_by_key(|d| (d.from, d.to));

        Ok(Grid {
            n_buses,
            lines,
            bus_labels: (1..=n_buses as i64).collect(),
            neighbors,
            directed,
        })
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.n_buses {
            return Err(Error::Dimension("bus label count".into()));
        }
        self.bus_labels = labels;
        Ok(self)
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    /// Number of undirected lines `L`.
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn bus_labels(&self) -> &[i64] {
        &self.bus_labels
    }

    pub fn neighbors(&self, bus: usize) -> &[usize] {
        &self.neighbors[bus]
    }

    /// `2L` directed lines sorted by `(from, to)`.
    pub fn directed_lines(&self) -> &[DirectedLine] {
        &self.directed
    }

    /// Index of directed line `(from, to)` in [`Grid::directed_lines`].
    pub fn directed_index(&self, from: usize, to: usize) -> Option<usize> {
        self.directed.binary_search_by_key(&(from, to), |d| (d.from, d.to)).ok()
    }

    /// Directed lines measured at `bus`, as indices into `directed_lines`.
    pub fn outgoing(&self, bus: usize) -> std::ops::Range<usize> {
        let lo = self.directed.partition_point(|d| d.from < bus);
        let hi = self.directed.partition_point(|d| d.from <= bus);
        lo..hi
    }

    /// Renumber buses: old bus `b` becomes `perm[b]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Grid> {
        if perm.len() != self.n_buses {
            return Err(Error::Dimension("permutation length".into()));
        }
        let lines = self
            .lines
            .iter()
            .map(|l| Line { from: perm[l.from], to: perm[l.to], ..*l })
            .collect();
        let mut labels = vec![0; self.n_buses];
        for (old, &new) in perm.iter().enumerate() {
            labels[new] = self.bus_labels[old];
        }
        Grid::new(self.n_buses, lines)?.with_labels(labels)
    }
}

/// Parse a MATPOWER `.m` case or the native JSON schema (detected by a
/// leading `{`).
pub fn parse_case(text: &str) -> Result<Grid> {
    if text.trim_start().starts_with('{') {
        parse_json(text)
    } else {
        parse_matpower(text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonCase {
    #[serde(default)]
    pub name: Option<String>,
    pub buses: Vec<i64>,
    pub branches: Vec<JsonBranch>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JsonBranch {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default = "default_status")]
    pub status: bool,
}

fn default_status() -> bool {
    true
}

pub fn parse_json(text: &str) -> Result<Grid> {
    let case: JsonCase = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let branches = case
        .branches
        .iter()
        .filter(|b| b.status)
        .map(|b| RawBranch { from: b.from, to: b.to, r: b.r, x: b.x, b: b.b, line: 0 })
        .collect();
    build_grid(case.buses, branches)
}

struct RawBranch {
    from: i64,
    to: i64,
    r: f64,
    x: f64,
    b: f64,
    line: usize,
}

pub fn parse_matpower(text: &str) -> Result<Grid> {
    let mut bus_ids = Vec::new();
    let mut branches = Vec::new();
    let mut saw_bus = false;
    let mut saw_branch = false;

    #[derive(PartialEq)]
    enum Table {
        None,
        Bus,
        Branch,
        Other,
    }
    let mut table = Table::None;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut line = raw.split('%').next().unwrap_or("").trim();
        if table == Table::None {
            if let Some(eq) = line.find('=') {
                let lhs = line[..eq].trim();
                let rhs = line[eq + 1..].trim();
                if let Some(rest) = rhs.strip_prefix('[') {
                    table = match lhs {
                        "mpc.bus" => {
                            saw_bus = true;
                            Table::Bus
                        }
                        "mpc.branch" => {
                            saw_branch = true;
                            Table::Branch
                        }
                        _ => Table::Other,
                    };
                    line = rest.trim();
                } else {
                    continue;
                }
            } else {
                continue;
            }
        }
        let (body, closes) = match line.find(']') {
            Some(pos) => (&line[..pos], true),
            None => (line, false),
        };
        for row in body.split(';') {
            let row = row.trim();
            if row.is_empty() {
                continue;
            }
            match table {
                Table::Bus | Table::Branch => {
                    let vals = row
                        .split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.parse::<f64>().map_err(|_| Error::Parse {
                                line: lineno,
                                msg: format!("invalid number '{s}'"),
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    if table == Table::Bus {
                        let id = *vals.first().ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: "empty bus row".into(),
                        })?;
                        bus_ids.push(as_bus_id(id, lineno)?);
                    } else {
                        if vals.len() < 5 {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("branch row needs at least 5 columns, got {}", vals.len()),
                            });
                        }
                        let in_service = vals.get(10).is_none_or(|&s| s != 0.0);
                        if in_service {
                            branches.push(RawBranch {
                                from: as_bus_id(vals[0], lineno)?,
                                to: as_bus_id(vals[1], lineno)?,
                                r: vals[2],
                                x: vals[3],
                                b: vals[4],
                                line: lineno,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        if closes {
            table = Table::None;
        }
    }
    if table != Table::None {
        return Err(Error::Parse { line: text.lines().count(), msg: "unterminated matrix".into() });
    }
    if !saw_bus {
        return Err(Error::Parse { line: 0, msg: "missing mpc.bus table".into() });
    }
    if !saw_branch {
        return Err(Error::Parse { line: 0, msg: "missing mpc.branch table".into() });
    }
    build_grid(bus_ids, branches)
}

fn as_bus_id(x: f64, line: usize) -> Result<i64> {
    if x.fract() != 0.0 || !x.is_finite() {
        return Err(Error::Parse { line, msg: format!("bus id {x} is not an integer") });
    }
    Ok(x as i64)
}

/// Sorts bus ids, maps them to `0..N` and merges parallel branches by summing
/// their admittances.
fn build_grid(mut bus_ids: Vec<i64>, branches: Vec<RawBranch>) -> Result<Grid> {
    bus_ids.sort_unstable();
    if let Some(w) = bus_ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidGrid(format!("duplicate bus id {}", w[0])));
    }
    let index: BTreeMap<i64, usize> = bus_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut merged: BTreeMap<(usize, usize), Line> = BTreeMap::new();
    for br in branches {
        let lookup = |id: i64| {
            index.get(&id).copied().ok_or_else(|| Error::Parse {
                line: br.line,
                msg: format!("branch references unknown bus {id}"),
            })
        };
        let (a, b) = (lookup(br.from)?, lookup(br.to)?);
        if a == b {
            return Err(Error::Parse { line: br.line, msg: format!("branch is a self loop at bus {}", br.from) });
        }
        let z = Complex64::new(br.r, br.x);
        if z.norm() == 0.0 {
            return Err(Error::Parse { line: br.line, msg: "branch has zero impedance".into() });
        }
        let series = z.inv();
        let shunt = Complex64::new(0.0, br.b / 2.0);
        let key = (a.min(b), a.max(b));
        merged
            .entry(key)
            .and_modify(|l| {
                l.series += series;
                l.shunt += shunt;
            })
            .or_insert(Line { from: key.0, to: key.1, series, shunt });
    }
    let n = bus_ids.len();
    Grid::new(n, merged.into_values().collect())?.with_labels(bus_ids)
}

/// Bus admittance matrix.
///
/// Off-diagonal `(n, m)` is `-Y_nm`; the diagonal collects
/// `sum_m (Y_nm + Ybar_nm)`, i.e. the negated self-admittance, so rows sum to
/// zero when line shunts vanish.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub y: DMatrix<Complex64>,
}

pub fn build_admittance(grid: &Grid) -> AdmittanceMatrix {
    let n = grid.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for l in grid.lines() {
        y[(l.from, l.to)] -= l.series;
        y[(l.to, l.from)] -= l.series;
        y[(l.from, l.from)] += l.series + l.shunt;
        y[(l.to, l.to)] += l.series + l.shunt;
    }
    AdmittanceMatrix { y }
}

/// A `dim x dim` real matrix with nonzeros confined to `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMatrix {
    pub dim: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: DMatrix<f64>,
}

impl LocalMatrix {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (i, &r) in self.rows.iter().enumerate() {
            for (j, &c) in self.cols.iter().enumerate() {
                out[(r, c)] += self.vals[(i, j)];
            }
        }
        out
    }

    /// `v^T A v`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, &r) in self.rows.iter().enumerate() {
            let mut row = 0.0;
            for (j, &c) in self.cols.iter().enumerate() {
                row += self.vals[(i, j)] * v[c];
            }
            s += v[r] * row;
        }
        s
    }

    /// `(1^T over the rows) A`, the sum of the stored rows as a sparse row.
    pub fn row_sum(&self) -> SparseRow {
        let vals = (0..self.cols.len()).map(|j| self.vals.column(j).sum()).collect();
        SparseRow::new(self.cols.clone(), vals)
    }

    /// `A + A^T` restricted to the union of its rows and columns.
    pub fn symmetric_part(&self) -> LocalSym {
        let mut idx: Vec<usize> = self.rows.iter().chain(&self.cols).copied().collect();
        idx.sort_unstable();
        idx.dedup();
        let pos = |g: usize| idx.binary_search(&g).unwrap();
        let s = idx.len();
        let mut vals = DMatrix::zeros(s, s);
        for (i, &r) in self.rows.iter().enumerate() {
            for (j, &c) in self.cols.iter().enumerate() {
                let a = self.vals[(i, j)];
                vals[(pos(r), pos(c))] += a;
                vals[(pos(c), pos(r))] += a;
            }
        }
        LocalSym { dim: self.dim, idx, vals }
    }
}

/// Symmetric matrix supported on `idx x idx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSym {
    pub dim: usize,
    pub idx: Vec<usize>,
    pub vals: DMatrix<f64>,
}

impl LocalSym {
    /// `(H v)` as a sparse row over `idx`.
    pub fn apply(&self, v: &[f64]) -> SparseRow {
        let s = self.idx.len();
        let vals = (0..s)
            .map(|i| (0..s).map(|j| self.vals[(i, j)] * v[self.idx[j]]).sum())
            .collect();
        SparseRow::new(self.idx.clone(), vals)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (i, &r) in self.idx.iter().enumerate() {
            for (j, &c) in self.idx.iter().enumerate() {
                out[(r, c)] += self.vals[(i, j)];
            }
        }
        out
    }

    /// `out += w * H^T H`.
    pub fn add_gram_to(&self, out: &mut DMatrix<f64>, w: f64) {
        let hth = self.vals.transpose() * &self.vals;
        for (i, &r) in self.idx.iter().enumerate() {
            for (j, &c) in self.idx.iter().enumerate() {
                out[(r, c)] += w * hth[(i, j)];
            }
        }
    }
}

/// Sparse real row vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRow {
    pub fn new(idx: Vec<usize>, vals: Vec<f64>) -> Self {
        debug_assert_eq!(idx.len(), vals.len());
        SparseRow { idx, vals }
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.idx.iter().zip(&self.vals).map(|(&i, &a)| a * v[i]).sum()
    }

    /// `out += w * r r^T`.
    pub fn add_outer_to(&self, out: &mut DMatrix<f64>, w: f64) {
        for (a, &i) in self.idx.iter().enumerate() {
            for (b, &j) in self.idx.iter().enumerate() {
                out[(i, j)] += w * self.vals[a] * self.vals[b];
            }
        }
    }

    pub fn scatter_into(&self, row: &mut [f64]) {
        for (&i, &a) in self.idx.iter().zip(&self.vals) {
            row[i] += a;
        }
    }
}

/// Per-bus and per-directed-line constant matrices.
///
/// For bus `n`: `N_P,n`, `N_Q,n` (injections), `H_I,n`, `H_J,n` (stacked
/// current rows of the lines measured at `n`). For directed line `(n, m)`:
/// `E_P,nm`, `E_Q,nm` (flows) and `C_I,nm`, `C_J,nm` (currents).
#[derive(Debug, Clone)]
pub struct ConstantMatrixSet {
    pub n_buses: usize,
    pub n_p: Vec<LocalMatrix>,
    pub n_q: Vec<LocalMatrix>,
    pub e_p: Vec<LocalMatrix>,
    pub e_q: Vec<LocalMatrix>,
    pub c_i: Vec<LocalMatrix>,
    pub c_j: Vec<LocalMatrix>,
    /// Row `ell` is `(1_2 (x) e_n)^T C_I,nm` for directed line `ell = (n, m)`.
    pub current_re: Vec<SparseRow>,
    pub current_im: Vec<SparseRow>,
    /// `N_P,n + N_P,n^T` and friends, the Jacobian generators.
    pub h_inj_p: Vec<LocalSym>,
    pub h_inj_q: Vec<LocalSym>,
    pub h_flow_p: Vec<LocalSym>,
    pub h_flow_q: Vec<LocalSym>,
    outgoing: Vec<std::ops::Range<usize>>,
}

impl ConstantMatrixSet {
    pub fn dim(&self) -> usize {
        2 * self.n_buses
    }

    pub fn n_directed(&self) -> usize {
        self.e_p.len()
    }

    /// Directed-line indices measured at `bus`.
    pub fn outgoing(&self, bus: usize) -> std::ops::Range<usize> {
        self.outgoing[bus].clone()
    }

    /// `H_I,n` as a dense `L_n x 2N` matrix.
    pub fn h_i(&self, bus: usize) -> DMatrix<f64> {
        self.stack_rows(bus, &self.current_re)
    }

    /// `H_J,n` as a dense `L_n x 2N` matrix.
    pub fn h_j(&self, bus: usize) -> DMatrix<f64> {
        self.stack_rows(bus, &self.current_im)
    }

    fn stack_rows(&self, bus: usize, rows: &[SparseRow]) -> DMatrix<f64> {
        let range = self.outgoing(bus);
        let mut out = DMatrix::zeros(range.len(), self.dim());
        for (r, ell) in range.enumerate() {
            for (&c, &a) in rows[ell].idx.iter().zip(&rows[ell].vals) {
                out[(r, c)] += a;
            }
        }
        out
    }

    /// Selector `S_n = I_{L_n} (x) (1_2 (x) e_n)^T`.
    pub fn selector(&self, bus: usize) -> DMatrix<f64> {
        let ln = self.outgoing(bus).len();
        let n2 = self.dim();
        let mut s = DMatrix::zeros(ln, ln * n2);
        for r in 0..ln {
            s[(r, r * n2 + bus)] = 1.0;
            s[(r, r * n2 + self.n_buses + bus)] = 1.0;
        }
        s
    }

    /// `C_I,n`: the `C_I,nm` of lines measured at `n` stacked vertically.
    pub fn c_i_stack(&self, bus: usize) -> DMatrix<f64> {
        self.stack_blocks(bus, &self.c_i)
    }

    pub fn c_j_stack(&self, bus: usize) -> DMatrix<f64> {
        self.stack_blocks(bus, &self.c_j)
    }

    fn stack_blocks(&self, bus: usize, blocks: &[LocalMatrix]) -> DMatrix<f64> {
        let range = self.outgoing(bus);
        let n2 = self.dim();
        let mut out = DMatrix::zeros(range.len() * n2, n2);
        for (r, ell) in range.enumerate() {
            out.view_mut((r * n2, 0), (n2, n2)).copy_from(&blocks[ell].to_dense());
        }
        out
    }
}

/// Build the `[[X, -Z], [Z, X]]`-style blocks from one admittance row.
fn rect_block(n: usize, row: usize, cols: &[usize], g: &[f64], b: &[f64], kind: BlockKind) -> LocalMatrix {
    let s = cols.len();
    let rows = vec![row, n + row];
    let all_cols: Vec<usize> = cols.iter().copied().chain(cols.iter().map(|&c| n + c)).collect();
    let mut vals = DMatrix::zeros(2, 2 * s);
    for j in 0..s {
        let (tl, tr, bl, br) = match kind {
            // [[G, -B], [B, G]]
            BlockKind::Active => (g[j], -b[j], b[j], g[j]),
            // -[[B, G], [-G, B]]
            BlockKind::Reactive => (-b[j], -g[j], g[j], -b[j]),
            // [[G, 0], [0, -B]]
            BlockKind::CurrentRe => (g[j], 0.0, 0.0, -b[j]),
            // [[B, 0], [0, G]]
            BlockKind::CurrentIm => (b[j], 0.0, 0.0, g[j]),
        };
        vals[(0, j)] = tl;
        vals[(0, s + j)] = tr;
        vals[(1, j)] = bl;
        vals[(1, s + j)] = br;
    }
    LocalMatrix { dim: 2 * n, rows, cols: all_cols, vals }
}

#[derive(Clone, Copy)]
enum BlockKind {
    Active,
    Reactive,
    CurrentRe,
    CurrentIm,
}

pub fn build_constant_matrices(grid: &Grid, y: &AdmittanceMatrix) -> ConstantMatrixSet {
    let n = grid.n_buses();
    let mut n_p = Vec::with_capacity(n);
    let mut n_q = Vec::with_capacity(n);
    for bus in 0..n {
        let mut cols = vec![bus];
        cols.extend_from_slice(grid.neighbors(bus));
        cols.sort_unstable();
        let g: Vec<f64> = cols.iter().map(|&c| y.y[(bus, c)].re).collect();
        let b: Vec<f64> = cols.iter().map(|&c| y.y[(bus, c)].im).collect();
        n_p.push(rect_block(n, bus, &cols, &g, &b, BlockKind::Active));
        n_q.push(rect_block(n, bus, &cols, &g, &b, BlockKind::Reactive));
    }

    let nd = grid.directed_lines().len();
    let (mut e_p, mut e_q, mut c_i, mut c_j) =
        (Vec::with_capacity(nd), Vec::with_capacity(nd), Vec::with_capacity(nd), Vec::with_capacity(nd));
    for d in grid.directed_lines() {
        let line = grid.lines()[d.line];
        // Y_nm = (Y + Ybar) e_n e_n^T - Y e_n e_m^T
        let cols = [d.from, d.to];
        let own = line.series + line.shunt;
        let g = [own.re, -line.series.re];
        let b = [own.im, -line.series.im];
        e_p.push(rect_block(n, d.from, &cols, &g, &b, BlockKind::Active));
        e_q.push(rect_block(n, d.from, &cols, &g, &b, BlockKind::Reactive));
        c_i.push(rect_block(n, d.from, &cols, &g, &b, BlockKind::CurrentRe));
        c_j.push(rect_block(n, d.from, &cols, &g, &b, BlockKind::CurrentIm));
    }

    let current_re = c_i.iter().map(LocalMatrix::row_sum).collect();
    let current_im = c_j.iter().map(LocalMatrix::row_sum).collect();
    let h_inj_p = n_p.iter().map(LocalMatrix::symmetric_part).collect();
    let h_inj_q = n_q.iter().map(LocalMatrix::symmetric_part).collect();
    let h_flow_p = e_p.iter().map(LocalMatrix::symmetric_part).collect();
    let h_flow_q = e_q.iter().map(LocalMatrix::symmetric_part).collect();
    let outgoing = (0..n).map(|b| grid.outgoing(b)).collect();

    ConstantMatrixSet {
        n_buses: n,
        n_p,
        n_q,
        e_p,
        e_q,
        c_i,
        c_j,
        current_re,
        current_im,
        h_inj_p,
        h_inj_q,
        h_flow_p,
        h_flow_q,
        outgoing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) const TWO_BUS: &str = r#"{"buses": [1, 2], "branches": [{"from": 1, "to": 2, "r": 0.01, "x": 0.1, "b": 0.0}]}"#;

    #[test]
    fn two_bus_series_admittance() {
        let g = parse_case(TWO_BUS).unwrap();
        assert_eq!(g.n_buses(), 2);
        assert_eq!(g.n_lines(), 1);
        // 1 / (0.01 + 0.1i) = (0.01 - 0.1i) / 0.0101
        let y = g.lines()[0].series;
        assert_relative_eq!(y.re, 0.01 / 0.0101, epsilon = 1e-12);
        assert_relative_eq!(y.im, -0.1 / 0.0101, epsilon = 1e-12);
        assert_relative_eq!(y.re, 0.990_099, epsilon = 1e-6);
        assert_relative_eq!(y.im, -9.900_990, epsilon = 1e-6);
    }

    #[test]
    fn two_bus_admittance_matrix() {
        let g = parse_case(TWO_BUS).unwrap();
        let y = build_admittance(&g);
        let y12 = g.lines()[0].series;
        assert_eq!(y.y[(0, 1)], -y12);
        assert_eq!(y.y[(0, 0)], y12);
        for r in 0..2 {
            assert!(y.y.row(r).iter().sum::<Complex64>().norm() < 1e-12);
        }
    }

    #[test]
    fn single_bus_zero_lines() {
        let g = Grid::new(1, vec![]).unwrap();
        let y = build_admittance(&g);
        assert_eq!(y.y[(0, 0)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn empty_branch_table_is_disconnected() {
        let text = "mpc.bus = [\n1 3 0;\n2 1 0;\n];\nmpc.branch = [\n];\n";
        assert!(matches!(parse_case(text), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "mpc.bus = [\n1 3 0;\n2 1 0;\n];\nmpc.branch = [\n1 2 0.01 zz 0;\n];\n";
        match parse_case(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_self_loops_and_duplicates() {
        let l = Line { from: 0, to: 0, series: Complex64::new(1.0, -1.0), shunt: Complex64::default() };
        assert!(Grid::new(2, vec![l]).is_err());
        let l = Line { from: 0, to: 1, ..l };
        assert!(Grid::new(2, vec![l, Line { from: 1, to: 0, ..l }]).is_err());
    }

    #[test]
    fn out_of_service_branches_are_skipped_and_parallels_merge() {
        let text = "mpc.bus = [1 3; 2 1; 3 1];\nmpc.branch = [\n1 2 0 0.1 0.02 0 0 0 0 0 1;\n1 2 0 0.2 0.04 0 0 0 0 0 1;\n2 3 0 0.1 0 0 0 0 0 0 1;\n1 3 0 0.1 0 0 0 0 0 0 0;\n];";
        let g = parse_case(text).unwrap();
        assert_eq!(g.n_lines(), 2);
        let l = g.lines()[0];
        assert_relative_eq!(l.series.im, -15.0, epsilon = 1e-12);
        assert_relative_eq!(l.shunt.im, 0.03, epsilon = 1e-12);
    }

    #[test]
    fn directed_lines_sorted_with_both_directions() {
        let g = crate::cases::load("ieee14").unwrap();
        let d = g.directed_lines();
        assert_eq!(d.len(), 2 * g.n_lines());
        assert!(d.windows(2).all(|w| (w[0].from, w[0].to) < (w[1].from, w[1].to)));
        for b in 0..g.n_buses() {
            assert_eq!(g.outgoing(b).len(), g.neighbors(b).len());
        }
    }

    #[test]
    fn injection_blocks_live_on_bus_rows() {
        let g = crate::cases::load("ieee14").unwrap();
        let y = build_admittance(&g);
        let mats = build_constant_matrices(&g, &y);
        let n = g.n_buses();
        for bus in 0..n {
            let d = mats.n_p[bus].to_dense();
            for r in 0..2 * n {
                if r != bus && r != n + bus {
                    assert!(d.row(r).iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn reactive_injection_matches_block_definition() {
        let g = crate::cases::load("ieee14").unwrap();
        let y = build_admittance(&g);
        let mats = build_constant_matrices(&g, &y);
        let n = g.n_buses();
        let re = y.y.map(|c| c.re);
        let im = y.y.map(|c| c.im);
        for bus in [0usize, 4, 13] {
            let mut gn = DMatrix::zeros(n, n);
            let mut bn = DMatrix::zeros(n, n);
            gn.row_mut(bus).copy_from(&re.row(bus));
            bn.row_mut(bus).copy_from(&im.row(bus));
            let mut expect = DMatrix::zeros(2 * n, 2 * n);
            expect.view_mut((0, 0), (n, n)).copy_from(&(-&bn));
            expect.view_mut((0, n), (n, n)).copy_from(&(-&gn));
            expect.view_mut((n, 0), (n, n)).copy_from(&gn);
            expect.view_mut((n, n), (n, n)).copy_from(&(-&bn));
            assert_eq!(mats.n_q[bus].to_dense(), expect);
        }
    }

    #[test]
    fn two_bus_active_injection_expansion() {
        let g = parse_case(TWO_BUS).unwrap();
        let y = build_admittance(&g);
        let mats = build_constant_matrices(&g, &y);
        let np = mats.n_p[0].to_dense();
        assert_eq!(np[(0, 0)], y.y[(0, 0)].re);
        assert_eq!(np[(0, 1)], y.y[(0, 1)].re);
        // P_1 = e1 (G11 e1 + G12 e2) at v = [1, 1, 0, 0]
        let v = [1.0, 1.0, 0.0, 0.0];
        let hand = y.y[(0, 0)].re + y.y[(0, 1)].re;
        assert_relative_eq!(mats.n_p[0].quad(&v), hand, epsilon = 1e-12);
    }

    #[test]
    fn current_block_is_block_diagonal() {
        let g = crate::cases::load("ieee14").unwrap();
        let y = build_admittance(&g);
        let mats = build_constant_matrices(&g, &y);
        let n = g.n_buses();
        let d = g.directed_lines()[3];
        let line = g.lines()[d.line];
        let ci = mats.c_i[3].to_dense();
        assert_eq!(ci[(d.from, d.from)], (line.series + line.shunt).re);
        assert_eq!(ci[(d.from, d.to)], -line.series.re);
        assert_eq!(ci[(n + d.from, n + d.from)], -(line.series + line.shunt).im);
        assert_eq!(ci[(n + d.from, n + d.to)], line.series.im);
        assert!(ci.view((0, n), (n, n)).iter().all(|&x| x == 0.0));
        assert!(ci.view((n, 0), (n, n)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn h_matrices_equal_selector_times_stacked_c() {
        let g = crate::cases::load("ieee14").unwrap();
        let y = build_admittance(&g);
        let mats = build_constant_matrices(&g, &y);
        for bus in 0..g.n_buses() {
            let hi = mats.selector(bus) * mats.c_i_stack(bus);
            assert!((hi - mats.h_i(bus)).norm() < 1e-12);
            let hj = mats.selector(bus) * mats.c_j_stack(bus);
            assert!((hj - mats.h_j(bus)).norm() < 1e-12);
        }
    }

    #[test]
    fn flow_matrices_only_touch_their_line() {
        let g = crate::cases::load("ieee14").unwrap();
        let y = build_admittance(&g);
        let mats = build_constant_matrices(&g, &y);
        let n = g.n_buses();
        for (ell, d) in g.directed_lines().iter().enumerate() {
            let e = mats.e_p[ell].to_dense();
            for r in 0..2 * n {
                for c in 0..2 * n {
                    let bus_r = r % n;
                    let bus_c = c % n;
                    if e[(r, c)] != 0.0 {
                        assert_eq!(bus_r, d.from);
                        assert!(bus_c == d.from || bus_c == d.to);
                    }
                }
            }
        }
    }

    #[test]
    fn relabel_roundtrip_preserves_lines() {
        let g = crate::cases::load("ieee14").unwrap();
        let perm: Vec<usize> = (0..14).rev().collect();
        let h = g.relabeled(&perm).unwrap();
        assert_eq!(h.n_lines(), g.n_lines());
        assert_eq!(h.bus_labels()[13], 1);
    }
}
