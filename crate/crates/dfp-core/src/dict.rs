//! Construction of the architecture-induced block dictionary: a sparse
//! lower-triangular grid of typed blocks (learned dense, learned conv,
//! fixed identity, fixed negative identity).
//!
//! Grid layout (0-based): row block `r` has height `k_r` (the width of the
//! geometry feeding layer `r+1`), column block `c` has width `k_{c+1}`.
//! Which cells exist, and their kinds, is fixed by the spec's family:
//!
//! * chain: learned diagonal, negative-identity sub-diagonal;
//! * residual: learned `(0,0)`, identity diagonal above that, learned
//!   sub-diagonal, negative-identity skip cells from identity edges;
//! * dense: every lower-triangular cell learned;
//! * custom: identity diagonal, learned/negative-identity cells at
//!   `(dst-1, src-1)` for each edge.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::arch::{ArchSpec, EdgeKind, Family, LayerGeom};
use crate::mat::Mat;
use crate::math;
use crate::rng::NormalSource;

/// Default cap on dense materialization (total entries).
pub const MATERIALIZE_CAP: usize = 10_000_000;

/// A convolution block: shared filters applied over a circular spatial
/// grid. Columns are the shifted filters (block-circulant for stride 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    spatial: Vec<usize>,
    in_channels: usize,
    out_channels: usize,
    kernel: Vec<usize>,
    stride: Vec<usize>,
    /// Filter taps, `[out_channel][in_channel][tap]` with taps row-major
    /// over the kernel dims.
    filters: Vec<f64>,
}

impl ConvBlock {
    fn from_geom(geom: &LayerGeom) -> Self {
        match geom {
            LayerGeom::Conv {
                spatial,
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                let vol: usize = kernel.iter().product();
                ConvBlock {
                    spatial: spatial.clone(),
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: kernel.clone(),
                    stride: stride.clone(),
                    filters: vec![0.0; out_channels * in_channels * vol],
                }
            }
            LayerGeom::Dense { .. } => unreachable!("conv block from dense geometry"),
        }
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> &[usize] {
        &self.kernel
    }

    pub fn stride(&self) -> &[usize] {
        &self.stride
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn num_positions_in(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn num_positions_out(&self) -> usize {
        self.spatial
            .iter()
            .zip(self.stride.iter())
            .map(|(s, t)| s / t)
            .product()
    }

    pub fn rows(&self) -> usize {
        self.in_channels * self.num_positions_in()
    }

    pub fn cols(&self) -> usize {
        self.out_channels * self.num_positions_out()
    }

    pub fn param_count(&self) -> usize {
        self.filters.len()
    }

    #[inline]
    pub fn filter(&self, oc: usize, ic: usize) -> &[f64] {
        let vol = self.kernel_volume();
        let base = (oc * self.in_channels + ic) * vol;
        &self.filters[base..base + vol]
    }

    pub fn filter_mut(&mut self, oc: usize, ic: usize) -> &mut [f64] {
        let vol = self.kernel_volume();
        let base = (oc * self.in_channels + ic) * vol;
        &mut self.filters[base..base + vol]
    }

    /// Squared norm of any column of output channel `oc`: circular shifts
    /// leave column norms unchanged.
    pub fn col_norm_sq(&self, oc: usize) -> f64 {
        let vol = self.kernel_volume();
        let base = oc * self.in_channels * vol;
        self.filters[base..base + self.in_channels * vol]
            .iter()
            .map(|v| v * v)
            .sum()
    }

    fn unflatten(&self, extents: &[usize], mut flat: usize, out: &mut [usize]) {
        for d in (0..extents.len()).rev() {
            out[d] = flat % extents[d];
            flat /= extents[d];
        }
    }

    fn flatten_pos(extents: &[usize], idx: &[usize]) -> usize {
        let mut flat = 0;
        for (e, i) in extents.iter().zip(idx.iter()) {
            flat = flat * e + i;
        }
        flat
    }

    /// Input position reached by tap `t` of the filter centered at output
    /// position `q` (circular boundary). `off < kernel <= spatial`, so the
    /// subtraction below cannot underflow.
    fn input_pos(&self, q: &[usize], t: &[usize], p: &mut [usize]) {
        for d in 0..self.spatial.len() {
            let off = (self.kernel[d] - 1) / 2;
            let s = self.spatial[d];
            p[d] = (q[d] * self.stride[d] + t[d] + s - off) % s;
        }
    }

    pub fn materialize(&self) -> Mat {
        let npos_in = self.num_positions_in();
        let npos_out = self.num_positions_out();
        let dims = self.spatial.len();
        let mut m = Mat::zeros(self.rows(), self.cols());
        let out_extents: Vec<usize> = self
            .spatial
            .iter()
            .zip(self.stride.iter())
            .map(|(s, t)| s / t)
            .collect();
        let vol = self.kernel_volume();
        let mut q = vec![0; dims];
        let mut t = vec![0; dims];
        let mut p = vec![0; dims];
        for oc in 0..self.out_channels {
            for qf in 0..npos_out {
                self.unflatten(&out_extents, qf, &mut q);
                let col = oc * npos_out + qf;
                for ic in 0..self.in_channels {
                    let f = self.filter(oc, ic);
                    for tf in 0..vol {
                        self.unflatten(&self.kernel, tf, &mut t);
                        self.input_pos(&q, &t, &mut p);
                        let row = ic * npos_in + Self::flatten_pos(&self.spatial, &p);
                        m.set(row, col, f[tf]);
                    }
                }
            }
        }
        m
    }

    /// `y = B x` where `x` is indexed by columns `(oc, q)`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols());
        let npos_in = self.num_positions_in();
        let npos_out = self.num_positions_out();
        let dims = self.spatial.len();
        let out_extents: Vec<usize> = self
            .spatial
            .iter()
            .zip(self.stride.iter())
            .map(|(s, t)| s / t)
            .collect();
        let vol = self.kernel_volume();
        let mut y = vec![0.0; self.rows()];
        let mut q = vec![0; dims];
        let mut t = vec![0; dims];
        let mut p = vec![0; dims];
        for oc in 0..self.out_channels {
            for qf in 0..npos_out {
                let xv = x[oc * npos_out + qf];
                if xv == 0.0 {
                    continue;
                }
                self.unflatten(&out_extents, qf, &mut q);
                for ic in 0..self.in_channels {
                    let f = self.filter(oc, ic);
                    for tf in 0..vol {
                        self.unflatten(&self.kernel, tf, &mut t);
                        self.input_pos(&q, &t, &mut p);
                        y[ic * npos_in + Self::flatten_pos(&self.spatial, &p)] += f[tf] * xv;
                    }
                }
            }
        }
        y
    }

    /// `B^T y` with `y` indexed by rows `(ic, p)`.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows());
        let npos_in = self.num_positions_in();
        let npos_out = self.num_positions_out();
        let dims = self.spatial.len();
        let out_extents: Vec<usize> = self
            .spatial
            .iter()
            .zip(self.stride.iter())
            .map(|(s, t)| s / t)
            .collect();
        let vol = self.kernel_volume();
        let mut out = vec![0.0; self.cols()];
        let mut q = vec![0; dims];
        let mut t = vec![0; dims];
        let mut p = vec![0; dims];
        for oc in 0..self.out_channels {
            for qf in 0..npos_out {
                self.unflatten(&out_extents, qf, &mut q);
                let mut acc = 0.0;
                for ic in 0..self.in_channels {
                    let f = self.filter(oc, ic);
                    for tf in 0..vol {
                        self.unflatten(&self.kernel, tf, &mut t);
                        self.input_pos(&q, &t, &mut p);
                        acc += f[tf] * y[ic * npos_in + Self::flatten_pos(&self.spatial, &p)];
                    }
                }
                out[oc * npos_out + qf] = acc;
            }
        }
        out
    }
}

/// One block of the induced dictionary.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    LearnedDense(Mat),
    LearnedConv(ConvBlock),
    Identity,
    NegIdentity,
}

impl Block {
    pub fn param_count(&self) -> usize {
        match self {
            Block::LearnedDense(m) => m.rows() * m.cols(),
            Block::LearnedConv(c) => c.param_count(),
            Block::Identity | Block::NegIdentity => 0,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Block::LearnedDense(_) | Block::LearnedConv(_))
    }
}

/// Grid cell: `col <= row`, both 0-based over the `l` block levels.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub block: Block,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DictError {
    MaterializeCap { needed: usize, cap: usize },
    ParamLength { expected: usize, got: usize },
}

impl fmt::Display for DictError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DictError::MaterializeCap { needed, cap } => {
                write!(f, "materialization needs {needed} entries, cap is {cap}")
            }
            DictError::ParamLength { expected, got } => {
                write!(f, "parameter vector has length {got}, expected {expected}")
            }
        }
    }
}

impl core::error::Error for DictError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Zero-mean Gaussian entries with standard deviation `fan_in^{-1/2}`,
    /// keeping initial column norms near one.
    #[default]
    FanInGaussian,
    Zeros,
}

/// The induced dictionary: an immutable value after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDictionary {
    row_dims: Vec<usize>,
    col_dims: Vec<usize>,
    cells: Vec<GridCell>,
    lambda: f64,
}

impl BlockDictionary {
    /// Number of block levels `l`.
    pub fn levels(&self) -> usize {
        self.col_dims.len()
    }

    pub fn row_dims(&self) -> &[usize] {
        &self.row_dims
    }

    pub fn col_dims(&self) -> &[usize] {
        &self.col_dims
    }

    pub fn total_rows(&self) -> usize {
        self.row_dims.iter().sum()
    }

    pub fn total_cols(&self) -> usize {
        self.col_dims.iter().sum()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn block_at(&self, row: usize, col: usize) -> Option<&Block> {
        self.cells
            .binary_search_by_key(&(row, col), |c| (c.row, c.col))
            .ok()
            .map(|i| &self.cells[i].block)
    }

    /// Cells in column block `c`, ordered by row.
    pub fn column_cells(&self, c: usize) -> impl Iterator<Item = &GridCell> {
        self.cells.iter().filter(move |cell| cell.col == c)
    }

    /// Cells in row block `r`, ordered by column.
    pub fn row_cells(&self, r: usize) -> impl Iterator<Item = &GridCell> {
        self.cells.iter().filter(move |cell| cell.row == r)
    }

    pub fn param_count(&self) -> usize {
        self.cells.iter().map(|c| c.block.param_count()).sum()
    }

    /// Flat parameter vector: cells in (row, col) order, learned payloads
    /// in storage order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for cell in &self.cells {
            match &cell.block {
                Block::LearnedDense(m) => out.extend_from_slice(m.data()),
                Block::LearnedConv(c) => out.extend_from_slice(&c.filters),
                _ => {}
            }
        }
        out
    }

    /// Returns a new dictionary with the learned payloads replaced.
    pub fn load_params(&self, v: &[f64]) -> Result<BlockDictionary, DictError> {
        let expected = self.param_count();
        if v.len() != expected {
            return Err(DictError::ParamLength {
                expected,
                got: v.len(),
            });
        }
        let mut out = self.clone();
        let mut at = 0;
        for cell in &mut out.cells {
            match &mut cell.block {
                Block::LearnedDense(m) => {
                    let n = m.rows() * m.cols();
                    m.data_mut().copy_from_slice(&v[at..at + n]);
                    at += n;
                }
                Block::LearnedConv(c) => {
                    let n = c.filters.len();
                    c.filters.copy_from_slice(&v[at..at + n]);
                    at += n;
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn materialize(&self) -> Result<Mat, DictError> {
        self.materialize_with_cap(MATERIALIZE_CAP)
    }

    pub fn materialize_with_cap(&self, cap: usize) -> Result<Mat, DictError> {
        let rows = self.total_rows();
        let cols = self.total_cols();
        let needed = rows * cols;
        if needed > cap {
            return Err(DictError::MaterializeCap { needed, cap });
        }
        let row_off = offsets(&self.row_dims);
        let col_off = offsets(&self.col_dims);
        let mut m = Mat::zeros(rows, cols);
        for cell in &self.cells {
            let r0 = row_off[cell.row];
            let c0 = col_off[cell.col];
            match &cell.block {
                Block::LearnedDense(b) => {
                    for r in 0..b.rows() {
                        for c in 0..b.cols() {
                            m.set(r0 + r, c0 + c, b.get(r, c));
                        }
                    }
                }
                Block::LearnedConv(cb) => {
                    let dense = cb.materialize();
                    for r in 0..dense.rows() {
                        for c in 0..dense.cols() {
                            m.set(r0 + r, c0 + c, dense.get(r, c));
                        }
                    }
                }
                Block::Identity => {
                    for i in 0..self.row_dims[cell.row] {
                        m.set(r0 + i, c0 + i, 1.0);
                    }
                }
                Block::NegIdentity => {
                    for i in 0..self.row_dims[cell.row] {
                        m.set(r0 + i, c0 + i, -1.0);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Re-randomizes the learned parameters feeding global column `unit` of
    /// column block `col` (both 0-based). For conv blocks this re-seeds the
    /// owning output channel's filter, since its parameters are shared
    /// across all spatial positions.
    pub(crate) fn reseed_column(&mut self, col: usize, unit: usize, src: &mut NormalSource) {
        for cell in &mut self.cells {
            if cell.col != col {
                continue;
            }
            match &mut cell.block {
                Block::LearnedDense(m) => {
                    let std = 1.0 / math::sqrt(m.rows() as f64);
                    for r in 0..m.rows() {
                        m.set(r, unit, std * src.next());
                    }
                }
                Block::LearnedConv(c) => {
                    let oc = unit / c.num_positions_out();
                    let std = 1.0 / math::sqrt((c.in_channels * c.kernel_volume()) as f64);
                    for ic in 0..c.in_channels {
                        for v in c.filter_mut(oc, ic) {
                            *v = std * src.next();
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    for d in dims {
        off.push(acc);
        acc += d;
    }
    off.push(acc);
    off
}

pub(crate) fn col_offsets(dict: &BlockDictionary) -> Vec<usize> {
    offsets(&dict.col_dims)
}


fn learned_block_for(spec: &ArchSpec, row: usize, col: usize) -> Block {
    // Diagonal cells of conv layers carry the layer's filter geometry;
    // every other learned cell is a dense payload.
    let layer = &spec.layers()[col];
    if row == col && layer.is_conv() {
        Block::LearnedConv(ConvBlock::from_geom(layer))
    } else {
        Block::LearnedDense(Mat::zeros(spec.row_dim(row + 1), spec.width(col + 1)))
    }
}

fn build_cells(spec: &ArchSpec) -> Vec<GridCell> {
    let l = spec.depth();
    let mut cells = Vec::new();
    match spec.family() {
        Family::Chain => {
            for j in 0..l {
                cells.push(GridCell {
                    row: j,
                    col: j,
                    block: learned_block_for(spec, j, j),
                });
                if j >= 1 {
                    cells.push(GridCell {
                        row: j,
                        col: j - 1,
                        block: Block::NegIdentity,
                    });
                }
            }
        }
        Family::Residual => {
            cells.push(GridCell {
                row: 0,
                col: 0,
                block: learned_block_for(spec, 0, 0),
            });
            for j in 1..l {
                cells.push(GridCell {
                    row: j,
                    col: j,
                    block: Block::Identity,
                });
                cells.push(GridCell {
                    row: j,
                    col: j - 1,
                    block: learned_block_for(spec, j, j - 1),
                });
            }
            for e in spec.edges() {
                if e.kind == EdgeKind::Identity {
                    cells.push(GridCell {
                        row: e.dst - 1,
                        col: e.src - 1,
                        block: Block::NegIdentity,
                    });
                }
            }
        }
        Family::Dense => {
            for r in 0..l {
                for c in 0..=r {
                    cells.push(GridCell {
                        row: r,
                        col: c,
                        block: learned_block_for(spec, r, c),
                    });
                }
            }
        }
        Family::Custom => {
            for j in 1..l {
                cells.push(GridCell {
                    row: j,
                    col: j,
                    block: Block::Identity,
                });
            }
            for e in spec.edges() {
                let (row, col, block) = if e.src == 0 {
                    debug_assert_eq!(e.dst, 1);
                    let block = match e.kind {
                        EdgeKind::Learned => learned_block_for(spec, 0, 0),
                        EdgeKind::Identity => Block::Identity,
                    };
                    (0, 0, block)
                } else {
                    let block = match e.kind {
                        EdgeKind::Learned => learned_block_for(spec, e.dst - 1, e.src - 1),
                        EdgeKind::Identity => Block::NegIdentity,
                    };
                    (e.dst - 1, e.src - 1, block)
                };
                cells.push(GridCell { row, col, block });
            }
        }
    }
    cells.sort_by_key(|c| (c.row, c.col));
    cells
}

/// Builds the induced dictionary for a validated spec. Deterministic in
/// `(spec, init, seed)`.
pub fn build_dictionary(spec: &ArchSpec, init: InitPolicy, seed: u64) -> BlockDictionary {
    let l = spec.depth();
    let mut dict = BlockDictionary {
        row_dims: (1..=l).map(|j| spec.row_dim(j)).collect(),
        col_dims: (1..=l).map(|j| spec.width(j)).collect(),
        cells: build_cells(spec),
        lambda: spec.lambda(),
    };
    if init == InitPolicy::FanInGaussian {
        let mut src = NormalSource::new(seed);
        for cell in &mut dict.cells {
            match &mut cell.block {
                Block::LearnedDense(m) => {
                    let std = 1.0 / math::sqrt(m.rows() as f64);
                    for v in m.data_mut() {
                        *v = std * src.next();
                    }
                }
                Block::LearnedConv(c) => {
                    let std = 1.0 / math::sqrt((c.in_channels * c.kernel_volume()) as f64);
                    for v in &mut c.filters {
                        *v = std * src.next();
                    }
                }
                _ => {}
            }
        }
    }
    dict
}

/// Free-parameter count of the induced grid (used by `ArchSpec::param_count`).
pub(crate) fn grid_param_count(spec: &ArchSpec) -> usize {
    build_cells(spec).iter().map(|c| c.block.param_count()).sum()
}
