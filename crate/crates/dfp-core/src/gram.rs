//! Column norms, normalized Gram blocks, the structural off-diagonal count
//! `N(G)`, and a dense brute-force oracle.
//!
//! The Gram block for column blocks `(j, j')` is the sum over shared row
//! blocks `i` of `N_j^{-1} B_ij^T B_ij' N_{j'}^{-1}`. Products between conv
//! blocks are computed from filter cross-correlations over circular shifts
//! rather than by materializing the spatial grid.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::arch::ArchSpec;
use crate::dict::{build_dictionary, Block, BlockDictionary, ConvBlock, DictError, InitPolicy};
use crate::mat::Mat;
use crate::math;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GramError {
    /// A dictionary column has exactly zero norm; normalization is undefined.
    ZeroColumn { layer: usize, unit: usize },
    Materialize(DictError),
}

impl fmt::Display for GramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GramError::ZeroColumn { layer, unit } => {
                write!(f, "zero column: layer {layer}, unit {unit}")
            }
            GramError::Materialize(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for GramError {}

impl From<DictError> for GramError {
    fn from(e: DictError) -> Self {
        GramError::Materialize(e)
    }
}

/// Per-layer global column norms `N_j`: for each unit, the norm of its full
/// column across all row blocks (identity blocks contribute one).
pub fn column_norms(dict: &BlockDictionary) -> Result<Vec<Vec<f64>>, GramError> {
    let l = dict.levels();
    let mut norms = Vec::with_capacity(l);
    for j in 0..l {
        let mut nsq = vec![0.0; dict.col_dims()[j]];
        for cell in dict.column_cells(j) {
            match &cell.block {
                Block::LearnedDense(m) => {
                    for r in 0..m.rows() {
                        for (c, v) in m.row(r).iter().enumerate() {
                            nsq[c] += v * v;
                        }
                    }
                }
                Block::LearnedConv(cb) => {
                    let npos = cb.num_positions_out();
                    for oc in 0..cb.out_channels() {
                        let n = cb.col_norm_sq(oc);
                        for q in 0..npos {
                            nsq[oc * npos + q] += n;
                        }
                    }
                }
                Block::Identity | Block::NegIdentity => {
                    for v in nsq.iter_mut() {
                        *v += 1.0;
                    }
                }
            }
        }
        for (unit, &v) in nsq.iter().enumerate() {
            if v <= 0.0 {
                return Err(GramError::ZeroColumn {
                    layer: j + 1,
                    unit,
                });
            }
        }
        norms.push(nsq.iter().map(|&v| math::sqrt(v)).collect());
    }
    Ok(norms)
}

/// `A^T B` for two blocks sharing a row space of dimension `dim`.
fn block_product(a: &Block, b: &Block, dim: usize) -> Mat {
    use Block::*;
    match (a, b) {
        (Identity, Identity) | (NegIdentity, NegIdentity) => Mat::identity(dim),
        (Identity, NegIdentity) | (NegIdentity, Identity) => Mat::identity(dim).scaled(-1.0),
        (Identity, LearnedDense(m)) => m.clone(),
        (NegIdentity, LearnedDense(m)) => m.clone().scaled(-1.0),
        (LearnedDense(m), Identity) => m.transpose(),
        (LearnedDense(m), NegIdentity) => m.transpose().scaled(-1.0),
        (LearnedDense(ma), LearnedDense(mb)) => ma.at_b(mb),
        (LearnedConv(ca), LearnedConv(cb)) => conv_conv_product(ca, cb),
        (LearnedConv(c), Identity) => c.materialize().transpose(),
        (LearnedConv(c), NegIdentity) => c.materialize().transpose().scaled(-1.0),
        (Identity, LearnedConv(c)) => c.materialize(),
        (NegIdentity, LearnedConv(c)) => c.materialize().scaled(-1.0),
        (LearnedConv(ca), LearnedDense(mb)) => ca.materialize().at_b(mb),
        (LearnedDense(ma), LearnedConv(cb)) => ma.at_b(&cb.materialize()),
    }
}

fn unflatten(extents: &[usize], mut flat: usize, out: &mut [usize]) {
    for d in (0..extents.len()).rev() {
        out[d] = flat % extents[d];
        flat /= extents[d];
    }
}

/// Per-dimension shift aligning tap indices of two conv blocks on the same
/// input grid: column `(qa)` of `a` and `(qb)` of `b` overlap where
/// `tb = ta + delta (mod S)`.
fn conv_shift(a: &ConvBlock, b: &ConvBlock, qa: &[usize], qb: &[usize], delta: &mut [usize]) {
    for d in 0..a.spatial().len() {
        let s = a.spatial()[d];
        let off_a = (a.kernel()[d] - 1) / 2;
        let off_b = (b.kernel()[d] - 1) / 2;
        delta[d] = (qa[d] * a.stride()[d] + off_b + 2 * s - qb[d] * b.stride()[d] - off_a) % s;
    }
}

/// `A^T B` for conv blocks sharing the input grid, via filter
/// cross-correlation: every entry is a correlation of two filters at a
/// circular shift, so the distinct values are computed once and replicated.
fn conv_conv_product(a: &ConvBlock, b: &ConvBlock) -> Mat {
    debug_assert_eq!(a.spatial(), b.spatial());
    debug_assert_eq!(a.in_channels(), b.in_channels());
    let dims = a.spatial().len();
    let nshift: usize = a.spatial().iter().product();
    let vol_a = a.kernel_volume();
    let mut ta = vec![0; dims];
    let mut tb = vec![0; dims];

    // corr[oc_a][oc_b][delta] over all circular shifts.
    let mut corr = vec![0.0; a.out_channels() * b.out_channels() * nshift];
    let mut delta = vec![0; dims];
    for df in 0..nshift {
        unflatten(a.spatial(), df, &mut delta);
        for oa in 0..a.out_channels() {
            for ob in 0..b.out_channels() {
                let mut acc = 0.0;
                for ic in 0..a.in_channels() {
                    let fa = a.filter(oa, ic);
                    let fb = b.filter(ob, ic);
                    for taf in 0..vol_a {
                        unflatten(a.kernel(), taf, &mut ta);
                        let mut ok = true;
                        for d in 0..dims {
                            let s = a.spatial()[d];
                            let t = (ta[d] + delta[d]) % s;
                            if t >= b.kernel()[d] {
                                ok = false;
                                break;
                            }
                            tb[d] = t;
                        }
                        if ok {
                            let tbf = flatten(b.kernel(), &tb);
                            acc += fa[taf] * fb[tbf];
                        }
                    }
                }
                corr[(oa * b.out_channels() + ob) * nshift + df] = acc;
            }
        }
    }

    let npos_a = a.num_positions_out();
    let npos_b = b.num_positions_out();
    let out_a: Vec<usize> = a
        .spatial()
        .iter()
        .zip(a.stride().iter())
        .map(|(s, t)| s / t)
        .collect();
    let out_b: Vec<usize> = b
        .spatial()
        .iter()
        .zip(b.stride().iter())
        .map(|(s, t)| s / t)
        .collect();
    let mut qa = vec![0; dims];
    let mut qb = vec![0; dims];
    let mut m = Mat::zeros(a.cols(), b.cols());
    for qaf in 0..npos_a {
        unflatten(&out_a, qaf, &mut qa);
        for qbf in 0..npos_b {
            unflatten(&out_b, qbf, &mut qb);
            conv_shift(a, b, &qa, &qb, &mut delta);
            let df = flatten(a.spatial(), &delta);
            for oa in 0..a.out_channels() {
                for ob in 0..b.out_channels() {
                    let v = corr[(oa * b.out_channels() + ob) * nshift + df];
                    m.set(oa * npos_a + qaf, ob * npos_b + qbf, v);
                }
            }
        }
    }
    m
}

fn flatten(extents: &[usize], idx: &[usize]) -> usize {
    let mut flat = 0;
    for (e, i) in extents.iter().zip(idx.iter()) {
        flat = flat * e + i;
    }
    flat
}

/// The nonzero blocks of the normalized Gram matrix, `j <= j'`; symmetry is
/// implicit.
#[derive(Clone, Debug)]
pub struct GramBlocks {
    col_dims: Vec<usize>,
    blocks: Vec<((usize, usize), Mat)>,
    col_norms: Vec<Vec<f64>>,
    n_offdiag: usize,
    trace: usize,
}

impl GramBlocks {
    pub fn levels(&self) -> usize {
        self.col_dims.len()
    }

    pub fn col_dims(&self) -> &[usize] {
        &self.col_dims
    }

    pub fn col_norms(&self) -> &[Vec<f64>] {
        &self.col_norms
    }

    /// Structural off-diagonal nonzero count `N(G)` (both triangles).
    pub fn n_offdiag(&self) -> usize {
        self.n_offdiag
    }

    /// Total atom count (`Tr G`).
    pub fn trace(&self) -> usize {
        self.trace
    }

    pub fn block(&self, j: usize, jp: usize) -> Option<&Mat> {
        debug_assert!(j <= jp);
        self.blocks
            .binary_search_by_key(&(j, jp), |(k, _)| *k)
            .ok()
            .map(|i| &self.blocks[i].1)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize, &Mat)> {
        self.blocks.iter().map(|((j, jp), m)| (*j, *jp, m))
    }

    /// Sum of squared off-diagonal entries over the whole matrix (stored
    /// cross blocks doubled).
    pub fn offdiag_sumsq(&self) -> f64 {
        let mut acc = 0.0;
        for ((j, jp), m) in &self.blocks {
            if j == jp {
                for r in 0..m.rows() {
                    for c in 0..m.cols() {
                        if r != c {
                            let v = m.get(r, c);
                            acc += v * v;
                        }
                    }
                }
            } else {
                acc += 2.0 * m.frob_sq();
            }
        }
        acc
    }

    /// Maximum |entry| over all off-diagonal positions.
    pub fn max_abs_offdiag(&self) -> f64 {
        let mut best = 0.0f64;
        for ((j, jp), m) in &self.blocks {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    if j == jp && r == c {
                        continue;
                    }
                    best = best.max(math::abs(m.get(r, c)));
                }
            }
        }
        best
    }

    /// Maximum signed entry over all off-diagonal positions, floored at 0.
    pub fn max_signed_offdiag(&self) -> f64 {
        let mut best = 0.0f64;
        for ((j, jp), m) in &self.blocks {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    if j == jp && r == c {
                        continue;
                    }
                    best = best.max(m.get(r, c));
                }
            }
        }
        best
    }

    /// Per global column `n`: the squared norm of row `n` of `G`,
    /// `(G^2)_{nn}` by symmetry. Diagonal entries included.
    pub fn row_sumsq(&self) -> Vec<f64> {
        let total: usize = self.col_dims.iter().sum();
        let off = {
            let mut o = Vec::with_capacity(self.col_dims.len());
            let mut acc = 0;
            for d in &self.col_dims {
                o.push(acc);
                acc += d;
            }
            o
        };
        let mut rs = vec![0.0; total];
        for ((j, jp), m) in &self.blocks {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let v = m.get(r, c);
                    let vv = v * v;
                    rs[off[*j] + r] += vv;
                    if j != jp {
                        rs[off[*jp] + c] += vv;
                    }
                }
            }
        }
        rs
    }

    /// Assembles the dense symmetric Gram matrix (desk-scale sizes only).
    pub fn assemble_dense(&self) -> Mat {
        let total: usize = self.col_dims.iter().sum();
        let off = {
            let mut o = Vec::with_capacity(self.col_dims.len());
            let mut acc = 0;
            for d in &self.col_dims {
                o.push(acc);
                acc += d;
            }
            o
        };
        let mut g = Mat::zeros(total, total);
        for ((j, jp), m) in &self.blocks {
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let v = m.get(r, c);
                    g.set(off[*j] + r, off[*jp] + c, v);
                    g.set(off[*jp] + c, off[*j] + r, v);
                }
            }
        }
        g
    }
}

/// Computes the normalized Gram blocks: only block pairs sharing at least
/// one row block are present.
pub fn gram_blocks(dict: &BlockDictionary) -> Result<GramBlocks, GramError> {
    gram_values(dict, None)
}

/// Same values with a precomputed structural count; the pattern is a
/// constant of the architecture, so optimizers skip re-deriving it.
pub(crate) fn gram_blocks_reusing_count(
    dict: &BlockDictionary,
    n_offdiag: usize,
) -> Result<GramBlocks, GramError> {
    gram_values(dict, Some(n_offdiag))
}

fn gram_values(dict: &BlockDictionary, known_count: Option<usize>) -> Result<GramBlocks, GramError> {
    let norms = column_norms(dict)?;
    let inv: Vec<Vec<f64>> = norms
        .iter()
        .map(|layer| layer.iter().map(|n| 1.0 / n).collect())
        .collect();
    let l = dict.levels();
    let mut blocks = Vec::new();
    for j in 0..l {
        for jp in j..l {
            let mut acc: Option<Mat> = None;
            for i in jp..l {
                let (Some(a), Some(b)) = (dict.block_at(i, j), dict.block_at(i, jp)) else {
                    continue;
                };
                let p = block_product(a, b, dict.row_dims()[i]);
                match &mut acc {
                    Some(m) => m.add_assign(&p),
                    None => acc = Some(p),
                }
            }
            let Some(mut g) = acc else { continue };
            g.scale_rows(&inv[j]);
            g.scale_cols(&inv[jp]);
            if j == jp {
                // Normalization gives an exactly-unit diagonal up to
                // rounding; pin it and mirror the upper triangle.
                for r in 0..g.rows() {
                    g.set(r, r, 1.0);
                    for c in (r + 1)..g.cols() {
                        let v = g.get(r, c);
                        g.set(c, r, v);
                    }
                }
            }
            blocks.push(((j, jp), g));
        }
    }
    let n_offdiag = known_count.unwrap_or_else(|| structural_offdiag(dict));
    Ok(GramBlocks {
        col_dims: dict.col_dims().to_vec(),
        blocks,
        col_norms: norms,
        n_offdiag,
        trace: dict.total_cols(),
    })
}

/// Dense oracle: `G = normalize(materialize(dict))^T normalize(...)`.
/// Used by tests and CLI verification, never by the block path.
pub fn gram_oracle(dict: &BlockDictionary) -> Result<Mat, GramError> {
    gram_oracle_with_cap(dict, crate::dict::MATERIALIZE_CAP)
}

pub fn gram_oracle_with_cap(dict: &BlockDictionary, cap: usize) -> Result<Mat, GramError> {
    let mut m = dict.materialize_with_cap(cap)?;
    let col_off = crate::dict::col_offsets(dict);
    let mut scale = vec![0.0; m.cols()];
    for c in 0..m.cols() {
        let mut nsq = 0.0;
        for r in 0..m.rows() {
            let v = m.get(r, c);
            nsq += v * v;
        }
        if nsq <= 0.0 {
            let layer = col_off.iter().take_while(|&&o| o <= c).count();
            return Err(GramError::ZeroColumn {
                layer,
                unit: c - col_off[layer - 1],
            });
        }
        scale[c] = 1.0 / math::sqrt(nsq);
    }
    m.scale_cols(&scale);
    Ok(m.at_b(&m))
}

// ---------------------------------------------------------------------------
// Structural pattern: which Gram entries are nonzero for generic parameters.
// Learned payloads are generic, so any product touching one contributes
// generic mass that cannot vanish identically. Products of two fixed
// identity-kind blocks contribute exactly +1 or -1 on the diagonal, and
// those CAN cancel across shared rows, so they are accumulated as signed
// integers instead.

struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    fn falses(rows: usize, cols: usize) -> Self {
        BoolMat {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    fn trues(rows: usize, cols: usize) -> Self {
        BoolMat {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        self.data[r * self.cols + c] = true;
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    fn or_assign(&mut self, other: &BoolMat) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a |= b;
        }
    }
}

/// Accumulated structural pattern of one Gram block: generic mass plus a
/// signed diagonal from pure identity-kind products.
struct PatternAcc {
    generic: BoolMat,
    ident_diag: Vec<i64>,
}

impl PatternAcc {
    fn new(rows: usize, cols: usize) -> Self {
        PatternAcc {
            generic: BoolMat::falses(rows, cols),
            ident_diag: vec![0; rows.min(cols)],
        }
    }

    fn count(&self) -> usize {
        let mut n = 0;
        for r in 0..self.generic.rows {
            for c in 0..self.generic.cols {
                let ident = r == c && self.ident_diag[r] != 0;
                if self.generic.get(r, c) || ident {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Structural support of a conv operator: true where a filter tap reaches.
fn conv_support(c: &ConvBlock) -> BoolMat {
    let dims = c.spatial().len();
    let npos_in = c.num_positions_in();
    let npos_out = c.num_positions_out();
    let out_extents: Vec<usize> = c
        .spatial()
        .iter()
        .zip(c.stride().iter())
        .map(|(s, t)| s / t)
        .collect();
    let vol = c.kernel_volume();
    let mut m = BoolMat::falses(c.rows(), c.cols());
    let mut q = vec![0; dims];
    let mut t = vec![0; dims];
    for qf in 0..npos_out {
        unflatten(&out_extents, qf, &mut q);
        for tf in 0..vol {
            unflatten(c.kernel(), tf, &mut t);
            let mut pf = 0;
            for d in 0..dims {
                let s = c.spatial()[d];
                let off = (c.kernel()[d] - 1) / 2;
                let p = (q[d] * c.stride()[d] + t[d] + s - off) % s;
                pf = pf * s + p;
            }
            for oc in 0..c.out_channels() {
                for ic in 0..c.in_channels() {
                    m.set(ic * npos_in + pf, oc * npos_out + qf);
                }
            }
        }
    }
    m
}

fn identity_sign(b: &Block) -> i64 {
    match b {
        Block::Identity => 1,
        Block::NegIdentity => -1,
        _ => 0,
    }
}

/// Folds one `A^T B` product into the accumulated pattern.
fn accumulate_pattern(acc: &mut PatternAcc, a: &Block, b: &Block, dim: usize) {
    use Block::*;
    let generic = match (a, b) {
        (Identity | NegIdentity, Identity | NegIdentity) => {
            let sign = identity_sign(a) * identity_sign(b);
            for v in acc.ident_diag.iter_mut().take(dim) {
                *v += sign;
            }
            return;
        }
        (Identity | NegIdentity, LearnedDense(m)) => BoolMat::trues(dim, m.cols()),
        (LearnedDense(m), Identity | NegIdentity) => BoolMat::trues(m.cols(), dim),
        (LearnedDense(ma), LearnedDense(mb)) => BoolMat::trues(ma.cols(), mb.cols()),
        (LearnedConv(ca), LearnedConv(cb)) => conv_conv_pattern(ca, cb),
        (LearnedConv(c), Identity | NegIdentity) => {
            let s = conv_support(c);
            let mut m = BoolMat::falses(c.cols(), dim);
            for r in 0..s.rows {
                for col in 0..s.cols {
                    if s.get(r, col) {
                        m.set(col, r);
                    }
                }
            }
            m
        }
        (Identity | NegIdentity, LearnedConv(c)) => conv_support(c),
        (LearnedConv(ca), LearnedDense(mb)) => BoolMat::trues(ca.cols(), mb.cols()),
        (LearnedDense(ma), LearnedConv(cb)) => BoolMat::trues(ma.cols(), cb.cols()),
    };
    acc.generic.or_assign(&generic);
}

/// True where two filters can structurally overlap at the shift implied by
/// a column pair; all channel pairs share the spatial reachability.
fn conv_conv_pattern(a: &ConvBlock, b: &ConvBlock) -> BoolMat {
    let dims = a.spatial().len();
    // reach[d][delta]: some tap pair aligns at circular shift delta.
    let mut reach: Vec<Vec<bool>> = Vec::with_capacity(dims);
    for d in 0..dims {
        let s = a.spatial()[d];
        let mut row = vec![false; s];
        for delta in 0..s {
            let mut ok = false;
            for ta in 0..a.kernel()[d] {
                if (ta + delta) % s < b.kernel()[d] {
                    ok = true;
                    break;
                }
            }
            row[delta] = ok;
        }
        reach.push(row);
    }
    let npos_a = a.num_positions_out();
    let npos_b = b.num_positions_out();
    let out_a: Vec<usize> = a
        .spatial()
        .iter()
        .zip(a.stride().iter())
        .map(|(s, t)| s / t)
        .collect();
    let out_b: Vec<usize> = b
        .spatial()
        .iter()
        .zip(b.stride().iter())
        .map(|(s, t)| s / t)
        .collect();
    let mut qa = vec![0; dims];
    let mut qb = vec![0; dims];
    let mut delta = vec![0; dims];
    let mut m = BoolMat::falses(a.cols(), b.cols());
    for qaf in 0..npos_a {
        unflatten(&out_a, qaf, &mut qa);
        for qbf in 0..npos_b {
            unflatten(&out_b, qbf, &mut qb);
            conv_shift(a, b, &qa, &qb, &mut delta);
            let ok = (0..dims).all(|d| reach[d][delta[d]]);
            if !ok {
                continue;
            }
            for oa in 0..a.out_channels() {
                for ob in 0..b.out_channels() {
                    m.set(oa * npos_a + qaf, ob * npos_b + qbf);
                }
            }
        }
    }
    m
}

/// Structural count of nonzero off-diagonal Gram entries, both triangles,
/// from the block pattern alone (no parameter values).
fn structural_offdiag(dict: &BlockDictionary) -> usize {
    let l = dict.levels();
    let mut count = 0;
    for j in 0..l {
        for jp in j..l {
            let mut acc: Option<PatternAcc> = None;
            for i in jp..l {
                let (Some(a), Some(b)) = (dict.block_at(i, j), dict.block_at(i, jp)) else {
                    continue;
                };
                let slot = acc.get_or_insert_with(|| {
                    PatternAcc::new(dict.col_dims()[j], dict.col_dims()[jp])
                });
                accumulate_pattern(slot, a, b, dict.row_dims()[i]);
            }
            let Some(pat) = acc else { continue };
            if j == jp {
                // Diagonal slots of G_jj are the unit normalization, always
                // structurally present.
                count += pat.count() - dict.col_dims()[j];
            } else {
                count += 2 * pat.count();
            }
        }
    }
    count
}

/// Structural `N(G)` of a spec: a constant of the architecture, independent
/// of parameter values.
pub fn count_offdiag(spec: &ArchSpec) -> usize {
    let dict = build_dictionary(spec, InitPolicy::Zeros, 0);
    structural_offdiag(&dict)
}
