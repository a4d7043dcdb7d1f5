//! Frame potential, mutual coherence, and the exact gradient of the
//! potential with respect to the learned parameters.
//!
//! With a unit diagonal pinned by normalization, the averaged potential is
//! `F^2 = (|G|_F^2 - Tr G) / N(G)`, so only `|G|_F^2` depends on the
//! parameters. Writing `M = B~ G` (`B~` the column-normalized dictionary),
//! the derivative against entry `(r, n)` of the raw dictionary is
//!
//! ```text
//! dF^2/dB[r,n] = (4 / N(G)) * ( M[r,n]/N_n - B[r,n] * (G^2)_nn / N_n^2 )
//! ```
//!
//! which covers the normalization coupling exactly. Conv parameters sum
//! this over every spatial occurrence of the tap.

use alloc::vec;
use alloc::vec::Vec;

use crate::dict::{Block, BlockDictionary, ConvBlock};
use crate::gram::{gram_blocks, GramBlocks, GramError};
use crate::mat::Mat;
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialReport {
    pub frame_potential: f64,
    pub coherence: f64,
    pub one_sided_coherence: f64,
    pub grad_norm: f64,
    pub n_offdiag: usize,
    pub atom_count: usize,
}

/// Averaged squared off-diagonal Gram mass. Zero when the structure has no
/// off-diagonal entries at all (orthogonal dictionaries are legitimately
/// incoherent).
pub fn frame_potential(dict: &BlockDictionary) -> Result<f64, GramError> {
    Ok(frame_potential_of(&gram_blocks(dict)?))
}

pub fn frame_potential_of(g: &GramBlocks) -> f64 {
    if g.n_offdiag() == 0 {
        return 0.0;
    }
    g.offdiag_sumsq() / g.n_offdiag() as f64
}

/// Maximum magnitude off-diagonal Gram entry; the one-sided variant skips
/// the absolute value and floors at zero.
pub fn mutual_coherence(dict: &BlockDictionary, one_sided: bool) -> Result<f64, GramError> {
    let g = gram_blocks(dict)?;
    Ok(coherence_of(&g, one_sided))
}

pub fn coherence_of(g: &GramBlocks, one_sided: bool) -> f64 {
    if one_sided {
        g.max_signed_offdiag().max(0.0)
    } else {
        g.max_abs_offdiag().min(1.0)
    }
}

/// Applies a conv block to every column of `m`.
fn conv_apply_mat(c: &ConvBlock, m: &Mat) -> Mat {
    let mut out = Mat::zeros(c.rows(), m.cols());
    let mut col = vec![0.0; m.rows()];
    for cc in 0..m.cols() {
        for r in 0..m.rows() {
            col[r] = m.get(r, cc);
        }
        let y = c.apply(&col);
        for (r, v) in y.iter().enumerate() {
            out.set(r, cc, *v);
        }
    }
    out
}

/// Exact gradient of [`frame_potential`] with respect to every learned
/// parameter, in `flatten_params` order.
pub fn potential_gradient(dict: &BlockDictionary) -> Result<Vec<f64>, GramError> {
    let g = gram_blocks(dict)?;
    Ok(gradient_of(dict, &g))
}

/// Both the potential and its gradient from one Gram evaluation.
pub fn eval_with_gradient(dict: &BlockDictionary) -> Result<(f64, Vec<f64>), GramError> {
    let g = gram_blocks(dict)?;
    Ok((frame_potential_of(&g), gradient_of(dict, &g)))
}

/// Potential only, reusing a precomputed structural count.
pub(crate) fn frame_potential_counted(
    dict: &BlockDictionary,
    n_offdiag: usize,
) -> Result<f64, GramError> {
    Ok(frame_potential_of(&crate::gram::gram_blocks_reusing_count(
        dict, n_offdiag,
    )?))
}

/// Potential and gradient, reusing a precomputed structural count.
pub(crate) fn eval_with_gradient_counted(
    dict: &BlockDictionary,
    n_offdiag: usize,
) -> Result<(f64, Vec<f64>), GramError> {
    let g = crate::gram::gram_blocks_reusing_count(dict, n_offdiag)?;
    Ok((frame_potential_of(&g), gradient_of(dict, &g)))
}

fn gradient_of(dict: &BlockDictionary, g: &GramBlocks) -> Vec<f64> {
    let n_params = dict.param_count();
    if g.n_offdiag() == 0 {
        return vec![0.0; n_params];
    }
    let l = dict.levels();
    let norms = g.col_norms();
    let inv: Vec<Vec<f64>> = norms
        .iter()
        .map(|layer| layer.iter().map(|n| 1.0 / n).collect())
        .collect();

    // (G^2)_nn per layer, from row sums of squares.
    let rs = g.row_sumsq();
    let col_off = {
        let mut o = Vec::with_capacity(l);
        let mut acc = 0;
        for d in g.col_dims() {
            o.push(acc);
            acc += d;
        }
        o
    };

    let scale = 4.0 / g.n_offdiag() as f64;
    let mut grad = Vec::with_capacity(n_params);

    for cell in dict.cells() {
        if !cell.block.is_learned() {
            continue;
        }
        let (i, j) = (cell.row, cell.col);
        let k_j = dict.col_dims()[j];

        // M block (i, j) = sum_{j'} B~_{i,j'} G_{j',j}.
        let mut m_block = Mat::zeros(dict.row_dims()[i], k_j);
        for jp in 0..l {
            let Some(b) = dict.block_at(i, jp) else {
                continue;
            };
            // G_{jp, j}, rows scaled by 1/N_{jp}.
            let mut gpart = match (jp <= j, if jp <= j { g.block(jp, j) } else { g.block(j, jp) }) {
                (true, Some(m)) => m.clone(),
                (false, Some(m)) => m.transpose(),
                (_, None) => continue,
            };
            gpart.scale_rows(&inv[jp]);
            let contrib = match b {
                Block::Identity => gpart,
                Block::NegIdentity => gpart.scaled(-1.0),
                Block::LearnedDense(m) => m.mul(&gpart),
                Block::LearnedConv(c) => conv_apply_mat(c, &gpart),
            };
            m_block.add_assign(&contrib);
        }

        // V[r,c] = M[r,c]/N_c - B[r,c] * g2_c / N_c^2, emitted per learned
        // entry in payload order.
        match &cell.block {
            Block::LearnedDense(mat) => {
                for r in 0..mat.rows() {
                    for c in 0..mat.cols() {
                        let n_inv = inv[j][c];
                        let g2 = rs[col_off[j] + c];
                        let v = m_block.get(r, c) * n_inv - mat.get(r, c) * g2 * n_inv * n_inv;
                        grad.push(scale * v);
                    }
                }
            }
            Block::LearnedConv(cb) => {
                grad.extend(conv_cell_gradient(cb, &m_block, &inv[j], &rs[col_off[j]..col_off[j] + k_j], scale));
            }
            _ => unreachable!(),
        }
    }
    grad
}

/// Gradient entries for one conv cell: each tap sums its occurrences over
/// all spatial placements of the filter.
fn conv_cell_gradient(
    cb: &ConvBlock,
    m_block: &Mat,
    inv: &[f64],
    g2: &[f64],
    scale: f64,
) -> Vec<f64> {
    let dims = cb.spatial().len();
    let npos_in = cb.num_positions_in();
    let npos_out = cb.num_positions_out();
    let out_extents: Vec<usize> = cb
        .spatial()
        .iter()
        .zip(cb.stride().iter())
        .map(|(s, t)| s / t)
        .collect();
    let vol = cb.kernel_volume();
    let mut grad = vec![0.0; cb.param_count()];
    let mut q = vec![0; dims];
    let mut t = vec![0; dims];
    for oc in 0..cb.out_channels() {
        for qf in 0..npos_out {
            let col = oc * npos_out + qf;
            let n_inv = inv[col];
            let w2 = g2[col] * n_inv * n_inv;
            unflatten(&out_extents, qf, &mut q);
            for ic in 0..cb.in_channels() {
                let f = cb.filter(oc, ic);
                let base = (oc * cb.in_channels() + ic) * vol;
                for tf in 0..vol {
                    unflatten(cb.kernel(), tf, &mut t);
                    let mut pf = 0;
                    for d in 0..dims {
                        let s = cb.spatial()[d];
                        let off = (cb.kernel()[d] - 1) / 2;
                        let p = (q[d] * cb.stride()[d] + t[d] + s - off) % s;
                        pf = pf * s + p;
                    }
                    let row = ic * npos_in + pf;
                    grad[base + tf] += scale * (m_block.get(row, col) * n_inv - f[tf] * w2);
                }
            }
        }
    }
    grad
}

fn unflatten(extents: &[usize], mut flat: usize, out: &mut [usize]) {
    for d in (0..extents.len()).rev() {
        out[d] = flat % extents[d];
        flat /= extents[d];
    }
}

/// Full report for one dictionary.
pub fn report(dict: &BlockDictionary) -> Result<PotentialReport, GramError> {
    let g = gram_blocks(dict)?;
    let grad = gradient_of(dict, &g);
    let grad_norm = math::sqrt(grad.iter().map(|v| v * v).sum());
    Ok(PotentialReport {
        frame_potential: frame_potential_of(&g),
        coherence: coherence_of(&g, false),
        one_sided_coherence: coherence_of(&g, true),
        grad_norm,
        n_offdiag: g.n_offdiag(),
        atom_count: g.trace(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{family_spec, ArchSpec, Edge, Family, LayerGeom};
    use crate::dict::{build_dictionary, InitPolicy};
    use crate::gram::gram_oracle;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn chain(widths: &[usize]) -> ArchSpec {
        family_spec(Family::Chain, widths, 0.1).unwrap()
    }

    #[test]
    fn chain_111_half() {
        let dict = build_dictionary(&chain(&[1, 1, 1]), InitPolicy::Zeros, 0)
            .load_params(&[1.0, 1.0])
            .unwrap();
        assert_close(frame_potential(&dict).unwrap(), 0.5, 1e-15);
    }

    #[test]
    fn orthonormal_dictionary_is_incoherent() {
        let spec = chain(&[3, 3]);
        let dict = build_dictionary(&spec, InitPolicy::Zeros, 0)
            .load_params(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        assert_close(frame_potential(&dict).unwrap(), 0.0, 1e-300);
        assert_close(mutual_coherence(&dict, false).unwrap(), 0.0, 1e-300);
    }

    #[test]
    fn equiangular_2x3_quarter() {
        // Three unit vectors at 120 degrees: all pairwise products +-1/2.
        let spec = chain(&[2, 3]);
        let s3 = (3.0f64).sqrt() / 2.0;
        let dict = build_dictionary(&spec, InitPolicy::Zeros, 0)
            .load_params(&[1.0, -0.5, -0.5, 0.0, s3, -s3])
            .unwrap();
        assert_close(frame_potential(&dict).unwrap(), 0.25, 1e-14);
        assert_close(mutual_coherence(&dict, false).unwrap(), 0.5, 1e-14);
    }

    #[test]
    fn coherence_example_one_over_sqrt2() {
        let spec = chain(&[2, 3]);
        let r = 1.0 / (2.0f64).sqrt();
        let dict = build_dictionary(&spec, InitPolicy::Zeros, 0)
            .load_params(&[1.0, 0.0, r, 0.0, 1.0, r])
            .unwrap();
        assert_close(mutual_coherence(&dict, false).unwrap(), r, 1e-14);
    }

    #[test]
    fn one_sided_coherence_floors_at_zero() {
        let dict = build_dictionary(&chain(&[1, 1, 1]), InitPolicy::Zeros, 0)
            .load_params(&[1.0, 1.0])
            .unwrap();
        // Off-diagonal entries are both -1/sqrt(2).
        assert_close(mutual_coherence(&dict, true).unwrap(), 0.0, 1e-300);
        assert_close(
            mutual_coherence(&dict, false).unwrap(),
            1.0 / (2.0f64).sqrt(),
            1e-15,
        );
    }

    #[test]
    fn potential_bounded_by_squared_coherence() {
        for seed in 0..50 {
            let spec = match seed % 3 {
                0 => chain(&[2, 3, 2]),
                1 => family_spec(Family::Residual, &[3, 3, 3, 3], 0.1).unwrap(),
                _ => family_spec(Family::Dense, &[2, 3, 3], 0.1).unwrap(),
            };
            let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
            let f2 = frame_potential(&dict).unwrap();
            let mu = mutual_coherence(&dict, false).unwrap();
            assert!(f2 <= mu * mu + 1e-12, "seed {seed}: {f2} > {}", mu * mu);
        }
    }

    #[test]
    fn blockwise_potential_matches_oracle() {
        for seed in 0..10 {
            let spec = family_spec(Family::Dense, &[3, 4, 2], 0.1).unwrap();
            let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
            let f2 = frame_potential(&dict).unwrap();
            let g = gram_oracle(&dict).unwrap();
            let k = g.rows();
            let mut sumsq = 0.0;
            for r in 0..k {
                for c in 0..k {
                    if r != c {
                        sumsq += g.get(r, c) * g.get(r, c);
                    }
                }
            }
            let n = crate::gram::count_offdiag(&spec) as f64;
            assert_close(f2, sumsq / n, 1e-10);
        }
    }

    fn finite_diff(dict: &BlockDictionary, h: f64) -> Vec<f64> {
        let p0 = dict.flatten_params();
        let mut g = Vec::with_capacity(p0.len());
        for i in 0..p0.len() {
            let mut plus = p0.clone();
            plus[i] += h;
            let mut minus = p0.clone();
            minus[i] -= h;
            let fp = frame_potential(&dict.load_params(&plus).unwrap()).unwrap();
            let fm = frame_potential(&dict.load_params(&minus).unwrap()).unwrap();
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (spec, seed) in [
            (chain(&[2, 3, 2]), 0u64),
            (family_spec(Family::Residual, &[3, 3, 3, 3], 0.1).unwrap(), 1),
            (family_spec(Family::Dense, &[2, 2, 2], 0.1).unwrap(), 2),
        ] {
            let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
            let analytic = potential_gradient(&dict).unwrap();
            let numeric = finite_diff(&dict, 1e-5);
            for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
                let scale = a.abs().max(n.abs()).max(1e-3);
                assert!(
                    (a - n).abs() / scale <= 1e-5,
                    "family {:?} coord {i}: {a} vs {n}",
                    spec.family()
                );
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let input = LayerGeom::conv_input(vec![6], 2);
        let layer = LayerGeom::conv(vec![6], 2, 3, vec![3], vec![1]);
        let spec = ArchSpec::new(input, vec![layer], vec![Edge::learned(0, 1)], 0.1).unwrap();
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, 4);
        let analytic = potential_gradient(&dict).unwrap();
        let numeric = finite_diff(&dict, 1e-5);
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let scale = a.abs().max(n.abs()).max(1e-3);
            assert!((a - n).abs() / scale <= 1e-5, "coord {i}: {a} vs {n}");
        }
    }

    #[test]
    fn shallow_radial_direction_is_flat() {
        // Single layer: the potential is scale invariant per column, so the
        // gradient is orthogonal to each column's radial direction.
        let spec = chain(&[3, 5]);
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, 6);
        let grad = potential_gradient(&dict).unwrap();
        let Block::LearnedDense(m) = dict.block_at(0, 0).unwrap() else {
            panic!()
        };
        for c in 0..5 {
            let mut dot = 0.0;
            for r in 0..3 {
                dot += grad[r * 5 + c] * m.get(r, c);
            }
            assert!(dot.abs() < 1e-12, "column {c}: radial derivative {dot}");
        }
    }

    #[test]
    fn report_fields() {
        let spec = chain(&[2, 3, 2]);
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, 3);
        let rep = report(&dict).unwrap();
        assert_eq!(rep.n_offdiag, 20);
        assert_eq!(rep.atom_count, 5);
        assert!(rep.frame_potential <= rep.coherence * rep.coherence + 1e-12);
        assert!(rep.coherence >= 0.0 && rep.coherence <= 1.0);
        assert!(rep.grad_norm > 0.0);
    }
}
