//! Independent oracles for the chain bound: iterated grid refinement over
//! the magnitude space, the H-norm inequality on materialized random
//! chains, and frozen values computed by hand from the assembled pieces.

use dfp_core::arch::{family_spec, Family};
use dfp_core::bound::{
    assemble_chain_bound, assemble_chain_bound_per_unit, chain_lower_bound,
    chain_lower_bound_uniform, chain_n_offdiag, welch_bound,
};
use dfp_core::dict::{build_dictionary, Block, InitPolicy};
use dfp_core::gram::gram_oracle;

/// Grid-refinement oracle for the uniform two-variable bound: coarse scan
/// of c in [1e-3, 1e3] per layer, then repeated zoom around the best cell.
fn grid_oracle_uniform(widths: &[usize]) -> f64 {
    let l = widths.len() - 1;
    let nvars = l - 1;
    assert!(nvars >= 1 && nvars <= 2, "oracle written for 1-2 variables");
    let mut lo = vec![-3.0f64; nvars];
    let mut hi = vec![3.0f64; nvars];
    let mut best = f64::INFINITY;
    let mut best_t = vec![0.0; nvars];
    for _round in 0..40 {
        let pts = 24;
        let mut t = vec![0.0; nvars];
        let mut c = vec![1.0; l];
        let mut scan = |t: &mut Vec<f64>, best: &mut f64, best_t: &mut Vec<f64>| {
            for i0 in 0..=pts {
                t[0] = lo[0] + (hi[0] - lo[0]) * i0 as f64 / pts as f64;
                if nvars == 2 {
                    for i1 in 0..=pts {
                        t[1] = lo[1] + (hi[1] - lo[1]) * i1 as f64 / pts as f64;
                        for (ci, ti) in c.iter_mut().zip(t.iter()) {
                            *ci = (10.0f64).powf(*ti);
                        }
                        let v = assemble_chain_bound(widths, &c).unwrap();
                        if v < *best {
                            *best = v;
                            best_t.copy_from_slice(t);
                        }
                    }
                } else {
                    for (ci, ti) in c.iter_mut().zip(t.iter()) {
                        *ci = (10.0f64).powf(*ti);
                    }
                    let v = assemble_chain_bound(widths, &c).unwrap();
                    if v < *best {
                        *best = v;
                        best_t.copy_from_slice(t);
                    }
                }
            }
        };
        scan(&mut t, &mut best, &mut best_t);
        for i in 0..nvars {
            let span = (hi[i] - lo[i]) / pts as f64;
            lo[i] = best_t[i] - 2.0 * span;
            hi[i] = best_t[i] + 2.0 * span;
        }
    }
    best.max(0.0)
}

#[test]
fn grid_oracle_agrees_with_uniform_line_search() {
    for widths in [vec![2usize, 3, 2], vec![3, 4, 3], vec![2, 3, 3]] {
        let oracle = grid_oracle_uniform(&widths);
        let opt = chain_lower_bound_uniform(&widths).unwrap();
        assert!(
            (oracle - opt.bound).abs() <= 1e-8,
            "widths {widths:?}: oracle {oracle} vs optimizer {}",
            opt.bound
        );
    }
}

#[test]
fn frozen_uniform_values() {
    // Hand-reduced minima of the uniform assembly (u = c^2/(c^2+1)):
    // (2,3,2): h(u) = 1.5u^2 - 4u + 25/3, infimum at u -> 1 gives
    // (h - 5)/20 = 1/24. (2,3,3): h(u) = 1.5u^2 - 6u + 12, u -> 1 gives
    // (7.5 - 6)/30 = 1/20.
    let b = chain_lower_bound_uniform(&[2, 3, 2]).unwrap();
    assert!((b.bound - 1.0 / 24.0).abs() <= 1e-7, "got {}", b.bound);
    let b = chain_lower_bound_uniform(&[2, 3, 3]).unwrap();
    assert!((b.bound - 0.05).abs() <= 1e-7, "got {}", b.bound);
}

#[test]
fn frozen_per_unit_values() {
    // (2,3,3): per-unit infimum splits layer-1 magnitudes (two saturated,
    // one vanishing): h = 2 + 16/3, bound = (22/3 - 6)/30 = 2/45.
    let b = chain_lower_bound(&[2, 3, 3]).unwrap();
    assert!((b.bound - 2.0 / 45.0).abs() <= 1e-7, "got {}", b.bound);
    // Square-ish widths reach zero.
    let b = chain_lower_bound(&[2, 3, 2]).unwrap();
    assert!(b.bound <= 1e-9, "got {}", b.bound);
}

#[test]
fn per_unit_grid_oracle_on_232() {
    // Independent check that nothing below the reported bound is reachable
    // on a coarse per-unit grid (3 variables for widths (2,3,2)).
    let widths = [2usize, 3, 2];
    let reported = chain_lower_bound(&widths).unwrap().bound;
    let grid: Vec<f64> = (-6..=6).map(|e| (10.0f64).powf(e as f64 / 2.0)).collect();
    let mut grid_min = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let v = assemble_chain_bound_per_unit(
                    &widths,
                    &[vec![a, b, c], vec![1.0, 1.0]],
                )
                .unwrap();
                grid_min = grid_min.min(v);
            }
        }
    }
    assert!(
        reported <= grid_min.max(0.0) + 1e-8,
        "grid found {grid_min}, reported {reported}"
    );
}

#[test]
fn welch_reduction_at_depth_one() {
    for (d, k) in [(1usize, 1usize), (2, 3), (3, 4), (2, 5), (4, 4), (5, 9)] {
        let b = chain_lower_bound(&[d, k]).unwrap();
        let w = welch_bound(d, k).unwrap();
        assert!(
            (b.bound - w * w).abs() <= 1e-12,
            "({d},{k}): {} vs {}",
            b.bound,
            w * w
        );
    }
}

#[test]
fn assembled_pieces_lower_bound_measured_h_norm() {
    // For random chain dictionaries, |G|_F^2 measured densely dominates
    // the assembled per-unit bound evaluated at the dictionary's own
    // column magnitudes.
    for (widths, seeds) in [(vec![2usize, 3, 2], 0..20u64), (vec![3, 4, 3], 0..20u64)] {
        let spec = family_spec(Family::Chain, &widths, 0.1).unwrap();
        let l = widths.len() - 1;
        for seed in seeds {
            let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
            // Per-block column magnitudes c_{jn} (block norms, not global).
            let mut c: Vec<Vec<f64>> = Vec::new();
            for j in 0..l {
                let Some(Block::LearnedDense(m)) = dict.block_at(j, j) else {
                    panic!("chain diagonal");
                };
                let mut layer = Vec::new();
                for col in 0..m.cols() {
                    let mut nsq = 0.0;
                    for r in 0..m.rows() {
                        nsq += m.get(r, col) * m.get(r, col);
                    }
                    layer.push(nsq.sqrt());
                }
                c.push(layer);
            }
            let g = gram_oracle(&dict).unwrap();
            let atoms: usize = widths[1..].iter().sum();
            let n = chain_n_offdiag(&widths) as f64;
            let measured = (g.frob_sq() - atoms as f64) / n;
            let assembled = assemble_chain_bound_per_unit(&widths, &c).unwrap();
            assert!(
                measured >= assembled - 1e-9,
                "seed {seed}: measured {measured} < assembled {assembled}"
            );
        }
    }
}

#[test]
fn bound_dominates_minimized_potential() {
    use dfp_core::minimize::{minimize_potential, MinimizeConfig};
    let config = MinimizeConfig {
        max_iters: 12_000,
        restarts: 2,
        ..MinimizeConfig::default()
    };
    for widths in [vec![2usize, 3, 2], vec![2, 3, 3], vec![1, 2, 3]] {
        let spec = family_spec(Family::Chain, &widths, 0.1).unwrap();
        let res = minimize_potential(&spec, &config).unwrap();
        let bound = chain_lower_bound(&widths).unwrap().bound;
        assert!(
            res.best_potential >= bound - 1e-6,
            "widths {widths:?}: {} < {bound}",
            res.best_potential
        );
    }
}
