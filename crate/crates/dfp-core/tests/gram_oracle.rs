//! Block-path Gram values against the dense brute-force oracle, plus the
//! structural-count and symmetry properties that only make sense on
//! materialized instances.

use dfp_core::arch::{family_spec, ArchSpec, Edge, Family, LayerGeom};
use dfp_core::dict::{build_dictionary, InitPolicy};
use dfp_core::gram::{count_offdiag, gram_blocks, gram_oracle};
use dfp_core::Mat;

fn families_for(seed: u64) -> ArchSpec {
    match seed % 3 {
        0 => family_spec(Family::Chain, &[3, 5, 4], 0.1).unwrap(),
        1 => family_spec(Family::Residual, &[4, 4, 4, 4, 4], 0.1).unwrap(),
        _ => family_spec(Family::Dense, &[3, 4, 3], 0.1).unwrap(),
    }
}

fn assert_entrywise(a: &Mat, b: &Mat, tol: f64, what: &str) {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            assert!((x - y).abs() <= tol, "{what} at ({r},{c}): {x} vs {y}");
        }
    }
}

#[test]
fn blocks_match_oracle_across_families() {
    for seed in 0..60u64 {
        let spec = families_for(seed);
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
        let dense = gram_blocks(&dict).unwrap().assemble_dense();
        let oracle = gram_oracle(&dict).unwrap();
        assert_entrywise(&dense, &oracle, 1e-10, "gram");
    }
}

#[test]
fn blocks_match_oracle_conv_geometries() {
    let specs = vec![
        // 1D: two input channels, five output channels, filter size three.
        ArchSpec::new(
            LayerGeom::conv_input(vec![8], 2),
            vec![LayerGeom::conv(vec![8], 2, 5, vec![3], vec![1])],
            vec![Edge::learned(0, 1)],
            0.1,
        )
        .unwrap(),
        // 2D analog.
        ArchSpec::new(
            LayerGeom::conv_input(vec![4, 4], 2),
            vec![LayerGeom::conv(vec![4, 4], 2, 5, vec![3, 3], vec![1, 1])],
            vec![Edge::learned(0, 1)],
            0.1,
        )
        .unwrap(),
        // Strided conv chain.
        ArchSpec::new(
            LayerGeom::conv_input(vec![8], 2),
            vec![
                LayerGeom::conv(vec![8], 2, 3, vec![3], vec![2]),
                LayerGeom::conv(vec![4], 3, 4, vec![3], vec![1]),
            ],
            vec![Edge::learned(0, 1), Edge::learned(1, 2)],
            0.1,
        )
        .unwrap(),
    ];
    for spec in &specs {
        for seed in 0..10u64 {
            let dict = build_dictionary(spec, InitPolicy::FanInGaussian, seed);
            let dense = gram_blocks(&dict).unwrap().assemble_dense();
            let oracle = gram_oracle(&dict).unwrap();
            assert_entrywise(&dense, &oracle, 1e-10, "conv gram");
        }
    }
}

#[test]
fn structural_count_equals_generic_nonzeros() {
    for seed in 0..9u64 {
        let spec = families_for(seed);
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, 1000 + seed);
        let oracle = gram_oracle(&dict).unwrap();
        let mut nz = 0;
        for r in 0..oracle.rows() {
            for c in 0..oracle.cols() {
                if r != c && oracle.get(r, c) != 0.0 {
                    nz += 1;
                }
            }
        }
        assert_eq!(count_offdiag(&spec), nz, "family {:?}", spec.family());
    }
}

/// Test-local oracle: Gram of an arbitrary dense matrix.
fn gram_of(m: &Mat) -> Mat {
    let mut scaled = m.clone();
    let mut inv = vec![0.0; m.cols()];
    for c in 0..m.cols() {
        let mut nsq = 0.0;
        for r in 0..m.rows() {
            nsq += m.get(r, c) * m.get(r, c);
        }
        inv[c] = 1.0 / nsq.sqrt();
    }
    scaled.scale_cols(&inv);
    scaled.at_b(&scaled)
}

#[test]
fn gram_invariant_to_positive_column_rescaling() {
    let spec = family_spec(Family::Dense, &[3, 4, 3], 0.1).unwrap();
    for seed in 0..10u64 {
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
        let m = dict.materialize().unwrap();
        let g = gram_of(&m);
        let mut scaled = m.clone();
        let factors: Vec<f64> = (0..m.cols())
            .map(|c| 0.2 + 3.0 * ((seed as usize + c * 7) % 11) as f64 / 11.0)
            .collect();
        scaled.scale_cols(&factors);
        let g2 = gram_of(&scaled);
        assert_entrywise(&g, &g2, 1e-12, "rescaled gram");
    }
}

#[test]
fn gram_equivariant_to_unit_permutation() {
    // Relabeling layer j's units permutes the Gram rows/columns of block j
    // identically: G(R M C) = C^T G(M) C for the permutation C on the
    // layer's columns and R on its reconstruction rows.
    let spec = family_spec(Family::Chain, &[3, 4, 3], 0.1).unwrap();
    let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, 5);
    let m = dict.materialize().unwrap();
    let g = gram_of(&m);

    // Permute layer 1's units (columns 0..4 of the global matrix, rows 3..7).
    let perm = [2usize, 0, 3, 1];
    let mut permuted = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let src_c = if c < 4 { perm[c] } else { c };
            let src_r = if (3..7).contains(&r) { 3 + perm[r - 3] } else { r };
            permuted.set(r, c, m.get(src_r, src_c));
        }
    }
    let gp = gram_of(&permuted);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let src_r = if r < 4 { perm[r] } else { r };
            let src_c = if c < 4 { perm[c] } else { c };
            assert!(
                (gp.get(r, c) - g.get(src_r, src_c)).abs() <= 1e-12,
                "permutation equivariance at ({r},{c})"
            );
        }
    }
}
