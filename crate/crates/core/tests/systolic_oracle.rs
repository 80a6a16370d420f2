mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relab_core::netgraph::forward_layer;
use relab_core::qtensor::QTensor;
use relab_core::systolic::{lower_layer, run_layer, ArrayConfig, IdentityHook};

const SIZES: [usize; 4] = [1, 2, 4, 8];

#[test]
fn run_layer_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5157);
    for _ in 0..100 {
        let rn = common::random_network(&mut rng);
        let net = &rn.net;
        let mut x = common::random_input(&mut rng, net);
        for (layer, io) in net.layers().iter().zip(net.io()) {
            let expected = common::oracle_layer(layer, x.data(), &io.input_shape, &io.input_params);
            let reference = forward_layer(layer, &x).unwrap();
            assert_eq!(reference.data(), &expected[..], "reference {}", layer.name);
            for r in SIZES {
                for c in SIZES {
                    let cfg = ArrayConfig::new(r, c, 100e6).unwrap();
                    let (out, _) = run_layer(layer, &x, &cfg, &IdentityHook).unwrap();
                    assert_eq!(out.data(), &expected[..], "{} on {r}x{c}", layer.name);
                    assert_eq!(out.shape(), &io.output_shape[..]);
                }
            }
            x = QTensor::new(io.output_shape.clone(), expected, io.output_params).unwrap();
        }
    }
}

#[test]
fn tiles_partition_the_lowered_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let rn = common::random_network(&mut rng);
        for (layer, io) in rn.net.layers().iter().zip(rn.net.io()) {
            if !layer.kind.is_mac() {
                continue;
            }
            for r in SIZES {
                for c in SIZES {
                    let cfg = ArrayConfig::new(r, c, 1e8).unwrap();
                    let s = lower_layer(layer, &io.input_shape, &cfg).unwrap();
                    let mut cover = vec![0u32; s.k * s.n];
                    for t in &s.tiles {
                        assert!(t.k_end - t.k_start <= r && t.n_end - t.n_start <= c);
                        assert_eq!(t.stream_rows, s.m);
                        for k in t.k_start..t.k_end {
                            for n in t.n_start..t.n_end {
                                cover[k * s.n + n] += 1;
                            }
                        }
                    }
                    assert!(cover.iter().all(|&v| v == 1));
                    assert_eq!(s.tiles.len(), s.k.div_ceil(r) * s.n.div_ceil(c));
                    assert_eq!(s.mac_ops(), layer.mac_count(&io.input_shape).unwrap());
                    assert_eq!(s.cycles(&cfg), s.tiles.len() as u64 * cfg.tile_cycles(s.m));
                }
            }
        }
    }
}

/// Register-level model of one weight-stationary tile. Weights are loaded one
/// row per cycle; activation row `m` enters array row `r` at stream cycle
/// `m + r`, moves right one column per cycle, and partial sums move down one
/// row per cycle. Returns the tile product and the total cycle count.
fn simulate_tile(acts: &[Vec<i64>], weights: &[Vec<i64>], rows: usize, cols: usize) -> (Vec<Vec<i64>>, u64) {
    let m_rows = acts.len();
    let load = rows as u64;
    let mut act: Vec<Vec<Option<(usize, i64)>>> = vec![vec![None; cols]; rows];
    let mut psum: Vec<Vec<Option<(usize, i64)>>> = vec![vec![None; cols]; rows];
    let mut result = vec![vec![0i64; cols]; m_rows];
    let mut collected = 0;
    let mut t = 0usize;
    loop {
        let mut next_act = vec![vec![None; cols]; rows];
        let mut next_psum = vec![vec![None; cols]; rows];
        for r in 0..rows {
            for c in 0..cols {
                next_act[r][c] = if c == 0 {
                    t.checked_sub(r).filter(|&m| m < m_rows).map(|m| (m, acts[m][r]))
                } else {
                    act[r][c - 1]
                };
                if let Some((m, a)) = next_act[r][c] {
                    let above = if r == 0 {
                        0
                    } else {
                        let (m_above, s) = psum[r - 1][c].expect("partial sum arrives with its activation");
                        assert_eq!(m_above, m);
                        s
                    };
                    next_psum[r][c] = Some((m, above + a * weights[r][c]));
                }
            }
        }
        act = next_act;
        psum = next_psum;
        for c in 0..cols {
            if let Some((m, s)) = psum[rows - 1][c] {
                result[m][c] = s;
                collected += 1;
            }
        }
        t += 1;
        if collected == m_rows * cols {
            return (result, load + t as u64);
        }
    }
}

#[test]
fn tile_cycle_formula_matches_register_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let m = rng.random_range(1..=24);
        let acts: Vec<Vec<i64>> = (0..m).map(|_| (0..rows).map(|_| rng.random_range(-50..50)).collect()).collect();
        let weights: Vec<Vec<i64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-50..50)).collect()).collect();
        let (product, cycles) = simulate_tile(&acts, &weights, rows, cols);
        for i in 0..m {
            for c in 0..cols {
                let direct: i64 = (0..rows).map(|r| acts[i][r] * weights[r][c]).sum();
                assert_eq!(product[i][c], direct);
            }
        }
        let cfg = ArrayConfig::new(rows, cols, 1e8).unwrap();
        assert_eq!(cycles, cfg.tile_cycles(m), "{rows}x{cols}, M = {m}");
    }
}
