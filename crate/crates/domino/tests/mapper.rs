use domino::mapper::*;
use domino::nn_model::{bundled, LayerSpec, Layout, NetworkSpec, PEConfig, PoolKind};

fn pe(n_c: usize, n_m: usize) -> PEConfig {
    PEConfig::new(n_c, n_m).unwrap()
}

#[test]
fn fc_single_tile() {
    let p = plan_fc(0, &LayerSpec::fc(512, 256), pe(512, 256));
    assert_eq!((p.m_t, p.m_a), (1, 1));
}

#[test]
fn fc_grid_shape() {
    let p = plan_fc(0, &LayerSpec::fc(1024, 1024), pe(512, 256));
    assert_eq!((p.m_t, p.m_a), (2, 4));
    assert_eq!(p.tiles, 8);
}

#[test]
fn fc_ragged_slice() {
    let p = plan_fc(0, &LayerSpec::fc(1000, 100), pe(512, 256));
    assert_eq!(p.m_t, 2);
    assert_eq!(p.input_slices[1], 512..1000);
    assert_eq!(p.input_slices[1].len(), 488);
}

#[test]
fn conv_column_nine_tiles() {
    let l = LayerSpec::conv(8, 8, 256, 3, 1, 1, 256);
    let p = plan_conv(0, &l, pe(256, 256), Layout::Column, false);
    assert_eq!((p.m_t, p.m_a), (9, 1));
    assert_eq!(p.chain.iter().filter(|t| t.group_final).count(), 3);
    for (u, t) in p.chain.iter().enumerate() {
        assert_eq!(t.group, u / 3);
    }
}

#[test]
fn conv_packing_capped_by_k() {
    let l = LayerSpec::conv(8, 8, 64, 3, 1, 1, 64);
    assert_eq!(packing_factor(&l, pe(512, 512)), 3);
    let p = plan_conv(0, &l, pe(512, 512), Layout::Column, false);
    assert_eq!(p.tiles, 3);
}

#[test]
fn pointwise_single_tile() {
    let l = LayerSpec::conv(8, 8, 16, 1, 0, 1, 16);
    let p = plan_conv(0, &l, pe(64, 64), Layout::Column, false);
    assert_eq!(p.tiles, 1);
}

#[test]
fn conv_splits_multiply() {
    let l = LayerSpec::conv(8, 8, 300, 3, 1, 1, 300);
    let p = plan_conv(0, &l, pe(128, 128), Layout::Column, false);
    assert_eq!(p.tiles, 9 * 3 * 3);
}

#[test]
fn square_layout_geometry() {
    let l = LayerSpec::conv(8, 8, 256, 3, 1, 1, 256);
    let p = plan_conv(0, &l, pe(256, 256), Layout::Square, false);
    assert_eq!((p.m_t, p.m_a), (3, 3));
}

/// Rebuild the weight tensor from one duplicate's slices; each element must appear once.
fn coverage(l: &LayerSpec, p: &BlockPlan) -> Vec<usize> {
    let mut hits = vec![0usize; l.weight_count()];
    for (f, fr) in p.filter_slices.iter().enumerate() {
        for t in &p.chain {
            for s in &t.segs {
                for m in fr.clone() {
                    for c in s.c0..s.c1 {
                        hits[((m * l.c + c) * l.k + s.i) * l.k + s.j] += 1;
                    }
                }
            }
        }
        assert_eq!(p.slices.iter().filter(|w| w.filters == *fr).count(), p.chain.len(), "slice {f}");
    }
    hits
}

#[test]
fn weight_coverage_is_a_bijection() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let c = rng.gen_range(1..300);
        let m = rng.gen_range(1..300);
        let n = [16, 64, 128][rng.gen_range(0..3)];
        let l = LayerSpec::conv(8, 8, c, k, k / 2, 1, m);
        let patch = rng.gen_bool(0.3);
        let p = plan_conv(0, &l, pe(n, n), Layout::Column, patch);
        assert!(coverage(&l, &p).iter().all(|&h| h == 1), "k={k} c={c} m={m} n={n} patch={patch}");
        for t in &p.chain {
            assert!(t.rows() <= n);
        }
    }
}

#[test]
fn vgg11_tile_demand() {
    let net = bundled("vgg11-cifar").unwrap();
    let full = plan_sync(&net, PEConfig::default(), SyncMode::FullSync).unwrap();
    let reuse = plan_sync(&net, PEConfig::default(), SyncMode::Reuse(4)).unwrap();
    assert_eq!(full.total_tiles, 892);
    assert_eq!(reuse.total_tiles, 286);
}

#[test]
fn vgg11_duplication_by_level() {
    let net = bundled("vgg11-cifar").unwrap();
    let s = plan_sync(&net, PEConfig::default(), SyncMode::FullSync).unwrap();
    let d: Vec<usize> = s.layers.iter().map(|l| l.d).collect();
    assert_eq!(d, vec![64, 64, 64, 64, 16, 16, 4, 4, 1, 1, 1]);
}

#[test]
fn single_layer_sync() {
    let net = NetworkSpec { name: "one".into(), input: (8, 8, 16), layers: vec![LayerSpec::conv(8, 8, 16, 3, 1, 1, 16)] };
    let s = plan_sync(&net, pe(64, 64), SyncMode::FullSync).unwrap();
    assert_eq!((s.layers[0].d, s.layers[0].r), (1, 1));
    assert_eq!(s.total_tiles, 3);
}

#[test]
fn sync_rate_condition() {
    // d times the per-copy window rate is equal across pooled levels.
    let net = NetworkSpec {
        name: "two".into(),
        input: (16, 16, 8),
        layers: vec![LayerSpec::conv(16, 16, 8, 3, 1, 1, 8).with_pool(PoolKind::Max, 2, 2), LayerSpec::conv(8, 8, 8, 3, 1, 1, 8)],
    };
    let s = plan_sync(&net, pe(64, 64), SyncMode::FullSync).unwrap();
    assert_eq!(s.layers[0].rate / s.layers[0].d, s.layers[1].rate / s.layers[1].d);
    assert_eq!(s.layers[0].d, 4);
}

fn column(n: usize) -> BlockPlan {
    let mut p = plan_conv(0, &LayerSpec::conv(4, 4, 64, 3, 1, 1, 64), pe(64, 64), Layout::Column, false);
    p.layer = n;
    p
}

#[test]
fn place_single_column() {
    let mut plans = vec![column(0)];
    place_blocks(&mut plans, 10, 10).unwrap();
    assert_eq!(plans[0].placement[0], Rect { row: 0, col: 0, rows: 9, cols: 1 });
}

#[test]
fn place_second_column_beside_first() {
    let mut plans = vec![column(0), column(1)];
    place_blocks(&mut plans, 10, 10).unwrap();
    assert_eq!((plans[1].placement[0].row, plans[1].placement[0].col), (0, 1));
}

#[test]
fn place_capacity_error() {
    let mut plans = vec![plan_fc(0, &LayerSpec::fc(64, 101 * 64), pe(64, 64))];
    assert_eq!(plans[0].tiles, 101);
    match place_blocks(&mut plans, 10, 10) {
        Err(MapError::Capacity { demand, available, breakdown }) => {
            assert_eq!((demand, available), (101, 100));
            assert_eq!(breakdown, vec![(0, 101)]);
        }
        other => panic!("expected capacity error, got {other:?}"),
    }
}

#[test]
fn placements_do_not_overlap() {
    let net = bundled("vgg11-cifar").unwrap();
    let (mut plans, _) = plan_network(&net, PEConfig::default(), SyncMode::Reuse(4), MapOptions::default()).unwrap();
    place_blocks(&mut plans, 30, 30).unwrap();
    let mut grid = vec![0u8; 900];
    for p in &plans {
        for t in 0..p.tiles {
            let (r, c) = p.coord(t).unwrap();
            grid[r * 30 + c] += 1;
        }
    }
    assert!(grid.iter().all(|&g| g <= 1));
    assert_eq!(grid.iter().filter(|&&g| g == 1).count(), 286);
}

#[test]
fn utilization_full_tile_is_one() {
    let net = NetworkSpec {
        name: "full".into(),
        input: (4, 4, 64),
        layers: vec![LayerSpec::conv(4, 4, 64, 1, 0, 1, 64), LayerSpec::conv(4, 4, 64, 1, 0, 1, 64)],
    };
    let (plans, _) = plan_network(&net, pe(64, 64), SyncMode::FullSync, MapOptions::default()).unwrap();
    let u = utilization(&plans, &net, pe(64, 64));
    assert!((u.average - 1.0).abs() < 1e-12);
}

#[test]
fn utilization_bounded_and_monotone() {
    for name in domino::nn_model::BUNDLED {
        let net = bundled(name).unwrap();
        let mut prev = 1.0 + 1e-9;
        for n in [128, 256, 512] {
            let (plans, _) = plan_network(&net, pe(n, n), SyncMode::FullSync, MapOptions::default()).unwrap();
            let u = utilization(&plans, &net, pe(n, n));
            assert!(u.average > 0.0 && u.average <= 1.0);
            assert!(u.average <= prev, "{name} at {n}: {} > {prev}", u.average);
            prev = u.average;
        }
    }
}
