use domino::isa::encode;
use domino::mapper::{MapOptions, SyncMode};
use domino::nn_model::*;
use domino::oracle;
use domino::sim::*;

fn fitted(net: &NetworkSpec, n: usize, mode: SyncMode) -> SimConfig {
    let pe = PEConfig::new(n, n).unwrap();
    SimConfig::new(fit_chip(net, pe, mode, MapOptions::default()).unwrap(), mode)
}

fn single(layer: LayerSpec) -> NetworkSpec {
    NetworkSpec { name: "single".into(), input: (layer.h, layer.w, layer.c), layers: vec![layer] }
}

fn check_equivalent(net: &NetworkSpec, cfg: &SimConfig, seed: u64, images: u64) {
    let params = NetworkParams::random(net, seed);
    let xs: Vec<_> = (0..images).map(|i| random_input(net, seed * 100 + i)).collect();
    let r = run_inference(net, &params, &xs, cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{net}"));
    assert_eq!(r.outputs.len(), xs.len());
    for (x, out) in xs.iter().zip(&r.outputs) {
        let want = oracle::forward(net, &params, x).unwrap();
        assert_eq!(out.values, want.last().unwrap().values, "seed {seed}\n{net}");
    }
}

#[test]
fn nine_tile_block_matches_oracle() {
    let net = single(LayerSpec::conv(6, 6, 16, 3, 1, 1, 16));
    let cfg = fitted(&net, 16, SyncMode::FullSync);
    let (plans, _, _) = compile(&net, &cfg).unwrap();
    assert_eq!(plans[0].m_t, 9);
    check_equivalent(&net, &cfg, 1, 3);
}

#[test]
fn pooled_and_fc_layers_match_oracle() {
    let net = NetworkSpec {
        name: "small".into(),
        input: (8, 8, 8),
        layers: vec![
            LayerSpec::conv(8, 8, 8, 3, 1, 1, 24).with_pool(PoolKind::Max, 2, 2),
            LayerSpec::conv(4, 4, 24, 3, 1, 1, 16).with_pool(PoolKind::Avg, 2, 2),
            LayerSpec::fc(64, 10).with_activation(Activation::None),
        ],
    };
    for mode in [SyncMode::FullSync, SyncMode::Reuse(4)] {
        check_equivalent(&net, &fitted(&net, 16, mode), 5, 2);
    }
}

#[test]
fn random_networks_match_oracle() {
    for seed in 0..40u64 {
        let net = random_network(seed);
        let n = [16, 32, 64][(seed % 3) as usize];
        let mode = if seed % 2 == 0 { SyncMode::FullSync } else { SyncMode::Reuse(4) };
        check_equivalent(&net, &fitted(&net, n, mode), seed, 2);
    }
}

fn behind_stem(layer: LayerSpec) -> NetworkSpec {
    NetworkSpec {
        name: "stem".into(),
        input: (layer.h, layer.w, 4),
        layers: vec![LayerSpec::conv(layer.h, layer.w, 4, 3, 1, 1, layer.c), layer],
    }
}

#[test]
fn group_sums_match_oracle() {
    let nets = [
        behind_stem(LayerSpec::conv(6, 6, 16, 3, 1, 1, 16)),
        behind_stem(LayerSpec::conv(7, 7, 40, 3, 1, 2, 24)),
        behind_stem(LayerSpec::conv(6, 6, 8, 5, 2, 1, 40)),
    ];
    for (k, net) in nets.iter().enumerate() {
        let mut cfg = fitted(net, 16, SyncMode::FullSync);
        cfg.trace = TraceLevel::Events;
        let params = NetworkParams::random(net, k as u64);
        let x = random_input(net, k as u64);
        let r = run_inference(net, &params, std::slice::from_ref(&x), &cfg).unwrap();
        let ifm = &oracle::forward(net, &params, &x).unwrap()[0];
        let l = &net.layers[1];
        let (e, f) = l.conv_shape().unwrap();
        let mut seen = vec![vec![0usize; l.k]; e * f];
        let events: Vec<_> = r.trace.group_sums.iter().filter(|ev| ev.layer == 1).collect();
        assert!(!events.is_empty());
        for ev in events {
            let want = oracle::group_sums(ifm, &params.layers[1].weights, l, ev.window).unwrap();
            assert_eq!(ev.values, want[ev.group][ev.filters.clone()], "net {k} window {}", ev.window);
            seen[ev.window][ev.group] += ev.filters.len();
        }
        for row in &seen {
            assert!(row.iter().all(|&m| m == l.m), "net {k}: {row:?}");
        }
    }
}

#[test]
fn trace_hash_is_deterministic() {
    let net = random_network(3);
    let mut cfg = fitted(&net, 32, SyncMode::FullSync);
    cfg.trace = TraceLevel::Full;
    let params = NetworkParams::random(&net, 3);
    let xs = vec![random_input(&net, 0), random_input(&net, 1)];
    let a = run_inference(&net, &params, &xs, &cfg).unwrap();
    let b = run_inference(&net, &params, &xs, &cfg).unwrap();
    assert_eq!(a.trace.hash, b.trace.hash);
    assert_eq!(a.trace.lines, b.trace.lines);
    assert_eq!(a.stats, b.stats);
    let other = vec![random_input(&net, 2), random_input(&net, 1)];
    let c = run_inference(&net, &params, &other, &cfg).unwrap();
    assert_ne!(a.trace.hash, c.trace.hash);
}

#[test]
fn hash_level_matches_full_level() {
    let net = random_network(4);
    let params = NetworkParams::random(&net, 4);
    let xs = vec![random_input(&net, 0)];
    let mut cfg = fitted(&net, 32, SyncMode::FullSync);
    let a = run_inference(&net, &params, &xs, &cfg).unwrap();
    cfg.trace = TraceLevel::Full;
    let b = run_inference(&net, &params, &xs, &cfg).unwrap();
    assert_eq!(a.trace.hash, b.trace.hash);
    assert!(a.trace.lines.is_empty() && !b.trace.lines.is_empty());
}

#[test]
fn steady_state_is_periodic() {
    let net = NetworkSpec {
        name: "periodic".into(),
        input: (8, 8, 16),
        layers: vec![LayerSpec::conv(8, 8, 16, 3, 1, 1, 16), LayerSpec::conv(8, 8, 16, 3, 1, 1, 16)],
    };
    let cfg = fitted(&net, 16, SyncMode::FullSync);
    let r = run_timing(&net, 10, &cfg).unwrap();
    let gaps: Vec<u64> = r.stats.completion.windows(2).map(|w| w[1] - w[0]).collect();
    let tail = &gaps[gaps.len() / 2..];
    assert!(tail.iter().all(|&g| g == tail[0]), "{gaps:?}");
    assert_eq!(r.stats.interval(), Some(tail[0]));
}

#[test]
fn timing_only_counts_match_functional() {
    for seed in [2u64, 7, 11] {
        let net = random_network(seed);
        let cfg = fitted(&net, 32, SyncMode::Reuse(4));
        let params = NetworkParams::random(&net, seed);
        let xs: Vec<_> = (0..3).map(|i| random_input(&net, i)).collect();
        let f = run_inference(&net, &params, &xs, &cfg).unwrap();
        let t = run_timing(&net, 3, &cfg).unwrap();
        assert_eq!(f.stats, t.stats, "seed {seed}");
    }
}

#[test]
fn macs_counted_once() {
    let net = single(LayerSpec::conv(6, 6, 16, 3, 1, 1, 16));
    let r = run_timing(&net, 2, &fitted(&net, 16, SyncMode::FullSync)).unwrap();
    assert_eq!(r.stats.macs, 2 * net.layers[0].macs());
}

#[test]
fn bundle_runs_like_direct_inference() {
    let net = random_network(9);
    let cfg = fitted(&net, 32, SyncMode::FullSync);
    let (_, _, bundle) = compile(&net, &cfg).unwrap();
    let text = bundle.to_text();
    let loaded = domino::isa::Bundle::from_text(&text).unwrap();
    let params = NetworkParams::random(&net, 9);
    let xs = vec![random_input(&net, 0)];
    let a = run_bundle(&loaded, &params, &xs, &cfg).unwrap();
    let b = run_inference(&net, &params, &xs, &cfg).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.trace.hash, b.trace.hash);
}

#[test]
fn invalid_word_is_reported() {
    let net = single(LayerSpec::conv(6, 6, 16, 3, 1, 1, 16));
    let cfg = fitted(&net, 16, SyncMode::FullSync);
    let (_, _, mut bundle) = compile(&net, &cfg).unwrap();
    let bad = domino::isa::decode(1 << 1);
    assert!(!bad.is_valid());
    let t = &mut bundle.programs[4].rofm;
    let at = t.mask.iter().position(|m| !m).unwrap();
    let mut words = t.words();
    words[at] = encode(&bad);
    t.runs = words.into_iter().map(|w| (w, 1)).collect();
    let params = NetworkParams::random(&net, 0);
    let err = run_bundle(&bundle, &params, &[random_input(&net, 0)], &cfg).unwrap_err();
    assert!(matches!(err, SimError::Invalid { layer: 0, tile: 4, word: 2 }), "{err}");
}

#[test]
fn tiny_rofm_buffer_overflows() {
    let net = single(LayerSpec::conv(6, 6, 16, 3, 1, 1, 16));
    let mut cfg = fitted(&net, 16, SyncMode::FullSync);
    cfg.chip.rofm_buffer = 8;
    let params = NetworkParams::random(&net, 0);
    let err = run_inference(&net, &params, &[random_input(&net, 0)], &cfg).unwrap_err();
    assert!(matches!(err, SimError::Overflow { .. }), "{err}");
}

#[test]
fn step_budget_stops_the_run() {
    let net = single(LayerSpec::conv(6, 6, 16, 3, 1, 1, 16));
    let mut cfg = fitted(&net, 16, SyncMode::FullSync);
    cfg.max_steps = 5;
    let err = run_timing(&net, 1, &cfg).unwrap_err();
    assert!(matches!(err, SimError::NonTermination { steps: 5, .. }), "{err}");
}

#[test]
fn shortcuts_are_unsupported() {
    let net = bundled("resnet18").unwrap();
    let mut cfg = SimConfig::new(ChipConfig::new(200, 200, PEConfig::default()), SyncMode::Reuse(4));
    cfg.max_steps = 10;
    let err = run_timing(&net, 1, &cfg).unwrap_err();
    assert!(matches!(err, SimError::Unsupported(_)), "{err}");
}
