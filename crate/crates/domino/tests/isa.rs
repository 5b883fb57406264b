use domino::isa::*;
use domino::mapper::*;
use domino::nn_model::{bundled, ChipConfig, LayerSpec, Layout, NetworkSpec, PEConfig, PoolKind, BUNDLED};

fn pe(n: usize) -> PEConfig {
    PEConfig::new(n, n).unwrap()
}

#[test]
fn exhaustive_word_round_trip() {
    let mut valid = 0;
    for w in 0..=u16::MAX {
        match decode(w) {
            Instruction::Invalid(x) => assert_eq!(x, w),
            i => {
                assert_eq!(encode(&i), w, "{w:#06x}");
                assert_eq!(decode(encode(&i)), i);
                valid += 1;
            }
        }
    }
    assert!(valid > 100 && valid < 65536, "{valid}");
}

#[test]
fn zero_word_is_nop() {
    assert_eq!(decode(0), NOP);
    assert!(decode(0).is_nop());
}

#[test]
fn word_from_field_positions() {
    let i = Instruction::C(CInstr { rx: Some(Dir::N), tx: Dirs::one(Dir::S), pop: true, sum: SumOp::AddPopped, ..Default::default() });
    // tx S -> bit 3, pop -> bit 6, add-popped -> bit 7, rx N -> bit 11
    let expect: u16 = (1 << 3) | (1 << 6) | (1 << 7) | (1 << 11);
    assert_eq!(encode(&i), expect);
    assert_eq!(decode(expect), i);
}

#[test]
fn undefined_combinations_are_invalid() {
    // two rx directions
    assert!(!decode((1 << 11) | (1 << 12) | (1 << 9)).is_valid());
    // two sum operations
    assert!(!decode((1 << 11) | (1 << 6) | (1 << 7) | (1 << 8)).is_valid());
    // tx with nothing to send
    assert!(!decode(1 << 1).is_valid());
    // M-type with an rx direction
    assert!(!decode(1 | (1 << 11)).is_valid());
    // avg emit carrying bias
    assert!(!decode(1 | (1 << 3) | (1 << 6) | (1 << 9)).is_valid());
}

fn first_plan(l: LayerSpec, n: usize) -> BlockPlan {
    plan_conv(0, &l, pe(n), Layout::Column, false)
}

#[test]
fn conv_table_period() {
    let l = LayerSpec::conv(32, 32, 256, 3, 1, 1, 256);
    let p = first_plan(l.clone(), 256);
    for t in 0..p.tiles {
        let prog = gen_schedule(&p, t, &l, (30, 30), GenOptions::default()).unwrap();
        assert_eq!(prog.rofm.period, 66);
    }
}

#[test]
fn pooling_table_period() {
    let l = LayerSpec::conv(8, 8, 16, 3, 1, 1, 16).with_pool(PoolKind::Max, 2, 2);
    let p = first_plan(l.clone(), 64);
    let last = gen_schedule(&p, p.tiles - 1, &l, (30, 30), GenOptions::default()).unwrap();
    assert_eq!(last.cu.unwrap().period, 4);
    let first = gen_schedule(&p, 0, &l, (30, 30), GenOptions::default()).unwrap();
    assert!(first.cu.is_none());
}

#[test]
fn pointwise_single_tile_stores_only() {
    let l = LayerSpec::conv(4, 4, 16, 1, 0, 1, 16);
    let p = first_plan(l.clone(), 64);
    assert_eq!(p.tiles, 1);
    let prog = gen_schedule(&p, 0, &l, (4, 4), GenOptions::default()).unwrap();
    for i in prog.rofm.entries() {
        if let Instruction::C(c) = i {
            assert!(c.tx.is_empty() && c.rx.is_none() && !c.push && !c.pop);
        } else {
            panic!("unexpected {i}");
        }
    }
    assert!(prog.cu.is_some());
}

#[test]
fn wide_layer_needs_compression() {
    let l = LayerSpec::conv(224, 224, 64, 3, 1, 1, 64);
    let p = first_plan(l.clone(), 256);
    match gen_schedule(&p, 0, &l, (30, 30), GenOptions { compress: false }) {
        Err(IsaError::Capacity { w, p, period, .. }) => assert_eq!((w, p, period), (224, 1, 450)),
        other => panic!("expected capacity error, got {other:?}"),
    }
    let prog = gen_schedule(&p, 0, &l, (30, 30), GenOptions::default()).unwrap();
    assert!(prog.rofm.physical_len() <= TABLE_CAPACITY);
}

#[test]
fn compressed_and_plain_tables_agree() {
    let l = LayerSpec::conv(16, 16, 96, 3, 1, 2, 32);
    let p = first_plan(l.clone(), 128);
    for t in 0..p.tiles {
        let a = gen_schedule(&p, t, &l, (30, 30), GenOptions::default()).unwrap();
        let b = gen_schedule(&p, t, &l, (30, 30), GenOptions { compress: false }).unwrap();
        assert_eq!(a.rofm.entries(), b.rofm.entries());
        assert_eq!(a.rofm.start, b.rofm.start);
    }
}

#[test]
fn bundled_periods() {
    for name in BUNDLED {
        let net = bundled(name).unwrap();
        let (plans, _) = plan_network(&net, pe(256), SyncMode::FullSync, MapOptions::default()).unwrap();
        for plan in &plans {
            let l = &net.layers[plan.layer];
            let progs = gen_block(plan, l, (1000, 1000), GenOptions::default()).unwrap();
            for prog in progs {
                if l.is_conv() {
                    assert_eq!(prog.rofm.period, 2 * (l.p + l.w), "{name} layer {}", plan.layer);
                }
                if let (Some(cu), Some(pool)) = (&prog.cu, l.pool) {
                    assert_eq!(cu.period, 2 * pool.s);
                }
            }
        }
    }
}

fn vgg11_bundle() -> Bundle {
    let net = bundled("vgg11-cifar").unwrap();
    let chip = ChipConfig::default();
    let (mut plans, _) = plan_network(&net, chip.pe, SyncMode::Reuse(4), MapOptions::default()).unwrap();
    place_blocks(&mut plans, chip.a_r, chip.a_c).unwrap();
    compile(&net, &plans, &chip, SyncMode::Reuse(4), MapOptions::default(), GenOptions::default()).unwrap()
}

#[test]
fn tx_only_on_connected_ports() {
    let b = vgg11_bundle();
    for prog in &b.programs {
        let at = prog.coord.unwrap();
        let tables = std::iter::once(&prog.rofm).chain(prog.cu.as_ref());
        for t in tables {
            for i in t.entries() {
                let tx = match i {
                    Instruction::C(c) => c.tx,
                    Instruction::M(m) => m.tx,
                    Instruction::Invalid(w) => panic!("invalid {w:#x}"),
                };
                for d in tx.iter() {
                    let (dr, dc) = d.delta();
                    let (r, c) = (at.0 as isize + dr, at.1 as isize + dc);
                    assert!(r >= 0 && c >= 0 && (r as usize) < b.chip.a_r && (c as usize) < b.chip.a_c);
                }
            }
        }
    }
}

#[test]
fn bundle_round_trip() {
    let b = vgg11_bundle();
    let text = b.to_text();
    let back = Bundle::from_text(&text).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.to_text(), text);
    assert_eq!(disassemble(&back), disassemble(&b));
}

#[test]
fn corrupt_checksum_rejected() {
    let text = vgg11_bundle().to_text();
    let bad = text.replacen("rofm ", "rofm  ", 1);
    assert!(matches!(Bundle::from_text(&bad), Err(IsaError::Checksum { .. })));
}

#[test]
fn version_mismatch_rejected() {
    let empty = Bundle {
        network: NetworkSpec { name: "empty".into(), input: (1, 1, 1), layers: vec![] },
        chip: ChipConfig::default(),
        mode: SyncMode::FullSync,
        map: MapOptions { patch_first: false, layout: Some(Layout::Square) },
        compress: true,
        programs: vec![],
    };
    let text = empty.to_text();
    assert_eq!(Bundle::from_text(&text).unwrap(), empty);
    let body = text[..text.rfind("checksum").unwrap()].replacen("domino-bundle 1", "domino-bundle 9", 1);
    let forged = format!("{body}checksum {:016x}\n", fnv1a64(body.as_bytes()));
    assert!(matches!(Bundle::from_text(&forged), Err(IsaError::Version(v)) if v == "9"));
}

#[test]
fn mode_text_round_trip() {
    for m in [SyncMode::FullSync, SyncMode::Reuse(4)] {
        assert_eq!(parse_mode(&mode_text(m)), Some(m));
    }
    assert_eq!(parse_mode("reuse 0"), None);
}
