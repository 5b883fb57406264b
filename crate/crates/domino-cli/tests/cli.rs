use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const TOY: &str = "name = toy\ninput = 6 6 256\nlayer = CONV H=6 W=6 C=256 P=1 K=3 M=256 S=1\n";

const SMALL: &str = "name = small
input = 8 8 4
layer = CONV H=8 W=8 C=4 P=1 K=3 M=16 S=1
layer = CONV H=8 W=8 C=16 P=1 K=3 M=16 S=1 pool=max K_p=2 S_p=2
layer = FC C=256 M=10
";

const SMALL_CHIP: &str = "rows = 20\ncols = 20\nn_c = 16\nn_m = 16\n";

fn dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn domino(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domino")).args(args).env_remove("DOMINO_CHIP").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small network and chip, compiles, returns the bundle path.
fn small_bundle(d: &std::path::Path) -> PathBuf {
    fs::write(d.join("small.net"), SMALL).unwrap();
    fs::write(d.join("chip.cfg"), SMALL_CHIP).unwrap();
    let b = d.join("small.bundle");
    let o = domino(&["compile", s(&d.join("small.net")), "--chip", s(&d.join("chip.cfg")), "-o", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    b
}

#[test]
fn toy_layer_uses_nine_tiles() {
    let d = dir("toy");
    fs::write(d.join("toy.net"), TOY).unwrap();
    let o = domino(&["compile", s(&d.join("toy.net"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("9 tiles"), "{}", stdout(&o));
}

#[test]
fn vgg11_reuse_summary() {
    let o = domino(&["compile", "vgg11-cifar", "--mode", "reuse=4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("286 tiles"), "{}", stdout(&o));
}

#[test]
fn oversubscribed_chip_is_a_capacity_error() {
    let o = domino(&["compile", "vgg16"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("capacity"));
}

#[test]
fn chip_from_environment() {
    let d = dir("env");
    fs::write(d.join("tiny.cfg"), "rows = 2\ncols = 2\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_domino"))
        .args(["compile", "vgg11-cifar", "--mode", "reuse=4"])
        .env("DOMINO_CHIP", d.join("tiny.cfg"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn network_parse_error_reports_location() {
    let d = dir("parse");
    fs::write(d.join("bad.net"), "name = bad\ninput = 8 8 4\nlayer = CONV H=8 W=8 C=4 P=1 K=x M=16 S=1\n").unwrap();
    let o = domino(&["compile", s(&d.join("bad.net"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn bad_mode_is_a_usage_error() {
    assert_eq!(domino(&["compile", "vgg11-cifar", "--mode", "reuse=0"]).status.code(), Some(2));
}

#[test]
fn run_is_equivalent_and_deterministic() {
    let d = dir("run");
    let b = small_bundle(&d);
    let mut outs = Vec::new();
    for k in 0..2 {
        let (t, r) = (d.join(format!("trace{k}")), d.join(format!("report{k}")));
        let o = domino(&["run", s(&b), "--random", "7", "--images", "2", "--trace", "full", "--trace-out", s(&t), "-o", s(&r)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("EQUIVALENT"));
        outs.push((fs::read(&t).unwrap(), fs::read(&r).unwrap(), stdout(&o)));
    }
    assert!(!outs[0].0.is_empty());
    assert_eq!(outs[0], outs[1]);
    let r = String::from_utf8(outs[0].1.clone()).unwrap();
    assert!(r.contains("verdict = EQUIVALENT") && r.contains("energy_table = r"));
}

#[test]
fn ifm_file_input() {
    let d = dir("ifm");
    let b = small_bundle(&d);
    let net = domino::nn_model::parse_network(SMALL).unwrap();
    fs::write(d.join("x.ifm"), domino::nn_model::random_input(&net, 3).to_text()).unwrap();
    let o = domino(&["run", s(&b), "--ifm", s(&d.join("x.ifm"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("EQUIVALENT"));
}

#[test]
fn corrupted_bundle_fails_to_load() {
    let d = dir("corrupt");
    let b = small_bundle(&d);
    let text = fs::read_to_string(&b).unwrap().replacen("rofm ", "rofm  ", 1);
    fs::write(&b, text).unwrap();
    let o = domino(&["run", s(&b), "--random", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn simulation_errors_have_their_own_code() {
    let d = dir("steps");
    let b = small_bundle(&d);
    let o = domino(&["run", s(&b), "--random", "1", "--max-steps", "3"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("no result after 3 steps"));
}

#[test]
fn disasm_matches_loader() {
    let d = dir("disasm");
    let b = small_bundle(&d);
    let o = domino(&["disasm", s(&b)]);
    assert!(o.status.success());
    let loaded = domino::isa::Bundle::from_text(&fs::read_to_string(&b).unwrap()).unwrap();
    assert_eq!(stdout(&o), domino::isa::disassemble(&loaded));
}

#[test]
fn report_needs_files() {
    assert_eq!(domino(&["report"]).status.code(), Some(2));
}

#[test]
fn report_compares_runs() {
    let d = dir("report");
    let b = small_bundle(&d);
    let r = d.join("r.kv");
    assert!(domino(&["run", s(&b), "--random", "2", "-o", s(&r)]).status.success());
    let o = domino(&["report", s(&r), s(&r)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("small")).count(), 2);
    assert!(out.contains("25.92"));
}

#[test]
fn sweep_prints_three_averages() {
    let o = domino(&["sweep", "vgg11-cifar"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let avg = out.lines().find(|l| l.starts_with("average")).unwrap();
    assert_eq!(avg.matches('%').count(), 3);
    assert_eq!(out, stdout(&domino(&["sweep", "vgg11-cifar"])));
}

#[test]
fn square_layout_bundle_runs() {
    let d = dir("square");
    fs::write(d.join("small.net"), SMALL).unwrap();
    fs::write(d.join("chip.cfg"), SMALL_CHIP).unwrap();
    let b = d.join("sq.bundle");
    let o = domino(&["compile", s(&d.join("small.net")), "--chip", s(&d.join("chip.cfg")), "--layout", "square", "-o", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = domino(&["run", s(&b), "--random", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("EQUIVALENT"));
}
