//! 16-bit Rofm control words, schedule tables and the per-chip bundle.
//!
//! Word layout, low bit first:
//!
//! | bits  | C-type                      | M-type                  |
//! |-------|-----------------------------|-------------------------|
//! | 0     | 0                           | 1                       |
//! | 1-4   | tx N, E, S, W               | tx N, E, S, W           |
//! | 5-6   | push, pop                   | act, bias               |
//! | 7-10  | add-popped, add-pe, forward-raw, store-pe | max, avg-acc, avg-emit, fc-concat |
//! | 11-15 | rx N, E, S, W, local PE     | rx N, E, S, W, local    |
//!
//! C-type rules: at most one rx direction; at most one of add-popped, add-pe,
//! forward-raw; add-popped needs pop and an rx direction; forward-raw needs an
//! operand (pop or rx direction) and excludes store-pe; store-pe needs add-pe;
//! push needs an rx direction; rx local needs add-pe; tx needs a sum op.
//!
//! M-type rules: no rx direction. With rx local the word accumulates (max or
//! avg-acc, optional bias/act, no tx) or emits directly (no pooling bit,
//! optional bias/act/fc-concat, tx set). Without rx local the word is either
//! an all-zero no-op or a pooled emit (max or avg-emit alone, tx set).

use std::fmt;

use thiserror::Error;

use crate::mapper::{BlockKind, BlockPlan, MapOptions, SyncMode};
use crate::nn_model::{ChipConfig, LayerSpec, Layout, NetworkSpec};

#[derive(Debug, Error, PartialEq)]
pub enum IsaError {
    #[error("layer {layer}: schedule period {period} (W={w}, P={p}) needs {needed} entries, table holds {capacity}")]
    Capacity { layer: usize, w: usize, p: usize, period: usize, needed: usize, capacity: usize },
    #[error("layer {layer}: tile {tile} has no connected output port")]
    NoPort { layer: usize, tile: usize },
    #[error("layer {layer}: tile {tile} is not part of the block")]
    NoTile { layer: usize, tile: usize },
    #[error("bundle: unsupported version {0}")]
    Version(String),
    #[error("bundle: checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("bundle line {line}: {msg}")]
    Bundle { line: usize, msg: String },
}

/// Physical schedule-table entries.
pub const TABLE_CAPACITY: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn opposite(self) -> Dir {
        match self {
            Dir::N => Dir::S,
            Dir::E => Dir::W,
            Dir::S => Dir::N,
            Dir::W => Dir::E,
        }
    }

    /// Grid step (row, col) for this direction.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Dir::N => (-1, 0),
            Dir::E => (0, 1),
            Dir::S => (1, 0),
            Dir::W => (0, -1),
        }
    }

    /// Direction from `a` to an adjacent `b`.
    pub fn between(a: (usize, usize), b: (usize, usize)) -> Option<Dir> {
        let d = (b.0 as isize - a.0 as isize, b.1 as isize - a.1 as isize);
        Dir::ALL.into_iter().find(|x| x.delta() == d)
    }

    fn letter(self) -> char {
        ['N', 'E', 'S', 'W'][self as usize]
    }
}

/// Set of directions, bit i for `Dir` i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Dirs(pub u8);

impl Dirs {
    pub const NONE: Dirs = Dirs(0);

    pub fn one(d: Dir) -> Dirs {
        Dirs(d.bit())
    }

    pub fn contains(self, d: Dir) -> bool {
        self.0 & d.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Dir> {
        Dir::ALL.into_iter().filter(move |d| self.contains(*d))
    }
}

impl fmt::Display for Dirs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "-");
        }
        for d in self.iter() {
            write!(f, "{}", d.letter())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum SumOp {
    #[default]
    None,
    /// out = popped + incoming
    AddPopped,
    /// out = PE value + (popped, else incoming, else 0)
    AddPe,
    /// out = popped, else incoming
    ForwardRaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct CInstr {
    pub rx: Option<Dir>,
    /// Take the PE result as the PE operand; otherwise the stored PE register is used.
    pub local: bool,
    pub tx: Dirs,
    pub push: bool,
    pub pop: bool,
    pub sum: SumOp,
    /// Write the sum into the PE register.
    pub store: bool,
}

/// Computation-unit function bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Func(pub u8);

impl Func {
    pub const ACT: u8 = 1;
    pub const BIAS: u8 = 2;
    pub const MAX: u8 = 4;
    pub const AVG_ACC: u8 = 8;
    pub const AVG_EMIT: u8 = 16;
    pub const FC_CONCAT: u8 = 32;

    pub fn has(self, bit: u8) -> bool {
        self.0 & bit != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct MInstr {
    pub local: bool,
    pub tx: Dirs,
    pub func: Func,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    C(CInstr),
    M(MInstr),
    Invalid(u16),
}

pub const NOP: Instruction =
    Instruction::C(CInstr { rx: None, local: false, tx: Dirs::NONE, push: false, pop: false, sum: SumOp::None, store: false });

const RX_SHIFT: u16 = 11;
const LOCAL_BIT: u16 = 1 << 15;

pub fn encode(i: &Instruction) -> u16 {
    match *i {
        Instruction::Invalid(w) => w,
        Instruction::C(c) => {
            let mut w = (c.tx.0 as u16 & 0xf) << 1;
            w |= (c.push as u16) << 5 | (c.pop as u16) << 6;
            w |= match c.sum {
                SumOp::None => 0,
                SumOp::AddPopped => 1 << 7,
                SumOp::AddPe => 1 << 8,
                SumOp::ForwardRaw => 1 << 9,
            };
            w |= (c.store as u16) << 10;
            if let Some(d) = c.rx {
                w |= (d.bit() as u16) << RX_SHIFT;
            }
            if c.local {
                w |= LOCAL_BIT;
            }
            w
        }
        Instruction::M(m) => {
            let mut w = 1 | (m.tx.0 as u16 & 0xf) << 1;
            w |= (m.func.0 as u16 & 0x3f) << 5;
            if m.local {
                w |= LOCAL_BIT;
            }
            w
        }
    }
}

fn c_valid(c: &CInstr) -> bool {
    let has_op = c.sum != SumOp::None;
    let rx_dir = c.rx.is_some();
    match c.sum {
        SumOp::AddPopped if !(c.pop && rx_dir) => return false,
        SumOp::ForwardRaw if !(c.pop || rx_dir) || c.store => return false,
        _ => {}
    }
    if c.store && c.sum != SumOp::AddPe {
        return false;
    }
    if c.push && !rx_dir {
        return false;
    }
    if c.local && c.sum != SumOp::AddPe {
        return false;
    }
    !(!c.tx.is_empty() && !has_op)
}

fn m_valid(m: &MInstr) -> bool {
    let f = m.func;
    let pool = f.0 & (Func::MAX | Func::AVG_ACC | Func::AVG_EMIT);
    let modifiers = f.0 & (Func::ACT | Func::BIAS);
    if m.local {
        if f.has(Func::AVG_EMIT) {
            return false;
        }
        match pool {
            0 => !m.tx.is_empty(),
            p if p == Func::MAX || p == Func::AVG_ACC => m.tx.is_empty() && !f.has(Func::FC_CONCAT),
            _ => false,
        }
    } else if f.0 == 0 {
        m.tx.is_empty()
    } else {
        modifiers == 0 && !f.has(Func::FC_CONCAT) && (pool == Func::MAX || pool == Func::AVG_EMIT) && !m.tx.is_empty()
    }
}

pub fn decode(w: u16) -> Instruction {
    let tx = Dirs(((w >> 1) & 0xf) as u8);
    let rx = ((w >> RX_SHIFT) & 0xf) as u8;
    let local = w & LOCAL_BIT != 0;
    if w & 1 == 1 {
        if rx != 0 {
            return Instruction::Invalid(w);
        }
        let m = MInstr { local, tx, func: Func(((w >> 5) & 0x3f) as u8) };
        return if m_valid(&m) { Instruction::M(m) } else { Instruction::Invalid(w) };
    }
    let rx = match rx {
        0 => None,
        r if r.count_ones() == 1 => Some(Dir::ALL[r.trailing_zeros() as usize]),
        _ => return Instruction::Invalid(w),
    };
    let sum = match (w >> 7) & 0x7 {
        0 => SumOp::None,
        1 => SumOp::AddPopped,
        2 => SumOp::AddPe,
        4 => SumOp::ForwardRaw,
        _ => return Instruction::Invalid(w),
    };
    let c = CInstr { rx, local, tx, push: w & (1 << 5) != 0, pop: w & (1 << 6) != 0, sum, store: w & (1 << 10) != 0 };
    if c_valid(&c) {
        Instruction::C(c)
    } else {
        Instruction::Invalid(w)
    }
}

impl Instruction {
    pub fn is_valid(&self) -> bool {
        !matches!(self, Instruction::Invalid(_))
    }

    pub fn is_nop(&self) -> bool {
        encode(self) & !1 == 0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Invalid(w) => write!(f, "INVALID {w:#06x}"),
            Instruction::C(c) => {
                let rx = c.rx.map_or("-".to_string(), |d| d.letter().to_string());
                let mut ops = Vec::new();
                if c.push {
                    ops.push("push");
                }
                if c.pop {
                    ops.push("pop");
                }
                match c.sum {
                    SumOp::None => {}
                    SumOp::AddPopped => ops.push("add_popped"),
                    SumOp::AddPe => ops.push("add_pe"),
                    SumOp::ForwardRaw => ops.push("forward_raw"),
                }
                if c.store {
                    ops.push("store_pe");
                }
                let ops = if ops.is_empty() { "nop".to_string() } else { ops.join(",") };
                write!(f, "C rx={rx:<1}{} tx={:<4} {ops}", if c.local { "+L" } else { "  " }, c.tx)
            }
            Instruction::M(m) => {
                let names = ["act", "bias", "max", "avg_acc", "avg_emit", "fc_concat"];
                let ops: Vec<&str> = (0..6).filter(|b| m.func.0 & (1 << b) != 0).map(|b| names[b]).collect();
                let ops = if ops.is_empty() { "nop".to_string() } else { ops.join(",") };
                write!(f, "M rx={}   tx={:<4} {ops}", if m.local { "L" } else { "-" }, m.tx)
            }
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Periodic Rofm program.
///
/// A CONV table of row length R holds slot 0 in entries [0, R) and slot 1 in
/// [R, 2R). Slot s starts `start[s]` block ticks after the lane's first stream
/// element. Masked entries are skipped and their stored words are don't-care,
/// which lets runs of identical words swallow them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleTable {
    pub period: usize,
    /// (word, repeat) pairs; their repeats sum to `period`.
    pub runs: Vec<(u16, u16)>,
    pub start: [u32; 2],
    /// Ticks between a push and the pop of the same value.
    pub push_lag: u32,
    pub mask: Vec<bool>,
}

impl ScheduleTable {
    pub fn build(entries: &[Instruction], start: [u32; 2], push_lag: u32, compress: bool) -> Self {
        let mask: Vec<bool> = entries.iter().map(|e| e.is_nop()).collect();
        let words: Vec<u16> = entries.iter().map(encode).collect();
        let mut runs: Vec<(u16, u16)> = Vec::new();
        if !compress {
            runs = words.iter().map(|&w| (w, 1)).collect();
        } else {
            let first = words.iter().zip(&mask).find(|(_, m)| !**m).map_or(0, |(w, _)| *w);
            for (i, &w) in words.iter().enumerate() {
                let w = if mask[i] { runs.last().map_or(first, |r| r.0) } else { w };
                match runs.last_mut() {
                    Some(r) if r.0 == w && r.1 < u16::MAX => r.1 += 1,
                    _ => runs.push((w, 1)),
                }
            }
        }
        ScheduleTable { period: entries.len(), runs, start, push_lag, mask }
    }

    /// Physical entries occupied.
    pub fn physical_len(&self) -> usize {
        self.runs.len()
    }

    /// Stored words, expanded to the logical period.
    pub fn words(&self) -> Vec<u16> {
        self.runs.iter().flat_map(|&(w, n)| std::iter::repeat_n(w, n as usize)).collect()
    }

    /// Effective instructions, masked entries read as no-ops.
    pub fn entries(&self) -> Vec<Instruction> {
        self.words().into_iter().zip(&self.mask).map(|(w, &m)| if m { NOP } else { decode(w) }).collect()
    }

    /// Row length of a two-slot table.
    pub fn row_len(&self) -> usize {
        self.period / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileProgram {
    pub layer: usize,
    pub tile: usize,
    pub coord: Option<(usize, usize)>,
    pub rofm: ScheduleTable,
    /// Computation-unit table, indexed by arriving result rather than by tick.
    pub cu: Option<ScheduleTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    pub compress: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { compress: true }
    }
}

fn c(i: CInstr) -> Instruction {
    Instruction::C(i)
}

fn in_grid(p: (usize, usize), d: Dir, grid: (usize, usize)) -> bool {
    let (dr, dc) = d.delta();
    let (r, cc) = (p.0 as isize + dr, p.1 as isize + dc);
    r >= 0 && cc >= 0 && (r as usize) < grid.0 && (cc as usize) < grid.1
}

/// Port used to leave the block: south first, then east, north, west.
fn exit_port(coord: Option<(usize, usize)>, grid: (usize, usize)) -> Option<Dir> {
    match coord {
        None => Some(Dir::S),
        Some(p) => [Dir::S, Dir::E, Dir::N, Dir::W].into_iter().find(|d| in_grid(p, *d, grid)),
    }
}

fn link(plan: &BlockPlan, from: usize, to: usize) -> Dir {
    match (plan.coord(from), plan.coord(to)) {
        (Some(a), Some(b)) => Dir::between(a, b).unwrap_or(Dir::S),
        _ => Dir::S,
    }
}

fn output_table(layer: &LayerSpec, tx: Dir, compress: bool) -> ScheduleTable {
    let mut base = 0u8;
    if layer.has_bias {
        base |= Func::BIAS;
    }
    if layer.activation == crate::nn_model::Activation::Relu {
        base |= Func::ACT;
    }
    let m = |local: bool, tx: Dirs, func: u8| Instruction::M(MInstr { local, tx, func: Func(func) });
    let entries = match (layer.kind, layer.pool) {
        (crate::nn_model::LayerKind::Fc, _) => vec![m(true, Dirs::one(tx), base | Func::FC_CONCAT), NOP],
        (_, None) => vec![m(true, Dirs::one(tx), base), NOP],
        (_, Some(p)) => {
            let (acc, emit) = match p.kind {
                crate::nn_model::PoolKind::Max => (Func::MAX, Func::MAX),
                crate::nn_model::PoolKind::Avg => (Func::AVG_ACC, Func::AVG_EMIT),
            };
            (0..p.s)
                .flat_map(|k| {
                    let e = if k + 1 == p.s { m(false, Dirs::one(tx), emit) } else { NOP };
                    [m(true, Dirs::NONE, base | acc), e]
                })
                .collect()
        }
    };
    ScheduleTable::build(&entries, [0, 0], 0, compress)
}

fn check_capacity(t: &ScheduleTable, layer_idx: usize, layer: &LayerSpec, opts: GenOptions) -> Result<(), IsaError> {
    let needed = if opts.compress { t.physical_len() } else { t.period };
    if needed > TABLE_CAPACITY {
        return Err(IsaError::Capacity { layer: layer_idx, w: layer.w, p: layer.p, period: t.period, needed, capacity: TABLE_CAPACITY });
    }
    Ok(())
}

fn fc_program(plan: &BlockPlan, tile: usize, layer: &LayerSpec, grid: (usize, usize), opts: GenOptions) -> Result<TileProgram, IsaError> {
    let (t, a) = (tile % plan.m_t, tile / plan.m_t);
    let last = t + 1 == plan.m_t;
    let mut s0 = CInstr { local: true, sum: SumOp::AddPe, ..Default::default() };
    if t > 0 {
        s0.rx = Some(link(plan, tile, tile - 1));
    }
    if last {
        s0.store = true;
    } else {
        s0.tx = Dirs::one(link(plan, tile, tile + 1));
    }
    let rofm = ScheduleTable::build(&[c(s0), NOP], [(t + a + 2) as u32, 0], 0, opts.compress);
    let cu = if last {
        let port = exit_port(plan.coord(tile), grid).ok_or(IsaError::NoPort { layer: plan.layer, tile })?;
        Some(output_table(layer, port, opts.compress))
    } else {
        None
    };
    Ok(TileProgram { layer: plan.layer, tile, coord: plan.coord(tile), rofm, cu })
}

/// Program of one physical tile of a block.
pub fn gen_schedule(
    plan: &BlockPlan,
    tile: usize,
    layer: &LayerSpec,
    grid: (usize, usize),
    opts: GenOptions,
) -> Result<TileProgram, IsaError> {
    if tile >= plan.tiles {
        return Err(IsaError::NoTile { layer: plan.layer, tile });
    }
    if plan.kind == BlockKind::Fc {
        let prog = fc_program(plan, tile, layer, grid, opts)?;
        check_capacity(&prog.rofm, plan.layer, layer, opts)?;
        return Ok(prog);
    }
    let chain = &plan.chain;
    let n = chain.len();
    let u = tile % n;
    let f_cols = layer.conv_shape().map_or(1, |(_, f)| f);
    let (s, rl) = (layer.s, BlockPlan::row_len(layer));
    let win = |c: usize| c.is_multiple_of(s) && c / s < f_cols;
    let me = &chain[u];
    let has_in = u > 0 && chain[u - 1].group == me.group;
    let wait = if has_in { me.jend - chain[u - 1].jend } else { 0 };
    let dir_in = (u > 0).then(|| link(plan, tile, tile - 1));
    let dir_out = (u + 1 < n).then(|| link(plan, tile, tile + 1));
    let finals: Vec<usize> = (0..n).filter(|&v| chain[v].group_final).collect();
    let last = u + 1 == n;

    let mut entries = vec![NOP; 2 * rl];
    for (cc, slot) in entries[..rl].iter_mut().enumerate() {
        let push = has_in && wait > 0 && win((cc + wait) % rl);
        let mut i = CInstr::default();
        if win(cc) {
            i.local = true;
            i.sum = SumOp::AddPe;
            if has_in {
                if wait > 0 {
                    i.pop = true;
                } else {
                    i.rx = dir_in;
                }
            }
            if me.group_final {
                i.store = true;
            } else {
                i.tx = Dirs::one(dir_out.expect("non-final tile has a successor"));
            }
        }
        if push {
            i.push = true;
            i.rx = dir_in;
        }
        *slot = c(i);
    }
    let f0 = finals[0];
    if u >= f0 {
        let mut i = CInstr::default();
        if u == f0 {
            i.sum = SumOp::AddPe;
        } else if me.group_final {
            i.rx = dir_in;
            i.sum = SumOp::AddPe;
        } else {
            i.rx = dir_in;
            i.sum = SumOp::ForwardRaw;
        }
        if last {
            i.store = true;
        } else {
            i.tx = Dirs::one(dir_out.expect("successor"));
        }
        for cc in (0..rl).filter(|&cc| win(cc)) {
            entries[rl + cc] = c(i);
        }
    }
    let jf = chain[f0].jend;
    let start = [(me.jend + u + 2) as u32, (jf + u + 2) as u32];
    let rofm = ScheduleTable::build(&entries, start, wait as u32, opts.compress);
    check_capacity(&rofm, plan.layer, layer, opts)?;
    let cu = if last {
        let port = exit_port(plan.coord(tile), grid).ok_or(IsaError::NoPort { layer: plan.layer, tile })?;
        let t = output_table(layer, port, opts.compress);
        check_capacity(&t, plan.layer, layer, opts)?;
        Some(t)
    } else {
        None
    };
    Ok(TileProgram { layer: plan.layer, tile, coord: plan.coord(tile), rofm, cu })
}

/// Programs of every physical tile of a block.
pub fn gen_block(plan: &BlockPlan, layer: &LayerSpec, grid: (usize, usize), opts: GenOptions) -> Result<Vec<TileProgram>, IsaError> {
    (0..plan.tiles).map(|t| gen_schedule(plan, t, layer, grid, opts)).collect()
}

pub fn mode_text(mode: SyncMode) -> String {
    match mode {
        SyncMode::FullSync => "full".into(),
        SyncMode::Reuse(r) => format!("reuse {r}"),
    }
}

pub fn parse_mode(s: &str) -> Option<SyncMode> {
    let mut it = s.split_whitespace();
    match (it.next()?, it.next(), it.next()) {
        ("full", None, None) => Some(SyncMode::FullSync),
        ("reuse", Some(r), None) => r.parse().ok().filter(|&r: &usize| r >= 1).map(SyncMode::Reuse),
        _ => None,
    }
}

/// Everything a chip needs to run: source network, chip, mode and every tile program.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub network: NetworkSpec,
    pub chip: ChipConfig,
    pub mode: SyncMode,
    pub map: MapOptions,
    pub compress: bool,
    pub programs: Vec<TileProgram>,
}

pub const BUNDLE_VERSION: &str = "1";

/// Generate programs for all placed blocks.
pub fn compile(
    net: &NetworkSpec,
    plans: &[BlockPlan],
    chip: &ChipConfig,
    mode: SyncMode,
    map: MapOptions,
    opts: GenOptions,
) -> Result<Bundle, IsaError> {
    let mut programs = Vec::new();
    for plan in plans {
        programs.extend(gen_block(plan, &net.layers[plan.layer], (chip.a_r, chip.a_c), opts)?);
    }
    Ok(Bundle { network: net.clone(), chip: *chip, mode, map, compress: opts.compress, programs })
}

fn mask_hex(mask: &[bool]) -> String {
    if mask.is_empty() {
        return "-".into();
    }
    mask.chunks(4)
        .map(|ch| {
            let v = ch.iter().enumerate().fold(0u32, |a, (i, &b)| a | (b as u32) << i);
            char::from_digit(v, 16).expect("nibble")
        })
        .collect()
}

fn table_text(t: &ScheduleTable) -> String {
    let runs: Vec<String> = t.runs.iter().map(|(w, n)| format!("{w:04x}*{n}")).collect();
    format!("{} {} {} {} {} {}", t.period, t.start[0], t.start[1], t.push_lag, mask_hex(&t.mask), runs.join(" "))
}

/// `patch=0|1 layout=auto|column|square`
pub fn map_text(m: MapOptions) -> String {
    let layout = match m.layout {
        None => "auto",
        Some(Layout::Column) => "column",
        Some(Layout::Square) => "square",
    };
    format!("patch={} layout={layout}", m.patch_first as u8)
}

pub fn parse_map(s: &str) -> Option<MapOptions> {
    let mut f = s.split_whitespace();
    let patch_first = match f.next()?.strip_prefix("patch=")? {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    let layout = match f.next()?.strip_prefix("layout=")? {
        "auto" => None,
        "column" => Some(Layout::Column),
        "square" => Some(Layout::Square),
        _ => return None,
    };
    if f.next().is_some() {
        return None;
    }
    Some(MapOptions { patch_first, layout })
}

impl Bundle {
    pub fn to_text(&self) -> String {
        let mut body = String::new();
        let net = self.network.to_string();
        let chip = self.chip.to_text();
        body.push_str(&format!("domino-bundle {BUNDLE_VERSION}\n"));
        body.push_str(&format!("mode {}\n", mode_text(self.mode)));
        body.push_str(&format!("map {}\n", map_text(self.map)));
        body.push_str(&format!("compress {}\n", self.compress as u8));
        body.push_str(&format!("network {}\n{net}", net.lines().count()));
        if !net.ends_with('\n') {
            body.push('\n');
        }
        body.push_str(&format!("chip {}\n{chip}", chip.lines().count()));
        if !chip.ends_with('\n') {
            body.push('\n');
        }
        for p in &self.programs {
            let at = p.coord.map_or("- -".to_string(), |(r, c)| format!("{r} {c}"));
            body.push_str(&format!("tile {} {} {at}\n", p.layer, p.tile));
            body.push_str(&format!("rofm {}\n", table_text(&p.rofm)));
            match &p.cu {
                Some(t) => body.push_str(&format!("cu {}\n", table_text(t))),
                None => body.push_str("cu -\n"),
            }
        }
        let sum = fnv1a64(body.as_bytes());
        body.push_str(&format!("checksum {sum:016x}\n"));
        body
    }

    pub fn from_text(text: &str) -> Result<Bundle, IsaError> {
        let err = |line: usize, msg: &str| IsaError::Bundle { line, msg: msg.to_string() };
        let cut = text.rfind("checksum ").ok_or_else(|| err(0, "missing checksum"))?;
        let (body, tail) = text.split_at(cut);
        let stored =
            u64::from_str_radix(tail["checksum ".len()..].trim(), 16).map_err(|_| err(body.lines().count() + 1, "bad checksum"))?;
        let computed = fnv1a64(body.as_bytes());
        if stored != computed {
            return Err(IsaError::Checksum { stored, computed });
        }
        let lines: Vec<&str> = body.lines().collect();
        let header = |i: usize, want: &str| -> Result<&str, IsaError> {
            lines.get(i).and_then(|l| l.strip_prefix(want)).map(str::trim).ok_or_else(|| err(i + 1, &format!("expected {want}")))
        };
        let ver = header(0, "domino-bundle")?;
        if ver != BUNDLE_VERSION {
            return Err(IsaError::Version(ver.to_string()));
        }
        let mode = parse_mode(header(1, "mode")?).ok_or_else(|| err(2, "bad mode"))?;
        let map = parse_map(header(2, "map")?).ok_or_else(|| err(3, "bad map options"))?;
        let compress = match header(3, "compress")? {
            "0" => false,
            "1" => true,
            _ => return Err(err(4, "bad compress flag")),
        };
        let mut pos = 4usize;
        let section = |name: &str, pos: &mut usize| -> Result<String, IsaError> {
            let n: usize = header(*pos, name)?.parse().map_err(|_| err(*pos + 1, &format!("expected {name} <lines>")))?;
            let start = *pos + 1;
            let end = start + n;
            if end > lines.len() {
                return Err(err(*pos + 1, "section runs past end"));
            }
            *pos = end;
            Ok(lines[start..end].join("\n"))
        };
        let net_line = pos + 1;
        let net_text = section("network", &mut pos)?;
        let network = crate::nn_model::parse_network(&net_text).map_err(|e| err(net_line, &e.to_string()))?;
        let chip_line = pos + 1;
        let chip_text = section("chip", &mut pos)?;
        let chip = ChipConfig::parse(&chip_text).map_err(|e| err(chip_line, &e.to_string()))?;
        let mut programs = Vec::new();
        while pos < lines.len() {
            let ln = pos + 1;
            let head: Vec<&str> = lines[pos].strip_prefix("tile ").ok_or_else(|| err(ln, "expected tile"))?.split_whitespace().collect();
            if head.len() != 4 {
                return Err(err(ln, "tile needs layer, id and coordinates"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(ln, "bad number"));
            let coord = if head[2] == "-" { None } else { Some((num(head[2])?, num(head[3])?)) };
            let rofm_line = lines.get(pos + 1).ok_or_else(|| err(ln + 1, "missing rofm"))?;
            let rofm =
                parse_table(rofm_line.strip_prefix("rofm ").ok_or_else(|| err(ln + 1, "expected rofm"))?).map_err(|m| err(ln + 1, &m))?;
            let cu_line = lines.get(pos + 2).ok_or_else(|| err(ln + 2, "missing cu"))?;
            let cu_rest = cu_line.strip_prefix("cu ").ok_or_else(|| err(ln + 2, "expected cu"))?;
            let cu = if cu_rest.trim() == "-" { None } else { Some(parse_table(cu_rest).map_err(|m| err(ln + 2, &m))?) };
            programs.push(TileProgram { layer: num(head[0])?, tile: num(head[1])?, coord, rofm, cu });
            pos += 3;
        }
        Ok(Bundle { network, chip, mode, map, compress, programs })
    }
}

fn parse_table(s: &str) -> Result<ScheduleTable, String> {
    let f: Vec<&str> = s.split_whitespace().collect();
    if f.len() < 5 {
        return Err("table needs period, starts, lag and mask".into());
    }
    let num = |x: &str| x.parse::<u32>().map_err(|_| format!("bad number {x}"));
    let period = num(f[0])? as usize;
    let start = [num(f[1])?, num(f[2])?];
    let push_lag = num(f[3])?;
    let mut mask = Vec::with_capacity(period);
    if f[4] != "-" {
        for ch in f[4].chars() {
            let v = ch.to_digit(16).ok_or_else(|| format!("bad mask digit {ch}"))?;
            for b in 0..4 {
                mask.push(v & (1 << b) != 0);
            }
        }
    }
    mask.truncate(period);
    if mask.len() != period {
        return Err("mask length does not match period".into());
    }
    let mut runs = Vec::new();
    for r in &f[5..] {
        let (w, n) = r.split_once('*').ok_or_else(|| format!("bad run {r}"))?;
        let w = u16::from_str_radix(w, 16).map_err(|_| format!("bad word {w}"))?;
        let n: u16 = n.parse().map_err(|_| format!("bad repeat {n}"))?;
        if n == 0 {
            return Err("zero repeat".into());
        }
        runs.push((w, n));
    }
    if runs.iter().map(|r| r.1 as usize).sum::<usize>() != period {
        return Err("runs do not cover the period".into());
    }
    Ok(ScheduleTable { period, runs, start, push_lag, mask })
}

/// Aligned listing, one logical entry per line.
pub fn disassemble(bundle: &Bundle) -> String {
    let mut s = String::new();
    for p in &bundle.programs {
        let at = p.coord.map_or("unplaced".to_string(), |(r, c)| format!("({r},{c})"));
        s.push_str(&format!(
            "; layer {} tile {} at {at} period {} start {}/{} lag {} runs {}\n",
            p.layer,
            p.tile,
            p.rofm.period,
            p.rofm.start[0],
            p.rofm.start[1],
            p.rofm.push_lag,
            p.rofm.physical_len()
        ));
        list_table(&mut s, &p.rofm);
        if let Some(cu) = &p.cu {
            s.push_str(&format!("; computation unit period {}\n", cu.period));
            list_table(&mut s, cu);
        }
    }
    s
}

fn list_table(s: &mut String, t: &ScheduleTable) {
    for (i, (w, m)) in t.words().iter().zip(&t.mask).enumerate() {
        if *m {
            s.push_str(&format!("{i:5}  ----    skip\n"));
        } else {
            s.push_str(&format!("{i:5}  {w:04x}    {}\n", decode(*w)));
        }
    }
}
