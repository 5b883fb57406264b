//! Cycle-level execution of a compiled chip.
//!
//! Every layer runs as one block. A block advances one tick per global step
//! when each active lane can obtain its next stream element; otherwise the
//! whole block holds and the step counts as a stall. Within a tick the Rofm
//! of each tile first executes its two table slots against registers written
//! in the previous tick, then the PE evaluates the window its Rifm completed,
//! then the Rifm latches the next element. Results leaving a block land in the
//! consumer's input queue at the end of the step.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;

use thiserror::Error;

use crate::isa::{self, CInstr, Func, Instruction, IsaError, MInstr, SumOp, TileProgram};
use crate::mapper::{self, BlockKind, BlockPlan, MapError, MapOptions, SyncMode};
use crate::nn_model::{ChipConfig, LayerSpec, ModelError, NetworkParams, NetworkSpec, PoolKind, QuantTensor};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("layer {layer} tile {tile}: Rofm buffer needs {bytes} B, capacity {capacity} B")]
    Overflow { layer: usize, tile: usize, bytes: usize, capacity: usize },
    #[error("layer {layer} tile {tile}: Rifm window needs {bytes} B, capacity {capacity} B")]
    RifmOverflow { layer: usize, tile: usize, bytes: usize, capacity: usize },
    #[error("layer {layer} tile {tile}: invalid instruction word {word:#06x}")]
    Invalid { layer: usize, tile: usize, word: u16 },
    #[error("layer {layer} tile {tile} step {step}: missing {what}")]
    MissingPacket { layer: usize, tile: usize, step: u64, what: &'static str },
    #[error("layer {layer} tile {tile} step {step}: {what} never consumed")]
    LostPacket { layer: usize, tile: usize, step: u64, what: &'static str },
    #[error("layer {layer} tile {tile}: port {dir:?} does not reach the next tile")]
    Route { layer: usize, tile: usize, dir: isa::Dir },
    #[error("no result after {steps} steps ({state})")]
    NonTermination { steps: u64, state: String },
}

/// Event counts collected during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleStats {
    pub steps: u64,
    pub macs: u64,
    pub pe_activations: u64,
    /// Rifm buffer bytes written by latches and read by PEs.
    pub rifm_bytes: u64,
    /// Rofm data-buffer bytes pushed, popped, accumulated and queued between blocks.
    pub rofm_bytes: u64,
    pub sched_reads: u64,
    /// Packet transfers through tile I/O registers, counted once at each end.
    pub io_accesses: u64,
    pub link_beats: u64,
    /// Link-steps asked to carry more beats than one step allows.
    pub over_commit: u64,
    pub adder_bytes: u64,
    pub pool_bytes: u64,
    pub act_bytes: u64,
    /// Tile-ticks with an active Rifm.
    pub rifm_ctrl: u64,
    /// Tile-ticks with an active Rofm.
    pub rofm_ctrl: u64,
    pub block_ticks: Vec<u64>,
    pub block_stalls: Vec<u64>,
    /// Step at which each image's final result was complete.
    pub completion: Vec<u64>,
}

impl CycleStats {
    /// Steady-state steps between results: the median gap between consecutive completions.
    /// The last images drain without waiting on a producer, so short runs understate it.
    pub fn interval(&self) -> Option<u64> {
        let mut gaps: Vec<u64> = self.completion.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_unstable();
        Some(gaps[gaps.len() / 2])
    }

    pub fn stalls(&self) -> u64 {
        self.block_stalls.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum TraceLevel {
    /// Nothing recorded.
    Off,
    /// Only the running hash.
    #[default]
    Hash,
    /// Hash plus group-sum events.
    Events,
    /// Everything, including the text lines.
    Full,
}

/// A completed group sum observed at a group-final tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSumEvent {
    pub step: u64,
    pub layer: usize,
    pub image: usize,
    pub lane: usize,
    pub filters: Range<usize>,
    pub group: usize,
    /// Window index x·F + y.
    pub window: usize,
    pub values: Vec<i32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub level: TraceLevel,
    pub hash: u64,
    pub lines: Vec<String>,
    pub group_sums: Vec<GroupSumEvent>,
}

impl Trace {
    fn new(level: TraceLevel) -> Self {
        Trace { level, hash: 0xcbf2_9ce4_8422_2325, ..Default::default() }
    }

    fn record(&mut self, step: u64, layer: usize, tile: usize, action: &str, values: &[i32]) {
        if self.level == TraceLevel::Off {
            return;
        }
        let mut vh: u64 = 0xcbf2_9ce4_8422_2325;
        for v in values {
            for b in v.to_le_bytes() {
                vh = (vh ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        let line = format!("{step} {layer}.{tile} {action} {vh:016x}");
        for b in line.bytes().chain(std::iter::once(b'\n')) {
            self.hash = (self.hash ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        if self.level == TraceLevel::Full {
            self.lines.push(line);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub chip: ChipConfig,
    pub mode: SyncMode,
    pub map: MapOptions,
    pub gen: isa::GenOptions,
    pub max_steps: u64,
    pub trace: TraceLevel,
    /// Count events and time them without carrying values.
    pub timing_only: bool,
    /// Images a producer may run ahead of its consumer, on top of what its
    /// pipeline latency requires.
    pub queue_depth: usize,
}

impl SimConfig {
    pub fn new(chip: ChipConfig, mode: SyncMode) -> Self {
        SimConfig {
            chip,
            mode,
            map: MapOptions::default(),
            gen: isa::GenOptions::default(),
            max_steps: 10_000_000,
            trace: TraceLevel::Hash,
            timing_only: false,
            queue_depth: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    /// Final layer output per image.
    pub outputs: Vec<QuantTensor>,
    pub stats: CycleStats,
    pub trace: Trace,
    pub plans: Vec<BlockPlan>,
    pub sync: mapper::SyncPlan,
}

/// A block's input queue: images assembled pixel by pixel from producer packets.
#[derive(Debug, Clone)]
struct Landing {
    c: usize,
    h: usize,
    w: usize,
    timing_only: bool,
    images: BTreeMap<usize, LandingImage>,
}

#[derive(Debug, Clone)]
struct LandingImage {
    data: Vec<i32>,
    /// Channels received per pixel.
    got: Vec<usize>,
    complete: usize,
}

impl Landing {
    fn new(shape: (usize, usize, usize), timing_only: bool) -> Self {
        let (h, w, c) = shape;
        Landing { c, h, w, timing_only, images: BTreeMap::new() }
    }

    fn image(&mut self, img: usize) -> &mut LandingImage {
        let (n, px, timing) = (self.c * self.h * self.w, self.h * self.w, self.timing_only);
        self.images.entry(img).or_insert_with(|| LandingImage {
            data: if timing { Vec::new() } else { vec![0; n] },
            got: vec![0; px],
            complete: 0,
        })
    }

    fn present(&self, img: usize, r: usize, c: usize) -> bool {
        self.images.get(&img).is_some_and(|i| i.got[r * self.w + c] == self.c)
    }

    fn value(&self, img: usize, ch: usize, r: usize, c: usize) -> i32 {
        self.images.get(&img).map_or(0, |i| i.data[(ch * self.h + r) * self.w + c])
    }

    fn complete(&self, img: usize) -> bool {
        self.images.get(&img).is_some_and(|i| i.complete == self.h * self.w)
    }

    /// Store channels `ch` of pixel (r, c); returns true when the image is complete.
    fn deposit(&mut self, img: usize, r: usize, c: usize, ch: Range<usize>, vals: &[i32]) -> bool {
        let (h, w, cc) = (self.h, self.w, self.c);
        let im = self.image(img);
        if !vals.is_empty() {
            for (k, chan) in ch.clone().enumerate() {
                im.data[(chan * h + r) * w + c] = vals[k];
            }
        }
        let px = r * w + c;
        im.got[px] += ch.len();
        if im.got[px] == cc {
            im.complete += 1;
        }
        im.complete == h * w
    }

    fn tensor(&self, img: usize) -> Option<QuantTensor> {
        let im = self.images.get(&img)?;
        let vals = if self.timing_only { vec![0; self.c * self.h * self.w] } else { im.data.clone() };
        QuantTensor::chw(self.c, self.h, self.w, vals).ok()
    }
}

/// One input run a tile gathers from a stream element.
#[derive(Debug, Clone)]
struct Gather {
    /// Element offset from the window start.
    offset: usize,
    range: Range<usize>,
}

#[derive(Debug, Clone)]
struct TileRt {
    phys: usize,
    lane: usize,
    f: usize,
    u: usize,
    /// Rifm delay from the stream head.
    lat: usize,
    jend: usize,
    group: usize,
    group_final: bool,
    last: bool,
    rifm_bytes: usize,
    inbox: [Option<Vec<i32>>; 2],
    outbox: [Option<Vec<i32>>; 2],
    pe_ready: Option<Vec<i32>>,
    pe_next: Option<Vec<i32>>,
    pe_reg: Option<Vec<i32>>,
    fifo: VecDeque<Vec<i32>>,
}

/// Decoded program of one physical tile.
#[derive(Debug, Clone)]
struct TableRt {
    slots: Vec<Instruction>,
    start: [i64; 2],
    lag: i64,
    cu: Vec<Instruction>,
}

#[derive(Debug, Clone)]
struct Lane {
    rows: Vec<usize>,
    ring: VecDeque<Option<Vec<i32>>>,
    ring_base: usize,
    /// Pool accumulators per filter slice, indexed [v * width + m].
    acc: Vec<Vec<i32>>,
}

struct Emission {
    image: usize,
    r: usize,
    c: usize,
    ch: Range<usize>,
    values: Vec<i32>,
}

struct Block {
    idx: usize,
    layer: LayerSpec,
    plan: BlockPlan,
    fc: bool,
    patch: bool,
    in_shape: (usize, usize, usize),
    r_len: usize,
    f_out: usize,
    /// Conv rows per lane frame.
    rows_frame: usize,
    n_chain: usize,
    lanes: Vec<Lane>,
    tiles: Vec<TileRt>,
    tables: Vec<TableRt>,
    gathers: Vec<Vec<Gather>>,
    weights: Vec<Vec<Vec<i32>>>,
    bias: Vec<i32>,
    coords: Vec<Option<(usize, usize)>>,
    static_bytes: Vec<usize>,
    dyn_bytes: Vec<usize>,
    tau: u64,
    landing: Landing,
    emitted: Vec<usize>,
    expected: usize,
    done_images: usize,
    consumed: usize,
    ring_keep: usize,
    rofm_cap: usize,
    /// FC only: image fed at each stream index, None for a bubble.
    fc_feed: Vec<Option<usize>>,
    /// Decision for the coming tick: Some(feed) to tick, None to hold.
    go: Option<Option<usize>>,
    drain: usize,
    last_feed: Option<usize>,
}

fn lost(layer: usize, tile: usize, step: u64, what: &'static str) -> SimError {
    SimError::LostPacket { layer, tile, step, what }
}

fn missing(layer: usize, tile: usize, step: u64, what: &'static str) -> SimError {
    SimError::MissingPacket { layer, tile, step, what }
}

fn beats(bits: usize, link_width: usize) -> u64 {
    bits.div_ceil(link_width.max(1)) as u64
}

fn add(a: &[i32], b: &[i32]) -> Vec<i32> {
    a.iter().zip(b).map(|(x, y)| x.wrapping_add(*y)).collect()
}

fn round_half_away(num: i64, den: i64) -> i64 {
    let q = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -q
    } else {
        q
    }
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        idx: usize,
        layer: &LayerSpec,
        plan: &BlockPlan,
        programs: &[&TileProgram],
        params: Option<&crate::nn_model::LayerParams>,
        in_shape: (usize, usize, usize),
        chip: &ChipConfig,
        timing_only: bool,
    ) -> Result<Block, SimError> {
        let fc = plan.kind == BlockKind::Fc;
        let patch = matches!(plan.kind, BlockKind::Conv { patch: true, .. });
        if let Some(p) = layer.pool {
            if p.k != p.s {
                return Err(SimError::Unsupported(format!("layer {idx}: pooling window {} with stride {}", p.k, p.s)));
            }
        }
        let (r_len, f_out) = if fc { (1, 1) } else { (BlockPlan::row_len(layer), layer.conv_shape()?.1) };
        let n = if fc { plan.m_t } else { plan.chain.len() };
        let fs = plan.filter_slices.len();
        let lanes_n = if fc { 1 } else { plan.active_lanes(layer) };
        let rows_frame = if fc { 1 } else { plan.frame_ticks(layer) / r_len };
        let (fp, accb) = match layer.pool {
            Some(p) => (f_out / p.s, if p.kind == PoolKind::Max { 1 } else { 2 }),
            None => (0, 0),
        };
        let lanes: Vec<Lane> = (0..lanes_n)
            .map(|l| Lane {
                rows: if fc { vec![0] } else { plan.lane_rows(layer, l) },
                ring: VecDeque::new(),
                ring_base: 0,
                acc: plan.filter_slices.iter().map(|fr| vec![0; fp * fr.len()]).collect(),
            })
            .collect();

        let mut gathers = Vec::with_capacity(n);
        let mut rifm = Vec::with_capacity(n);
        for u in 0..n {
            let mut g = Vec::new();
            if fc {
                g.push(Gather { offset: 0, range: plan.input_slices[u].clone() });
                rifm.push((plan.input_slices[u].len(), plan.input_slices[u].len()));
            } else {
                let t = &plan.chain[u];
                for sg in &t.segs {
                    let (offset, start) =
                        if patch { (0, (sg.i * layer.k + sg.j) * layer.c + sg.c0) } else { (sg.j, sg.i * layer.c + sg.c0) };
                    g.push(Gather { offset, range: start..start + (sg.c1 - sg.c0) });
                }
                let per = if patch { t.rows() } else { t.segs[0].c1 - t.segs[0].c0 };
                rifm.push((per, if patch { per } else { per * t.span }));
            }
            gathers.push(g);
        }

        let weights: Vec<Vec<Vec<i32>>> = match params {
            None => vec![vec![Vec::new(); n]; fs],
            Some(p) => plan
                .filter_slices
                .iter()
                .map(|fr| {
                    (0..n)
                        .map(|u| {
                            let mut w = Vec::new();
                            for m in fr.clone() {
                                if fc {
                                    for ch in plan.input_slices[u].clone() {
                                        w.push(p.weights.values[ch * layer.m + m]);
                                    }
                                } else {
                                    for sg in &plan.chain[u].segs {
                                        for ch in sg.c0..sg.c1 {
                                            w.push(p.weights.at(&[m, ch, sg.i, sg.j]));
                                        }
                                    }
                                }
                            }
                            w
                        })
                        .collect()
                })
                .collect(),
        };
        let bias = params.map_or_else(|| vec![0; layer.m], |p| p.bias.values.clone());

        let mut tables: Vec<Option<TableRt>> = vec![None; plan.tiles];
        for prog in programs {
            let tile = prog.tile;
            let decode_all = |t: &isa::ScheduleTable| -> Result<Vec<Instruction>, SimError> {
                t.entries()
                    .into_iter()
                    .map(|i| match i {
                        Instruction::Invalid(word) => Err(SimError::Invalid { layer: idx, tile, word }),
                        ok => Ok(ok),
                    })
                    .collect()
            };
            let slots = decode_all(&prog.rofm)?;
            if slots.len() != 2 * r_len {
                return Err(SimError::Unsupported(format!("layer {idx} tile {tile}: table period {} for row length {r_len}", slots.len())));
            }
            let cu = match &prog.cu {
                Some(c) => decode_all(c)?,
                None => Vec::new(),
            };
            if tile < tables.len() {
                tables[tile] = Some(TableRt {
                    slots,
                    start: [prog.rofm.start[0] as i64, prog.rofm.start[1] as i64],
                    lag: prog.rofm.push_lag as i64,
                    cu,
                });
            }
        }
        let tables: Vec<TableRt> = tables
            .into_iter()
            .enumerate()
            .map(|(t, x)| x.ok_or(SimError::Isa(IsaError::NoTile { layer: idx, tile: t })))
            .collect::<Result<_, _>>()?;
        let coords: Vec<Option<(usize, usize)>> = (0..plan.tiles).map(|t| plan.coord(t)).collect();

        let mut tiles = Vec::with_capacity(lanes_n * fs * n);
        let mut static_bytes = vec![0usize; plan.tiles];
        for lane in 0..lanes_n {
            for f in 0..fs {
                #[allow(clippy::needless_range_loop)]
                for u in 0..n {
                    let phys = if fc { f * plan.m_t + u } else { plan.physical(lane, f, u) };
                    let (lat, jend, group, group_final) = if fc {
                        (u + f, 0, 0, u + 1 == n)
                    } else {
                        let t = &plan.chain[u];
                        (u, t.jend, t.group, t.group_final)
                    };
                    let width = plan.filter_slices[f].len();
                    if group_final || u + 1 == n {
                        static_bytes[phys] += 4 * width;
                    }
                    if u + 1 == n {
                        static_bytes[phys] += fp * width * accb;
                    }
                    let (per, window) = rifm[u];
                    if window > chip.pe.n_c {
                        return Err(SimError::RifmOverflow { layer: idx, tile: phys, bytes: window, capacity: chip.pe.n_c });
                    }
                    tiles.push(TileRt {
                        phys,
                        lane,
                        f,
                        u,
                        lat,
                        jend,
                        group,
                        group_final,
                        last: u + 1 == n,
                        rifm_bytes: per,
                        inbox: [None, None],
                        outbox: [None, None],
                        pe_ready: None,
                        pe_next: None,
                        pe_reg: None,
                        fifo: VecDeque::new(),
                    });
                }
            }
        }
        for (t, &b) in static_bytes.iter().enumerate() {
            if b > chip.rofm_buffer {
                return Err(SimError::Overflow { layer: idx, tile: t, bytes: b, capacity: chip.rofm_buffer });
            }
        }
        let expected = if fc {
            layer.m
        } else {
            let (e, f, m) = layer.output_shape()?;
            e * f * m
        };
        let k = if fc { 1 } else { layer.k };
        let mut block = Block {
            idx,
            layer: layer.clone(),
            plan: plan.clone(),
            fc,
            patch,
            in_shape,
            r_len,
            f_out,
            rows_frame,
            n_chain: n,
            lanes,
            tiles,
            tables,
            gathers,
            weights,
            bias,
            coords,
            dyn_bytes: vec![0; plan.tiles],
            static_bytes,
            tau: 0,
            landing: Landing::new(in_shape, timing_only),
            emitted: Vec::new(),
            expected,
            done_images: 0,
            consumed: 0,
            ring_keep: n + plan.m_a + k + 4,
            rofm_cap: chip.rofm_buffer,
            fc_feed: Vec::new(),
            go: None,
            drain: 0,
            last_feed: None,
        };
        block.check_routes()?;
        block.drain = block.tables.iter().map(|t| t.start[0].max(t.start[1]) as usize + 2).max().unwrap_or(2);
        Ok(block)
    }

    /// Every tx must reach the successor and every rx must face the predecessor.
    fn check_routes(&self) -> Result<(), SimError> {
        let n = self.n_chain;
        for t in self.tiles.iter().filter(|t| t.lane == 0 || self.plan.in_tile_dup <= 1) {
            let me = self.coords[t.phys];
            let succ = (t.u + 1 < n).then(|| self.coords[t.phys + 1]);
            let pred = (t.u > 0).then(|| self.coords[t.phys - 1]);
            for ins in &self.tables[t.phys].slots {
                let Instruction::C(c) = ins else {
                    if ins.is_nop() {
                        continue;
                    }
                    return Err(SimError::Invalid { layer: self.idx, tile: t.phys, word: isa::encode(ins) });
                };
                for d in c.tx.iter() {
                    let ok = matches!((me, succ), (Some(a), Some(Some(b))) if isa::Dir::between(a, b) == Some(d))
                        || (me.is_none() && succ.is_some());
                    if !ok {
                        return Err(SimError::Route { layer: self.idx, tile: t.phys, dir: d });
                    }
                }
                if let Some(d) = c.rx {
                    let ok = matches!((me, pred), (Some(a), Some(Some(b))) if isa::Dir::between(a, b) == Some(d))
                        || (me.is_none() && pred.is_some());
                    if !ok {
                        return Err(SimError::Route { layer: self.idx, tile: t.phys, dir: d });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shared mutable state handed to a ticking block.
struct Ctx<'a> {
    step: u64,
    n_images: usize,
    timing_only: bool,
    link_width: usize,
    beats_per_step: u64,
    stats: &'a mut CycleStats,
    trace: &'a mut Trace,
    out: &'a mut Vec<Emission>,
}

impl Block {
    /// Image and output row of lane-local row `q`, if it carries work.
    fn row(&self, lane: usize, q: i64, n_images: usize) -> Option<(usize, usize)> {
        if q < 0 {
            return None;
        }
        let q = q as usize;
        if self.fc {
            return self.fc_feed.get(q).copied().flatten().map(|img| (img, 0));
        }
        let (img, qf) = (q / self.rows_frame, q % self.rows_frame);
        let rows = &self.lanes[lane].rows;
        (img < n_images && qf < rows.len()).then(|| (img, rows[qf]))
    }

    fn is_window(&self, c: usize) -> bool {
        self.fc || (c.is_multiple_of(self.layer.s) && c / self.layer.s < self.f_out)
    }

    /// Input pixels an element needs, or None for an all-padding element.
    fn element_pixels(&self, lane: usize, sigma: usize, n_images: usize) -> Option<(usize, Vec<(usize, usize)>)> {
        let (img, x) = self.row(lane, (sigma / self.r_len) as i64, n_images)?;
        if self.fc {
            return Some((img, Vec::new()));
        }
        let c = sigma % self.r_len;
        let (h, w, _) = self.in_shape;
        let (k, s, p) = (self.layer.k, self.layer.s, self.layer.p);
        let mut px = Vec::new();
        let cols: Vec<usize> = if self.patch {
            if !self.is_window(c) {
                return None;
            }
            (0..k).filter_map(|j| (c + j).checked_sub(p)).filter(|&col| col < w).collect()
        } else {
            match c.checked_sub(p) {
                Some(col) if col < w => vec![col],
                _ => return None,
            }
        };
        for i in 0..k {
            let Some(r) = (x * s + i).checked_sub(p) else { continue };
            if r >= h {
                continue;
            }
            for &col in &cols {
                px.push((r, col));
            }
        }
        Some((img, px))
    }

    /// Ticks per image.
    fn frame(&self) -> usize {
        self.rows_frame * self.r_len
    }

    /// Ticks from the end of an image's stream to its last result.
    fn latency(&self) -> usize {
        self.drain + self.r_len
    }

    /// Whether the block can tick this step, and what an FC block feeds.
    fn decide(&mut self, limit: usize, n_images: usize) {
        let sigma = self.tau as usize;
        self.go = if self.fc {
            let next = self.consumed;
            if next < n_images && next < limit && self.landing.complete(next) {
                Some(Some(next))
            } else if self.last_feed.is_some_and(|last| sigma < last + self.drain) {
                Some(None)
            } else {
                None
            }
        } else {
            let ok = (0..self.lanes.len()).all(|l| match self.element_pixels(l, sigma, n_images) {
                None => true,
                Some((img, px)) => img < limit && px.iter().all(|&(r, c)| self.landing.present(img, r, c)),
            });
            ok.then_some(None)
        };
    }

    fn build_element(&self, lane: usize, sigma: usize, n_images: usize, timing_only: bool) -> Option<Vec<i32>> {
        let (img, _) = self.element_pixels(lane, sigma, n_images)?;
        if timing_only {
            return Some(Vec::new());
        }
        let (h, w, cin) = self.in_shape;
        if self.fc {
            let im = self.landing.images.get(&img)?;
            return Some(im.data.clone());
        }
        let (_, x) = self.row(lane, (sigma / self.r_len) as i64, n_images)?;
        let c = sigma % self.r_len;
        let (k, s, p) = (self.layer.k, self.layer.s, self.layer.p);
        let pix = |r: usize, col: usize, ch: usize| -> i32 {
            match ((x * s + r).checked_sub(p), col.checked_sub(p)) {
                (Some(rr), Some(cc)) if rr < h && cc < w => self.landing.value(img, ch, rr, cc),
                _ => 0,
            }
        };
        let mut e = Vec::new();
        if self.patch {
            e.reserve(k * k * cin);
            for i in 0..k {
                for j in 0..k {
                    for ch in 0..cin {
                        e.push(pix(i, c + j, ch));
                    }
                }
            }
        } else {
            e.reserve(k * cin);
            for i in 0..k {
                for ch in 0..cin {
                    e.push(pix(i, c, ch));
                }
            }
        }
        Some(e)
    }

    fn element(&self, lane: usize, sigma: usize) -> Option<&Vec<i32>> {
        let l = &self.lanes[lane];
        sigma.checked_sub(l.ring_base).and_then(|i| l.ring.get(i)).and_then(|e| e.as_ref())
    }

    fn pe_eval(&self, ti: usize, ctx: &mut Ctx) -> Option<Vec<i32>> {
        let t = &self.tiles[ti];
        let start = self.tau as i64 - 1 - t.lat as i64 - t.jend as i64;
        if start < 0 {
            return None;
        }
        let (q, c) = (start / self.r_len as i64, start as usize % self.r_len);
        if !self.is_window(c) {
            return None;
        }
        self.row(t.lane, q, ctx.n_images)?;
        let width = self.plan.filter_slices[t.f].len();
        let rows: usize = self.gathers[t.u].iter().map(|g| g.range.len()).sum();
        ctx.stats.macs += (rows * width) as u64;
        ctx.stats.pe_activations += 1;
        ctx.stats.rifm_bytes += rows as u64;
        if ctx.timing_only {
            return Some(Vec::new());
        }
        let mut x = Vec::with_capacity(rows);
        for g in &self.gathers[t.u] {
            match self.element(t.lane, start as usize + g.offset) {
                Some(e) => x.extend_from_slice(&e[g.range.clone()]),
                None => x.extend(std::iter::repeat_n(0, g.range.len())),
            }
        }
        let w = &self.weights[t.f][t.u];
        let out = (0..width)
            .map(|m| w[m * rows..(m + 1) * rows].iter().zip(&x).fold(0i32, |a, (wv, xv)| a.wrapping_add(wv.wrapping_mul(*xv))))
            .collect();
        Some(out)
    }

    fn tick(&mut self, ctx: &mut Ctx) -> Result<(), SimError> {
        let sigma = self.tau as usize;
        if self.fc {
            let feed = self.go.flatten();
            self.fc_feed.push(feed);
            if feed.is_some() {
                self.consumed += 1;
                self.last_feed = Some(sigma);
            }
        }
        for l in 0..self.lanes.len() {
            let e = self.build_element(l, sigma, ctx.n_images, ctx.timing_only);
            let keep = self.ring_keep;
            let lane = &mut self.lanes[l];
            if lane.ring.is_empty() {
                lane.ring_base = sigma;
            }
            lane.ring.push_back(e);
            while lane.ring.len() > keep {
                lane.ring.pop_front();
                lane.ring_base += 1;
            }
        }
        for ti in 0..self.tiles.len() {
            self.rofm(ti, ctx)?;
        }
        for ti in 0..self.tiles.len() {
            let t = &self.tiles[ti];
            if t.pe_ready.is_some() {
                return Err(lost(self.idx, t.phys, ctx.step, "PE result"));
            }
            if t.inbox.iter().any(|b| b.is_some()) {
                return Err(lost(self.idx, t.phys, ctx.step, "incoming packet"));
            }
        }
        for ti in 0..self.tiles.len() {
            let r = self.pe_eval(ti, ctx);
            self.tiles[ti].pe_next = r;
            let t = &self.tiles[ti];
            if let Some(s) = (self.tau as usize).checked_sub(t.lat) {
                let valid = self.element(t.lane, s).is_some();
                if valid {
                    ctx.stats.rifm_ctrl += 1;
                    ctx.stats.rifm_bytes += t.rifm_bytes as u64;
                }
            }
        }
        let n = self.n_chain;
        for ti in 0..self.tiles.len() {
            let t = &mut self.tiles[ti];
            t.pe_ready = t.pe_next.take();
        }
        for ti in (0..self.tiles.len()).rev() {
            let u = self.tiles[ti].u;
            let outs = [self.tiles[ti].outbox[0].take(), self.tiles[ti].outbox[1].take()];
            if outs.iter().all(|o| o.is_none()) {
                continue;
            }
            if u + 1 >= n {
                return Err(lost(self.idx, self.tiles[ti].phys, ctx.step, "packet past the block end"));
            }
            self.tiles[ti + 1].inbox = outs;
        }
        self.tau += 1;
        if !self.fc {
            self.consumed = self.tau as usize / (self.rows_frame * self.r_len);
        }
        Ok(())
    }
}

impl Block {
    fn count_packet(&self, width: usize, bits_per: usize, ctx: &mut Ctx) -> u64 {
        ctx.stats.io_accesses += 2;
        let b = beats(width * bits_per, ctx.link_width);
        ctx.stats.link_beats += b;
        b
    }

    fn rofm(&mut self, ti: usize, ctx: &mut Ctx) -> Result<(), SimError> {
        let (phys, lane, f) = {
            let t = &self.tiles[ti];
            (t.phys, t.lane, t.f)
        };
        let width = self.plan.filter_slices[f].len();
        let r = self.r_len as i64;
        let mut active = false;
        let mut link_beats = 0u64;
        for slot in 0..2 {
            let tab = &self.tables[phys];
            let lag = if slot == 0 { tab.lag } else { 0 };
            let t = self.tau as i64 - tab.start[slot];
            if t + lag < 0 {
                continue;
            }
            let (q, c) = (t.div_euclid(r), t.rem_euclid(r) as usize);
            let ins = tab.slots[slot * self.r_len + c];
            let ci = match ins {
                Instruction::C(ci) if !ins.is_nop() => ci,
                _ if ins.is_nop() => continue,
                _ => return Err(SimError::Invalid { layer: self.idx, tile: phys, word: isa::encode(&ins) }),
            };
            ctx.stats.sched_reads += 1;
            let main = self.row(lane, q, ctx.n_images);
            let push_ok = ci.push && self.row(lane, (t + lag).div_euclid(r), ctx.n_images).is_some();
            if main.is_none() && !push_ok {
                continue;
            }
            active = true;
            let mut nin = None;
            if ci.rx.is_some() && ((ci.push && push_ok) || (!ci.push && main.is_some())) {
                nin = Some(self.tiles[ti].inbox[slot].take().ok_or_else(|| missing(self.idx, phys, ctx.step, "neighbour packet"))?);
            }
            if ci.push && push_ok {
                let v = nin.take().expect("pushed packet");
                self.tiles[ti].fifo.push_back(v);
                ctx.stats.rofm_bytes += 4 * width as u64;
                self.dyn_bytes[phys] += 4 * width;
                let total = self.dyn_bytes[phys] + self.static_bytes[phys];
                if total > self.rofm_cap {
                    return Err(SimError::Overflow { layer: self.idx, tile: phys, bytes: total, capacity: self.rofm_cap });
                }
            }
            let Some((img, x)) = main else { continue };
            let popped = if ci.pop {
                let v = self.tiles[ti].fifo.pop_front().ok_or_else(|| missing(self.idx, phys, ctx.step, "queued partial sum"))?;
                ctx.stats.rofm_bytes += 4 * width as u64;
                self.dyn_bytes[phys] -= 4 * width;
                Some(v)
            } else {
                None
            };
            let out = self.sum_op(ti, &ci, nin, popped, width, ctx)?;
            let Some(out) = out else { continue };
            ctx.trace.record(ctx.step, self.idx, phys, if slot == 0 { "s0" } else { "s1" }, &out);
            if ci.store {
                let tile = &self.tiles[ti];
                if slot == 0 && tile.group_final && !self.fc && !self.patch && ctx.trace.level >= TraceLevel::Events {
                    let y = c / self.layer.s;
                    ctx.trace.group_sums.push(GroupSumEvent {
                        step: ctx.step,
                        layer: self.idx,
                        image: img,
                        lane,
                        filters: self.plan.filter_slices[f].clone(),
                        group: tile.group,
                        window: x * self.f_out + y,
                        values: out.clone(),
                    });
                }
                self.tiles[ti].pe_reg = Some(out.clone());
                if slot == 1 && self.tiles[ti].last || (self.fc && self.tiles[ti].last) {
                    self.computation_unit(ti, img, x, c, &out, ctx)?;
                }
            }
            if !ci.tx.is_empty() {
                link_beats += self.count_packet(width, 32, ctx);
                self.tiles[ti].outbox[slot] = Some(out);
            }
        }
        if active {
            ctx.stats.rofm_ctrl += 1;
        }
        if link_beats > ctx.beats_per_step {
            ctx.stats.over_commit += 1;
        }
        Ok(())
    }

    fn sum_op(
        &mut self,
        ti: usize,
        ci: &CInstr,
        nin: Option<Vec<i32>>,
        popped: Option<Vec<i32>>,
        width: usize,
        ctx: &mut Ctx,
    ) -> Result<Option<Vec<i32>>, SimError> {
        let phys = self.tiles[ti].phys;
        let adder = 4 * width as u64;
        Ok(match ci.sum {
            SumOp::None => None,
            SumOp::ForwardRaw => popped.or(nin),
            SumOp::AddPopped => {
                ctx.stats.adder_bytes += adder;
                let (a, b) = (popped.unwrap_or_default(), nin.unwrap_or_default());
                Some(if ctx.timing_only { Vec::new() } else { add(&a, &b) })
            }
            SumOp::AddPe => {
                let pe = if ci.local {
                    self.tiles[ti].pe_ready.take().ok_or_else(|| missing(self.idx, phys, ctx.step, "PE result"))?
                } else {
                    self.tiles[ti].pe_reg.clone().ok_or_else(|| missing(self.idx, phys, ctx.step, "PE register"))?
                };
                match popped.or(nin) {
                    Some(o) => {
                        ctx.stats.adder_bytes += adder;
                        Some(if ctx.timing_only { Vec::new() } else { add(&pe, &o) })
                    }
                    None => Some(pe),
                }
            }
        })
    }

    fn activate(&self, v: i32, m: usize, func: u8) -> i32 {
        let v = if func & Func::BIAS != 0 { v.wrapping_add(self.bias[m]) } else { v };
        let shifted = v >> self.layer.shift;
        if func & Func::ACT != 0 {
            shifted.clamp(0, 127)
        } else {
            shifted.clamp(-128, 127)
        }
    }

    /// Bias, activation, pooling and emission at the block's output tile.
    fn computation_unit(&mut self, ti: usize, img: usize, x: usize, c: usize, val: &[i32], ctx: &mut Ctx) -> Result<(), SimError> {
        let (phys, lane, f) = {
            let t = &self.tiles[ti];
            (t.phys, t.lane, t.f)
        };
        let fr = self.plan.filter_slices[f].clone();
        let width = fr.len();
        let cu = &self.tables[phys].cu;
        let timing = ctx.timing_only;
        let exec = |this: &Self, m: &MInstr| -> Vec<i32> {
            if timing {
                return Vec::new();
            }
            val.iter().enumerate().map(|(k, &v)| this.activate(v, fr.start + k, m.func.0)).collect()
        };
        let m_of = |i: &Instruction| -> Option<MInstr> {
            match i {
                Instruction::M(m) => Some(*m),
                _ => None,
            }
        };
        let charge = |ctx: &mut Ctx, func: u8| {
            ctx.stats.sched_reads += 1;
            if func & Func::BIAS != 0 {
                ctx.stats.adder_bytes += 4 * width as u64;
            }
            ctx.stats.act_bytes += width as u64;
        };
        let mut emit: Option<(usize, usize, Vec<i32>)> = None;
        match self.layer.pool {
            _ if self.fc => {
                let m = m_of(&cu[0]).ok_or(SimError::Invalid { layer: self.idx, tile: phys, word: isa::encode(&cu[0]) })?;
                charge(ctx, m.func.0);
                emit = Some((0, 0, exec(self, &m)));
            }
            None => {
                let m = m_of(&cu[0]).ok_or(SimError::Invalid { layer: self.idx, tile: phys, word: isa::encode(&cu[0]) })?;
                charge(ctx, m.func.0);
                emit = Some((x, c / self.layer.s, exec(self, &m)));
            }
            Some(p) => {
                let y = c / self.layer.s;
                let (k, v) = (y % p.s, y / p.s);
                if v >= self.f_out / p.s {
                    return Ok(());
                }
                let row_in = x % p.s;
                let acc_m = m_of(&cu[2 * k]).ok_or(SimError::Invalid { layer: self.idx, tile: phys, word: isa::encode(&cu[2 * k]) })?;
                charge(ctx, acc_m.func.0);
                let a = exec(self, &acc_m);
                ctx.stats.pool_bytes += width as u64;
                let accb = if p.kind == PoolKind::Max { 1 } else { 2 };
                ctx.stats.rofm_bytes += (accb * width) as u64;
                let first = row_in == 0 && k == 0;
                if !ctx.timing_only {
                    let acc = &mut self.lanes[lane].acc[f][v * width..(v + 1) * width];
                    for (slot, nv) in acc.iter_mut().zip(&a) {
                        *slot = if first {
                            *nv
                        } else if acc_m.func.has(Func::MAX) {
                            (*slot).max(*nv)
                        } else {
                            *slot + *nv
                        };
                    }
                }
                let e = cu[2 * k + 1];
                if !e.is_nop() && row_in + 1 == p.s {
                    let em = m_of(&e).ok_or(SimError::Invalid { layer: self.idx, tile: phys, word: isa::encode(&e) })?;
                    ctx.stats.sched_reads += 1;
                    ctx.stats.rofm_bytes += (accb * width) as u64;
                    let acc = &self.lanes[lane].acc[f][v * width..(v + 1) * width];
                    if em.func.has(Func::AVG_EMIT) {
                        ctx.stats.pool_bytes += width as u64;
                    }
                    let vals = if ctx.timing_only {
                        Vec::new()
                    } else if em.func.has(Func::AVG_EMIT) {
                        let den = (p.k * p.k) as i64;
                        acc.iter().map(|&s| round_half_away(s as i64, den) as i32).collect()
                    } else {
                        acc.to_vec()
                    };
                    emit = Some((x / p.s, v, vals));
                }
            }
        }
        if let Some((r, col, values)) = emit {
            self.count_packet(width, 8, ctx);
            ctx.trace.record(ctx.step, self.idx, phys, "emit", &values);
            ctx.out.push(Emission { image: img, r, c: col, ch: fr, values });
        }
        Ok(())
    }
}

/// Map, place and compile `net` for the configured chip.
pub fn compile(net: &NetworkSpec, cfg: &SimConfig) -> Result<(Vec<BlockPlan>, mapper::SyncPlan, isa::Bundle), SimError> {
    let (mut plans, sync) = mapper::plan_network(net, cfg.chip.pe, cfg.mode, cfg.map)?;
    mapper::place_blocks(&mut plans, cfg.chip.a_r, cfg.chip.a_c)?;
    let bundle = isa::compile(net, &plans, &cfg.chip, cfg.mode, cfg.map, cfg.gen)?;
    Ok((plans, sync, bundle))
}

/// Functional inference of every input image, checked against nothing; compare with the oracle separately.
pub fn run_inference(net: &NetworkSpec, params: &NetworkParams, inputs: &[QuantTensor], cfg: &SimConfig) -> Result<SimResult, SimError> {
    let (plans, sync, bundle) = compile(net, cfg)?;
    simulate(net, &plans, sync, &bundle.programs, Some(params), inputs, inputs.len(), cfg)
}

/// Event counts and timing for `images` inferences without carrying values.
pub fn run_timing(net: &NetworkSpec, images: usize, cfg: &SimConfig) -> Result<SimResult, SimError> {
    let mut cfg = cfg.clone();
    cfg.timing_only = true;
    let (plans, sync, bundle) = compile(net, &cfg)?;
    simulate(net, &plans, sync, &bundle.programs, None, &[], images, &cfg)
}

/// Execute a loaded bundle. Plans are rebuilt from the bundle's network, chip and mode.
pub fn run_bundle(bundle: &isa::Bundle, params: &NetworkParams, inputs: &[QuantTensor], cfg: &SimConfig) -> Result<SimResult, SimError> {
    let mut cfg = cfg.clone();
    cfg.chip = bundle.chip;
    cfg.mode = bundle.mode;
    cfg.map = bundle.map;
    let (mut plans, sync) = mapper::plan_network(&bundle.network, cfg.chip.pe, cfg.mode, cfg.map)?;
    mapper::place_blocks(&mut plans, cfg.chip.a_r, cfg.chip.a_c)?;
    simulate(&bundle.network, &plans, sync, &bundle.programs, Some(params), inputs, inputs.len(), &cfg)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    net: &NetworkSpec,
    plans: &[BlockPlan],
    sync: mapper::SyncPlan,
    programs: &[TileProgram],
    params: Option<&NetworkParams>,
    inputs: &[QuantTensor],
    n: usize,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    if net.has_residuals() {
        return Err(SimError::Unsupported("shortcut connections and non-sequential inputs".into()));
    }
    let shapes = crate::nn_model::chain_shapes(net)?;
    let timing = cfg.timing_only || params.is_none();
    let mut blocks = Vec::with_capacity(plans.len());
    for plan in plans {
        let i = plan.layer;
        let progs: Vec<&TileProgram> = programs.iter().filter(|p| p.layer == i).collect();
        let in_shape = net.source_shape(i, &shapes);
        blocks.push(Block::new(i, &net.layers[i], plan, &progs, params.map(|p| &p.layers[i]), in_shape, &cfg.chip, timing)?);
    }
    let Some(last) = shapes.last().copied() else {
        return Err(SimError::Unsupported("empty network".into()));
    };
    let mut results = Landing::new(last, timing);
    {
        let first = &mut blocks[0].landing;
        let (h, w, c) = net.input;
        for img in 0..n {
            let vals = inputs.get(img).map(|t| t.values.clone()).unwrap_or_default();
            if !timing && vals.len() != h * w * c {
                return Err(SimError::Model(ModelError::Tensor(format!("input {img} has {} values", vals.len()))));
            }
            for r in 0..h {
                for col in 0..w {
                    let px: Vec<i32> = if timing { Vec::new() } else { (0..c).map(|ch| vals[(ch * h + r) * w + col]).collect() };
                    first.deposit(img, r, col, 0..c, &px);
                }
            }
        }
    }
    let nb = blocks.len();
    // A producer must be able to finish an image while its consumer is still
    // streaming the one before, so the queue grows with pipeline latency.
    let depth: Vec<usize> = (0..nb)
        .map(|b| match blocks.get(b + 1) {
            Some(next) => {
                let slack = blocks[b].latency() + next.latency() + next.frame();
                cfg.queue_depth + slack.div_ceil(blocks[b].frame())
            }
            None => cfg.queue_depth,
        })
        .collect();
    let mut stats = CycleStats { block_ticks: vec![0; nb], block_stalls: vec![0; nb], completion: vec![0; n], ..Default::default() };
    let mut trace = Trace::new(cfg.trace);
    let mut finished = 0usize;
    let mut step = 0u64;
    while finished < n {
        if step >= cfg.max_steps {
            let state = blocks
                .iter()
                .map(|b| format!("layer {} tick {} fed {} done {}", b.idx, b.tau, b.consumed, b.done_images))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(SimError::NonTermination { steps: step, state });
        }
        for b in 0..nb {
            let limit = if b + 1 < nb { blocks[b + 1].consumed + depth[b] } else { usize::MAX };
            if blocks[b].done_images < n {
                blocks[b].decide(limit, n);
            }
        }
        let mut emissions: Vec<Vec<Emission>> = (0..nb).map(|_| Vec::new()).collect();
        for b in 0..nb {
            if blocks[b].done_images >= n {
                continue;
            }
            if blocks[b].go.is_none() {
                stats.block_stalls[b] += 1;
                continue;
            }
            stats.block_ticks[b] += 1;
            let mut ctx = Ctx {
                step,
                n_images: n,
                timing_only: timing,
                link_width: cfg.chip.link_width,
                beats_per_step: cfg.chip.beats_per_step(),
                stats: &mut stats,
                trace: &mut trace,
                out: &mut emissions[b],
            };
            blocks[b].tick(&mut ctx)?;
        }
        for (b, ems) in emissions.into_iter().enumerate() {
            for e in ems {
                let blk = &mut blocks[b];
                if blk.emitted.len() <= e.image {
                    blk.emitted.resize(e.image + 1, 0);
                }
                blk.emitted[e.image] += e.ch.len();
                if blk.emitted[e.image] == blk.expected {
                    blk.done_images += 1;
                }
                let target = if b + 1 < nb { &mut blocks[b + 1].landing } else { &mut results };
                if b + 1 < nb {
                    stats.rofm_bytes += e.ch.len() as u64;
                }
                if target.deposit(e.image, e.r, e.c, e.ch, &e.values) && b + 1 == nb {
                    stats.completion[e.image] = step + 1;
                    finished += 1;
                }
            }
        }
        for blk in blocks.iter_mut() {
            let consumed = blk.consumed;
            blk.landing.images.retain(|&k, _| k >= consumed);
        }
        step += 1;
    }
    stats.steps = step;
    let outputs = (0..n)
        .map(|i| {
            let mut t = results.tensor(i).expect("completed image");
            t.shift = net.layers.last().map_or(0, |l| l.shift);
            t
        })
        .collect();
    Ok(SimResult { outputs, stats, trace, plans: plans.to_vec(), sync })
}

/// Smallest square chip (from a rough lower bound upward) on which `net` places.
pub fn fit_chip(net: &NetworkSpec, pe: crate::nn_model::PEConfig, mode: SyncMode, map: MapOptions) -> Result<ChipConfig, SimError> {
    let (plans, sync) = mapper::plan_network(net, pe, mode, map)?;
    let tall = plans.iter().map(|p| p.m_t).max().unwrap_or(1);
    let mut side = tall.max((sync.total_tiles as f64).sqrt().ceil() as usize).max(2);
    loop {
        let mut trial = plans.clone();
        if mapper::place_blocks(&mut trial, side, side).is_ok() {
            return Ok(ChipConfig::new(side, side, pe));
        }
        side += (side / 8).max(1);
    }
}
