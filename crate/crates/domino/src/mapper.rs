//! Weight partitioning, synchronization planning, placement and utilization.

use std::fmt::Write as _;
use std::ops::Range;

use crate::nn_model::{chain_shapes, LayerKind, LayerSpec, Layout, ModelError, NetworkSpec, PEConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("capacity exceeded: {demand} tiles demanded, {available} available ({})", breakdown_text(.breakdown))]
    Capacity { demand: usize, available: usize, breakdown: Vec<(usize, usize)> },
    #[error("layer {layer}: block of {rows} rows does not fit a {avail}-row grid")]
    TooTall { layer: usize, rows: usize, avail: usize },
}

fn breakdown_text(b: &[(usize, usize)]) -> String {
    b.iter().map(|(l, t)| format!("L{l}:{t}")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    FullSync,
    Reuse(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapOptions {
    /// Feed the first layer as whole K×K×C patches from the input buffer.
    pub patch_first: bool,
    /// Overrides per-layer layouts when set.
    pub layout: Option<Layout>,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions { patch_first: true, layout: None }
    }
}

/// A run of one filter point's channels held by a tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub i: usize,
    pub j: usize,
    pub c0: usize,
    pub c1: usize,
}

/// One position of a lane's tile chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainTile {
    /// Filter row served (0 for patch-fed layers).
    pub group: usize,
    pub segs: Vec<Segment>,
    /// Stream elements kept in the Rifm window.
    pub span: usize,
    /// Offset of the last stream element used, relative to the window start.
    pub jend: usize,
    pub group_final: bool,
}

impl ChainTile {
    pub fn rows(&self) -> usize {
        self.segs.iter().map(|s| s.c1 - s.c0).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SliceSource {
    Points(Vec<(usize, usize)>),
    /// Flattened (i, j, c) patch index range.
    Patch(Range<usize>),
    FcBlock(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSlice {
    pub tile: usize,
    pub source: SliceSource,
    pub channels: Range<usize>,
    pub filters: Range<usize>,
    pub dup: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Conv { layout: Layout, patch: bool },
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub layer: usize,
    pub kind: BlockKind,
    pub m_t: usize,
    pub m_a: usize,
    pub d: usize,
    pub r: usize,
    /// Parallel copies actually instantiated (d / r for CONV).
    pub lanes: usize,
    pub in_tile_dup: usize,
    pub filter_slices: Vec<Range<usize>>,
    pub input_slices: Vec<Range<usize>>,
    pub chain: Vec<ChainTile>,
    /// Weight slices of one duplicate, indexed by physical tile of set 0.
    pub slices: Vec<WeightSlice>,
    pub tiles: usize,
    pub placement: Vec<Rect>,
}

impl BlockPlan {
    /// Tiles of one duplicate.
    pub fn base_tiles(&self) -> usize {
        match self.kind {
            BlockKind::Fc => self.m_t * self.m_a.max(1),
            BlockKind::Conv { .. } => self.chain.len() * self.filter_slices.len(),
        }
    }

    pub fn sets(&self) -> usize {
        self.lanes.div_ceil(self.in_tile_dup.max(1))
    }

    /// Physical tile index of chain position `u` of filter slice `f` in `lane`.
    pub fn physical(&self, lane: usize, f: usize, u: usize) -> usize {
        let set = lane / self.in_tile_dup.max(1);
        (set * self.filter_slices.len() + f) * self.chain.len() + u
    }

    /// Grid coordinates of a physical tile, once placed.
    pub fn coord(&self, tile: usize) -> Option<(usize, usize)> {
        if self.placement.is_empty() {
            return None;
        }
        match self.kind {
            BlockKind::Fc => {
                let (t, a) = (tile % self.m_t, tile / self.m_t);
                let r = self.placement.get(a)?;
                Some((r.row + t, r.col))
            }
            BlockKind::Conv { layout, .. } => {
                let n = self.chain.len();
                let (col, u) = (tile / n, tile % n);
                let r = self.placement.get(col)?;
                match layout {
                    Layout::Column => Some((r.row + u, r.col)),
                    Layout::Square => {
                        let g = r.cols;
                        let (row, pos) = (u / g, u % g);
                        let c = if row % 2 == 0 { pos } else { g - 1 - pos };
                        Some((r.row + row, r.col + c))
                    }
                }
            }
        }
    }
}

fn ranges(total: usize, width: usize) -> Vec<Range<usize>> {
    (0..total.div_ceil(width)).map(|s| s * width..((s + 1) * width).min(total)).collect()
}

/// FC partition: ⌈C_in/N_c⌉ × ⌈C_out/N_m⌉ tiles.
pub fn plan_fc(layer_idx: usize, layer: &LayerSpec, pe: PEConfig) -> BlockPlan {
    let rows = ranges(layer.c, pe.n_c);
    let cols = ranges(layer.m, pe.n_m);
    let (m_t, m_a) = (rows.len(), cols.len());
    let mut slices = Vec::with_capacity(m_t * m_a);
    for (a, cr) in cols.iter().enumerate() {
        for (t, rr) in rows.iter().enumerate() {
            slices.push(WeightSlice {
                tile: a * m_t + t,
                source: SliceSource::FcBlock(t, a),
                channels: rr.clone(),
                filters: cr.clone(),
                dup: 1,
            });
        }
    }
    BlockPlan {
        layer: layer_idx,
        kind: BlockKind::Fc,
        m_t,
        m_a,
        d: 1,
        r: 1,
        lanes: 1,
        in_tile_dup: 1,
        filter_slices: cols,
        input_slices: rows,
        chain: Vec::new(),
        slices,
        tiles: m_t * m_a,
        placement: Vec::new(),
    }
}

/// Filter points packed per tile: ⌊N_c/C⌋ capped at K.
pub fn packing_factor(layer: &LayerSpec, pe: PEConfig) -> usize {
    if layer.c >= pe.n_c {
        1
    } else {
        (pe.n_c / layer.c).clamp(1, layer.k)
    }
}

fn conv_chain(layer: &LayerSpec, pe: PEConfig, patch: bool) -> Vec<ChainTile> {
    let k = layer.k;
    let mut chain = Vec::new();
    if patch {
        let total = k * k * layer.c;
        for r in ranges(total, pe.n_c) {
            let mut segs: Vec<Segment> = Vec::new();
            let mut q = r.start;
            while q < r.end {
                let (pt, c0) = (q / layer.c, q % layer.c);
                let c1 = (layer.c).min(c0 + (r.end - q));
                segs.push(Segment { i: pt / k, j: pt % k, c0, c1 });
                q += c1 - c0;
            }
            chain.push(ChainTile { group: 0, segs, span: 1, jend: 0, group_final: false });
        }
        if let Some(last) = chain.last_mut() {
            last.group_final = true;
        }
        return chain;
    }
    let pk = packing_factor(layer, pe);
    let chans = ranges(layer.c, pe.n_c);
    for i in 0..k {
        for j0 in (0..k).step_by(pk) {
            let j1 = (j0 + pk).min(k);
            for cr in &chans {
                chain.push(ChainTile {
                    group: i,
                    segs: (j0..j1).map(|j| Segment { i, j, c0: cr.start, c1: cr.end }).collect(),
                    span: j1 - j0,
                    jend: j1 - 1,
                    group_final: false,
                });
            }
        }
        chain.last_mut().expect("non-empty group").group_final = true;
    }
    chain
}

/// CONV partition of one duplicate: K groups of packed points, channel and filter splits.
pub fn plan_conv(layer_idx: usize, layer: &LayerSpec, pe: PEConfig, layout: Layout, patch: bool) -> BlockPlan {
    let chain = conv_chain(layer, pe, patch);
    let fsl = ranges(layer.m, pe.n_m);
    let mut slices = Vec::new();
    for (f, fr) in fsl.iter().enumerate() {
        for (u, t) in chain.iter().enumerate() {
            let source = if patch {
                let s = &t.segs[0];
                let e = t.segs.last().expect("segment");
                let start = (s.i * layer.k + s.j) * layer.c + s.c0;
                let end = (e.i * layer.k + e.j) * layer.c + e.c1;
                SliceSource::Patch(start..end)
            } else {
                SliceSource::Points(t.segs.iter().map(|s| (s.i, s.j)).collect())
            };
            let channels = if patch { 0..layer.c } else { t.segs[0].c0..t.segs[0].c1 };
            slices.push(WeightSlice { tile: f * chain.len() + u, source, channels, filters: fr.clone(), dup: 1 });
        }
    }
    let n = chain.len();
    let (m_t, m_a) = match layout {
        Layout::Column => (n, fsl.len()),
        Layout::Square if !patch => (layer.k, fsl.len() * n.div_ceil(layer.k)),
        Layout::Square => (n, fsl.len()),
    };
    let layout = if patch { Layout::Column } else { layout };
    BlockPlan {
        layer: layer_idx,
        kind: BlockKind::Conv { layout, patch },
        m_t,
        m_a,
        d: 1,
        r: 1,
        lanes: 1,
        in_tile_dup: 1,
        filter_slices: fsl,
        input_slices: Vec::new(),
        chain,
        slices,
        tiles: 0,
        placement: Vec::new(),
    }
    .with_tiles()
}

impl BlockPlan {
    fn with_tiles(mut self) -> Self {
        self.tiles = self.base_tiles() * self.sets();
        self
    }

    /// Set duplication and reuse, recomputing in-tile duplication and tile demand.
    pub fn apply_sync(&mut self, d: usize, r: usize, pe: PEConfig) {
        self.d = d;
        match self.kind {
            BlockKind::Fc => {
                self.r = 1;
                self.lanes = 1;
                self.in_tile_dup = 1;
            }
            BlockKind::Conv { .. } => {
                self.r = r.min(d).max(1);
                self.lanes = (d / self.r).max(1);
                let width = self.filter_slices.iter().map(|f| f.len()).max().unwrap_or(1);
                self.in_tile_dup = if pe.n_m >= 2 * width { (pe.n_m / width).min(self.lanes) } else { 1 };
                let sets = self.sets();
                let (n, fs) = (self.chain.len(), self.filter_slices.len());
                self.m_a = match self.kind {
                    BlockKind::Conv { layout: Layout::Square, patch: false } => fs * sets * n.div_ceil(self.m_t),
                    _ => fs * sets,
                };
            }
        }
        self.tiles = self.base_tiles() * self.sets();
        for s in &mut self.slices {
            s.dup = self.in_tile_dup;
        }
    }

    /// Conv output rows handled as one scheduling unit (a pooling window's rows).
    fn row_unit(layer: &LayerSpec) -> usize {
        layer.pool.map_or(1, |p| p.s)
    }

    /// Number of row units per image.
    pub fn units(layer: &LayerSpec) -> usize {
        let (e, _) = layer.conv_shape().unwrap_or((1, 1));
        match layer.pool {
            Some(p) => (e - p.k) / p.s + 1,
            None => e,
        }
    }

    /// Lanes that receive work (never more than row units).
    pub fn active_lanes(&self, layer: &LayerSpec) -> usize {
        match self.kind {
            BlockKind::Fc => 1,
            BlockKind::Conv { .. } => self.lanes.min(Self::units(layer)).max(1),
        }
    }

    /// Output rows assigned to `lane`, in processing order.
    pub fn lane_rows(&self, layer: &LayerSpec, lane: usize) -> Vec<usize> {
        let per = Self::row_unit(layer);
        let act = self.active_lanes(layer);
        (0..Self::units(layer)).filter(|u| u % act == lane).flat_map(|u| (u * per)..(u * per + per)).collect()
    }

    /// Row length of the input stream (shared padding between rows).
    pub fn row_len(layer: &LayerSpec) -> usize {
        layer.w + layer.p
    }

    /// Steps a lane needs per image.
    pub fn frame_ticks(&self, layer: &LayerSpec) -> usize {
        match self.kind {
            BlockKind::Fc => 1,
            BlockKind::Conv { .. } => {
                let act = self.active_lanes(layer);
                let units = Self::units(layer).div_ceil(act);
                units * Self::row_unit(layer) * Self::row_len(layer)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSync {
    pub layer: usize,
    /// Output windows per image, the layer's relative work rate.
    pub rate: usize,
    pub d: usize,
    pub r: usize,
    pub lanes: usize,
    pub tiles: usize,
    pub frame_ticks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncPlan {
    pub mode: SyncMode,
    pub layers: Vec<LayerSync>,
    pub total_tiles: usize,
    /// Analytic steady-state steps between successive results.
    pub interval: usize,
}

fn nearest_pow4(x: f64) -> usize {
    if x <= 1.0 {
        return 1;
    }
    4usize.pow((x.ln() / 4f64.ln()).round() as u32)
}

/// Build every block plan for a network under a synchronization mode.
pub fn plan_network(net: &NetworkSpec, pe: PEConfig, mode: SyncMode, opts: MapOptions) -> Result<(Vec<BlockPlan>, SyncPlan), MapError> {
    chain_shapes(net)?;
    let mut plans: Vec<BlockPlan> = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.kind {
            LayerKind::Fc => plan_fc(i, l, pe),
            LayerKind::Conv => {
                let patch = opts.patch_first && i == 0 && l.k > 1;
                plan_conv(i, l, pe, opts.layout.unwrap_or(l.layout), patch)
            }
        })
        .collect();
    let windows: Vec<usize> = net
        .layers
        .iter()
        .map(|l| {
            let (e, f) = l.conv_shape().unwrap_or((1, 1));
            e * f
        })
        .collect();
    // Normalize to the smallest post-pooling output; a global pool does not count.
    let slowest = net
        .layers
        .iter()
        .zip(&windows)
        .filter(|(l, _)| l.is_conv())
        .map(|(l, w)| match l.output_shape() {
            Ok((e, f, _)) if e * f > 1 => e * f,
            _ => *w,
        })
        .min()
        .unwrap_or(1);
    let r = match mode {
        SyncMode::FullSync => 1,
        SyncMode::Reuse(r) => r.max(1),
    };
    let mut layers = Vec::new();
    for (i, plan) in plans.iter_mut().enumerate() {
        let l = &net.layers[i];
        let d = if l.is_conv() { nearest_pow4(windows[i] as f64 / slowest as f64) } else { 1 };
        plan.apply_sync(d, r, pe);
        layers.push(LayerSync {
            layer: i,
            rate: windows[i],
            d: plan.d,
            r: plan.r,
            lanes: plan.lanes,
            tiles: plan.tiles,
            frame_ticks: plan.frame_ticks(l),
        });
    }
    let total_tiles = layers.iter().map(|l| l.tiles).sum();
    let interval = layers.iter().map(|l| l.frame_ticks).max().unwrap_or(0);
    Ok((plans, SyncPlan { mode, layers, total_tiles, interval }))
}

/// Synchronization summary only.
pub fn plan_sync(net: &NetworkSpec, pe: PEConfig, mode: SyncMode) -> Result<SyncPlan, MapError> {
    plan_network(net, pe, mode, MapOptions::default()).map(|(_, s)| s)
}

/// Units placed as separate rectangles: one per tile column (CONV) or per FC column.
fn units_of(plan: &BlockPlan) -> Vec<(usize, usize)> {
    match plan.kind {
        BlockKind::Fc => vec![(plan.m_t, 1); plan.m_a],
        BlockKind::Conv { layout, .. } => {
            let n = plan.chain.len();
            let cols = plan.sets() * plan.filter_slices.len();
            match layout {
                Layout::Column => vec![(n, 1); cols],
                Layout::Square => {
                    let g = n.div_ceil(plan.m_t);
                    vec![(plan.m_t, g); cols]
                }
            }
        }
    }
}

/// Greedy first-fit placement scanning the grid row-major, in network order.
pub fn place_blocks(plans: &mut [BlockPlan], a_r: usize, a_c: usize) -> Result<(), MapError> {
    let demand: usize = plans.iter().map(|p| p.tiles).sum();
    if demand > a_r * a_c {
        return Err(MapError::Capacity { demand, available: a_r * a_c, breakdown: plans.iter().map(|p| (p.layer, p.tiles)).collect() });
    }
    let mut used = vec![false; a_r * a_c];
    let mut hint = 0usize;
    for plan in plans.iter_mut() {
        plan.placement.clear();
        for (h, w) in units_of(plan) {
            if h > a_r || w > a_c {
                return Err(MapError::TooTall { layer: plan.layer, rows: h, avail: a_r });
            }
            let fits = |r: usize, c: usize, used: &[bool]| (r..r + h).all(|rr| (c..c + w).all(|cc| !used[rr * a_c + cc]));
            let mut spot = None;
            for pos in (hint..a_r * a_c).chain(0..hint) {
                let (r, c) = (pos / a_c, pos % a_c);
                if r + h <= a_r && c + w <= a_c && fits(r, c, &used) {
                    spot = Some((r, c));
                    break;
                }
            }
            let (r, c) = spot.ok_or(MapError::Capacity { demand, available: a_r * a_c, breakdown: vec![(plan.layer, plan.tiles)] })?;
            for rr in r..r + h {
                for cc in c..c + w {
                    used[rr * a_c + cc] = true;
                }
            }
            hint = if r == 0 { c + w } else { 0 };
            plan.placement.push(Rect { row: r, col: c, rows: h, cols: w });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUtil {
    pub layer: usize,
    pub utilization: f64,
    /// Included in the network average.
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub layers: Vec<LayerUtil>,
    pub average: f64,
}

/// Weight cells in use over cells allocated, for one duplicate set of tiles.
pub fn layer_utilization(plan: &BlockPlan, layer: &LayerSpec, pe: PEConfig) -> f64 {
    let cells = (plan.base_tiles() * pe.n_c * pe.n_m) as f64;
    let used = (layer.weight_count() * plan.in_tile_dup.max(1)) as f64;
    (used / cells).min(1.0)
}

/// Per-layer utilization; the average is the plain mean over CONV layers fed from the mesh.
pub fn utilization(plans: &[BlockPlan], net: &NetworkSpec, pe: PEConfig) -> Utilization {
    let layers: Vec<LayerUtil> = plans
        .iter()
        .map(|p| LayerUtil {
            layer: p.layer,
            utilization: layer_utilization(p, &net.layers[p.layer], pe),
            counted: matches!(p.kind, BlockKind::Conv { patch: false, .. }),
        })
        .collect();
    let counted: Vec<f64> = layers.iter().filter(|l| l.counted).map(|l| l.utilization).collect();
    let average = if counted.is_empty() {
        layers.iter().map(|l| l.utilization).sum::<f64>() / layers.len().max(1) as f64
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Utilization { layers, average }
}

/// Plan dump with stable field order.
pub fn dump_plans(plans: &[BlockPlan], sync: &SyncPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode {:?} tiles {} interval {}", sync.mode, sync.total_tiles, sync.interval);
    for p in plans {
        let kind = match p.kind {
            BlockKind::Fc => "fc".to_string(),
            BlockKind::Conv { layout, patch } => {
                format!("conv-{}{}", if layout == Layout::Column { "column" } else { "square" }, if patch { "-patch" } else { "" })
            }
        };
        let _ = writeln!(
            s,
            "layer {} {} m_t={} m_a={} d={} r={} lanes={} dup={} tiles={}",
            p.layer, kind, p.m_t, p.m_a, p.d, p.r, p.lanes, p.in_tile_dup, p.tiles
        );
        for w in &p.slices {
            let src = match &w.source {
                SliceSource::Points(pts) => pts.iter().map(|(i, j)| format!("{i},{j}")).collect::<Vec<_>>().join(";"),
                SliceSource::Patch(r) => format!("patch {}..{}", r.start, r.end),
                SliceSource::FcBlock(i, j) => format!("fc {i},{j}"),
            };
            let _ = writeln!(
                s,
                "  tile {} src [{}] ch {}..{} filt {}..{}",
                w.tile, src, w.channels.start, w.channels.end, w.filters.start, w.filters.end
            );
        }
        for r in &p.placement {
            let _ = writeln!(s, "  at {},{} {}x{}", r.row, r.col, r.rows, r.cols);
        }
    }
    s
}
