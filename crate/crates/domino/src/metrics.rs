//! Energy, efficiency and throughput roll-ups from simulator event counts.

use std::fmt::Write;

use thiserror::Error;

use crate::isa::fnv1a64;
use crate::mapper::{self, MapOptions, SyncMode};
use crate::nn_model::{ModelError, NetworkSpec, PEConfig};
use crate::sim::CycleStats;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot compute {0}: zero denominator")]
    ZeroDivision(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Map(#[from] mapper::MapError),
}

/// Per-component energies, all in femtojoules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTable {
    pub mac: f64,
    pub adc: f64,
    pub integrator: f64,
    /// One Rifm buffer access of `rifm_ref_bytes`.
    pub rifm_buffer: f64,
    pub rifm_ref_bytes: f64,
    /// One Rofm data buffer access of `rofm_ref_bytes`.
    pub rofm_buffer: f64,
    pub rofm_ref_bytes: f64,
    /// Per 16-bit word.
    pub sched_read: f64,
    /// Per byte.
    pub adder: f64,
    pub pool: f64,
    pub act: f64,
    /// One input or output register access.
    pub io_register: f64,
    pub rifm_ctrl: f64,
    pub rofm_ctrl: f64,
    pub tile_area_mm2: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            mac: 48.1,
            adc: 1760.0,
            integrator: 2130.0,
            rifm_buffer: 281_300.0,
            rifm_ref_bytes: 256.0,
            rofm_buffer: 281_300.0,
            rofm_ref_bytes: 16384.0,
            sched_read: 2200.0,
            adder: 30.0,
            pool: 7.6,
            act: 0.9,
            io_register: 17_600.0,
            rifm_ctrl: 4100.0,
            rofm_ctrl: 28_500.0,
            tile_area_mm2: 0.398,
        }
    }
}

const TABLE_REVISION: u32 = 1;

impl EnergyTable {
    fn fields(&self) -> [(&'static str, f64); 15] {
        [
            ("mac_fj", self.mac),
            ("adc_fj", self.adc),
            ("integrator_fj", self.integrator),
            ("rifm_buffer_fj", self.rifm_buffer),
            ("rifm_ref_bytes", self.rifm_ref_bytes),
            ("rofm_buffer_fj", self.rofm_buffer),
            ("rofm_ref_bytes", self.rofm_ref_bytes),
            ("sched_read_fj", self.sched_read),
            ("adder_fj_per_byte", self.adder),
            ("pool_fj_per_byte", self.pool),
            ("act_fj_per_byte", self.act),
            ("io_register_fj", self.io_register),
            ("rifm_ctrl_fj", self.rifm_ctrl),
            ("rofm_ctrl_fj", self.rofm_ctrl),
            ("tile_area_mm2", self.tile_area_mm2),
        ]
    }

    pub fn all_positive(&self) -> bool {
        self.fields().iter().all(|(_, v)| *v > 0.0)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Revision number plus a hash of the constants.
    pub fn version(&self) -> String {
        format!("r{TABLE_REVISION}-{:016x}", fnv1a64(self.to_text().as_bytes()))
    }

    /// Energy of one event, fJ.
    pub fn energy(&self, e: Event) -> f64 {
        match e {
            Event::Mac => self.mac,
            Event::Adc => self.adc,
            Event::Integrator => self.integrator,
            Event::RifmByte => self.rifm_buffer / self.rifm_ref_bytes,
            Event::RofmByte => self.rofm_buffer / self.rofm_ref_bytes,
            Event::SchedRead => self.sched_read,
            Event::IoAccess => self.io_register,
            Event::AdderByte => self.adder,
            Event::PoolByte => self.pool,
            Event::ActByte => self.act,
            Event::RifmCtrl => self.rifm_ctrl,
            Event::RofmCtrl => self.rofm_ctrl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Cim,
    Moving,
    Memory,
    Other,
    OffChip,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::Cim, Category::Moving, Category::Memory, Category::Other, Category::OffChip];

    pub fn key(self) -> &'static str {
        match self {
            Category::Cim => "cim",
            Category::Moving => "moving",
            Category::Memory => "memory",
            Category::Other => "other",
            Category::OffChip => "offchip",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Cim => "CIM",
            Category::Moving => "On-chip data moving",
            Category::Memory => "On-chip memory",
            Category::Other => "Other computation",
            Category::OffChip => "Off-chip access",
        }
    }
}

/// Energy-bearing events the simulator counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Mac,
    Adc,
    Integrator,
    RifmByte,
    RofmByte,
    SchedRead,
    IoAccess,
    AdderByte,
    PoolByte,
    ActByte,
    RifmCtrl,
    RofmCtrl,
}

impl Event {
    pub const ALL: [Event; 12] = [
        Event::Mac,
        Event::Adc,
        Event::Integrator,
        Event::RifmByte,
        Event::RofmByte,
        Event::SchedRead,
        Event::IoAccess,
        Event::AdderByte,
        Event::PoolByte,
        Event::ActByte,
        Event::RifmCtrl,
        Event::RofmCtrl,
    ];

    pub fn category(self) -> Category {
        match self {
            Event::Mac | Event::Adc | Event::Integrator => Category::Cim,
            Event::IoAccess => Category::Moving,
            Event::RifmByte | Event::RofmByte | Event::SchedRead => Category::Memory,
            Event::AdderByte | Event::PoolByte | Event::ActByte | Event::RifmCtrl | Event::RofmCtrl => Category::Other,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Event::Mac => "mac",
            Event::Adc => "adc",
            Event::Integrator => "integrator",
            Event::RifmByte => "rifm_byte",
            Event::RofmByte => "rofm_byte",
            Event::SchedRead => "sched_read",
            Event::IoAccess => "io_access",
            Event::AdderByte => "adder_byte",
            Event::PoolByte => "pool_byte",
            Event::ActByte => "act_byte",
            Event::RifmCtrl => "rifm_ctrl",
            Event::RofmCtrl => "rofm_ctrl",
        }
    }

    pub fn from_key(k: &str) -> Result<Event, MetricsError> {
        Event::ALL.into_iter().find(|e| e.key() == k).ok_or_else(|| MetricsError::UnknownEvent(k.to_string()))
    }
}

/// Event counts in `Event::ALL` order.
pub type EventCounts = [u64; 12];

/// Map simulator statistics onto energy events. A PE activation fires the
/// ADC and integrator once. A packet costs one register access at each end,
/// and so does the input vector an active Rifm latches from its neighbor.
/// Link beats are not charged.
pub fn event_counts(s: &CycleStats) -> EventCounts {
    [
        s.macs,
        s.pe_activations,
        s.pe_activations,
        s.rifm_bytes,
        s.rofm_bytes,
        s.sched_reads,
        s.io_accesses + 2 * s.rifm_ctrl,
        s.adder_bytes,
        s.pool_bytes,
        s.act_bytes,
        s.rifm_ctrl,
        s.rofm_ctrl,
    ]
}

/// Parse `event = count` lines. Unknown names are an error.
pub fn parse_counts(text: &str) -> Result<EventCounts, MetricsError> {
    let mut c = [0u64; 12];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(MetricsError::Parse { line: i + 1, msg: "expected `event = count`".into() })?;
        let e = Event::from_key(k.trim())?;
        c[e as usize] = v.trim().parse().map_err(|_| MetricsError::Parse { line: i + 1, msg: format!("bad count `{}`", v.trim()) })?;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub network: String,
    pub table_version: String,
    /// fJ per category, in `Category::ALL` order.
    pub categories: [f64; 5],
    pub total_fj: f64,
    pub ops: u64,
    pub images: usize,
    pub steps: u64,
    pub time_s: f64,
    pub power_w: f64,
    pub ce_tops_w: f64,
    pub tops: f64,
    pub tops_mm2: f64,
    pub tiles: usize,
    pub inferences_s: f64,
    /// Analytic steps per result, when known.
    pub analytic_interval: Option<u64>,
    pub measured_interval: Option<u64>,
}

impl EnergyReport {
    pub fn category(&self, c: Category) -> f64 {
        self.categories[Category::ALL.iter().position(|&x| x == c).unwrap()]
    }

    pub fn total_j(&self) -> f64 {
        self.total_fj * 1e-15
    }
}

/// Energy per category; ops count two per MAC. Time-dependent fields stay zero.
pub fn energize_counts(counts: &EventCounts, table: &EnergyTable) -> EnergyReport {
    let mut categories = [0f64; 5];
    for (e, &n) in Event::ALL.iter().zip(counts) {
        let c = Category::ALL.iter().position(|&x| x == e.category()).unwrap();
        categories[c] += n as f64 * table.energy(*e);
    }
    EnergyReport {
        network: String::new(),
        table_version: table.version(),
        categories,
        total_fj: categories.iter().sum(),
        ops: 2 * counts[Event::Mac as usize],
        images: 0,
        steps: 0,
        time_s: 0.0,
        power_w: 0.0,
        ce_tops_w: 0.0,
        tops: 0.0,
        tops_mm2: 0.0,
        tiles: 0,
        inferences_s: 0.0,
        analytic_interval: None,
        measured_interval: None,
    }
}

pub fn energize(stats: &CycleStats, table: &EnergyTable) -> EnergyReport {
    energize_counts(&event_counts(stats), table)
}

/// TOPS/W from joules and operations.
pub fn efficiency(energy_j: f64, ops: u64) -> Result<f64, MetricsError> {
    if energy_j <= 0.0 {
        return Err(MetricsError::ZeroDivision("efficiency"));
    }
    Ok(ops as f64 / energy_j / 1e12)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub tops: f64,
    pub tops_mm2: f64,
    pub inferences_s: f64,
}

/// Throughput over `time_s` on `area_mm2`; `interval_s` is the steady-state time per result.
pub fn throughput(ops: u64, time_s: f64, area_mm2: f64, interval_s: f64) -> Result<Throughput, MetricsError> {
    if time_s <= 0.0 {
        return Err(MetricsError::ZeroDivision("throughput"));
    }
    if area_mm2 <= 0.0 {
        return Err(MetricsError::ZeroDivision("throughput per area"));
    }
    if interval_s <= 0.0 {
        return Err(MetricsError::ZeroDivision("inference rate"));
    }
    let tops = ops as f64 / time_s / 1e12;
    Ok(Throughput { tops, tops_mm2: tops / area_mm2, inferences_s: 1.0 / interval_s })
}

/// Run context the statistics alone do not carry.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub network: String,
    pub images: usize,
    pub tiles: usize,
    pub f_step: f64,
    pub analytic_interval: Option<u64>,
}

/// Full report: energy, efficiency, power and throughput. Time is the step count over the step clock.
pub fn report(stats: &CycleStats, table: &EnergyTable, run: &RunInfo) -> Result<EnergyReport, MetricsError> {
    let mut r = energize(stats, table);
    r.network = run.network.clone();
    r.images = run.images;
    r.steps = stats.steps;
    r.tiles = run.tiles;
    r.time_s = stats.steps as f64 / run.f_step;
    r.ce_tops_w = efficiency(r.total_j(), r.ops)?;
    if r.time_s <= 0.0 {
        return Err(MetricsError::ZeroDivision("power"));
    }
    r.power_w = r.total_j() / r.time_s;
    r.measured_interval = stats.interval();
    r.analytic_interval = run.analytic_interval;
    let per = match r.measured_interval {
        Some(i) => i as f64 / run.f_step,
        None => r.time_s / run.images.max(1) as f64,
    };
    let t = throughput(r.ops, r.time_s, run.tiles as f64 * table.tile_area_mm2, per)?;
    r.tops = t.tops;
    r.tops_mm2 = t.tops_mm2;
    r.inferences_s = t.inferences_s;
    Ok(r)
}

fn opt(v: Option<u64>) -> String {
    v.map_or("-".into(), |v| v.to_string())
}

impl EnergyReport {
    /// Flat `key = value` form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "network = {}", self.network);
        let _ = writeln!(s, "energy_table = {}", self.table_version);
        for c in Category::ALL {
            let _ = writeln!(s, "energy_{}_fj = {:e}", c.key(), self.category(c));
        }
        let _ = writeln!(s, "energy_total_fj = {:e}", self.total_fj);
        let _ = writeln!(s, "ops = {}", self.ops);
        let _ = writeln!(s, "images = {}", self.images);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "time_s = {:e}", self.time_s);
        let _ = writeln!(s, "power_w = {:e}", self.power_w);
        let _ = writeln!(s, "ce_tops_w = {:e}", self.ce_tops_w);
        let _ = writeln!(s, "tops = {:e}", self.tops);
        let _ = writeln!(s, "tops_mm2 = {:e}", self.tops_mm2);
        let _ = writeln!(s, "tiles = {}", self.tiles);
        let _ = writeln!(s, "inferences_s = {:e}", self.inferences_s);
        let _ = writeln!(s, "interval_analytic = {}", opt(self.analytic_interval));
        let _ = writeln!(s, "interval_measured = {}", opt(self.measured_interval));
        s
    }

    pub fn from_kv(text: &str) -> Result<EnergyReport, MetricsError> {
        let mut r = energize_counts(&[0; 12], &EnergyTable::default());
        r.table_version.clear();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| MetricsError::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let f = || v.parse::<f64>().map_err(|_| err(format!("bad number `{v}` for {k}")));
            let u = || v.parse::<u64>().map_err(|_| err(format!("bad integer `{v}` for {k}")));
            let interval = || if v == "-" { Ok(None) } else { u().map(Some) };
            match k {
                "network" => r.network = v.to_string(),
                "energy_table" => r.table_version = v.to_string(),
                "energy_total_fj" => r.total_fj = f()?,
                "ops" => r.ops = u()?,
                "images" => r.images = u()? as usize,
                "steps" => r.steps = u()?,
                "time_s" => r.time_s = f()?,
                "power_w" => r.power_w = f()?,
                "ce_tops_w" => r.ce_tops_w = f()?,
                "tops" => r.tops = f()?,
                "tops_mm2" => r.tops_mm2 = f()?,
                "tiles" => r.tiles = u()? as usize,
                "inferences_s" => r.inferences_s = f()?,
                "interval_analytic" => r.analytic_interval = interval()?,
                "interval_measured" => r.measured_interval = interval()?,
                _ => match k.strip_prefix("energy_").and_then(|k| k.strip_suffix("_fj")) {
                    Some(c) => match Category::ALL.iter().position(|x| x.key() == c) {
                        Some(p) => r.categories[p] = f()?,
                        None => return Err(MetricsError::UnknownEvent(k.to_string())),
                    },
                    None => return Err(err(format!("unknown key `{k}`"))),
                },
            }
        }
        Ok(r)
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "network            {}", self.network);
        let _ = writeln!(s, "energy table       {}", self.table_version);
        let total = self.total_fj.max(f64::MIN_POSITIVE);
        for c in Category::ALL {
            let e = self.category(c);
            let _ = writeln!(s, "{:<22} {:>12.4} uJ {:>6.2}%", c.label(), e * 1e-9, 100.0 * e / total);
        }
        let _ = writeln!(s, "{:<22} {:>12.4} uJ", "Total", self.total_fj * 1e-9);
        let _ = writeln!(s, "{:<22} {:>12}", "Ops", self.ops);
        let _ = writeln!(s, "{:<22} {:>12}", "Images", self.images);
        let _ = writeln!(s, "{:<22} {:>12.4} us ({} steps)", "Exec. time", self.time_s * 1e6, self.steps);
        let _ = writeln!(s, "{:<22} {:>12.4} W", "Power", self.power_w);
        let _ = writeln!(s, "{:<22} {:>12.4} TOPS/W", "CE", self.ce_tops_w);
        let _ = writeln!(s, "{:<22} {:>12.4} TOPS", "Throughput", self.tops);
        let _ = writeln!(s, "{:<22} {:>12.4} TOPS/mm2 ({} tiles)", "Throughput per area", self.tops_mm2, self.tiles);
        let _ = writeln!(s, "{:<22} {:>12.4e}", "Inferences/s", self.inferences_s);
        let _ = writeln!(s, "{:<22} {:>12} analytic {}", "Steps per result", opt(self.measured_interval), opt(self.analytic_interval));
        s
    }
}

/// Published system results, reproduced as-is for side-by-side display.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub model: &'static str,
    pub design: &'static str,
    pub ce_tops_w: f64,
    pub normalized_ce_tops_w: f64,
    pub tops: f64,
    pub inferences_s: Option<f64>,
}

pub const PUBLISHED: [PublishedRow; 12] = [
    PublishedRow {
        model: "VGG-11/CIFAR-10",
        design: "SRAM CIM (16 nm)",
        ce_tops_w: 71.39,
        normalized_ce_tops_w: 9.53,
        tops: 12.14,
        inferences_s: Some(7815.0),
    },
    PublishedRow {
        model: "VGG-11/CIFAR-10",
        design: "Domino",
        ce_tops_w: 23.41,
        normalized_ce_tops_w: 23.41,
        tops: 954.66,
        inferences_s: Some(6.25e5),
    },
    PublishedRow {
        model: "ResNet-18/CIFAR-10",
        design: "SRAM CIM (65 nm)",
        ce_tops_w: 6.91,
        normalized_ce_tops_w: 2.82,
        tops: 0.036,
        inferences_s: None,
    },
    PublishedRow {
        model: "ResNet-18/CIFAR-10",
        design: "Domino",
        ce_tops_w: 19.99,
        normalized_ce_tops_w: 19.99,
        tops: 687.26,
        inferences_s: Some(6.25e5),
    },
    PublishedRow {
        model: "VGG-16/ImageNet",
        design: "ReRAM CIM (40 nm)",
        ce_tops_w: 4.15,
        normalized_ce_tops_w: 9.24,
        tops: 0.046,
        inferences_s: None,
    },
    PublishedRow { model: "VGG-16/ImageNet", design: "MAERI", ce_tops_w: 0.27, normalized_ce_tops_w: 0.36, tops: 0.15, inferences_s: None },
    PublishedRow {
        model: "VGG-16/ImageNet",
        design: "Domino",
        ce_tops_w: 24.84,
        normalized_ce_tops_w: 24.84,
        tops: 394.7,
        inferences_s: Some(1.28e4),
    },
    PublishedRow {
        model: "VGG-19/ImageNet",
        design: "AtomLayer",
        ce_tops_w: 0.68,
        normalized_ce_tops_w: 2.73,
        tops: 3.28,
        inferences_s: None,
    },
    PublishedRow {
        model: "VGG-19/ImageNet",
        design: "CASCADE",
        ce_tops_w: 3.55,
        normalized_ce_tops_w: 12.98,
        tops: 0.1,
        inferences_s: None,
    },
    PublishedRow {
        model: "VGG-19/ImageNet",
        design: "Domino",
        ce_tops_w: 25.92,
        normalized_ce_tops_w: 25.92,
        tops: 501.0,
        inferences_s: Some(1.28e4),
    },
    PublishedRow {
        model: "ResNet-50/ImageNet",
        design: "TIMELY",
        ce_tops_w: 21.0,
        normalized_ce_tops_w: 22.46,
        tops: 3488.0,
        inferences_s: None,
    },
    PublishedRow {
        model: "ResNet-50/ImageNet",
        design: "Domino",
        ce_tops_w: 23.14,
        normalized_ce_tops_w: 23.14,
        tops: 713.6,
        inferences_s: Some(1.02e5),
    },
];

/// Reports side by side, followed by the published rows.
pub fn comparison_table(reports: &[EnergyReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>12} {:>12}",
        "network", "cim_uJ", "moving_uJ", "memory_uJ", "other_uJ", "offchip_uJ", "TOPS/W", "TOPS", "infer/s"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<20} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>10.3} {:>12.4} {:>12.4e}",
            r.network,
            r.category(Category::Cim) * 1e-9,
            r.category(Category::Moving) * 1e-9,
            r.category(Category::Memory) * 1e-9,
            r.category(Category::Other) * 1e-9,
            r.category(Category::OffChip) * 1e-9,
            r.ce_tops_w,
            r.tops,
            r.inferences_s
        );
    }
    let mut versions: Vec<&str> = reports.iter().map(|r| r.table_version.as_str()).collect();
    versions.dedup();
    let _ = writeln!(s, "energy tables: {}", versions.join(", "));
    let _ = writeln!(s, "\npublished (not normalized here)");
    let _ = writeln!(s, "{:<20} {:<18} {:>10} {:>12} {:>10} {:>10}", "model", "design", "TOPS/W", "norm TOPS/W", "TOPS", "infer/s");
    for p in PUBLISHED {
        let inf = p.inferences_s.map_or("n.a.".into(), |v| format!("{v:.3e}"));
        let _ =
            writeln!(s, "{:<20} {:<18} {:>10} {:>12} {:>10} {:>10}", p.model, p.design, p.ce_tops_w, p.normalized_ce_tops_w, p.tops, inf);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationReport {
    pub network: String,
    pub sizes: Vec<usize>,
    /// Per layer, one value per size; `None` where the layer has no block.
    pub layers: Vec<(usize, Vec<Option<f64>>)>,
    pub averages: Vec<f64>,
}

/// Weight-cell utilization per layer for each square crossbar size.
pub fn utilization_report(net: &NetworkSpec, sizes: &[usize], map: MapOptions) -> Result<UtilizationReport, MetricsError> {
    let mut layers: Vec<(usize, Vec<Option<f64>>)> = (0..net.layers.len()).map(|i| (i, vec![None; sizes.len()])).collect();
    let mut averages = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let pe = PEConfig::new(n, n)?;
        let (plans, _) = mapper::plan_network(net, pe, SyncMode::FullSync, map)?;
        let u = mapper::utilization(&plans, net, pe);
        for l in &u.layers {
            layers[l.layer].1[k] = Some(l.utilization);
        }
        averages.push(u.average);
    }
    layers.retain(|(_, v)| v.iter().any(Option::is_some));
    Ok(UtilizationReport { network: net.name.clone(), sizes: sizes.to_vec(), layers, averages })
}

impl UtilizationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", self.network);
        for n in &self.sizes {
            let _ = write!(s, " {:>8}", format!("{n}x{n}"));
        }
        s.push('\n');
        for (l, v) in &self.layers {
            let _ = write!(s, "{:<10}", format!("layer {l}"));
            for u in v {
                match u {
                    Some(u) => {
                        let _ = write!(s, " {:>7.1}%", 100.0 * u);
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<10}", "average");
        for a in &self.averages {
            let _ = write!(s, " {:>7.1}%", 100.0 * a);
        }
        s.push('\n');
        s
    }
}
