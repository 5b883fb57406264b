//! Layer and network descriptions, shape arithmetic and integer tensors.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("layer {layer}: {msg}")]
    InvalidLayer { layer: usize, msg: String },
    #[error("shape chain broken at layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeChain { layer: usize, expected: (usize, usize, usize), found: (usize, usize, usize) },
    #[error("line {line}, field `{field}`: {msg}")]
    Parse { line: usize, field: String, msg: String },
    #[error("tensor: {0}")]
    Tensor(String),
    #[error("unknown bundled network `{0}`")]
    UnknownNetwork(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kind: PoolKind,
    pub k: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Column,
    Square,
}

/// One layer. Field names follow the usual CNN shape symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub k: usize,
    pub m: usize,
    pub s: usize,
    pub pool: Option<Pool>,
    pub activation: Activation,
    pub has_bias: bool,
    /// Power-of-two requantization shift applied with the activation.
    pub shift: u32,
    /// Producer layer index; `None` means the previous layer (or the network input).
    pub input: Option<usize>,
    /// Layer whose output is added before activation (shortcut edge).
    pub residual: Option<usize>,
    pub layout: Layout,
}

impl LayerSpec {
    pub fn conv(h: usize, w: usize, c: usize, k: usize, p: usize, s: usize, m: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            h,
            w,
            c,
            p,
            k,
            m,
            s,
            pool: None,
            activation: Activation::Relu,
            has_bias: true,
            shift: default_shift(k, c),
            input: None,
            residual: None,
            layout: Layout::Column,
        }
    }

    pub fn fc(c: usize, m: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Fc,
            h: 1,
            w: 1,
            c,
            p: 0,
            k: 1,
            m,
            s: 1,
            pool: None,
            activation: Activation::Relu,
            has_bias: true,
            shift: default_shift(1, c),
            input: None,
            residual: None,
            layout: Layout::Column,
        }
    }

    pub fn with_pool(mut self, kind: PoolKind, k: usize, s: usize) -> Self {
        self.pool = Some(Pool { kind, k, s });
        self
    }

    pub fn with_shift(mut self, shift: u32) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_bias(mut self, b: bool) -> Self {
        self.has_bias = b;
        self
    }

    pub fn is_conv(&self) -> bool {
        self.kind == LayerKind::Conv
    }

    /// Convolution output size (E, F) before pooling.
    pub fn conv_shape(&self) -> Result<(usize, usize), ModelError> {
        self.check(0)?;
        if self.kind == LayerKind::Fc {
            return Ok((1, 1));
        }
        let e = (self.h + 2 * self.p + self.s).saturating_sub(self.k) / self.s;
        let f = (self.w + 2 * self.p + self.s).saturating_sub(self.k) / self.s;
        if e < 1 || f < 1 {
            return Err(ModelError::InvalidLayer { layer: 0, msg: format!("output size {e}x{f} is empty") });
        }
        Ok((e, f))
    }

    /// Output shape (E, F, M) after the optional pooling stage.
    pub fn output_shape(&self) -> Result<(usize, usize, usize), ModelError> {
        let (e, f) = self.conv_shape()?;
        match self.pool {
            None => Ok((e, f, self.m)),
            Some(p) => {
                if e < p.k || f < p.k {
                    return Err(ModelError::InvalidLayer { layer: 0, msg: format!("pool window {} larger than {e}x{f}", p.k) });
                }
                Ok(((e - p.k) / p.s + 1, (f - p.k) / p.s + 1, self.m))
            }
        }
    }

    fn check(&self, idx: usize) -> Result<(), ModelError> {
        let bad = |msg: &str| ModelError::InvalidLayer { layer: idx, msg: msg.to_string() };
        if self.h == 0 || self.w == 0 || self.c == 0 || self.m == 0 {
            return Err(bad("H, W, C and M must be at least 1"));
        }
        if self.k == 0 || self.s == 0 {
            return Err(bad("K and S must be at least 1"));
        }
        if let Some(p) = self.pool {
            if p.k == 0 || p.s == 0 {
                return Err(bad("K_p and S_p must be at least 1"));
            }
        }
        if self.shift > 31 {
            return Err(bad("shift must be below 32"));
        }
        Ok(())
    }

    /// Number of weight elements (one copy).
    pub fn weight_count(&self) -> usize {
        self.k * self.k * self.c * self.m
    }

    pub fn macs(&self) -> u64 {
        let (e, f) = self.conv_shape().unwrap_or((0, 0));
        (e * f) as u64 * self.weight_count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Shape (H, W, C) presented to layer `idx`.
    pub fn source_shape(&self, idx: usize, shapes: &[(usize, usize, usize)]) -> (usize, usize, usize) {
        match self.layers[idx].input {
            Some(src) => shapes[src],
            None if idx == 0 => self.input,
            None => shapes[idx - 1],
        }
    }

    pub fn source_of(&self, idx: usize) -> Option<usize> {
        match self.layers[idx].input {
            Some(src) => Some(src),
            None if idx == 0 => None,
            None => Some(idx - 1),
        }
    }

    pub fn has_residuals(&self) -> bool {
        self.layers.iter().enumerate().any(|(i, l)| l.residual.is_some() || l.input.is_some_and(|s| i == 0 || s + 1 != i))
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs()).sum()
    }
}

/// Per-layer output shapes, checking that each layer consumes what its producer emits.
pub fn chain_shapes(net: &NetworkSpec) -> Result<Vec<(usize, usize, usize)>, ModelError> {
    let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        layer.check(i)?;
        if let Some(src) = layer.input {
            if src >= i {
                return Err(ModelError::InvalidLayer { layer: i, msg: format!("input refers to later layer {src}") });
            }
        }
        let src = net.source_shape(i, &shapes);
        let found = (layer.h, layer.w, layer.c);
        let expected = match layer.kind {
            LayerKind::Conv => src,
            LayerKind::Fc => (1, 1, src.0 * src.1 * src.2),
        };
        if found != expected {
            return Err(ModelError::ShapeChain { layer: i, expected, found });
        }
        let out = layer.output_shape().map_err(|e| match e {
            ModelError::InvalidLayer { msg, .. } => ModelError::InvalidLayer { layer: i, msg },
            other => other,
        })?;
        if let Some(r) = layer.residual {
            if r >= i {
                return Err(ModelError::InvalidLayer { layer: i, msg: format!("shortcut refers to later layer {r}") });
            }
            let (e, f) = layer.conv_shape()?;
            if shapes[r] != (e, f, layer.m) {
                return Err(ModelError::ShapeChain { layer: i, expected: (e, f, layer.m), found: shapes[r] });
            }
        }
        shapes.push(out);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PEConfig {
    pub n_c: usize,
    pub n_m: usize,
}

impl PEConfig {
    pub fn new(n_c: usize, n_m: usize) -> Result<Self, ModelError> {
        if !n_c.is_power_of_two() || !n_m.is_power_of_two() {
            return Err(ModelError::InvalidLayer { layer: 0, msg: format!("crossbar {n_c}x{n_m} is not a power of two") });
        }
        Ok(PEConfig { n_c, n_m })
    }

    pub fn square(n: usize) -> Self {
        PEConfig::new(n, n).expect("power of two crossbar")
    }
}

impl Default for PEConfig {
    fn default() -> Self {
        PEConfig { n_c: 256, n_m: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChipConfig {
    pub a_r: usize,
    pub a_c: usize,
    pub pe: PEConfig,
    pub f_step: f64,
    pub f_link: f64,
    pub link_width: usize,
    /// Rofm data buffer capacity in bytes.
    pub rofm_buffer: usize,
}

impl ChipConfig {
    pub fn new(a_r: usize, a_c: usize, pe: PEConfig) -> Self {
        ChipConfig { a_r, a_c, pe, f_step: 10e6, f_link: 640e6, link_width: 64, rofm_buffer: 16 * 1024 }
    }

    pub fn tiles(&self) -> usize {
        self.a_r * self.a_c
    }

    /// Link beats available within one step.
    pub fn beats_per_step(&self) -> u64 {
        (self.f_link / self.f_step).round() as u64
    }

    /// Parse `key = value` lines: `rows`, `cols`, `n_c`, `n_m`, `f_step`, `f_link`, `link_width`, `rofm_buffer`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ChipConfig::new(30, 30, PEConfig::default());
        for (ln, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (key, val) = split_kv(line, ln + 1)?;
            let num = |v: &str| -> Result<f64, ModelError> {
                v.parse::<f64>().map_err(|_| ModelError::Parse {
                    line: ln + 1,
                    field: key.to_string(),
                    msg: format!("not a number: `{v}`"),
                })
            };
            let n = num(val)?;
            match key {
                "rows" => cfg.a_r = n as usize,
                "cols" => cfg.a_c = n as usize,
                "n_c" => cfg.pe.n_c = n as usize,
                "n_m" => cfg.pe.n_m = n as usize,
                "f_step" => cfg.f_step = n,
                "f_link" => cfg.f_link = n,
                "link_width" => cfg.link_width = n as usize,
                "rofm_buffer" => cfg.rofm_buffer = n as usize,
                _ => return Err(ModelError::Parse { line: ln + 1, field: key.to_string(), msg: "unknown key".into() }),
            }
        }
        cfg.pe =
            PEConfig::new(cfg.pe.n_c, cfg.pe.n_m).map_err(|e| ModelError::Parse { line: 0, field: "n_c".into(), msg: e.to_string() })?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "rows = {}\ncols = {}\nn_c = {}\nn_m = {}\nf_step = {}\nf_link = {}\nlink_width = {}\nrofm_buffer = {}\n",
            self.a_r, self.a_c, self.pe.n_c, self.pe.n_m, self.f_step, self.f_link, self.link_width, self.rofm_buffer
        )
    }
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig::new(30, 30, PEConfig::default())
    }
}

// ---------------------------------------------------------------------------
// Tensors

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Filter,
    Channel,
    Height,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Int8,
    Acc32,
}

/// Dense integer tensor, row-major over `dims`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTensor {
    pub dims: Vec<(Axis, usize)>,
    pub values: Vec<i32>,
    pub precision: Precision,
    pub shift: u32,
}

impl QuantTensor {
    pub fn new(dims: Vec<(Axis, usize)>, values: Vec<i32>, precision: Precision) -> Result<Self, ModelError> {
        let n: usize = dims.iter().map(|d| d.1).product();
        if n != values.len() {
            return Err(ModelError::Tensor(format!("{} values for dims {:?}", values.len(), dims)));
        }
        if precision == Precision::Int8 && values.iter().any(|&v| !(-128..=127).contains(&v)) {
            return Err(ModelError::Tensor("8-bit tensor value out of range".into()));
        }
        Ok(QuantTensor { dims, values, precision, shift: 0 })
    }

    pub fn zeros(dims: Vec<(Axis, usize)>, precision: Precision) -> Self {
        let n = dims.iter().map(|d| d.1).product();
        QuantTensor { dims, values: vec![0; n], precision, shift: 0 }
    }

    /// Activation map laid out channel, height, width.
    pub fn chw(c: usize, h: usize, w: usize, values: Vec<i32>) -> Result<Self, ModelError> {
        Self::new(vec![(Axis::Channel, c), (Axis::Height, h), (Axis::Width, w)], values, Precision::Int8)
    }

    /// Weights laid out filter, channel, height, width.
    pub fn mckk(m: usize, c: usize, k: usize, values: Vec<i32>) -> Result<Self, ModelError> {
        Self::new(vec![(Axis::Filter, m), (Axis::Channel, c), (Axis::Height, k), (Axis::Width, k)], values, Precision::Int8)
    }

    pub fn vector(n: usize, values: Vec<i32>, precision: Precision) -> Result<Self, ModelError> {
        Self::new(vec![(Axis::Channel, n)], values, precision)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self, axis: Axis) -> usize {
        self.dims.iter().find(|d| d.0 == axis).map_or(1, |d| d.1)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.1).collect()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, d) in idx.iter().zip(&self.dims) {
            off = off * d.1 + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> i32 {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: i32) {
        let o = self.offset(idx);
        self.values[o] = v;
    }

    /// Flatten to a vector, keeping the value order.
    pub fn flatten(&self) -> QuantTensor {
        QuantTensor {
            dims: vec![(Axis::Channel, self.values.len())],
            values: self.values.clone(),
            precision: self.precision,
            shift: self.shift,
        }
    }

    /// Whitespace separated text dump: header line with dims then values.
    pub fn to_text(&self) -> String {
        let mut s = String::from("tensor");
        for (a, n) in &self.dims {
            let tag = match a {
                Axis::Filter => "M",
                Axis::Channel => "C",
                Axis::Height => "H",
                Axis::Width => "W",
            };
            s.push_str(&format!(" {tag}={n}"));
        }
        s.push('\n');
        for chunk in self.values.chunks(16) {
            let row: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or("");
        let mut toks = head.split_whitespace();
        if toks.next() != Some("tensor") {
            return Err(ModelError::Parse { line: 1, field: "tensor".into(), msg: "missing tensor header".into() });
        }
        let mut dims = Vec::new();
        for t in toks {
            let (k, v) =
                t.split_once('=').ok_or_else(|| ModelError::Parse { line: 1, field: t.into(), msg: "expected AXIS=len".into() })?;
            let axis = match k {
                "M" => Axis::Filter,
                "C" => Axis::Channel,
                "H" => Axis::Height,
                "W" => Axis::Width,
                _ => return Err(ModelError::Parse { line: 1, field: k.into(), msg: "unknown axis".into() }),
            };
            let n = v.parse().map_err(|_| ModelError::Parse { line: 1, field: k.into(), msg: "bad length".into() })?;
            dims.push((axis, n));
        }
        let mut values = Vec::new();
        for (ln, line) in lines.enumerate() {
            for t in line.split_whitespace() {
                values.push(t.parse::<i32>().map_err(|_| ModelError::Parse { line: ln + 2, field: t.into(), msg: "bad value".into() })?);
            }
        }
        let prec = if values.iter().all(|v| (-128..=127).contains(v)) { Precision::Int8 } else { Precision::Acc32 };
        QuantTensor::new(dims, values, prec)
    }
}

/// Weights and bias for one layer. Conv weights are M×C×K×K, FC weights C×M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub weights: QuantTensor,
    pub bias: QuantTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl NetworkParams {
    /// Uniform int8 weights in [-128, 127] and biases in [-512, 511].
    pub fn random(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed);
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let n = l.weight_count();
                let w: Vec<i32> = (0..n).map(|_| rng.gen_range(-128..=127)).collect();
                let b: Vec<i32> = (0..l.m).map(|_| if l.has_bias { rng.gen_range(-512..=511) } else { 0 }).collect();
                let weights = match l.kind {
                    LayerKind::Conv => QuantTensor::mckk(l.m, l.c, l.k, w),
                    LayerKind::Fc => QuantTensor::new(vec![(Axis::Channel, l.c), (Axis::Filter, l.m)], w, Precision::Int8),
                }
                .expect("consistent shape");
                let bias = QuantTensor::vector(l.m, b, Precision::Acc32).expect("bias");
                LayerParams { weights, bias }
            })
            .collect();
        NetworkParams { layers }
    }
}

/// Random int8 input image.
pub fn random_input(net: &NetworkSpec, seed: u64) -> QuantTensor {
    let (h, w, c) = net.input;
    let mut rng = rng_for(seed ^ 0x9e37_79b9_7f4a_7c15);
    let v = (0..h * w * c).map(|_| rng.gen_range(-128..=127)).collect();
    QuantTensor::chw(c, h, w, v).expect("input shape")
}

/// Small random sequential network: up to three CONV layers and an optional FC tail.
pub fn random_network(seed: u64) -> NetworkSpec {
    let mut rng = rng_for(seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let side = rng.gen_range(4..=16);
    let mut shape = (side, side, rng.gen_range(1..=64));
    let convs = rng.gen_range(1..=3);
    let mut layers = Vec::new();
    for _ in 0..convs {
        let (h, w, c) = shape;
        let k = if h >= 3 && rng.gen_bool(0.7) { 3 } else { 1 };
        let p = if k == 3 && rng.gen_bool(0.8) { 1 } else { 0 };
        let s = if h + 2 * p >= k + 4 && rng.gen_bool(0.15) { 2 } else { 1 };
        let mut l = LayerSpec::conv(h, w, c, k, p, s, rng.gen_range(1..=64));
        let (e, f) = l.conv_shape().expect("valid random layer");
        if e >= 2 && f >= 2 && rng.gen_bool(0.4) {
            let kind = if rng.gen_bool(0.5) { PoolKind::Max } else { PoolKind::Avg };
            l = l.with_pool(kind, 2, 2);
        }
        if rng.gen_bool(0.2) {
            l = l.with_activation(Activation::None);
        }
        let (oh, ow, om) = l.output_shape().expect("valid random layer");
        layers.push(l);
        shape = (oh, ow, om);
        if oh < 3 {
            break;
        }
    }
    let flat = shape.0 * shape.1 * shape.2;
    if layers.len() < 4 && flat <= 1024 && rng.gen_bool(0.5) {
        layers.push(LayerSpec::fc(flat, rng.gen_range(1..=64)));
    }
    NetworkSpec { name: format!("random-{seed}"), input: (side, side, layers[0].c), layers }
}

/// A requantization shift that keeps typical outputs inside 8 bits.
pub fn default_shift(k: usize, c: usize) -> u32 {
    let terms = (k * k * c).max(1) as f64;
    (7.0 + 0.5 * terms.log2()).round() as u32
}

// ---------------------------------------------------------------------------
// Text format

fn strip_comment(raw: &str) -> &str {
    raw.split('#').next().unwrap_or("").trim()
}

fn split_kv(line: &str, ln: usize) -> Result<(&str, &str), ModelError> {
    let (k, v) = line.split_once('=').ok_or_else(|| ModelError::Parse {
        line: ln,
        field: line.to_string(),
        msg: "expected `key = value`".into(),
    })?;
    Ok((k.trim(), v.trim()))
}

fn parse_usize(v: &str, line: usize, field: &str) -> Result<usize, ModelError> {
    v.parse().map_err(|_| ModelError::Parse { line, field: field.to_string(), msg: format!("expected a non-negative integer, got `{v}`") })
}

fn parse_layer(spec: &str, line: usize) -> Result<LayerSpec, ModelError> {
    let mut toks = spec.split_whitespace();
    let kind = match toks.next() {
        Some("CONV") => LayerKind::Conv,
        Some("FC") => LayerKind::Fc,
        other => {
            return Err(ModelError::Parse {
                line,
                field: "kind".into(),
                msg: format!("expected CONV or FC, got `{}`", other.unwrap_or("")),
            })
        }
    };
    let mut l = match kind {
        LayerKind::Conv => LayerSpec::conv(1, 1, 1, 1, 0, 1, 1),
        LayerKind::Fc => LayerSpec::fc(1, 1),
    };
    let mut pool_kind = None;
    let (mut kp, mut sp) = (None, None);
    let mut seen_shift = false;
    for t in toks {
        let (key, val) =
            t.split_once('=').ok_or_else(|| ModelError::Parse { line, field: t.to_string(), msg: "expected key=value".into() })?;
        match key {
            "H" => l.h = parse_usize(val, line, key)?,
            "W" => l.w = parse_usize(val, line, key)?,
            "C" => l.c = parse_usize(val, line, key)?,
            "P" => l.p = parse_usize(val, line, key)?,
            "K" => l.k = parse_usize(val, line, key)?,
            "M" => l.m = parse_usize(val, line, key)?,
            "S" => l.s = parse_usize(val, line, key)?,
            "K_p" => kp = Some(parse_usize(val, line, key)?),
            "S_p" => sp = Some(parse_usize(val, line, key)?),
            "pool" => {
                pool_kind = Some(match val {
                    "max" => PoolKind::Max,
                    "avg" => PoolKind::Avg,
                    _ => return Err(ModelError::Parse { line, field: key.into(), msg: format!("expected max or avg, got `{val}`") }),
                })
            }
            "act" => {
                l.activation = match val {
                    "relu" => Activation::Relu,
                    "none" => Activation::None,
                    _ => return Err(ModelError::Parse { line, field: key.into(), msg: format!("expected relu or none, got `{val}`") }),
                }
            }
            "bias" => l.has_bias = parse_usize(val, line, key)? != 0,
            "shift" => {
                l.shift = parse_usize(val, line, key)? as u32;
                seen_shift = true;
            }
            "in" => l.input = Some(parse_usize(val, line, key)?),
            "res" => l.residual = Some(parse_usize(val, line, key)?),
            "layout" => {
                l.layout = match val {
                    "column" => Layout::Column,
                    "square" => Layout::Square,
                    _ => return Err(ModelError::Parse { line, field: key.into(), msg: format!("expected column or square, got `{val}`") }),
                }
            }
            _ => return Err(ModelError::Parse { line, field: key.into(), msg: "unknown field".into() }),
        }
    }
    match (pool_kind, kp, sp) {
        (None, None, None) => {}
        (Some(kind), Some(k), Some(s)) => l.pool = Some(Pool { kind, k, s }),
        _ => return Err(ModelError::Parse { line, field: "pool".into(), msg: "pool, K_p and S_p must be given together".into() }),
    }
    if !seen_shift {
        l.shift = default_shift(l.k, l.c);
    }
    Ok(l)
}

/// Parse a network description.
///
/// ```text
/// name = toy
/// input = 8 8 4
/// layer = CONV H=8 W=8 C=4 P=1 K=3 M=8 S=1 pool=max K_p=2 S_p=2
/// layer = FC C=128 M=10 act=none
/// ```
pub fn parse_network(text: &str) -> Result<NetworkSpec, ModelError> {
    let mut name = None;
    let mut input = None;
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let (key, val) = split_kv(line, ln)?;
        match key {
            "name" => name = Some(val.to_string()),
            "input" => {
                let v: Vec<&str> = val.split_whitespace().collect();
                if v.len() != 3 {
                    return Err(ModelError::Parse { line: ln, field: "input".into(), msg: "expected `H W C`".into() });
                }
                input = Some((parse_usize(v[0], ln, "input")?, parse_usize(v[1], ln, "input")?, parse_usize(v[2], ln, "input")?));
            }
            "layer" => layers.push(parse_layer(val, ln)?),
            _ => return Err(ModelError::Parse { line: ln, field: key.into(), msg: "unknown key".into() }),
        }
    }
    let input = input.ok_or_else(|| ModelError::Parse { line: 0, field: "input".into(), msg: "missing input shape".into() })?;
    let net = NetworkSpec { name: name.unwrap_or_else(|| "unnamed".into()), input, layers };
    Ok(net)
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name = {}", self.name)?;
        writeln!(f, "input = {} {} {}", self.input.0, self.input.1, self.input.2)?;
        for l in &self.layers {
            let kind = if l.is_conv() { "CONV" } else { "FC" };
            write!(f, "layer = {kind} H={} W={} C={} P={} K={} M={} S={}", l.h, l.w, l.c, l.p, l.k, l.m, l.s)?;
            if let Some(p) = l.pool {
                let k = if p.kind == PoolKind::Max { "max" } else { "avg" };
                write!(f, " pool={k} K_p={} S_p={}", p.k, p.s)?;
            }
            let act = if l.activation == Activation::Relu { "relu" } else { "none" };
            write!(f, " act={act} bias={} shift={}", l.has_bias as u8, l.shift)?;
            if let Some(i) = l.input {
                write!(f, " in={i}")?;
            }
            if let Some(r) = l.residual {
                write!(f, " res={r}")?;
            }
            if l.layout == Layout::Square {
                write!(f, " layout=square")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const BUNDLED: [&str; 5] = ["vgg11-cifar", "vgg16", "vgg19", "resnet18", "resnet50"];

pub fn bundled_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "vgg11-cifar" => include_str!("../networks/vgg11-cifar.net"),
        "vgg16" => include_str!("../networks/vgg16.net"),
        "vgg19" => include_str!("../networks/vgg19.net"),
        "resnet18" => include_str!("../networks/resnet18.net"),
        "resnet50" => include_str!("../networks/resnet50.net"),
        _ => return None,
    })
}

pub fn bundled(name: &str) -> Result<NetworkSpec, ModelError> {
    let text = bundled_text(name).ok_or_else(|| ModelError::UnknownNetwork(name.into()))?;
    parse_network(text)
}
