//! Naive integer reference implementation. Slow on purpose.

use crate::nn_model::{
    chain_shapes, Activation, Axis, LayerKind, LayerSpec, ModelError, NetworkParams, NetworkSpec, PoolKind, Precision, QuantTensor,
};

fn mismatch(what: &str) -> ModelError {
    ModelError::Tensor(format!("shape mismatch: {what}"))
}

fn check_conv(ifm: &QuantTensor, weights: &QuantTensor, layer: &LayerSpec) -> Result<(), ModelError> {
    if ifm.shape() != [layer.c, layer.h, layer.w] {
        return Err(mismatch("input map"));
    }
    if weights.shape() != [layer.m, layer.c, layer.k, layer.k] {
        return Err(mismatch("conv weights"));
    }
    Ok(())
}

fn padded(ifm: &QuantTensor, c: usize, r: isize, col: isize, layer: &LayerSpec) -> i32 {
    let (r, col) = (r - layer.p as isize, col - layer.p as isize);
    if r < 0 || col < 0 || r >= layer.h as isize || col >= layer.w as isize {
        0
    } else {
        ifm.at(&[c, r as usize, col as usize])
    }
}

/// Direct convolution, 32-bit accumulators, bias added, no requantization.
pub fn conv2d(ifm: &QuantTensor, weights: &QuantTensor, bias: &QuantTensor, layer: &LayerSpec) -> Result<QuantTensor, ModelError> {
    check_conv(ifm, weights, layer)?;
    if bias.len() != layer.m {
        return Err(mismatch("bias"));
    }
    let (e, f) = layer.conv_shape()?;
    let mut out = QuantTensor::zeros(vec![(Axis::Channel, layer.m), (Axis::Height, e), (Axis::Width, f)], Precision::Acc32);
    for m in 0..layer.m {
        for x in 0..e {
            for y in 0..f {
                let mut acc = bias.values[m];
                for c in 0..layer.c {
                    for i in 0..layer.k {
                        for j in 0..layer.k {
                            let v = padded(ifm, c, (x * layer.s + i) as isize, (y * layer.s + j) as isize, layer);
                            acc = acc.wrapping_add(v.wrapping_mul(weights.at(&[m, c, i, j])));
                        }
                    }
                }
                out.set(&[m, x, y], acc);
            }
        }
    }
    Ok(out)
}

/// y = xW + b with W stored C_in × C_out.
pub fn fc(x: &QuantTensor, w: &QuantTensor, b: &QuantTensor) -> Result<QuantTensor, ModelError> {
    let shape = w.shape();
    if shape.len() != 2 || x.len() != shape[0] || b.len() != shape[1] {
        return Err(mismatch("fc operands"));
    }
    let mut y = b.values.clone();
    for (i, &xi) in x.values.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = yj.wrapping_add(xi.wrapping_mul(w.values[i * shape[1] + j]));
        }
    }
    QuantTensor::vector(shape[1], y, Precision::Acc32)
}

fn window(layer: &LayerSpec, a: usize) -> Result<(usize, usize), ModelError> {
    let (e, f) = layer.conv_shape()?;
    if a >= e * f {
        return Err(ModelError::Tensor(format!("window {a} outside {e}x{f}")));
    }
    Ok((a / f, a % f))
}

/// Channel-reduced partial sums for window `a`, one M-vector per filter point l = iK + j.
pub fn partial_sums(ifm: &QuantTensor, weights: &QuantTensor, layer: &LayerSpec, a: usize) -> Result<Vec<Vec<i32>>, ModelError> {
    check_conv(ifm, weights, layer)?;
    let (x, y) = window(layer, a)?;
    let mut out = Vec::with_capacity(layer.k * layer.k);
    for i in 0..layer.k {
        for j in 0..layer.k {
            let mut p = vec![0i32; layer.m];
            for (m, pm) in p.iter_mut().enumerate() {
                for c in 0..layer.c {
                    let v = padded(ifm, c, (x * layer.s + i) as isize, (y * layer.s + j) as isize, layer);
                    *pm = pm.wrapping_add(v.wrapping_mul(weights.at(&[m, c, i, j])));
                }
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Group sums G_a^(b): the K partial sums of filter row b added together.
pub fn group_sums(ifm: &QuantTensor, weights: &QuantTensor, layer: &LayerSpec, a: usize) -> Result<Vec<Vec<i32>>, ModelError> {
    let parts = partial_sums(ifm, weights, layer, a)?;
    Ok(parts
        .chunks(layer.k)
        .map(|row| {
            let mut g = vec![0i32; layer.m];
            for p in row {
                for (gm, pm) in g.iter_mut().zip(p) {
                    *gm = gm.wrapping_add(*pm);
                }
            }
            g
        })
        .collect())
}

fn pool(ofm: &QuantTensor, kp: usize, sp: usize, avg: bool) -> Result<QuantTensor, ModelError> {
    let (c, e, f) = (ofm.dim(Axis::Channel), ofm.dim(Axis::Height), ofm.dim(Axis::Width));
    if kp == 0 || sp == 0 || e < kp || f < kp {
        return Err(mismatch("pool window"));
    }
    let (pe, pf) = ((e - kp) / sp + 1, (f - kp) / sp + 1);
    let mut out = QuantTensor::zeros(vec![(Axis::Channel, c), (Axis::Height, pe), (Axis::Width, pf)], ofm.precision);
    for ch in 0..c {
        for u in 0..pe {
            for v in 0..pf {
                let mut best = i32::MIN;
                let mut sum = 0i64;
                for i in 0..kp {
                    for j in 0..kp {
                        let val = ofm.at(&[ch, u * sp + i, v * sp + j]);
                        best = best.max(val);
                        sum += val as i64;
                    }
                }
                let r = if avg { round_div(sum, (kp * kp) as i64) as i32 } else { best };
                out.set(&[ch, u, v], r);
            }
        }
    }
    Ok(out)
}

/// Integer division rounding half away from zero.
pub fn round_div(num: i64, den: i64) -> i64 {
    let q = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -q
    } else {
        q
    }
}

pub fn pool_max(ofm: &QuantTensor, kp: usize, sp: usize) -> Result<QuantTensor, ModelError> {
    pool(ofm, kp, sp, false)
}

pub fn pool_avg(ofm: &QuantTensor, kp: usize, sp: usize) -> Result<QuantTensor, ModelError> {
    pool(ofm, kp, sp, true)
}

/// max(0, v) >> shift, saturated to [0, 127].
pub fn relu_requant_value(v: i32, shift: u32) -> i32 {
    (v.max(0) >> shift).min(127)
}

/// v >> shift saturated to the signed 8-bit range.
pub fn requant_value(v: i32, shift: u32) -> i32 {
    (v >> shift).clamp(-128, 127)
}

pub fn relu_requant(acc: &QuantTensor, shift: u32) -> QuantTensor {
    map_int8(acc, shift, |v| relu_requant_value(v, shift))
}

pub fn requant(acc: &QuantTensor, shift: u32) -> QuantTensor {
    map_int8(acc, shift, |v| requant_value(v, shift))
}

fn map_int8(acc: &QuantTensor, shift: u32, f: impl Fn(i32) -> i32) -> QuantTensor {
    QuantTensor { dims: acc.dims.clone(), values: acc.values.iter().map(|&v| f(v)).collect(), precision: Precision::Int8, shift }
}

/// Activation stage as the hardware applies it: optional shortcut, ReLU or plain requantization.
pub fn activate(layer: &LayerSpec, acc: i32, shortcut: Option<i32>) -> i32 {
    let v = match shortcut {
        Some(r) => acc.wrapping_add(r.wrapping_shl(layer.shift)),
        None => acc,
    };
    match layer.activation {
        Activation::Relu => relu_requant_value(v, layer.shift),
        Activation::None => requant_value(v, layer.shift),
    }
}

/// One layer end to end: MACs, bias, shortcut, activation, pooling.
pub fn layer_forward(
    layer: &LayerSpec,
    params: &crate::nn_model::LayerParams,
    ifm: &QuantTensor,
    shortcut: Option<&QuantTensor>,
) -> Result<QuantTensor, ModelError> {
    let acc = match layer.kind {
        LayerKind::Conv => conv2d(ifm, &params.weights, &params.bias, layer)?,
        LayerKind::Fc => {
            let out = fc(&ifm.flatten(), &params.weights, &params.bias)?;
            QuantTensor { dims: vec![(Axis::Channel, layer.m), (Axis::Height, 1), (Axis::Width, 1)], ..out }
        }
    };
    if let Some(s) = shortcut {
        if s.len() != acc.len() {
            return Err(mismatch("shortcut"));
        }
    }
    let values = acc.values.iter().enumerate().map(|(i, &v)| activate(layer, v, shortcut.map(|s| s.values[i]))).collect();
    let act = QuantTensor { dims: acc.dims.clone(), values, precision: Precision::Int8, shift: layer.shift };
    match layer.pool {
        None => Ok(act),
        Some(p) => match p.kind {
            PoolKind::Max => pool_max(&act, p.k, p.s),
            PoolKind::Avg => pool_avg(&act, p.k, p.s),
        },
    }
}

/// Whole-network reference: per-layer outputs (8-bit, after pooling).
pub fn forward(net: &NetworkSpec, params: &NetworkParams, input: &QuantTensor) -> Result<Vec<QuantTensor>, ModelError> {
    chain_shapes(net)?;
    let mut outs: Vec<QuantTensor> = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let src = match net.source_of(i) {
            None => input,
            Some(s) => &outs[s],
        };
        let shortcut = layer.residual.map(|r| &outs[r]);
        let out = layer_forward(layer, &params.layers[i], src, shortcut)?;
        outs.push(out);
    }
    Ok(outs)
}
