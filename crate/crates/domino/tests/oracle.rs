use domino::nn_model::*;
use domino::oracle::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: i32, hi: i32) -> Vec<i32> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn acc_vector(v: Vec<i32>) -> QuantTensor {
    QuantTensor::vector(v.len(), v, Precision::Acc32).unwrap()
}

/// Second convolution written from scratch: output-major over (x, y), then
/// filter taps, then channels, then filters; raw slices, no tensor helpers.
fn conv_ref(x: &[i32], w: &[i32], b: &[i32], l: &LayerSpec) -> Vec<i32> {
    let (e, f) = ((l.h + 2 * l.p - l.k) / l.s + 1, (l.w + 2 * l.p - l.k) / l.s + 1);
    let mut out = vec![0i32; l.m * e * f];
    for oy in 0..e {
        for ox in 0..f {
            let mut acc: Vec<i32> = b.to_vec();
            for ky in 0..l.k {
                for kx in 0..l.k {
                    let (iy, ix) = ((oy * l.s + ky) as isize - l.p as isize, (ox * l.s + kx) as isize - l.p as isize);
                    if iy < 0 || ix < 0 || iy >= l.h as isize || ix >= l.w as isize {
                        continue;
                    }
                    for c in 0..l.c {
                        let v = x[(c * l.h + iy as usize) * l.w + ix as usize];
                        for (m, a) in acc.iter_mut().enumerate() {
                            *a += v * w[((m * l.c + c) * l.k + ky) * l.k + kx];
                        }
                    }
                }
            }
            for (m, a) in acc.into_iter().enumerate() {
                out[(m * e + oy) * f + ox] = a;
            }
        }
    }
    out
}

#[test]
fn one_by_one_degenerate() {
    let l = LayerSpec::conv(1, 1, 1, 1, 0, 1, 1);
    let x = QuantTensor::chw(1, 1, 1, vec![-7]).unwrap();
    let w = QuantTensor::mckk(1, 1, 1, vec![5]).unwrap();
    let o = conv2d(&x, &w, &acc_vector(vec![3]), &l).unwrap();
    assert_eq!(o.values, vec![-32]);
}

#[test]
fn all_ones_counts_terms() {
    let l = LayerSpec::conv(3, 3, 2, 3, 0, 1, 1);
    let x = QuantTensor::chw(2, 3, 3, vec![1; 18]).unwrap();
    let w = QuantTensor::mckk(1, 2, 3, vec![1; 18]).unwrap();
    assert_eq!(conv2d(&x, &w, &acc_vector(vec![0]), &l).unwrap().values, vec![18]);
}

#[test]
fn conv_matches_independent_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (h, c, m) = (rng.gen_range(k..=12), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (p, s) = (rng.gen_range(0..=k / 2), rng.gen_range(1..=2));
        let l = LayerSpec::conv(h, h, c, k, p, s, m);
        let xv = rand_vals(&mut rng, c * h * h, -128, 127);
        let wv = rand_vals(&mut rng, m * c * k * k, -128, 127);
        let bv = rand_vals(&mut rng, m, -500, 500);
        let x = QuantTensor::chw(c, h, h, xv.clone()).unwrap();
        let w = QuantTensor::mckk(m, c, k, wv.clone()).unwrap();
        let o = conv2d(&x, &w, &acc_vector(bv.clone()), &l).unwrap();
        assert_eq!(o.values, conv_ref(&xv, &wv, &bv, &l));
    }
}

#[test]
fn group_sums_rebuild_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (h, c, m) = (rng.gen_range(k..=12), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let l = LayerSpec::conv(h, h, c, k, k / 2, 1, m);
        let x = QuantTensor::chw(c, h, h, rand_vals(&mut rng, c * h * h, -128, 127)).unwrap();
        let w = QuantTensor::mckk(m, c, k, rand_vals(&mut rng, m * c * k * k, -128, 127)).unwrap();
        let b = rand_vals(&mut rng, m, -100, 100);
        let o = conv2d(&x, &w, &acc_vector(b.clone()), &l).unwrap();
        let (e, f) = l.conv_shape().unwrap();
        for a in 0..e * f {
            let g = group_sums(&x, &w, &l, a).unwrap();
            let parts = partial_sums(&x, &w, &l, a).unwrap();
            for (bi, gb) in g.iter().enumerate() {
                for mm in 0..m {
                    let row: i32 = (0..k).map(|j| parts[bi * k + j][mm]).sum();
                    assert_eq!(row, gb[mm]);
                }
            }
            for mm in 0..m {
                let total: i32 = g.iter().map(|gb| gb[mm]).sum::<i32>() + b[mm];
                assert_eq!(total, o.values[(mm * e + a / f) * f + a % f]);
            }
            if k == 1 {
                assert_eq!(g.len(), 1);
            }
        }
    }
}

#[test]
fn conv_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let l = LayerSpec::conv(6, 6, 3, 3, 1, 1, 4);
    let xv = rand_vals(&mut rng, 108, -10, 10);
    let w = QuantTensor::mckk(4, 3, 3, rand_vals(&mut rng, 108, -10, 10)).unwrap();
    let bias = acc_vector(vec![7, -3, 0, 11]);
    let x = QuantTensor::chw(3, 6, 6, xv.clone()).unwrap();
    let x3 = QuantTensor::chw(3, 6, 6, xv.iter().map(|v| 3 * v).collect()).unwrap();
    let (o, o3) = (conv2d(&x, &w, &bias, &l).unwrap(), conv2d(&x3, &w, &bias, &l).unwrap());
    for (i, (a, b)) in o.values.iter().zip(&o3.values).enumerate() {
        let bm = bias.values[i / 36];
        assert_eq!(*b, 3 * a - 2 * bm);
    }
}

#[test]
fn full_window_conv_is_fc() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, c, m) = (4, 3, 5);
    let l = LayerSpec::conv(h, h, c, h, 0, 1, m);
    let xv = rand_vals(&mut rng, c * h * h, -128, 127);
    let wv = rand_vals(&mut rng, m * c * h * h, -128, 127);
    let bias = acc_vector(rand_vals(&mut rng, m, -50, 50));
    let x = QuantTensor::chw(c, h, h, xv).unwrap();
    let conv = conv2d(&x, &QuantTensor::mckk(m, c, h, wv.clone()).unwrap(), &bias, &l).unwrap();
    // FC weights are C_in x C_out
    let n = c * h * h;
    let mut wt = vec![0; n * m];
    for mm in 0..m {
        for i in 0..n {
            wt[i * m + mm] = wv[mm * n + i];
        }
    }
    let wfc = QuantTensor::new(vec![(Axis::Channel, n), (Axis::Filter, m)], wt, Precision::Int8).unwrap();
    assert_eq!(fc(&x.flatten(), &wfc, &bias).unwrap().values, conv.values);
}

#[test]
fn fc_identity_and_zero_input() {
    let n = 6;
    let mut w = vec![0; n * n];
    for i in 0..n {
        w[i * n + i] = 1;
    }
    let w = QuantTensor::new(vec![(Axis::Channel, n), (Axis::Filter, n)], w, Precision::Int8).unwrap();
    let x = QuantTensor::vector(n, vec![3, -1, 4, -1, 5, -9], Precision::Int8).unwrap();
    assert_eq!(fc(&x, &w, &acc_vector(vec![0; n])).unwrap().values, x.values);
    let zero = QuantTensor::vector(n, vec![0; n], Precision::Int8).unwrap();
    let b = acc_vector(vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(fc(&zero, &w, &b).unwrap().values, b.values);
}

#[test]
fn fc_equals_partitioned_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (cin, cout, nc, nm) = (512, 256, 128, 64);
    let xv = rand_vals(&mut rng, cin, -128, 127);
    let wv = rand_vals(&mut rng, cin * cout, -128, 127);
    let bv = rand_vals(&mut rng, cout, -1000, 1000);
    let x = QuantTensor::vector(cin, xv.clone(), Precision::Int8).unwrap();
    let w = QuantTensor::new(vec![(Axis::Channel, cin), (Axis::Filter, cout)], wv.clone(), Precision::Int8).unwrap();
    let y = fc(&x, &w, &acc_vector(bv.clone())).unwrap();
    // tile (t, a) holds rows t*nc.. and columns a*nm..; column tiles sum their partials
    let mut part = bv;
    for a in 0..cout / nm {
        for t in 0..cin / nc {
            for j in a * nm..(a + 1) * nm {
                let s: i32 = (t * nc..(t + 1) * nc).map(|i| xv[i] * wv[i * cout + j]).sum();
                part[j] += s;
            }
        }
    }
    assert_eq!(y.values, part);
}

#[test]
fn pooling_examples() {
    let t = QuantTensor::chw(1, 2, 2, vec![1, 2, 3, 4]).unwrap();
    assert_eq!(pool_max(&t, 2, 2).unwrap().values, vec![4]);
    assert_eq!(pool_avg(&t, 2, 2).unwrap().values, vec![3]);
    let n = QuantTensor::chw(1, 2, 2, vec![-1, -2, -3, -4]).unwrap();
    assert_eq!(pool_avg(&n, 2, 2).unwrap().values, vec![-3]);
    let c = QuantTensor::chw(2, 4, 4, vec![9; 32]).unwrap();
    assert!(pool_avg(&c, 2, 2).unwrap().values.iter().all(|&v| v == 9));
    assert!(pool_max(&c, 2, 2).unwrap().values.iter().all(|&v| v == 9));
}

#[test]
fn pooling_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = rand_vals(&mut rng, 2 * 16 * 16, -128, 127);
    let t = QuantTensor::chw(2, 16, 16, v.clone()).unwrap();
    for (kp, sp) in [(2, 2), (3, 2), (3, 3)] {
        let (mx, av) = (pool_max(&t, kp, sp).unwrap(), pool_avg(&t, kp, sp).unwrap());
        let o = (16 - kp) / sp + 1;
        for ch in 0..2 {
            for u in 0..o {
                for w in 0..o {
                    let win: Vec<i32> = (0..kp * kp).map(|q| v[(ch * 16 + u * sp + q / kp) * 16 + w * sp + q % kp]).collect();
                    let idx = (ch * o + u) * o + w;
                    assert_eq!(mx.values[idx], *win.iter().max().unwrap());
                    let sum: i32 = win.iter().sum();
                    // round half away from zero
                    let want = (sum.abs() as f64 / (kp * kp) as f64 + 0.5).floor() as i32 * sum.signum();
                    assert_eq!(av.values[idx], want);
                }
            }
        }
    }
}

#[test]
fn requantization_examples() {
    assert_eq!(relu_requant_value(-5, 0), 0);
    assert_eq!(relu_requant_value(300, 2), 75);
    assert_eq!(relu_requant_value(70000, 8), 127);
    assert_eq!(requant_value(-70000, 8), -128);
}

#[test]
fn forward_small_network() {
    let net = NetworkSpec {
        name: "tiny".into(),
        input: (6, 6, 2),
        layers: vec![LayerSpec::conv(6, 6, 2, 3, 1, 1, 4).with_pool(PoolKind::Avg, 2, 2), LayerSpec::fc(36, 3)],
    };
    let params = NetworkParams::random(&net, 1);
    let outs = forward(&net, &params, &random_input(&net, 1)).unwrap();
    assert_eq!(outs.len(), 2);
    assert_eq!(outs[1].len(), 3);
    assert!(outs.iter().all(|o| o.values.iter().all(|v| (-128..=127).contains(v))));
}
