mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use dcl::config::PipelineConfig;
use dcl::crf::{
    contour_affinity, crf_energy, mean_field_infer, residual_norm, smallest_eigenpairs, ContourEmbedding, CrfConfig,
    AFFINITY_RADIUS, EMBEDDING_DIM,
};
use dcl::data::{synthetic_samples, TEST_SEED_OFFSET};
use dcl::eval::{adaptive_threshold_prf, f_measure, mae, max_f, pr_curve, Metrics, BETA_SQ};
use dcl::fusion::attention_layers;
use dcl::image::{BinaryMap, GrayMap};
use dcl::msfcn::WeightStore;
use dcl::pipeline::{evaluate, Variant};
use dcl::segment_stream::{backproject_segment_mask, project_rf_centers, record_mlp};
use dcl::segmentation::{multi_level_segment, SegmentationLevel};
use dcl::tensor::{dilated_conv2d, zero_upsample_kernel, ConvSpec, Tape, Tensor, Var};
use dcl::train::{alternate_train, train_contour, TrainOptions};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {name} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name} ({secs:.1}s): {detail}");
            false
        }
    }
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;

fn targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn worst_over<F>(label: &str, rng: &mut ChaCha8Rng, mut instance: F) -> Result<f64, String>
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut worst: f64 = 0.0;
    for k in 0..GRAD_INSTANCES {
        let e = instance(rng);
        if e.is_nan() || e >= GRAD_TOL {
            return Err(format!("{label}: instance {k} has relative error {e:.3e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut report: Vec<(&str, f64)> = Vec::new();

    report.push((
        "conv",
        worst_over("conv", &mut rng, |rng| {
            let c = rng.gen_range(1..=2);
            let o = rng.gen_range(1..=3);
            let k = [1, 3][rng.gen_range(0..2)];
            let r = rng.gen_range(1..=2);
            let s = rng.gen_range(1..=2);
            let spec = ConvSpec::same(c, o, k, s, r);
            let x = random_tensor(rng, &[1, c, 6, 6], -1.0, 1.0);
            let w = random_tensor(rng, &spec.weight_dims(), -1.0, 1.0);
            let b = random_tensor(rng, &[o], -1.0, 1.0);
            let (oh, ow) = spec.output_hw(6, 6).unwrap();
            let t = targets(rng, o * oh * ow);
            gradcheck(&[x, w, b], |tape, xs| {
                let v: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
                let y = tape.conv2d(v[0], v[1], v[2], &spec).unwrap();
                (reduce(tape, y, &t), v)
            })
        })?,
    ));

    report.push((
        "max-pool",
        worst_over("max-pool", &mut rng, |rng| {
            let (window, stride, pad) = [(2, 2, 0), (3, 1, 1), (3, 2, 1)][rng.gen_range(0..3)];
            let x = distinct_tensor(rng, &[1, 2, 6, 6]);
            let mut probe = Tape::new();
            let pv = probe.constant(x.clone());
            let n = probe.max_pool(pv, window, stride, pad).unwrap();
            let t = targets(rng, probe.value(n).len());
            gradcheck(&[x], |tape, xs| {
                let v = tape.param(xs[0].clone());
                let y = tape.max_pool(v, window, stride, pad).unwrap();
                (reduce(tape, y, &t), vec![v])
            })
        })?,
    ));

    report.push((
        "sigmoid",
        worst_over("sigmoid", &mut rng, |rng| {
            let x = random_tensor(rng, &[1, 1, 4, 5], -4.0, 4.0);
            let t = targets(rng, 20);
            gradcheck(&[x], |tape, xs| {
                let v = tape.param(xs[0].clone());
                let y = tape.sigmoid(v);
                (reduce(tape, y, &t), vec![v])
            })
        })?,
    ));

    report.push((
        "softmax",
        worst_over("softmax", &mut rng, |rng| {
            let c = rng.gen_range(2..=4);
            let x = random_tensor(rng, &[1, c, 3, 4], -3.0, 3.0);
            let t = targets(rng, c * 12);
            gradcheck(&[x], |tape, xs| {
                let v = tape.param(xs[0].clone());
                let y = tape.softmax_channels(v).unwrap();
                (reduce(tape, y, &t), vec![v])
            })
        })?,
    ));

    report.push((
        "bilinear",
        worst_over("bilinear", &mut rng, |rng| {
            let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
            let (oh, ow) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
            let x = random_tensor(rng, &[1, 2, h, w], -1.0, 1.0);
            let t = targets(rng, 2 * oh * ow);
            gradcheck(&[x], |tape, xs| {
                let v = tape.param(xs[0].clone());
                let y = tape.bilinear_resize(v, oh, ow).unwrap();
                (reduce(tape, y, &t), vec![v])
            })
        })?,
    ));

    report.push((
        "balanced-bce",
        worst_over("balanced-bce", &mut rng, |rng| {
            let p = random_tensor(rng, &[1, 1, 4, 4], 0.05, 0.95);
            let mut gt: Vec<f64> = (0..16).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
            gt[0] = 1.0;
            gt[1] = 0.0;
            gradcheck(&[p], |tape, xs| {
                let v = tape.param(xs[0].clone());
                (tape.balanced_bce(v, &gt).unwrap(), vec![v])
            })
        })?,
    ));

    report.push((
        "squared-error",
        worst_over("squared-error", &mut rng, |rng| {
            let x = random_tensor(rng, &[7, 1], 0.0, 1.0);
            let labels: Vec<f64> = (0..7).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
            gradcheck(&[x], |tape, xs| {
                let v = tape.param(xs[0].clone());
                (tape.squared_error(v, &labels).unwrap(), vec![v])
            })
        })?,
    ));

    const MLP_NAMES: [&str; 4] = ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"];
    report.push((
        "mlp",
        worst_over("mlp", &mut rng, |rng| {
            let (n, d, h) = (rng.gen_range(1..=4), rng.gen_range(2..=6), rng.gen_range(2..=5));
            let inputs = vec![
                random_tensor(rng, &[n, d], -1.0, 1.0),
                random_tensor(rng, &[d, h], -1.0, 1.0),
                random_tensor(rng, &[h], -0.5, 0.5),
                random_tensor(rng, &[h, 1], -1.0, 1.0),
                random_tensor(rng, &[1], -0.5, 0.5),
            ];
            let t = targets(rng, n);
            gradcheck(&inputs, |tape, xs| {
                let mut store = WeightStore::new();
                for (name, t) in MLP_NAMES.iter().zip(&xs[1..]) {
                    store.insert(*name, t.clone()).unwrap();
                }
                let x = tape.param(xs[0].clone());
                let vars = record_mlp(tape, &store, x, true).unwrap();
                let mut all = vec![x];
                all.extend(vars.params.iter().map(|(_, v)| *v));
                (reduce(tape, vars.scores, &t), all)
            })
        })?,
    ));

    report.push((
        "attention",
        worst_over("attention", &mut rng, |rng| {
            let (c, hidden) = (rng.gen_range(1..=3), rng.gen_range(2..=4));
            let layers = attention_layers(c, hidden);
            let mut inputs = vec![random_tensor(rng, &[1, c, 4, 4], -1.0, 1.0)];
            let mut names = Vec::new();
            for l in &layers {
                inputs.push(random_tensor(rng, &l.spec.weight_dims(), -1.0, 1.0));
                inputs.push(random_tensor(rng, &[l.spec.out_channels], -0.5, 0.5));
                names.push(format!("{}.weight", l.name));
                names.push(format!("{}.bias", l.name));
            }
            let t = targets(rng, 2 * 16);
            gradcheck(&inputs, |tape, xs| {
                let mut store = WeightStore::new();
                for (name, t) in names.iter().zip(&xs[1..]) {
                    store.insert(name.clone(), t.clone()).unwrap();
                }
                let f = tape.param(xs[0].clone());
                let mut params = IndexMap::new();
                let att = dcl::fusion::record_attention(tape, &store, f, &mut params, true).unwrap();
                let mut all = vec![f];
                all.extend(names.iter().map(|n| params[n]));
                (reduce(tape, att, &t), all)
            })
        })?,
    ));

    let summary: Vec<String> = report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!(
        "{} ops x {GRAD_INSTANCES} instances, worst relative error per op: {}",
        report.len(),
        summary.join(", ")
    ))
}

// ----------------------------------------------------------------- dilation

/// Direct evaluation of the convolution sum, accumulating taps in `(c, i, j)`
/// order before adding the bias.
fn naive_conv(x: &Tensor, spec: &ConvSpec, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (_, c, h, wd) = x.nchw().unwrap();
    let (oh, ow) = spec.output_hw(h, wd).unwrap();
    let mut out = Vec::with_capacity(spec.out_channels * oh * ow);
    for o in 0..spec.out_channels {
        for p in 0..oh {
            for q in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for i in 0..spec.kernel_h {
                        for j in 0..spec.kernel_w {
                            let y = (p * spec.stride + spec.dilation * i) as isize - spec.padding as isize;
                            let xx = (q * spec.stride + spec.dilation * j) as isize - spec.padding as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let wv = w.data()[((o * c + ci) * spec.kernel_h + i) * spec.kernel_w + j];
                            acc += wv * x.data()[(ci * h + y as usize) * wd + xx as usize];
                        }
                    }
                }
                out.push(acc + b.data()[o]);
            }
        }
    }
    out
}

fn dilation_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    let mut worst_naive: f64 = 0.0;
    for r in 1..=5 {
        for stride in 1..=5 {
            for kernel in 1..=5 {
                let c = rng.gen_range(1..=3);
                let o = rng.gen_range(1..=3);
                let (h, w) = (rng.gen_range(12..=24), rng.gen_range(12..=24));
                let mut spec = ConvSpec::same(c, o, kernel, stride, r);
                spec.padding = rng.gen_range(0..=spec.padding.max(1));
                if spec.output_hw(h, w).is_err() {
                    continue;
                }
                let x = random_tensor(&mut rng, &[1, c, h, w], -1.0, 1.0);
                let wt = random_tensor(&mut rng, &spec.weight_dims(), -1.0, 1.0);
                let b = random_tensor(&mut rng, &[o], -1.0, 1.0);
                let dilated = dilated_conv2d(&x, &spec, &wt, &b).map_err(|e| e.to_string())?;
                let up = zero_upsample_kernel(&wt, r).map_err(|e| e.to_string())?;
                let dense = dilated_conv2d(&x, &spec.zero_upsampled(), &up, &b).map_err(|e| e.to_string())?;
                ensure(dilated.dims() == dense.dims(), || format!("r={r} s={stride} k={kernel}: dims differ"))?;
                for (a, d) in dilated.data().iter().zip(dense.data()) {
                    ensure(a.to_bits() == d.to_bits(), || {
                        format!("r={r} s={stride} k={kernel}: {a:e} != {d:e}")
                    })?;
                }
                for (a, n) in dilated.data().iter().zip(naive_conv(&x, &spec, &wt, &b)) {
                    worst_naive = worst_naive.max((a - n).abs());
                }
                cases += 1;
            }
        }
    }
    ensure(worst_naive == 0.0, || format!("direct sum differs by {worst_naive:e}"))?;
    ensure(cases >= 100, || format!("only {cases} valid configurations"))?;
    Ok(format!(
        "{cases} (r, stride, kernel) configurations bit-equal to the zero-upsampled kernel and to the direct sum"
    ))
}

// ---------------------------------------------------------------------- CRF

fn exact_marginals(
    s: &GrayMap,
    image: &dcl::image::RgbImage,
    embedding: Option<&ContourEmbedding>,
    cfg: &CrfConfig,
) -> Vec<f64> {
    let n = s.data.len();
    let energies: Vec<(Vec<u8>, f64)> = (0..1u32 << n)
        .map(|code| {
            let labels: Vec<u8> = (0..n).map(|i| ((code >> i) & 1) as u8).collect();
            let e = crf_energy(&labels, s, image, embedding, cfg).unwrap();
            (labels, e)
        })
        .collect();
    let e_min = energies.iter().map(|(_, e)| *e).fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut m = vec![0.0; n];
    for (labels, e) in &energies {
        let p = (e_min - e).exp();
        z += p;
        for (mi, &l) in m.iter_mut().zip(labels) {
            if l == 1 {
                *mi += p;
            }
        }
    }
    m.iter().map(|v| v / z).collect()
}

fn crf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (4, 3);
    let mut worst: f64 = 0.0;
    let instances = 12;
    for k in 0..instances {
        let image = random_image(&mut rng, w, h);
        let s = GrayMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let coupling = rng.gen_range(0.005..=0.05);
        let cfg = CrfConfig {
            w1: coupling,
            w2: coupling,
            iterations: 30,
            normalize: false,
            ..CrfConfig::default()
        };
        let embedding = (k % 2 == 1).then(|| {
            let mut e = ContourEmbedding::zeros(w, h, 4);
            e.features.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            e
        });
        let exact = exact_marginals(&s, &image, embedding.as_ref(), &cfg);
        let mf = mean_field_infer(&s, &image, embedding.as_ref(), &cfg).map_err(|e| e.to_string())?;
        let d = exact.iter().zip(&mf.map.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(d <= 0.05, || format!("instance {k}: L-inf gap {d:.4}"))?;
        worst = worst.max(d);

        let off = CrfConfig { w1: 0.0, w2: 0.0, ..cfg };
        let id = mean_field_infer(&s, &image, None, &off).map_err(|e| e.to_string())?;
        let gap = id.map.data.iter().zip(&s.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(gap <= 1e-12, || format!("instance {k}: zero coupling moves the posterior by {gap:e}"))?;
    }
    Ok(format!(
        "{instances} random 4x3 images against 4096-labeling enumeration, worst L-inf {worst:.2e}; zero coupling is identity"
    ))
}

// ----------------------------------------------------------------- spectral

fn grid_map(n: usize, f: impl Fn(f64, f64) -> f64) -> GrayMap {
    GrayMap::new(n, n, (0..n * n).map(|i| f((i / n) as f64, (i % n) as f64)).collect()).unwrap()
}

fn spectral_embedding() -> Outcome {
    let n = 32;
    let c = (n as f64 - 1.0) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let blobs: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0), rng.gen_range(3.0..9.0)))
        .collect();
    let noisy = grid_map(n, |r, col| {
        let edge = blobs
            .iter()
            .map(|&(br, bc, rad)| (-((((r - br).powi(2) + (col - bc).powi(2)).sqrt() - rad).powi(2)) / 2.0).exp())
            .fold(0.0, f64::max);
        (edge + 0.05 * ((r * 1.3 + col * 0.7).sin() + 1.0)).min(1.0)
    });

    let mut worst: f64 = 0.0;
    for (label, map) in [("contour", &noisy)] {
        let w = contour_affinity(map, AFFINITY_RADIUS, 0.1);
        let pairs = smallest_eigenpairs(&w, EMBEDDING_DIM).map_err(|e| e.to_string())?;
        ensure(pairs.values.len() == EMBEDDING_DIM, || format!("{label}: {} pairs", pairs.values.len()))?;
        for (k, (&lambda, v)) in pairs.values.iter().zip(&pairs.vectors).enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let res = residual_norm(&w, &pairs.degrees, lambda, v);
            ensure(res <= 1e-8 * norm, || format!("{label}: pair {k} residual {res:e} vs norm {norm:e}"))?;
            worst = worst.max(res / norm);
        }
    }

    let zero = GrayMap::filled(n, n, 0.0);
    let w = contour_affinity(&zero, AFFINITY_RADIUS, 0.1);
    let pairs = smallest_eigenpairs(&w, EMBEDDING_DIM).map_err(|e| e.to_string())?;
    let l0 = pairs.values[0];
    ensure(l0.abs() <= 1e-10, || format!("flat map: smallest eigenvalue {l0:e}"))?;
    let v0 = &pairs.vectors[0];
    let (lo, hi) = v0.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    ensure(hi - lo <= 1e-8 * hi.abs().max(lo.abs()), || format!("flat map: first vector spans [{lo:e}, {hi:e}]"))?;
    for (k, (&lambda, v)) in pairs.values.iter().zip(&pairs.vectors).enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let res = residual_norm(&w, &pairs.degrees, lambda, v);
        ensure(res <= 1e-8 * norm, || format!("flat map: pair {k} residual {res:e}"))?;
    }

    let ring = grid_map(n, |r, col| {
        let d = ((r - c).powi(2) + (col - c).powi(2)).sqrt();
        if (d - 9.0).abs() < 1.0 {
            1.0
        } else {
            0.0
        }
    });
    let w = contour_affinity(&ring, AFFINITY_RADIUS, 0.1);
    let pairs = smallest_eigenpairs(&w, EMBEDDING_DIM).map_err(|e| e.to_string())?;
    let l1 = pairs.values[1];
    ensure(l1 < 1e-3, || format!("ring: second eigenvalue {l1:e}"))?;
    let v1 = &pairs.vectors[1];
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (i, &x) in v1.iter().enumerate() {
        let d = (((i / n) as f64 - c).powi(2) + ((i % n) as f64 - c).powi(2)).sqrt();
        if d < 7.0 {
            inside.push(x);
        } else if d > 11.0 {
            outside.push(x);
        }
    }
    let sign = inside[0].signum();
    ensure(inside.iter().all(|&x| x.signum() == sign), || "ring: inside changes sign".into())?;
    ensure(outside.iter().all(|&x| x.signum() == -sign), || "ring: outside not opposite to inside".into())?;
    Ok(format!(
        "16 pairs at 32x32, worst residual/norm {worst:.1e}; flat map lambda0 {l0:.1e} with constant vector; ring lambda1 {l1:.1e} with sign-separated regions"
    ))
}

// ------------------------------------------------------------------ metrics

/// Confusion counts of one binarization.
fn confusion(pred: impl Iterator<Item = bool>, gt: &BinaryMap) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, &g) in pred.zip(&gt.data) {
        match (p, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut maps = Vec::new();
    let mut gts = Vec::new();
    for k in 0..50 {
        let (w, h) = (rng.gen_range(5..=20), rng.gen_range(5..=20));
        let mut m = random_map(&mut rng, w, h);
        if k % 7 == 0 {
            m.data.iter_mut().for_each(|v| *v = (*v * 4.0).floor() / 4.0);
        }
        let p = [0.0, 0.1, 0.3, 0.6, 1.0][k % 5];
        maps.push(m);
        gts.push(random_mask(&mut rng, w, h, p));
    }
    let n = maps.len() as f64;

    let curve = pr_curve(&maps, &gts).map_err(|e| e.to_string())?;
    let mut bf_p = vec![0.0; 256];
    let mut bf_r = vec![0.0; 256];
    for (m, g) in maps.iter().zip(&gts) {
        let q = m.to_u8();
        for t in 0..256 {
            let (tp, fp, fn_) = confusion(q.iter().map(|&v| v as usize >= t), g);
            let (p, r) = precision_recall(tp, fp, fn_);
            bf_p[t] += p;
            bf_r[t] += r;
        }
    }
    bf_p.iter_mut().chain(bf_r.iter_mut()).for_each(|v| *v /= n);
    ensure(curve.precision == bf_p, || "precision curve differs from brute force".into())?;
    ensure(curve.recall == bf_r, || "recall curve differs from brute force".into())?;

    let bf_max = bf_p
        .iter()
        .zip(&bf_r)
        .map(|(&p, &r)| f_measure(p, r, BETA_SQ))
        .fold(0.0, f64::max);
    let mf = max_f(&curve);
    ensure(mf == bf_max, || format!("maxF {mf} vs brute force {bf_max}"))?;

    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (m, g) in maps.iter().zip(&gts) {
        let mean = m.data.iter().sum::<f64>() / m.data.len() as f64;
        let max = m.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let thr = (2.0 * mean).min(max);
        let (tp, fp, fn_) = confusion(m.data.iter().map(|&v| v >= thr), g);
        let (p, r) = precision_recall(tp, fp, fn_);
        sp += p;
        sr += r;
        sf += f_measure(p, r, BETA_SQ);
    }
    let adaptive = adaptive_threshold_prf(&maps, &gts).map_err(|e| e.to_string())?;
    ensure(adaptive == (sp / n, sr / n, sf / n), || format!("adaptive {adaptive:?} differs"))?;

    let bf_mae = maps
        .iter()
        .zip(&gts)
        .map(|(m, g)| {
            m.data.iter().zip(&g.data).map(|(&s, &b)| (s - f64::from(b)).abs()).sum::<f64>() / m.data.len() as f64
        })
        .sum::<f64>()
        / n;
    let got = mae(&maps, &gts).map_err(|e| e.to_string())?;
    ensure(got == bf_mae, || format!("MAE {got} vs brute force {bf_mae}"))?;

    let f = f_measure(0.8, 0.4, 0.3);
    ensure((f - 0.65).abs() <= 1e-12, || format!("F(0.8, 0.4) = {f}"))?;
    Ok(format!("50 random pairs match brute force exactly (maxF {mf:.4}, MAE {got:.4}); F(0.8, 0.4) = {f:.12}"))
}

// ----------------------------------------------------------------- geometry

fn check_partition(level: &SegmentationLevel) -> Result<(), String> {
    let (w, h) = (level.width, level.height);
    let mut owner = vec![usize::MAX; w * h];
    for (k, seg) in level.segments.iter().enumerate() {
        ensure(seg.id == k, || format!("segment {k} has id {}", seg.id))?;
        ensure(!seg.pixels.is_empty(), || format!("segment {k} is empty"))?;
        for &p in &seg.pixels {
            ensure(owner[p] == usize::MAX, || format!("pixel {p} in two segments"))?;
            owner[p] = k;
            ensure(level.labels[p] as usize == k, || format!("pixel {p} label mismatch"))?;
            let (r, c) = (p / w, p % w);
            ensure(
                seg.bbox.min_row <= r && r <= seg.bbox.max_row && seg.bbox.min_col <= c && c <= seg.bbox.max_col,
                || format!("pixel {p} outside bbox of segment {k}"),
            )?;
        }
        let rows = seg.pixels.iter().map(|p| p / w);
        let cols = seg.pixels.iter().map(|p| p % w);
        let tight = (rows.clone().min(), rows.max(), cols.clone().min(), cols.max())
            == (Some(seg.bbox.min_row), Some(seg.bbox.max_row), Some(seg.bbox.min_col), Some(seg.bbox.max_col));
        ensure(tight, || format!("bbox of segment {k} is not tight"))?;
    }
    ensure(owner.iter().all(|&o| o != usize::MAX), || "some pixel has no segment".into())?;

    let mut adj = vec![std::collections::BTreeSet::new(); level.len()];
    for y in 0..h {
        for x in 0..w {
            for (dy, dx) in [(0isize, 1isize), (1, 0), (1, 1), (1, -1)] {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let (a, b) = (owner[y * w + x], owner[yy as usize * w + xx as usize]);
                if a != b {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        }
    }
    for (k, seg) in level.segments.iter().enumerate() {
        let expected: Vec<usize> = adj[k].iter().copied().collect();
        ensure(seg.neighbors == expected, || format!("segment {k} adjacency differs from 8-neighbour contacts"))?;
        ensure(!seg.neighbors.contains(&k), || format!("segment {k} is its own neighbour"))?;
        for &j in &seg.neighbors {
            ensure(level.segments[j].neighbors.contains(&k), || format!("adjacency {k}-{j} not symmetric"))?;
        }
    }
    Ok(())
}

fn segment_geometry() -> Outcome {
    let cfg = PipelineConfig::default();
    let n = cfg.image_size;
    let rf = project_rf_centers(&cfg.net, n, n);
    let mut corpus = synthetic_samples(cfg.train_samples, cfg.seed, n, n);
    corpus.extend(synthetic_samples(cfg.test_samples, cfg.seed.wrapping_add(TEST_SEED_OFFSET), n, n));
    let mut segments = 0;
    for s in &corpus {
        let levels = multi_level_segment(&s.image, &cfg.levels).map_err(|e| e.to_string())?;
        for (l, level) in levels.iter().enumerate() {
            for seg in &level.segments {
                ensure(backproject_segment_mask(seg, &rf).iter().any(|&m| m), || {
                    format!("{}: level {l} segment {} has an empty mask", s.name, seg.id)
                })?;
                segments += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut levels_checked = 0;
    for k in 0..100 {
        let (w, h) = (rng.gen_range(8..=48), rng.gen_range(8..=48));
        let image = if k % 2 == 0 {
            random_image(&mut rng, w, h)
        } else {
            dcl::data::synth_sample(&mut rng, w, h).0
        };
        for level in multi_level_segment(&image, &cfg.levels).map_err(|e| e.to_string())? {
            check_partition(&level).map_err(|e| format!("random image {k}: {e}"))?;
            levels_checked += 1;
        }
    }
    Ok(format!(
        "{segments} segments over {} corpus images have non-empty masks; {levels_checked} levels on 100 random images are valid partitions",
        corpus.len()
    ))
}

// --------------------------------------------------------------- end to end

const TOY_VARIANTS: [Variant; 5] = [
    Variant::S1,
    Variant::S2,
    Variant::Fused,
    Variant::CrfNoContour,
    Variant::Crf,
];

fn toy_run() -> dcl::Result<IndexMap<Variant, Metrics>> {
    let cfg = PipelineConfig::default();
    let n = cfg.image_size;
    let train = synthetic_samples(cfg.train_samples, cfg.seed, n, n);
    let test = synthetic_samples(cfg.test_samples, cfg.seed.wrapping_add(TEST_SEED_OFFSET), n, n);
    let opts = TrainOptions::default();
    let (mut model, _) = alternate_train(&cfg, &train, &opts)?;
    let (contour, _) = train_contour(&cfg, &train, &opts)?;
    model.contour = Some(contour);
    Ok(evaluate(&cfg, &model, &test, &TOY_VARIANTS, "synthetic")?.metrics)
}

fn end_to_end(metrics: &IndexMap<Variant, Metrics>) -> Outcome {
    let f = |v: Variant| metrics[&v].max_f;
    let row: Vec<String> = metrics
        .iter()
        .map(|(v, m)| format!("{v} maxF {:.4} MAE {:.4}", m.max_f, m.mae))
        .collect();
    let row = row.join("; ");
    let fused = &metrics[&Variant::Fused];
    ensure(fused.max_f >= 0.80, || format!("fused maxF {:.4} < 0.80 [{row}]", fused.max_f))?;
    ensure(fused.mae <= 0.15, || format!("fused MAE {:.4} > 0.15 [{row}]", fused.mae))?;
    for single in [Variant::S1, Variant::S2] {
        ensure(fused.max_f > f(single), || format!("fused does not beat {single} [{row}]"))?;
    }
    let drop = fused.max_f - f(Variant::Crf);
    ensure(drop <= 0.01, || format!("crf lowers maxF by {drop:.4} [{row}]"))?;
    Ok(row)
}

fn determinism(first: &IndexMap<Variant, Metrics>) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let second = pool.install(toy_run).map_err(|e| e.to_string())?;
    for (v, m) in first {
        let r = &second[v];
        let same = m.max_f.to_bits() == r.max_f.to_bits()
            && m.mae.to_bits() == r.mae.to_bits()
            && m.adaptive_f.to_bits() == r.adaptive_f.to_bits()
            && m.curve == r.curve;
        ensure(same, || format!("{v}: single-threaded rerun differs (maxF {} vs {})", m.max_f, r.max_f))?;
    }
    Ok(format!("{} variants reproduced bit-exactly with one thread", first.len()))
}

#[test]
fn acceptance() {
    let mut results = vec![
        run("1 gradient correctness", gradient_checks),
        run("2 dilation equivalence", dilation_equivalence),
        run("3 crf oracle", crf_oracle),
        run("4 spectral embedding", spectral_embedding),
        run("5 metric oracles", metric_oracles),
        run("6 segment-stream geometry", segment_geometry),
    ];
    let mut first = None;
    results.push(run("7 toy end-to-end", || {
        let m = toy_run().map_err(|e| e.to_string())?;
        let out = end_to_end(&m);
        first = Some(m);
        out
    }));
    results.push(run("8 determinism", || match &first {
        Some(m) => determinism(m),
        None => Err("end-to-end run did not complete".into()),
    }));
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
