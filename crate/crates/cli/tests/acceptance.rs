//! Acceptance suite: one PASS/FAIL line per criterion, with timings.
//!
//! Runs without the libtest harness; exits non-zero if any criterion fails.
//! The training criteria share one synthetic dataset and take several
//! minutes on a single CPU.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use landsynth::data::{load_manifest, BatchAssembler, DatasetKind, DatasetManifest, NormalizationSpec, Split};
use landsynth::editing::{erode, flood_edit, FloodSpec};
use landsynth::losses::{d_hinge, g_hinge, g_total, scalar, LossWeights};
use landsynth::metrics::{confusion, frechet_distance, iou_miou_pixacc, ConfusionMatrix};
use landsynth::nets::discriminator::score_map_size;
use landsynth::nets::layers::{leaky_relu, Conv2d, ConvSpec, BN_EPS};
use landsynth::nets::spade::Spade;
use landsynth::nets::{
    spectral_norm_step, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, ParamBuilder,
    ParamStore, Variant,
};
use landsynth::training::{checkpoint_name, fit, FitReport, StepMetrics, TrainConfig, Trainer};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Suite {
    failures: usize,
    total: usize,
}

impl Suite {
    fn run(&mut self, name: &str, budget: Option<Duration>, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = match (result, budget) {
            (Ok(detail), Some(b)) if took > b => Err(format!("{detail}; exceeded the {:.0?} budget", b)),
            (r, _) => r,
        };
        let budget = budget.map_or(String::new(), |b| format!(" / {b:.0?}"));
        self.total += 1;
        match result {
            Ok(detail) => println!("PASS  {name:<28} {:>9.2?}{budget}  {detail}", took),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name:<28} {:>9.2?}{budget}  {detail}", took);
            }
        }
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// ------------------------------------------------------------------- losses

fn loss_closed_forms() -> Check {
    let full = |v: f64| Tensor::full(v, (2, 1, 5, 5), &Device::Cpu).unwrap();
    let d = |r: f64, f: f64| scalar(&d_hinge(&[full(r)], &[full(f)]).unwrap()).unwrap();
    let g = |f: f64| scalar(&g_hinge(&[full(f)]).unwrap()).unwrap();
    let pair = Tensor::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
    let mixed = scalar(&g_hinge(&[pair]).unwrap()).unwrap();
    let cases = [
        ("d_hinge(1,-1)", d(1.0, -1.0), 0.0),
        ("d_hinge(0,0)", d(0.0, 0.0), 2.0),
        ("d_hinge(-1,1)", d(-1.0, 1.0), 4.0),
        ("g_hinge(0)", g(0.0), 0.0),
        ("g_hinge(2)", g(2.0), -2.0),
        ("g_hinge(-1)", g(-1.0), 1.0),
        ("g_hinge([1,-1])", mixed, 0.0),
    ];
    for (name, got, want) in cases {
        ensure((got - want).abs() <= 1e-12, || format!("{name} = {got}, expected {want}"))?;
    }
    Ok(format!("{} cases exact to 1e-12", cases.len()))
}

// ---------------------------------------------------------- gradient check

struct Toy {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl Toy {
    fn new(seed: u64, channels: [usize; 3], act_tanh: bool) -> (Self, bool) {
        let store = ParamStore::new(DType::F64);
        let pb = ParamBuilder::new(&store, seed);
        let convs = (0..2)
            .map(|i| Conv2d::new(&pb.pp(format!("conv_{i}")), ConvSpec::new(channels[i], channels[i + 1], 3)).unwrap())
            .collect();
        // Default init leaves the toy activations near the activation kinks,
        // where central differences are unreliable; use O(1) pre-activations.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (_, var) in store.trainable() {
            let n = var.elem_count();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            var.set(&Tensor::from_vec(v, var.shape().clone(), &Device::Cpu).unwrap()).unwrap();
        }
        (Toy { store, convs }, act_tanh)
    }

    /// Hidden activation and output.
    fn forward(&self, x: &Tensor, tanh: bool) -> (Tensor, Tensor) {
        let h = leaky_relu(&self.convs[0].forward(x, Mode::Train).unwrap(), 0.2).unwrap();
        let y = self.convs[1].forward(&h, Mode::Train).unwrap();
        let y = if tanh { y.tanh().unwrap() } else { y };
        (h, y)
    }
}

/// Relative error `|g_a - g_n| / max(|g_a|, |g_n|)` between backprop and
/// central differences, over all parameters of `net` as one vector.
fn compare_gradients(net: &ParamStore, loss: &dyn Fn() -> Tensor) -> Result<f64, String> {
    let grads = loss().backward().map_err(err)?;
    let h = 1e-6;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (name, var) in net.trainable() {
        let g = grads
            .get(var.as_tensor())
            .ok_or_else(|| format!("no gradient for {name}"))?
            .flatten_all()
            .and_then(|t| t.to_vec1::<f64>())
            .map_err(err)?;
        analytic.extend(g);
        let shape = var.shape().clone();
        let base = var.flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(err)?;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss()).unwrap()
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).map_err(err)?;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    Ok(norm(&diff) / norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE))
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut random = |shape: (usize, usize, usize, usize)| {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), shape, &Device::Cpu)
            .unwrap()
    };
    let z = random((2, 2, 6, 6));
    let real = random((2, 3, 6, 6));
    let (gen, g_tanh) = Toy::new(1, [2, 4, 3], true);
    let (disc, d_tanh) = Toy::new(2, [3, 4, 1], false);

    let d_loss = || {
        let fake = gen.forward(&z, g_tanh).1.detach();
        let (_, sr) = disc.forward(&real, d_tanh);
        let (_, sf) = disc.forward(&fake, d_tanh);
        d_hinge(&[sr], &[sf]).unwrap()
    };
    let g_loss = || {
        let fake = gen.forward(&z, g_tanh).1;
        let (hr, _) = disc.forward(&real, d_tanh);
        let (hf, sf) = disc.forward(&fake, d_tanh);
        g_total(&[sf], &[vec![hf]], &[vec![hr]], LossWeights::default()).unwrap().total
    };
    let ed = compare_gradients(&disc.store, &d_loss)?;
    let eg = compare_gradients(&gen.store, &g_loss)?;
    ensure(ed < 1e-3 && eg < 1e-3, || format!("relative errors d_hinge {ed:.2e}, g_total {eg:.2e}"))?;
    Ok(format!("max relative error d_hinge {ed:.1e}, g_total {eg:.1e} (f64)"))
}

// ----------------------------------------------------------- spectral norm

fn spectral_norm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let rows = rng.random_range(4..96);
        let cols = rng.random_range(4..200);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(data, (rows, cols), &Device::Cpu).map_err(err)?;
        let u0: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u0.iter().map(|x| x * x).sum::<f32>().sqrt();
        let mut u = Tensor::from_vec(u0.iter().map(|x| x / norm).collect::<Vec<_>>(), rows, &Device::Cpu).map_err(err)?;
        let mut v = None;
        let mut step = None;
        for _ in 0..50 {
            let s = spectral_norm_step(&w, &u, v.as_ref()).map_err(err)?;
            u = s.u.clone();
            v = Some(s.v.clone());
            step = Some(s);
        }
        let normalized = step.unwrap().weight.to_dtype(DType::F64).and_then(|t| t.to_vec2::<f64>()).map_err(err)?;
        let m = DMatrix::from_fn(rows, cols, |i, j| normalized[i][j]);
        let sigma = m.singular_values().max();
        ensure((0.99..=1.01).contains(&sigma), || format!("{rows}x{cols}: sigma_max {sigma}"))?;
        worst = worst.max((sigma - 1.0).abs());
    }
    Ok(format!("20 matrices, max |sigma_max - 1| = {worst:.2e}"))
}

// ---------------------------------------------------------------- SPADE

fn spade_identity() -> Check {
    let (n, c, h, w, classes) = (3, 8, 12, 12, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(-3.0..5.0)).collect();
    let x = Tensor::from_vec(xs.clone(), (n, c, h, w), &Device::Cpu).map_err(err)?;
    let labels: Vec<usize> = (0..n * h * w).map(|_| rng.random_range(0..classes)).collect();
    let mut onehot = vec![0f32; n * classes * h * w];
    for b in 0..n {
        for p in 0..h * w {
            onehot[(b * classes + labels[b * h * w + p]) * h * w + p] = 1.0;
        }
    }
    let seg = Tensor::from_vec(onehot, (n, classes, h, w), &Device::Cpu).map_err(err)?;

    let store = ParamStore::new(DType::F32);
    let spade = Spade::new(&ParamBuilder::new(&store, 3), c, classes, 16, false).map_err(err)?;
    for (name, var) in store.trainable() {
        if name.contains("mlp_gamma") || name.contains("mlp_beta") {
            var.set(&var.zeros_like().map_err(err)?).map_err(err)?;
        }
    }
    let y = spade.forward(&x, &seg, Mode::Train).map_err(err)?;
    let y = y.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(err)?;
    let mut dev: f64 = 0.0;
    let plane = h * w;
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..plane).map(move |p| (b * c + ch) * plane + p))
            .map(|i| f64::from(xs[i]))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for p in 0..plane {
                let i = (b * c + ch) * plane + p;
                let want = (f64::from(xs[i]) - mean) / (var + BN_EPS).sqrt();
                dev = dev.max((f64::from(y[i]) - want).abs());
            }
        }
    }
    ensure(dev <= 1e-5, || format!("max deviation from batch norm {dev:.2e}"))?;

    let fresh = ParamStore::new(DType::F32);
    let spade = Spade::new(&ParamBuilder::new(&fresh, 4), c, classes, 16, true).map_err(err)?;
    let mut uniform = vec![0f32; n * classes * h * w];
    for b in 0..n {
        for p in 0..plane {
            uniform[(b * classes + 2) * plane + p] = 1.0;
        }
    }
    let seg = Tensor::from_vec(uniform, (n, classes, h, w), &Device::Cpu).map_err(err)?;
    let (gamma, beta) = spade.modulation(&seg, h, w, Mode::Train).map_err(err)?;
    let mut spread: f64 = 0.0;
    let mut magnitude: f64 = 0.0;
    for t in [gamma, beta] {
        let rows = t
            .to_dtype(DType::F64)
            .and_then(|t| t.reshape((n * c, h * w)))
            .and_then(|t| t.to_vec2::<f64>())
            .map_err(err)?;
        for r in rows {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
            spread = spread.max(std);
            magnitude = magnitude.max(mean.abs());
        }
    }
    ensure(spread == 0.0, || format!("uniform map gives spatial std {spread:e}"))?;
    ensure(magnitude > 0.0, || "modulation is identically zero".into())?;
    Ok(format!("max deviation {dev:.1e}; uniform-map spatial std of gamma/beta = 0"))
}

// ----------------------------------------------------------------- shapes

fn dims(t: &Tensor) -> Vec<usize> {
    t.dims().to_vec()
}

fn check_discriminator(base_width: usize, xi: usize, size: usize, scales: usize) -> Result<(), String> {
    let store = ParamStore::new(DType::F32);
    let cond_ch = 1 + 10;
    let cfg = DiscriminatorConfig { base_width, ..DiscriminatorConfig::new(xi + cond_ch, scales) };
    let d = Discriminator::new(&ParamBuilder::new(&store, 0), cfg).map_err(err)?;
    let img = Tensor::zeros((1, xi, size, size), DType::F32, &Device::Cpu).map_err(err)?;
    let cond = Tensor::zeros((1, cond_ch, size, size), DType::F32, &Device::Cpu).map_err(err)?;
    let out = d.forward(&img, &cond, Mode::Train).map_err(err)?;
    ensure(out.scales.len() == scales, || format!("{} scales, expected {scales}", out.scales.len()))?;
    let widths = [base_width, 2 * base_width, 4 * base_width, 8 * base_width];
    for (s, scale) in out.scales.iter().enumerate() {
        // floor((n + 2*2 - 4) / stride) + 1 per layer
        let mut n = size >> s;
        let mut sizes = Vec::new();
        for stride in [2, 2, 2, 1, 1] {
            n = n / stride + 1;
            sizes.push(n);
        }
        ensure(sizes[4] == score_map_size(size >> s), || "score size disagrees with the oracle".into())?;
        ensure(dims(&scale.score) == [1, 1, sizes[4], sizes[4]], || {
            format!("scale {s} score {:?}, expected {}x{}", dims(&scale.score), sizes[4], sizes[4])
        })?;
        ensure(scale.features.len() == 4, || format!("{} feature maps", scale.features.len()))?;
        for (l, f) in scale.features.iter().enumerate() {
            ensure(dims(f) == [1, widths[l], sizes[l], sizes[l]], || {
                format!("scale {s} layer {l}: {:?}", dims(f))
            })?;
        }
    }
    Ok(())
}

fn shape_suite() -> Check {
    let variants = [Variant::Fusion, Variant::LabelOnly, Variant::RasterOnly, Variant::Concat];
    let mut checked = 0;
    for &size in &[256usize, 512] {
        let raster = Tensor::zeros((1, 1, size, size), DType::F32, &Device::Cpu).map_err(err)?;
        let seg = Tensor::zeros((1, 10, size, size), DType::F32, &Device::Cpu).map_err(err)?;
        for &variant in &variants {
            let r = variant.uses_raster().then_some(&raster);
            let s = variant.uses_segmap().then_some(&seg);
            // Full-width encoder: the 1024-channel bottleneck.
            let full = GeneratorConfig { body_blocks: 1, train_size: size, ..GeneratorConfig::new(variant, 1, 10, 3) };
            let store = ParamStore::new(DType::F32);
            let g = Generator::new(&ParamBuilder::new(&store, 0), full).map_err(err)?;
            let b = g.encode(r, s, Mode::Eval).map_err(err)?;
            ensure(dims(&b) == [1, 1024, size / 16, size / 16], || {
                format!("{variant} {size}: bottleneck {:?}", dims(&b))
            })?;
            // Narrow networks for the full output contract.
            for xi in 1..=3 {
                let cfg = GeneratorConfig {
                    base_width: 4,
                    spade_hidden: 8,
                    body_blocks: 1,
                    train_size: size,
                    ..GeneratorConfig::new(variant, 1, 10, xi)
                };
                let store = ParamStore::new(DType::F32);
                let g = Generator::new(&ParamBuilder::new(&store, 0), cfg).map_err(err)?;
                let b = g.encode(r, s, Mode::Eval).map_err(err)?;
                ensure(dims(&b) == [1, 64, size / 16, size / 16], || format!("narrow bottleneck {:?}", dims(&b)))?;
                let y = g.forward(r, s, Mode::Eval).map_err(err)?;
                ensure(dims(&y) == [1, xi, size, size], || format!("{variant} {size} xi={xi}: {:?}", dims(&y)))?;
                checked += 1;
            }
        }
        for xi in 1..=3 {
            for scales in [2, 3] {
                check_discriminator(4, xi, size, scales)?;
            }
        }
    }
    check_discriminator(64, 3, 256, 2)?;
    check_discriminator(64, 3, 512, 3)?;
    Ok(format!(
        "{checked} generator configurations, 1024-channel bottlenecks, 12+2 discriminators"
    ))
}

// ---------------------------------------------------------------- metrics

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let classes = 6;
    let mut cm = ConfusionMatrix::new(classes);
    let mut inter = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    let (mut correct, mut total) = (0u64, 0u64);
    for _ in 0..1000 {
        let p = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..classes as u8));
        let r = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..classes as u8 - 1));
        cm.add(&confusion(&p, &r, classes).map_err(err)?).map_err(err)?;
        for (&a, &b) in p.iter().zip(r.iter()) {
            for c in 0..classes as u8 {
                if a == c && b == c {
                    inter[c as usize] += 1;
                }
                if a == c || b == c {
                    union[c as usize] += 1;
                }
            }
            correct += u64::from(a == b);
            total += 1;
        }
    }
    let scores = iou_miou_pixacc(&cm).map_err(err)?;
    let brute: Vec<Option<f64>> = (0..classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let defined: Vec<f64> = brute.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    let acc = correct as f64 / total as f64;
    ensure(scores.iou == brute, || format!("IoU {:?} vs {brute:?}", scores.iou))?;
    ensure(scores.miou == miou && scores.pixel_accuracy == acc, || {
        format!("mIoU {} vs {miou}, accuracy {} vs {acc}", scores.miou, scores.pixel_accuracy)
    })?;

    let d = 7;
    let zero = nalgebra::DVector::zeros(d);
    let eye = DMatrix::<f64>::identity(d, d);
    let mut unit = zero.clone();
    unit[3] = 1.0;
    let same = fd(&zero, &eye, &zero, &eye)?;
    let shifted = fd(&zero, &eye, &unit, &eye)?;
    let scaled = fd(&zero, &eye, &zero, &(&eye * 4.0))?;
    ensure(same.abs() <= 1e-6, || format!("identical Gaussians: {same}"))?;
    ensure((shifted - 1.0).abs() <= 1e-6, || format!("unit mean shift: {shifted}"))?;
    ensure((scaled - d as f64).abs() <= 1e-6, || format!("I vs 4I: {scaled}, expected {d}"))?;
    let mut worst_sym: f64 = 0.0;
    for _ in 0..20 {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let (ca, cb) = (&a * a.transpose(), &b * b.transpose());
        let ma = nalgebra::DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mb = nalgebra::DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        worst_sym = worst_sym.max((fd(&ma, &ca, &mb, &cb)? - fd(&mb, &cb, &ma, &ca)?).abs());
    }
    ensure(worst_sym <= 1e-6, || format!("asymmetry {worst_sym:e}"))?;
    Ok(format!("1000 pairs exact; FD cases 0/1/{d} within 1e-6; asymmetry {worst_sym:.1e}"))
}

type Vector = nalgebra::DVector<f64>;

fn fd(m1: &Vector, c1: &DMatrix<f64>, m2: &Vector, c2: &DMatrix<f64>) -> Result<f64, String> {
    frechet_distance(m1, c1, m2, c2).map_err(err)
}

// ------------------------------------------------------------------ flood

fn brute_flood_mask(dem: &Array2<f32>, level: f64, radius: usize) -> Array2<bool> {
    let (h, w) = dem.dim();
    let r = radius as isize;
    let below = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && dem[[y as usize, x as usize]] <= level as f32
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        (-r..=r).all(|dy| (-r..=r).all(|dx| dy * dy + dx * dx > r * r || below(y as isize + dy, x as isize + dx)))
    })
}

fn flood_editing() -> Check {
    let mut dem = Array2::from_elem((5, 5), 10.0f32);
    for y in 1..4 {
        for x in 1..4 {
            dem[[y, x]] = 1.0;
        }
    }
    let lc = Array2::from_elem((5, 5), 0u8);
    let hand = flood_edit(&dem, &lc, &FloodSpec::new(2.0)).map_err(err)?;
    let flooded: Vec<(usize, usize)> = hand.mask.indexed_iter().filter(|(_, &m)| m).map(|(p, _)| p).collect();
    ensure(flooded == [(2, 2)], || format!("5x5 plateau floods {flooded:?}"))?;
    ensure(hand.landcover[[2, 2]] == 1 && hand.dem[[2, 2]] == 2.0, || "centre not set to water at h_min".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..100 {
        let (h, w) = (rng.random_range(6..24), rng.random_range(6..24));
        let (fy, fx) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
        let dem = Array2::from_shape_fn((h, w), |(y, x)| {
            (5.0 + 3.0 * (fy * y as f32).sin() * (fx * x as f32).cos()) + rng.random_range(-0.5..0.5)
        });
        let lc = Array2::from_shape_fn((h, w), |_| rng.random_range(0..10u8));
        let radius = rng.random_range(1..3);
        let (a, b) = (rng.random_range(1.0..9.0f64), rng.random_range(1.0..9.0f64));
        let (lo, hi) = (a.min(b), a.max(b));
        let spec = |level| FloodSpec { erosion_radius: radius, ..FloodSpec::new(level) };
        let r_lo = flood_edit(&dem, &lc, &spec(lo)).map_err(err)?;
        let r_hi = flood_edit(&dem, &lc, &spec(hi)).map_err(err)?;
        let again = flood_edit(&r_lo.dem, &r_lo.landcover, &spec(lo)).map_err(err)?;
        ensure(again.dem == r_lo.dem && again.landcover == r_lo.landcover, || format!("case {case}: not idempotent"))?;
        ensure(r_lo.mask.iter().zip(r_hi.mask.iter()).all(|(&l, &u)| !l || u), || format!("case {case}: masks not nested"))?;
        ensure(r_lo.mask == brute_flood_mask(&dem, lo, radius), || format!("case {case}: mask differs from recomputation"))?;
        ensure(r_lo.mask == erode(&dem.mapv(|v| v <= lo as f32), radius), || format!("case {case}: erosion mismatch"))?;
        let untouched = r_lo.mask.iter().zip(dem.iter().zip(r_lo.dem.iter())).zip(lc.iter().zip(r_lo.landcover.iter()));
        for ((&m, (d0, d1)), (l0, l1)) in untouched {
            ensure(m || (d0.to_bits() == d1.to_bits() && l0 == l1), || format!("case {case}: pixel outside the mask changed"))?;
        }
    }
    Ok("hand-traced 5x5 plus 100 random DEMs: idempotent, nested, exact".into())
}

// ---------------------------------------------------------- normalization

fn normalization_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let specs = [
        ("terrasar_x", NormalizationSpec::terrasar_x()),
        ("sentinel1", NormalizationSpec::sentinel1()),
        ("sentinel2_rgb", NormalizationSpec::sentinel2_rgb()),
    ];
    let mut worst: f64 = 0.0;
    for (name, spec) in specs {
        let (lo, hi) = spec.clip;
        let native = |s: f64| {
            let scaled = s / spec.scale;
            if spec.to_db {
                10f64.powf(scaled / spec.db_factor)
            } else {
                scaled
            }
        };
        for _ in 0..1000 {
            let v = native(rng.random_range(lo..=hi));
            let back = spec.denormalize_value(spec.normalize_value(v).map_err(err)?).map_err(err)?;
            let rel = (back - v).abs() / v.abs();
            ensure(rel <= 1e-6, || format!("{name}: {v} -> {back}"))?;
            worst = worst.max(rel);
        }
        let (tlo, thi) = spec.target;
        for (v, want) in [(native(lo), tlo), (native(hi), thi), (native(hi) * 10.0 + 1.0, thi)] {
            let got = spec.normalize_value(v).map_err(err)?;
            ensure(got == want, || format!("{name}: boundary {v} -> {got}, expected {want}"))?;
        }
        if !spec.to_db {
            let got = spec.normalize_value(lo - 1.0).map_err(err)?;
            ensure(got == tlo, || format!("{name}: below-clip value -> {got}"))?;
        } else {
            let got = spec.normalize_value(native(lo) * 0.5).map_err(err)?;
            ensure(got == tlo, || format!("{name}: below-clip value -> {got}"))?;
        }
    }
    Ok(format!("3 sensors x 1000 values, worst relative error {worst:.1e}; clipping exact"))
}

// --------------------------------------------------------------- training

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_landsynth")
}

fn cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("LANDSYNTH_DATA_ROOT")
        .output()
        .map_err(err)?;
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    if !out.status.success() {
        return Err(format!(
            "`landsynth {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ));
    }
    Ok(stdout)
}

fn labelled(stdout: &str, label: &str, cwd: &Path) -> Result<PathBuf, String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .map(|p| cwd.join(p.trim()))
        .ok_or_else(|| format!("no '{label}' line in output"))
}

fn repo_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

struct SmokeRun {
    report: FitReport,
    manifest: DatasetManifest,
    out: PathBuf,
}

fn final_losses(m: &StepMetrics) -> [f64; 3] {
    [m.loss_d, m.loss_g, m.loss_fm]
}

fn max_diff(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn overfit_smoke(work: &Path, data_root: &Path, run: &mut Option<SmokeRun>) -> Check {
    let manifest = load_manifest(data_root, DatasetKind::Custom).map_err(err)?;
    let cfg = TrainConfig::smoke();
    ensure(
        cfg.adam_beta1 == 0.0 && cfg.lr_g == 1e-4 && cfg.lr_d == 4e-4 && cfg.batch_size == 4 && cfg.crop == 64,
        || "smoke preset drifted from the optimizer settings".into(),
    )?;
    ensure(manifest.ids(Split::Train).len() == 8, || "expected 8 training tiles".into())?;
    let mut trainer = Trainer::new(&cfg, manifest.class_names.clone()).map_err(err)?;
    let out = work.join("library_smoke");
    let report = fit(&mut trainer, &manifest, &out).map_err(err)?;
    let h = &report.history;
    ensure(h.len() == 300, || format!("{} steps, expected 300", h.len()))?;
    ensure(h.iter().all(|m| final_losses(m).iter().all(|v| v.is_finite())), || "non-finite loss".into())?;
    let (fm10, fm_last) = (h[9].loss_fm, h[299].loss_fm);

    let source = landsynth::training::SampleSource::new(&manifest, trainer.gan.spec.clone(), manifest.ids(Split::Train))
        .map_err(err)?;
    let samples = manifest
        .ids(Split::Train)
        .iter()
        .map(|id| source.get(id))
        .collect::<landsynth::Result<Vec<_>>>()
        .map_err(err)?;
    let batch = BatchAssembler { num_classes: manifest.num_classes, crop: None, flip: false }
        .stack(samples)
        .map_err(err)?;
    let mut extreme: f32 = 0.0;
    for mode in [Mode::Eval, Mode::Train] {
        let y = trainer.gan.generate(&batch, mode).map_err(err)?;
        let v = y.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(err)?;
        ensure(v.iter().all(|x| x.is_finite() && x.abs() < 1.0), || "generator output outside (-1, 1)".into())?;
        extreme = v.iter().fold(extreme, |m, x| m.max(x.abs()));
    }
    *run = Some(SmokeRun { report, manifest, out });
    let ratio = fm_last / fm10;
    ensure(ratio <= 0.5, || format!("FM {fm10:.4} at step 10 -> {fm_last:.4} at step 300 (ratio {ratio:.3})"))?;
    Ok(format!(
        "FM {fm10:.4} -> {fm_last:.4} (ratio {ratio:.3}); no NaN; max |output| {extreme:.4}"
    ))
}

fn resume_equivalence(run: &SmokeRun) -> Check {
    let ckpt = run.out.join("checkpoints").join(checkpoint_name(100));
    let mut trainer = Trainer::resume(&ckpt, None).map_err(err)?;
    ensure(trainer.step == 200, || format!("checkpoint at step {}", trainer.step))?;
    let resumed = fit(&mut trainer, &run.manifest, &run.out.join("resumed")).map_err(err)?;
    let a = final_losses(run.report.history.last().unwrap());
    let b = final_losses(resumed.history.last().ok_or("resumed run made no steps")?);
    let diff = max_diff(a, b);
    ensure(diff <= 1e-6, || format!("final losses {a:?} vs resumed {b:?}"))?;
    Ok(format!("resumed at step 200; final losses differ by {diff:.1e}"))
}

fn curve_row(curve: &Path, step: u64) -> Result<[f64; 3], String> {
    let text = fs::read_to_string(curve).map_err(err)?;
    let row = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>())
        .find(|r| matches!(r, Ok(v) if v.first() == Some(&(step as f64))))
        .ok_or_else(|| format!("step {step} missing from {}", curve.display()))?
        .map_err(err)?;
    Ok([row[1], row[2], row[3]])
}

/// Data preparation, GAN training, synthesis, segmenter training and both
/// evaluation paths through the command-line tool. The training run repeats
/// the library smoke run with the same seed, so it also checks determinism.
fn end_to_end(work: &Path, data_root: &Path, smoke: Option<&SmokeRun>, determinism: &mut Option<Check>) -> Check {
    let root = data_root.display().to_string();
    let out = cli(&["train", "--config", &repo_file("configs/smoke.cfg"), "--data-root", &root, "--out", "runs"], work)?;
    let gan_run = labelled(&out, "run directory:", work)?;
    let ckpt = labelled(&out, "checkpoint:", work)?;
    ensure(ckpt.ends_with(checkpoint_name(150)), || format!("last checkpoint {}", ckpt.display()))?;
    ensure(fs::read_to_string(gan_run.join("resolved.cfg")).is_ok(), || "no resolved config".into())?;
    let cli_final = curve_row(&gan_run.join("training_curve.csv"), 300)?;
    *determinism = Some(match smoke {
        Some(s) => {
            let lib_final = final_losses(s.report.history.last().unwrap());
            let diff = max_diff(lib_final, cli_final);
            if diff <= 1e-6 {
                Ok(format!("repeat run final losses differ by {diff:.1e}"))
            } else {
                Err(format!("final losses {lib_final:?} vs repeat {cli_final:?}"))
            }
        }
        None => Err("the reference smoke run did not complete".into()),
    });

    let ckpt_s = ckpt.display().to_string();
    let out = cli(&["synthesize", "--checkpoint", &ckpt_s, "--data-root", &root, "--out", "runs"], work)?;
    let fakes = labelled(&out, "run directory:", work)?.join("synthesized");
    let out = cli(
        &["train-segmenter", "--config", &repo_file("configs/segmenter_smoke.cfg"), "--epochs", "1", "--data-root", &root, "--out", "runs"],
        work,
    )?;
    let seg = labelled(&out, "checkpoint:", work)?.display().to_string();
    let fakes_s = fakes.display().to_string();
    let out = cli(&["evaluate", "--segmenter", &seg, "--fakes", &fakes_s, "--data-root", &root, "--out", "runs"], work)?;
    let synth_report = labelled(&out, "run directory:", work)?.join("report.json");
    let out = cli(&["evaluate", "--segmenter", &seg, "--self-test", "--data-root", &root, "--out", "runs"], work)?;
    let self_report = labelled(&out, "run directory:", work)?.join("report.json");

    let load = |p: &Path| -> Result<Vec<landsynth::metrics::EvalReport>, String> {
        serde_json::from_str(&fs::read_to_string(p).map_err(err)?).map_err(err)
    };
    let tiles = load_manifest(data_root, DatasetKind::Custom).map_err(err)?.ids(Split::Test).len();
    for reports in [load(&synth_report)?, load(&self_report)?] {
        ensure(reports.len() == 2, || format!("{} protocols in report", reports.len()))?;
        for r in &reports {
            ensure(
                r.scores.iou.len() == 10
                    && r.class_names.len() == 10
                    && r.miou().is_finite()
                    && r.pixel_accuracy().is_finite()
                    && r.frechet_distance.is_finite()
                    && r.samples == tiles,
                || format!("incomplete report for {}", r.protocol),
            )?;
        }
    }
    let real = load(&self_report)?;
    let b = &real[1];
    ensure(b.miou() == 1.0 && b.frechet_distance == 0.0, || {
        format!("self-test protocol B: mIoU {} FD {}", b.miou(), b.frechet_distance)
    })?;
    let synth = load(&synth_report)?;
    Ok(format!(
        "self-test protocol B mIoU 1, FD 0; synthesized: mIoU A {:.3} B {:.3}, FD {:.3e}",
        synth[0].miou(),
        synth[1].miou(),
        synth[0].frechet_distance
    ))
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let mut suite = Suite { failures: 0, total: 0 };
    println!("acceptance suite");
    suite.run("loss closed forms", secs(1), loss_closed_forms);
    suite.run("gradient check", secs(30), gradient_check);
    suite.run("spectral norm", secs(10), spectral_norm);
    suite.run("SPADE identity", None, spade_identity);
    suite.run("shape suite", secs(60), shape_suite);
    suite.run("metric oracles", secs(60), metric_oracles);
    suite.run("flood editing", secs(10), flood_editing);
    suite.run("normalization round trips", None, normalization_round_trips);

    let work = tempfile::tempdir().expect("temporary directory");
    let prepared = cli(
        &["prepare-data", "--synthetic", "--train-tiles", "8", "--test-tiles", "16", "--tile-size", "64", "--seed", "7", "--out", "runs"],
        work.path(),
    )
    .and_then(|out| labelled(&out, "dataset root:", work.path()));
    match prepared {
        Ok(data_root) => {
            let mut smoke = None;
            suite.run("overfit smoke run", secs(600), || overfit_smoke(work.path(), &data_root, &mut smoke));
            let mut determinism = None;
            suite.run("end-to-end integration", None, || {
                end_to_end(work.path(), &data_root, smoke.as_ref(), &mut determinism)
            });
            suite.run("determinism: repeat", None, || {
                determinism.unwrap_or_else(|| Err("the repeat run did not complete".into()))
            });
            suite.run("determinism: resume", None, || match &smoke {
                Some(s) => resume_equivalence(s),
                None => Err("the reference smoke run did not complete".into()),
            });
        }
        Err(e) => {
            for name in ["overfit smoke run", "end-to-end integration", "determinism: repeat", "determinism: resume"] {
                suite.run(name, None, || Err(format!("dataset preparation failed: {e}")));
            }
        }
    }
    println!("{} of {} criteria passed", suite.total - suite.failures, suite.total);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
