#![allow(dead_code)]

use std::path::PathBuf;

use plainnet::layers::{Layer, LayerSpec};
use plainnet::network::relative_error;
use plainnet::{SeededRng, Tensor};

/// Worst relative error of the input gradient and of the parameter gradients
/// of `layer` at `x`, for the scalar loss Σ y·r with a fixed random `r`.
/// Checks at most `coords` sampled coordinates of each.
pub fn layer_grad_errors(
    layer: &mut dyn Layer<f64>,
    x: &Tensor<f64>,
    coords: usize,
    rng: &mut SeededRng,
) -> (f64, f64) {
    let y = layer.forward(x, true).unwrap();
    let r = Tensor::<f64>::gaussian(y.shape(), 1.0, rng);
    let dx = layer.backward(&r).unwrap();
    let analytic: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.to_f64_vec()).collect();
    let loss = |l: &mut dyn Layer<f64>, x: &Tensor<f64>| -> f64 {
        let y = l.forward(x, true).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;

    let mut worst_x: f64 = 0.0;
    let mut xp = x.clone();
    for &i in rng.permutation(x.len()).iter().take(coords) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let zp = loss(layer, &xp);
        xp.data_mut()[i] = orig - h;
        let zm = loss(layer, &xp);
        xp.data_mut()[i] = orig;
        worst_x = worst_x.max(relative_error(dx.data()[i], (zp - zm) / (2.0 * h)));
    }

    let mut worst_p: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for &e in rng.permutation(grads.len()).iter().take(coords) {
            let orig = layer.params()[pi].value.data()[e];
            layer.params_mut()[pi].value.data_mut()[e] = orig + h;
            let zp = loss(layer, x);
            layer.params_mut()[pi].value.data_mut()[e] = orig - h;
            let zm = loss(layer, x);
            layer.params_mut()[pi].value.data_mut()[e] = orig;
            worst_p = worst_p.max(relative_error(grads[e], (zp - zm) / (2.0 * h)));
        }
    }
    (worst_x, worst_p)
}

/// Distinct values at least 0.05 apart in random order, so max-pooling has
/// no ties within a finite-difference step.
pub fn tie_free(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let perm = rng.permutation(n);
    Tensor::from_fn(shape, |i| (perm[i] as f64 - n as f64 / 2.0) * 0.05)
}

/// Gaussian values pushed at least 0.05 away from zero.
pub fn off_kink(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::<f64>::gaussian(shape, 1.0, rng).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

/// Builds and initializes one layer with nonzero biases.
pub fn build(spec: &LayerSpec, rng: &mut SeededRng) -> Box<dyn Layer<f64>> {
    let mut l = spec.build::<f64>().unwrap();
    l.init(rng, false);
    for p in l.params_mut() {
        if p.value.ndim() == 1 {
            p.value = Tensor::gaussian(p.value.shape(), 0.5, rng);
        }
    }
    l
}

/// Dataset root: `PLAINNET_DATA` or `<workspace>/data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("PLAINNET_DATA").map(PathBuf::from).unwrap_or_else(|| {
        let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
        p.canonicalize().unwrap_or(p)
    })
}

/// `|fft − direct|∞ / (|direct|∞ + 1e-6)`. When every window sees only
/// padding the direct output is exactly zero and the error is measured
/// against the largest possible output, `|x|∞·|k|₁`.
pub fn fft_conv_error(fft: &Tensor<f32>, direct: &Tensor<f32>, x: &Tensor<f32>, k: &Tensor<f32>) -> f64 {
    let diff = fft.sub(direct).unwrap().max_abs() as f64;
    let scale = direct.max_abs() as f64;
    if scale == 0.0 {
        let bound = x.max_abs() as f64 * k.data().iter().map(|v| v.abs() as f64).sum::<f64>();
        diff / bound.max(f64::MIN_POSITIVE)
    } else {
        diff / (scale + 1e-6)
    }
}

/// Trains `epochs` full epochs plus `steps` steps. With `interrupt`, the
/// trainer is then written to `ck_path`, dropped, and a freshly built one
/// (different initial weights) restored from the file. Returns the
/// parameter bits after each of `after` further steps, then the metrics CSV
/// once the epoch in progress is finished.
pub fn resume_trace(
    specs: &[LayerSpec],
    input: &[usize],
    data: &plainnet::datasets::LabeledDataset<f64>,
    config: &plainnet::network::TrainConfig,
    (epochs, steps, after): (usize, usize, usize),
    ck_path: Option<&std::path::Path>,
) -> (Vec<Vec<u64>>, String) {
    use plainnet::network::{Checkpoint, SequentialModel, Trainer};
    let fresh = |seed: u64| {
        let mut m = SequentialModel::<f64>::from_specs(specs, input).unwrap();
        m.init(&mut SeededRng::new(seed));
        Trainer::new(m, config.clone()).unwrap()
    };
    let mut t = fresh(1);
    for _ in 0..epochs {
        t.run_epoch(data, Some(data)).unwrap();
    }
    for _ in 0..steps {
        assert!(!t.train_step(data).unwrap().1, "interruption point must be mid-epoch");
    }
    if let Some(path) = ck_path {
        t.to_checkpoint().unwrap().save(path).unwrap();
        drop(t);
        t = fresh(2);
        t.restore(&Checkpoint::load(path).unwrap()).unwrap();
    }
    let mut trace = Vec::new();
    for _ in 0..after {
        t.train_step(data).unwrap();
        trace.push(
            t.model
                .param_values()
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect(),
        );
    }
    t.run_epoch(data, Some(data)).unwrap();
    (trace, t.metrics().to_csv())
}

/// `|fft − direct|∞` over the largest entry of `|x| ⋆ |k|`, the scale of
/// the summed products. Unlike [`fft_conv_error`] this stays meaningful when
/// an output cancels to nearly zero.
pub fn fft_conv_error_scaled(
    fft: &Tensor<f32>,
    direct: &Tensor<f32>,
    x: &Tensor<f32>,
    k: &Tensor<f32>,
    geom: &plainnet::fft::ConvGeometry,
) -> f64 {
    let ax = x.cast::<f64>().map(f64::abs);
    let ak = k.cast::<f64>().map(f64::abs);
    let scale = plainnet::fft::direct_conv2(&ax, &ak, geom).unwrap().max_abs();
    let diff = fft.sub(direct).unwrap().max_abs() as f64;
    if scale == 0.0 {
        fft_conv_error(fft, direct, x, k)
    } else {
        diff / scale
    }
}
