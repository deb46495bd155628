use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{ConvGeometry, Fft2Plan};
use crate::layers::{Layer, LayerSpec, Parameter};
use crate::patches::Padding;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Spectrum<T> = Vec<Complex<T>>;

/// Multi-map convolution, `y_o = Σ_i k_io * x_i + b_o`, computed in the
/// frequency domain.
///
/// This is true convolution: the kernel is flipped relative to the
/// cross-correlation most frameworks call "convolution". Learned kernels
/// come out mirrored compared to such frameworks; nothing else changes.
///
/// Shapes: input `[H × W × Cin × B]`, kernels `[Kh × Kw × Cin × Cout]`,
/// biases `[Cout]`, output `[H' × W' × Cout × B]`.
#[derive(Debug, Clone)]
pub struct ConvLayer<T: Scalar> {
    params: [Parameter<T>; 2],
    pad: Padding,
    stride: (usize, usize),
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T: Scalar> {
    geom: ConvGeometry,
    batch: usize,
    plan: Fft2Plan<T>,
    /// Spectra of the padded input planes, indexed `[b][i]`.
    x_spec: Vec<Vec<Spectrum<T>>>,
    /// Kernel spectra, indexed `[i][o]`.
    k_spec: Vec<Vec<Spectrum<T>>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(
        kernel: (usize, usize),
        in_maps: usize,
        out_maps: usize,
        pad: Padding,
        stride: (usize, usize),
    ) -> Result<Self> {
        Self::from_parts(
            Tensor::zeros(&[kernel.0, kernel.1, in_maps, out_maps]),
            Tensor::zeros(&[out_maps]),
            pad,
            stride,
        )
    }

    pub fn from_parts(kernels: Tensor<T>, bias: Tensor<T>, pad: Padding, stride: (usize, usize)) -> Result<Self> {
        let ok = match kernels.shape() {
            [kh, kw, ci, co] => *kh > 0 && *kw > 0 && *ci > 0 && *co > 0 && bias.shape() == [*co],
            _ => false,
        };
        if !ok || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim(format!(
                "conv layer needs kernels [Kh × Kw × Cin × Cout], bias [Cout], stride ≥ 1; got {:?}, {:?}, {:?}",
                kernels.shape(),
                bias.shape(),
                stride
            )));
        }
        Ok(Self {
            params: [Parameter::new("k", kernels), Parameter::new("b", bias)],
            pad,
            stride,
            cache: None,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.params[0].value.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn geometry(&self, input: &[usize]) -> Result<(ConvGeometry, usize)> {
        let (kh, kw, cin, _) = self.dims();
        match input {
            [h, w, c, b] if *c == cin => {
                let geom = ConvGeometry {
                    input: (*h, *w),
                    kernel: (kh, kw),
                    pad: self.pad,
                    stride: self.stride,
                };
                geom.output()?;
                Ok((geom, *b))
            }
            s => Err(Error::dim(format!(
                "conv layer expects [H x W x {cin} x batch], got {s:?}"
            ))),
        }
    }

    fn kernel_plane(&self, i: usize, o: usize) -> Vec<T> {
        let (kh, kw, cin, cout) = self.dims();
        let k = self.params[0].value.data();
        (0..kh * kw).map(|uv| k[(uv * cin + i) * cout + o]).collect()
    }
}

fn zero_spec<T: Scalar>(n: usize) -> Spectrum<T> {
    vec![Complex::new(T::zero(), T::zero()); n]
}

/// Extracts plane `(c, b)` of an `[H × W × C × B]` tensor.
fn gather_plane<T: Scalar>(data: &[T], hw: usize, c: usize, channels: usize, b: usize, batch: usize) -> Vec<T> {
    (0..hw).map(|p| data[(p * channels + c) * batch + b]).collect()
}

impl<T: Scalar> Layer<T> for ConvLayer<T> {
    fn spec(&self) -> LayerSpec {
        let (kh, kw, cin, cout) = self.dims();
        LayerSpec::Conv {
            kernel: (kh, kw),
            in_maps: cin,
            out_maps: cout,
            pad: self.pad,
            stride: self.stride,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let (geom, batch) = self.geometry(x.shape())?;
        let (kh, kw, cin, cout) = self.dims();
        let (h, w) = geom.input;
        let (oh, ow) = geom.output()?;
        let (n, m) = geom.fft_size();
        let plan = Fft2Plan::new(n, m)?;

        let k_spec: Vec<Vec<Spectrum<T>>> = (0..cin)
            .map(|i| {
                (0..cout)
                    .map(|o| plan.forward_real(&self.kernel_plane(i, o), kh, kw, 0, 0))
                    .collect()
            })
            .collect();

        let bias = self.params[1].value.data();
        let mut out = vec![T::zero(); oh * ow * cout * batch];
        let mut x_spec = Vec::with_capacity(batch);
        for b in 0..batch {
            // Placing the plane at (top, left) is the same as transforming
            // the zero-padded plane.
            let xs: Vec<Spectrum<T>> = (0..cin)
                .map(|i| {
                    let p = gather_plane(x.data(), h * w, i, cin, b, batch);
                    plan.forward_real(&p, h, w, geom.pad.top, geom.pad.left)
                })
                .collect();
            for o in 0..cout {
                let mut acc = zero_spec::<T>(plan.len());
                for (i, xi) in xs.iter().enumerate() {
                    for ((a, &xv), &kv) in acc.iter_mut().zip(xi).zip(&k_spec[i][o]) {
                        *a += xv * kv;
                    }
                }
                let full = plan.inverse(acc);
                for r in 0..oh {
                    for c in 0..ow {
                        let v = full[(r * geom.stride.0 + kh - 1) * m + c * geom.stride.1 + kw - 1].re;
                        out[((r * ow + c) * cout + o) * batch + b] = v + bias[o];
                    }
                }
            }
            x_spec.push(xs);
        }
        self.cache = Some(ConvCache {
            geom,
            batch,
            plan,
            x_spec,
            k_spec,
        });
        Tensor::new(vec![oh, ow, cout, batch], out)
    }

    fn backward(&mut self, dzdy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let (kh, kw, cin, cout) = self.dims();
        let geom = cache.geom;
        let batch = cache.batch;
        let (oh, ow) = geom.output()?;
        if dzdy.shape() != [oh, ow, cout, batch] {
            return Err(Error::dim(format!(
                "conv backward expects upstream {:?}, got {:?}",
                [oh, ow, cout, batch],
                dzdy.shape()
            )));
        }
        let (h, w) = geom.input;
        let (hd, wd) = geom.dense_output();
        let plan = &cache.plan;
        let (n, m) = (plan.rows(), plan.cols());
        let (sr, sc) = geom.stride;

        // dz/db_o: sum of every upstream entry belonging to map o.
        let db = dzdy.sum_except(2)?;

        let mut dk_spec: Vec<Vec<Spectrum<T>>> = vec![vec![zero_spec(plan.len()); cout]; cin];
        let mut dx = vec![T::zero(); h * w * cin * batch];
        let mut dense = vec![T::zero(); hd * wd];
        for b in 0..batch {
            // Upstream planes, zero-upsampled to the stride-1 grid.
            let g_spec: Vec<Spectrum<T>> = (0..cout)
                .map(|o| {
                    dense.iter_mut().for_each(|v| *v = T::zero());
                    for r in 0..oh {
                        for c in 0..ow {
                            dense[r * sr * wd + c * sc] = dzdy.data()[((r * ow + c) * cout + o) * batch + b];
                        }
                    }
                    plan.forward_real(&dense, hd, wd, 0, 0)
                })
                .collect();

            for i in 0..cin {
                // dz/dx_i = Σ_o g_o ⋆ k_io (full correlation)
                let mut acc = zero_spec::<T>(plan.len());
                for (o, go) in g_spec.iter().enumerate() {
                    for ((a, &gv), &kv) in acc.iter_mut().zip(go).zip(&cache.k_spec[i][o]) {
                        *a += gv * kv.conj();
                    }
                }
                let full = plan.inverse(acc);
                // Circular index (p - (Kh-1)) mod N realizes the full-range
                // offset; crop the padding back off.
                for r in 0..h {
                    let fr = (r + geom.pad.top + n - (kh - 1)) % n;
                    for c in 0..w {
                        let fc = (c + geom.pad.left + m - (kw - 1)) % m;
                        dx[((r * w + c) * cin + i) * batch + b] = full[fr * m + fc].re;
                    }
                }

                // Accumulate x_i ⋆ g_o over the batch in the frequency domain.
                let xi = &cache.x_spec[b][i];
                for (o, go) in g_spec.iter().enumerate() {
                    for ((a, &xv), &gv) in dk_spec[i][o].iter_mut().zip(xi).zip(go) {
                        *a += xv * gv.conj();
                    }
                }
            }
        }

        // dz/dk_io is the correlation output flipped.
        let mut dk = vec![T::zero(); kh * kw * cin * cout];
        for (i, row) in dk_spec.into_iter().enumerate() {
            for (o, spec) in row.into_iter().enumerate() {
                let full = plan.inverse(spec);
                for u in 0..kh {
                    for v in 0..kw {
                        let val = full[(kh - 1 - u) * m + (kw - 1 - v)].re;
                        dk[((u * kw + v) * cin + i) * cout + o] = val;
                    }
                }
            }
        }
        self.params[0].grad = Tensor::new(vec![kh, kw, cin, cout], dk)?;
        self.params[1].grad = Tensor::new(vec![cout], db)?;
        Tensor::new(vec![h, w, cin, batch], dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (geom, batch) = self.geometry(input)?;
        let (oh, ow) = geom.output()?;
        Ok(vec![oh, ow, self.dims().3, batch])
    }

    fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    fn init(&mut self, rng: &mut SeededRng, feeds_relu: bool) {
        let (kh, kw, cin, cout) = self.dims();
        let gain = if feeds_relu { 2.0 } else { 1.0 };
        let std = (gain / (kh * kw * cin) as f64).sqrt();
        self.params[0].value = Tensor::gaussian(&[kh, kw, cin, cout], std, rng);
        self.params[1].value = Tensor::zeros(&[cout]);
    }

    fn clone_box(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::direct_conv2;
    use crate::layers::testutil::{input_grad_error, param_grad_error};

    fn unit_kernel(cin: usize, cout: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, cin, cout], |_| 1.0)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = SeededRng::new(1);
        let mut l = ConvLayer::from_parts(unit_kernel(1, 1), Tensor::zeros(&[1]), Padding::NONE, (1, 1)).unwrap();
        let x = Tensor::<f64>::gaussian(&[5, 4, 1, 2], 1.0, &mut rng);
        let y = l.forward(&x, true).unwrap();
        assert!(y.sub(&x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn maps_are_summed() {
        let mut rng = SeededRng::new(2);
        let mut l = ConvLayer::from_parts(unit_kernel(2, 1), Tensor::zeros(&[1]), Padding::NONE, (1, 1)).unwrap();
        let x = Tensor::<f64>::gaussian(&[3, 3, 2, 1], 1.0, &mut rng);
        let y = l.forward(&x, true).unwrap();
        for p in 0..9 {
            let want = x.data()[p * 2] + x.data()[p * 2 + 1];
            assert!((y.data()[p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_convolution_oracle() {
        let mut rng = SeededRng::new(3);
        let (cin, cout, batch) = (2, 3, 2);
        let mut l = ConvLayer::<f64>::zeros((3, 2), cin, cout, Padding::new(1, 0, 2, 1), (2, 1)).unwrap();
        l.init(&mut rng, true);
        l.params_mut()[1].value = Tensor::gaussian(&[cout], 1.0, &mut rng);
        let x = Tensor::<f64>::gaussian(&[7, 6, cin, batch], 1.0, &mut rng);
        let y = l.forward(&x, true).unwrap();
        let geom = ConvGeometry {
            input: (7, 6),
            kernel: (3, 2),
            pad: Padding::new(1, 0, 2, 1),
            stride: (2, 1),
        };
        let (oh, ow) = geom.output().unwrap();
        assert_eq!(y.shape(), &[oh, ow, cout, batch]);
        for b in 0..batch {
            for o in 0..cout {
                let mut want = Tensor::<f64>::filled(&[oh, ow], l.params()[1].value.data()[o]);
                for i in 0..cin {
                    let xi = Tensor::new(vec![7, 6], gather_plane(x.data(), 42, i, cin, b, batch)).unwrap();
                    let k = Tensor::new(vec![3, 2], l.kernel_plane(i, o)).unwrap();
                    want = want.add(&direct_conv2(&xi, &k, &geom).unwrap()).unwrap();
                }
                for p in 0..oh * ow {
                    let got = y.data()[(p * cout + o) * batch + b];
                    assert!((got - want.data()[p]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn delta_kernel_backward_with_padding() {
        let mut l = ConvLayer::from_parts(unit_kernel(1, 1), Tensor::zeros(&[1]), Padding::uniform(1), (1, 1)).unwrap();
        let x = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        let y = l.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1, 1]);
        let dx = l.backward(&Tensor::filled(&[5, 5, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.shape(), &[3, 3, 1, 1]);
        assert!(dx.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!((l.params()[1].grad.data()[0] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let mut rng = SeededRng::new(4);
        let mut l = ConvLayer::<f64>::zeros((2, 2), 2, 3, Padding::NONE, (1, 1)).unwrap();
        l.init(&mut rng, false);
        let x = Tensor::gaussian(&[4, 4, 2, 2], 1.0, &mut rng);
        l.forward(&x, true).unwrap();
        let g = Tensor::gaussian(&[3, 3, 3, 2], 1.0, &mut rng);
        l.backward(&g).unwrap();
        for o in 0..3 {
            let mut s = 0.0;
            for p in 0..9 {
                for b in 0..2 {
                    s += g.data()[(p * 3 + o) * 2 + b];
                }
            }
            assert!((l.params()[1].grad.data()[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_padded_strided() {
        let mut rng = SeededRng::new(5);
        let mut l = ConvLayer::<f64>::zeros((3, 3), 2, 2, Padding::uniform(2), (2, 2)).unwrap();
        l.init(&mut rng, false);
        l.params_mut()[1].value = Tensor::gaussian(&[2], 1.0, &mut rng);
        let x = Tensor::gaussian(&[6, 5, 2, 2], 1.0, &mut rng);
        let ex = input_grad_error(&mut l, &x, 11);
        let ep = param_grad_error(&mut l, &x, 12);
        assert!(ex < 1e-5, "input grad rel err {ex}");
        assert!(ep < 1e-5, "param grad rel err {ep}");
    }

    #[test]
    fn channel_mismatch_and_state_errors() {
        let mut l = ConvLayer::<f32>::zeros((3, 3), 2, 1, Padding::NONE, (1, 1)).unwrap();
        assert!(matches!(
            l.backward(&Tensor::zeros(&[1, 1, 1, 1])),
            Err(Error::State(_))
        ));
        assert!(matches!(
            l.forward(&Tensor::zeros(&[5, 5, 3, 1]), true),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            l.forward(&Tensor::zeros(&[2, 2, 2, 1]), true),
            Err(Error::Dimension(_))
        ));
    }
}
