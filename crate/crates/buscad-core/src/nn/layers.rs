//! Stateful layers: batch normalization with running statistics.

use ndarray::{Array1, Array4, Ix4};

use super::ops;
use super::params::{ParamId, ParamStore};
use super::tape::{Arr, BackOp, Tape, Var};

/// Batch normalization over (N, H, W) per channel.
///
/// Training mode normalizes with biased batch statistics and updates the
/// running estimates in place; eval mode normalizes with the stored
/// running statistics.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Arr::ones(vec![channels]));
        let beta = ps.add(format!("{name}.beta"), Arr::zeros(vec![channels]));
        let running_mean = ps.add_buffer(format!("{name}.running_mean"), Arr::zeros(vec![channels]));
        let running_var = ps.add_buffer(format!("{name}.running_var"), Arr::ones(vec![channels]));
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let xv = t.value(x).clone();
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        let count = (n * h * w) as f32;

        let (mean, var) = if train {
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for ci in 0..c {
                let mut s = 0.0f32;
                for ni in 0..n {
                    s += x4
                        .index_axis(ndarray::Axis(0), ni)
                        .index_axis(ndarray::Axis(0), ci)
                        .sum();
                }
                mean[ci] = s / count;
            }
            for ci in 0..c {
                let m = mean[ci];
                let mut s = 0.0f32;
                for ni in 0..n {
                    let plane = x4.index_axis(ndarray::Axis(0), ni);
                    let plane = plane.index_axis(ndarray::Axis(0), ci);
                    s += plane.iter().map(|&v| (v - m) * (v - m)).sum::<f32>();
                }
                var[ci] = s / count;
            }
            // update running estimates
            {
                let rm = ps.get_mut(self.running_mean);
                for (r, &m) in rm.iter_mut().zip(mean.iter()) {
                    *r = (1.0 - self.momentum) * *r + self.momentum * m;
                }
            }
            {
                let rv = ps.get_mut(self.running_var);
                for (r, &v) in rv.iter_mut().zip(var.iter()) {
                    *r = (1.0 - self.momentum) * *r + self.momentum * v;
                }
            }
            (mean, var)
        } else {
            let rm = ps
                .get(self.running_mean)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            let rv = ps
                .get(self.running_var)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            (rm, rv)
        };

        let gamma_var = t.param(ps, self.gamma);
        let beta_var = t.param(ps, self.beta);
        let gv = ps
            .get(self.gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let bv = ps
            .get(self.beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();

        let inv_std: Array1<f32> = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = Array4::<f32>::zeros((n, c, h, w));
        let mut y = Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let m = mean[ci];
                let is = inv_std[ci];
                let g = gv[ci];
                let b = bv[ci];
                for yi in 0..h {
                    for xi in 0..w {
                        let xh = (x4[(ni, ci, yi, xi)] - m) * is;
                        xhat[(ni, ci, yi, xi)] = xh;
                        y[(ni, ci, yi, xi)] = g * xh + b;
                    }
                }
            }
        }

        let back = t.grad_enabled().then(|| {
            let xhat = xhat.clone();
            BackOp {
                parents: vec![x, gamma_var, beta_var],
                run: Box::new(move |dy: &Arr| {
                    let dy4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    let mut dgamma = Array1::<f32>::zeros(c);
                    let mut dbeta = Array1::<f32>::zeros(c);
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    for ci in 0..c {
                        let mut sum_dy = 0.0f32;
                        let mut sum_dy_xhat = 0.0f32;
                        for ni in 0..n {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let g = dy4[(ni, ci, yi, xi)];
                                    sum_dy += g;
                                    sum_dy_xhat += g * xhat[(ni, ci, yi, xi)];
                                }
                            }
                        }
                        dgamma[ci] = sum_dy_xhat;
                        dbeta[ci] = sum_dy;
                        let scale = gv[ci] * inv_std[ci];
                        if train {
                            let mean_dy = sum_dy / count;
                            let mean_dy_xhat = sum_dy_xhat / count;
                            for ni in 0..n {
                                for yi in 0..h {
                                    for xi in 0..w {
                                        let g = dy4[(ni, ci, yi, xi)];
                                        dx[(ni, ci, yi, xi)] = scale
                                            * (g - mean_dy
                                                - xhat[(ni, ci, yi, xi)] * mean_dy_xhat);
                                    }
                                }
                            }
                        } else {
                            for ni in 0..n {
                                for yi in 0..h {
                                    for xi in 0..w {
                                        dx[(ni, ci, yi, xi)] = scale * dy4[(ni, ci, yi, xi)];
                                    }
                                }
                            }
                        }
                    }
                    vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
                }),
            }
        });
        t.push(y.into_dyn(), None, back)
    }
}

/// Plain convolution (no norm), used in the pyramid and heads.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl rand::Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            super::init::kaiming_conv(rng, cout, cin, k, k),
        );
        let b = ps.add(format!("{name}.b"), Arr::zeros(vec![cout]));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(ps, self.w);
        let b = t.param(ps, self.b);
        ops::conv2d(t, x, w, b, self.stride, self.pad)
    }
}

/// Conv + batch norm + optional relu, the basic building unit of the
/// backbones.
pub struct ConvBnRelu {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: BatchNorm2d,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

impl ConvBnRelu {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl rand::Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            super::init::kaiming_conv(rng, cout, cin, k, k),
        );
        let b = ps.add(format!("{name}.b"), Arr::zeros(vec![cout]));
        let bn = BatchNorm2d::new(ps, &format!("{name}.bn"), cout);
        ConvBnRelu {
            w,
            b,
            bn,
            stride,
            pad: k / 2,
            relu,
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let w = t.param(ps, self.w);
        let b = t.param(ps, self.b);
        let c = ops::conv2d(t, x, w, b, self.stride, self.pad);
        let normed = self.bn.forward(t, ps, c, train);
        if self.relu {
            ops::relu(t, normed)
        } else {
            normed
        }
    }
}

/// Two-conv residual block with identity skip (channels preserved).
pub struct ResidualBlock {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
}

impl ResidualBlock {
    pub fn new(ps: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, channels: usize) -> Self {
        ResidualBlock {
            conv1: ConvBnRelu::new(ps, rng, &format!("{name}.conv1"), channels, channels, 3, 1, true),
            conv2: ConvBnRelu::new(
                ps,
                rng,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                false,
            ),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &mut ParamStore, x: Var, train: bool) -> Var {
        let h = self.conv1.forward(t, ps, x, train);
        let h = self.conv2.forward(t, ps, h, train);
        let s = ops::add(t, h, x);
        ops::relu(t, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn batchnorm_normalizes_batch() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 2);
        let mut rng = derived_rng(0, "bn-test", 0);
        let x = Arr::from_shape_fn(IxDyn(&[4, 2, 5, 5]), |_| rng.random_range(-2.0f32..2.0));
        let mut t = Tape::new();
        let xv = t.constant(x);
        let y = bn.forward(&mut t, &mut ps, xv, true);
        let yv = t.value(y);
        // per-channel mean ~0, var ~1
        for ci in 0..2 {
            let vals: Vec<f32> = (0..4)
                .flat_map(|ni| {
                    let y4 = yv.view().into_dimensionality::<Ix4>().unwrap();
                    (0..5)
                        .flat_map(move |yy| (0..5).map(move |xx| y4[(ni, ci, yy, xx)]))
                        .collect::<Vec<_>>()
                })
                .collect();
            let m: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let v: f32 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / vals.len() as f32;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-2, "var {v}");
        }
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 3);
        let mut rng = derived_rng(1, "bn-fd", 0);
        let x_id = ps.add(
            "x",
            Arr::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| rng.random_range(-1.0f32..1.0)),
        );
        // keep running-stat updates out of the finite-difference probe
        let rm0 = ps.get(bn.running_mean).clone();
        let rv0 = ps.get(bn.running_var).clone();

        let build = |t: &mut Tape, ps: &mut ParamStore| {
            let xv = t.param(ps, x_id);
            let y = bn.forward(t, ps, xv, true);
            let yv = t.value(y).clone();
            let total: f32 = yv.iter().map(|v| v * v * 0.5).sum();
            let back = t.grad_enabled().then(|| crate::nn::tape::BackOp {
                parents: vec![y],
                run: Box::new(move |dy: &Arr| {
                    let g = dy.iter().next().copied().unwrap();
                    vec![yv.mapv(|v| v * g)]
                }),
            });
            t.push(Arr::from_elem(IxDyn(&[]), total), None, back)
        };

        let mut t = Tape::new();
        let loss = build(&mut t, &mut ps);
        let grads = t.backward(loss);

        let eps = 1e-2f32;
        for id in [x_id, bn.gamma, bn.beta] {
            let g = grads.get(id).unwrap().clone();
            let len = ps.get(id).len();
            for idx in (0..len).step_by((len / 4).max(1)).take(4) {
                let orig = ps.get(id).as_slice().unwrap()[idx];
                ps.get_mut(id).as_slice_mut().unwrap()[idx] = orig + eps;
                *ps.get_mut(bn.running_mean) = rm0.clone();
                *ps.get_mut(bn.running_var) = rv0.clone();
                let mut tp = Tape::no_grad();
                let fp = {
                    let l = build(&mut tp, &mut ps);
                    tp.scalar(l)
                };
                ps.get_mut(id).as_slice_mut().unwrap()[idx] = orig - eps;
                *ps.get_mut(bn.running_mean) = rm0.clone();
                *ps.get_mut(bn.running_var) = rv0.clone();
                let mut tm = Tape::no_grad();
                let fm = {
                    let l = build(&mut tm, &mut ps);
                    tm.scalar(l)
                };
                ps.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
                *ps.get_mut(bn.running_mean) = rm0.clone();
                *ps.get_mut(bn.running_var) = rv0.clone();
                let fd = (fp - fm) / (2.0 * eps);
                let an = g.as_slice().unwrap()[idx];
                let err = (fd - an).abs();
                assert!(
                    err < 3e-2 * fd.abs().max(an.abs()) + 5e-3,
                    "idx {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn residual_block_preserves_shape() {
        let mut ps = ParamStore::new();
        let mut rng = derived_rng(2, "res-test", 0);
        let block = ResidualBlock::new(&mut ps, &mut rng, "res", 4);
        let x = Arr::from_shape_fn(IxDyn(&[1, 4, 6, 6]), |_| rng.random_range(-1.0f32..1.0));
        let mut t = Tape::new();
        let xv = t.constant(x);
        let y = block.forward(&mut t, &mut ps, xv, true);
        assert_eq!(t.value(y).shape(), &[1, 4, 6, 6]);
    }
}
