//! Differentiable ops. Each function evaluates eagerly and, when the tape
//! has gradients enabled, records a backward closure capturing what it
//! needs.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4, Axis, Ix2, Ix4, IxDyn};

use super::tape::{Arr, BackOp, Tape, Var};

const LOG_EPS: f32 = 1e-7;

fn as4(a: &Arr) -> ArrayView4<'_, f32> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

/// Unfold one sample (C,H,W) into a (C*kh*kw, ho*wo) matrix.
fn im2col(
    x: &ArrayView3<'_, f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((cin * kh * kw, ho * wo));
    let xs = x.to_owned();
    let xsl = xs.as_slice().unwrap();
    let csl = col.as_slice_mut().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let rbase = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let obase = rbase + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        csl[obase + ox] = xsl[xrow + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Fold a (C*kh*kw, ho*wo) gradient matrix back onto an input-shaped
/// gradient, accumulating overlaps.
fn col2im_accumulate(
    col: &Array2<f32>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
) {
    let csl = col.as_slice().unwrap();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let rbase = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + iy as usize) * w;
                    let obase = rbase + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[xrow + ix as usize] += csl[obase + ox];
                    }
                }
            }
        }
    }
}

pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// 2-D convolution, NCHW; weight (Cout, Cin, kh, kw), bias (Cout).
pub fn conv2d(t: &mut Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
    let xv = t.value(x).clone();
    let wv = t.value(w).clone();
    let bv = t.value(b).clone();
    let x4 = as4(&xv);
    let (n, cin, h, wdt) = x4.dim();
    let w4 = as4(&wv);
    let (cout, cin_w, kh, kw) = w4.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wdt, kw, stride, pad);

    let w2 = w4
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let bias = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();

    let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        let col = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad, ho, wo);
        let mut out = w2.dot(&col); // (cout, ho*wo)
        for (mut row, &bb) in out.rows_mut().into_iter().zip(bias.iter()) {
            row += bb;
        }
        y.index_axis_mut(Axis(0), ni)
            .assign(&out.into_shape_with_order((cout, ho, wo)).unwrap());
    }

    let back = t.grad_enabled().then(|| {
        let xv = xv.clone();
        let w2b = w2.clone();
        BackOp {
            parents: vec![x, w, b],
            run: Box::new(move |dy: &Arr| {
                let dy4 = as4(dy);
                let x4 = as4(&xv);
                let mut dw2 = Array2::<f32>::zeros((cout, cin * kh * kw));
                let mut db = Array1::<f32>::zeros(cout);
                let mut dx = Array4::<f32>::zeros((n, cin, h, wdt));
                for ni in 0..n {
                    let dy_n = dy4
                        .index_axis(Axis(0), ni)
                        .to_owned()
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    let col = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad, ho, wo);
                    dw2 += &dy_n.dot(&col.t());
                    db += &dy_n.sum_axis(Axis(1));
                    let dcol = w2b.t().dot(&dy_n); // (cin*kh*kw, ho*wo)
                    let mut dx_n = dx.index_axis_mut(Axis(0), ni);
                    col2im_accumulate(
                        &dcol,
                        cin,
                        h,
                        wdt,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                        dx_n.as_slice_mut().unwrap(),
                    );
                }
                vec![
                    dx.into_dyn(),
                    dw2.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn(),
                    db.into_dyn(),
                ]
            }),
        }
    });
    t.push(y.into_dyn(), None, back)
}

/// Fully connected layer: x (N,F), w (O,F), b (O).
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xv = t.value(x).clone().into_dimensionality::<Ix2>().unwrap();
    let wv = t.value(w).clone().into_dimensionality::<Ix2>().unwrap();
    let bv = t.value(b).clone();
    let mut y = xv.dot(&wv.t());
    for (mut row, _) in y.rows_mut().into_iter().zip(0..) {
        row += &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    }
    let back = t.grad_enabled().then(|| {
        BackOp {
            parents: vec![x, w, b],
            run: Box::new(move |dy: &Arr| {
                let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                let dx = dy2.dot(&wv);
                let dw = dy2.t().dot(&xv);
                let db = dy2.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        }
    });
    t.push(y.into_dyn(), None, back)
}

pub fn relu(t: &mut Tape, x: Var) -> Var {
    let xv = t.value(x).clone();
    let y = xv.mapv(|v| v.max(0.0));
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![x],
        run: Box::new(move |dy: &Arr| {
            let mut dx = dy.clone();
            dx.zip_mut_with(&xv, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            vec![dx]
        }),
    });
    t.push(y, None, back)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(t: &mut Tape, a: Var, b: Var) -> Var {
    let av = t.value(a);
    let bv = t.value(b);
    assert_eq!(av.shape(), bv.shape());
    let y = av + bv;
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![a, b],
        run: Box::new(move |dy: &Arr| vec![dy.clone(), dy.clone()]),
    });
    t.push(y, None, back)
}

/// Weighted sum of scalars: sum_i coeff_i * v_i.
pub fn weighted_sum(t: &mut Tape, terms: &[(Var, f32)]) -> Var {
    assert!(!terms.is_empty());
    let mut acc = 0.0f32;
    for &(v, c) in terms {
        acc += c * t.scalar(v);
    }
    let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
    let coeffs: Vec<f32> = terms.iter().map(|&(_, c)| c).collect();
    let back = t.grad_enabled().then(|| BackOp {
        parents,
        run: Box::new(move |dy: &Arr| {
            let g = dy.iter().next().copied().unwrap();
            coeffs
                .iter()
                .map(|&c| Arr::from_elem(IxDyn(&[]), c * g))
                .collect()
        }),
    });
    t.push(Arr::from_elem(IxDyn(&[]), acc), None, back)
}

/// Reshape to a new shape with the same element count.
pub fn reshape(t: &mut Tape, x: Var, shape: &[usize]) -> Var {
    let xv = t.value(x).clone();
    let old_shape = xv.shape().to_vec();
    let y = xv
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch");
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![x],
        run: Box::new(move |dy: &Arr| {
            vec![dy
                .clone()
                .into_shape_with_order(IxDyn(&old_shape))
                .unwrap()]
        }),
    });
    t.push(y, None, back)
}

/// Max pooling over kxk windows.
pub fn maxpool2d(t: &mut Tape, x: Var, k: usize, stride: usize, pad: usize) -> Var {
    let xv = t.value(x).clone();
    let x4 = as4(&xv);
    let (n, c, h, w) = x4.dim();
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let mut y = Array4::<f32>::zeros((n, c, ho, wo));
    let mut argmax = vec![0usize; n * c * ho * wo];
    let xs = xv.as_slice().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = plane + iy as usize * w + ix as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[(ni, ci, oy, ox)] = best;
                    argmax[((ni * c + ci) * ho + oy) * wo + ox] = best_idx;
                }
            }
        }
    }
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![x],
        run: Box::new(move |dy: &Arr| {
            let mut dx = vec![0.0f32; n * c * h * w];
            for (i, &g) in dy.iter().enumerate() {
                dx[argmax[i]] += g;
            }
            vec![Array4::from_shape_vec((n, c, h, w), dx).unwrap().into_dyn()]
        }),
    });
    t.push(y.into_dyn(), None, back)
}

/// Nearest-neighbour 2x upsampling, cropped to (out_h, out_w).
pub fn upsample2_to(t: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Var {
    let xv = t.value(x).clone();
    let x4 = as4(&xv);
    let (n, c, h, w) = x4.dim();
    let y = Array4::from_shape_fn((n, c, out_h, out_w), |(ni, ci, oy, ox)| {
        x4[(ni, ci, (oy / 2).min(h - 1), (ox / 2).min(w - 1))]
    });
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![x],
        run: Box::new(move |dy: &Arr| {
            let dy4 = as4(dy);
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            dx[(ni, ci, (oy / 2).min(h - 1), (ox / 2).min(w - 1))] +=
                                dy4[(ni, ci, oy, ox)];
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        }),
    });
    t.push(y.into_dyn(), None, back)
}

/// Global average pool (N,C,H,W) -> (N,C).
pub fn global_avg_pool(t: &mut Tape, x: Var) -> Var {
    let xv = t.value(x).clone();
    let x4 = as4(&xv);
    let (n, c, h, w) = x4.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut y = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[(ni, ci)] = x4
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .sum()
                * scale;
        }
    }
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![x],
        run: Box::new(move |dy: &Arr| {
            let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            let dx = Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| dy2[(ni, ci)] * scale);
            vec![dx.into_dyn()]
        }),
    });
    t.push(y.into_dyn(), None, back)
}

/// Concatenate along the feature axis: (N,F1) ++ (N,F2) -> (N,F1+F2).
pub fn concat_features(t: &mut Tape, a: Var, b: Var) -> Var {
    let av = t.value(a).clone().into_dimensionality::<Ix2>().unwrap();
    let bv = t.value(b).clone().into_dimensionality::<Ix2>().unwrap();
    let (n, f1) = av.dim();
    let (n2, f2) = bv.dim();
    assert_eq!(n, n2);
    let mut y = Array2::<f32>::zeros((n, f1 + f2));
    y.slice_mut(ndarray::s![.., 0..f1]).assign(&av);
    y.slice_mut(ndarray::s![.., f1..]).assign(&bv);
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![a, b],
        run: Box::new(move |dy: &Arr| {
            let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            let da = dy2.slice(ndarray::s![.., 0..f1]).to_owned();
            let db = dy2.slice(ndarray::s![.., f1..]).to_owned();
            vec![da.into_dyn(), db.into_dyn()]
        }),
    });
    t.push(y.into_dyn(), None, back)
}

/// Row-wise softmax of (N,K) logits.
pub fn softmax(t: &mut Tape, logits: Var) -> Var {
    let lv = t.value(logits).clone().into_dimensionality::<Ix2>().unwrap();
    let mut y = lv.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let yc = y.clone();
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![logits],
        run: Box::new(move |dy: &Arr| {
            let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::<f32>::zeros(yc.raw_dim());
            for ((mut dxr, yr), dyr) in dx.rows_mut().into_iter().zip(yc.rows()).zip(dy2.rows()) {
                let dot: f32 = yr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
                    *d = yv * (gv - dot);
                }
            }
            vec![dx.into_dyn()]
        }),
    });
    t.push(y.into_dyn(), None, back)
}

/// Binary cross-entropy on two-class softmax outputs.
///
/// `q_i` is the softmax probability of class 1 (malignant); the per-sample
/// term is `-(y ln q + (1-y) ln(1-q))`, probabilities clamped at 1e-7, and
/// the total is `sum_i weight_i * term_i`.
pub fn softmax_bce(t: &mut Tape, logits: Var, labels: &[u8], weights: &[f32]) -> Var {
    let lv = t.value(logits).clone().into_dimensionality::<Ix2>().unwrap();
    let (n, k) = lv.dim();
    assert_eq!(k, 2);
    assert_eq!(labels.len(), n);
    assert_eq!(weights.len(), n);
    let mut q = Vec::with_capacity(n);
    for row in lv.rows() {
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        q.push(e1 / (e0 + e1));
    }
    let mut total = 0.0f64;
    for i in 0..n {
        let qc = q[i].clamp(LOG_EPS, 1.0 - LOG_EPS);
        let term = if labels[i] == 1 {
            -(f64::from(qc)).ln()
        } else {
            -(1.0 - f64::from(qc)).ln()
        };
        total += f64::from(weights[i]) * term;
    }
    let labels = labels.to_vec();
    let weights = weights.to_vec();
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![logits],
        run: Box::new(move |dy: &Arr| {
            let g = dy.iter().next().copied().unwrap();
            let mut dx = Array2::<f32>::zeros((n, 2));
            for i in 0..n {
                // d/dlogit1 of the bce term is (q - y) when q is inside
                // the clamp window, zero outside it
                let qi = q[i];
                if qi <= LOG_EPS || qi >= 1.0 - LOG_EPS {
                    continue;
                }
                let d = g * weights[i] * (qi - f32::from(labels[i]));
                dx[(i, 1)] = d;
                dx[(i, 0)] = -d;
            }
            vec![dx.into_dyn()]
        }),
    });
    t.push(Arr::from_elem(IxDyn(&[]), total as f32), None, back)
}

/// Per-anchor state for the confidence head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorTarget {
    Positive,
    Negative,
    Ignore,
}

/// Focal loss on sigmoid logits over a flat anchor axis; ignored anchors
/// contribute nothing. `weights` scales each anchor's term (normalization
/// by positives folded in by the caller).
pub fn sigmoid_focal(
    t: &mut Tape,
    logits: Var,
    targets: &[AnchorTarget],
    weights: &[f32],
    alpha: f32,
    gamma: f32,
) -> Var {
    let lv = t.value(logits).clone();
    let n = lv.len();
    assert_eq!(targets.len(), n);
    assert_eq!(weights.len(), n);
    let ls = lv.as_slice().unwrap().to_vec();
    let mut total = 0.0f64;
    for i in 0..n {
        let (y, a_t) = match targets[i] {
            AnchorTarget::Positive => (1.0f32, alpha),
            AnchorTarget::Negative => (0.0f32, 1.0 - alpha),
            AnchorTarget::Ignore => continue,
        };
        let p = 1.0 / (1.0 + (-ls[i]).exp());
        let p_t = (y * p + (1.0 - y) * (1.0 - p)).clamp(LOG_EPS, 1.0 - LOG_EPS);
        let fl = -a_t * (1.0 - p_t).powf(gamma) * p_t.ln();
        total += f64::from(weights[i] * fl);
    }
    let targets = targets.to_vec();
    let weights = weights.to_vec();
    let shape = lv.raw_dim();
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![logits],
        run: Box::new(move |dy: &Arr| {
            let g = dy.iter().next().copied().unwrap();
            let mut dx = vec![0.0f32; n];
            for i in 0..n {
                let (y, a_t) = match targets[i] {
                    AnchorTarget::Positive => (1.0f32, alpha),
                    AnchorTarget::Negative => (0.0f32, 1.0 - alpha),
                    AnchorTarget::Ignore => continue,
                };
                let p = 1.0 / (1.0 + (-ls[i]).exp());
                let p_t = (y * p + (1.0 - y) * (1.0 - p)).clamp(LOG_EPS, 1.0 - LOG_EPS);
                if p_t <= LOG_EPS || p_t >= 1.0 - LOG_EPS {
                    continue;
                }
                let one_m = 1.0 - p_t;
                // dFL/dp_t
                let dfl_dpt =
                    -a_t * (-gamma * one_m.powf(gamma - 1.0) * p_t.ln() + one_m.powf(gamma) / p_t);
                // dp_t/dlogit = (2y-1) p (1-p)
                let dpt_dl = (2.0 * y - 1.0) * p * (1.0 - p);
                dx[i] = g * weights[i] * dfl_dpt * dpt_dl;
            }
            vec![Arr::from_shape_vec(shape.clone(), dx).unwrap()]
        }),
    });
    t.push(Arr::from_elem(IxDyn(&[]), total as f32), None, back)
}

pub fn smooth_l1_scalar(x: f32) -> f32 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// One box-regression target inside a head output map.
#[derive(Debug, Clone)]
pub struct RegTarget {
    /// batch index
    pub n: usize,
    /// anchor template index within the cell
    pub template: usize,
    pub y: usize,
    pub x: usize,
    /// encoded target deltas
    pub delta: [f32; 4],
    /// contribution weight (per-image positive-count and set-size
    /// normalization folded in)
    pub weight: f32,
}

/// Smooth-L1 box regression loss against a head map laid out as
/// (N, templates*4, H, W); sums the four coordinate residuals per target.
pub fn smooth_l1_reg(t: &mut Tape, reg_map: Var, targets: &[RegTarget]) -> Var {
    let mv = t.value(reg_map).clone();
    let m4 = as4(&mv);
    let (n, c, h, w) = m4.dim();
    let mut total = 0.0f64;
    for tg in targets {
        debug_assert!(tg.n < n && tg.template * 4 + 3 < c && tg.y < h && tg.x < w);
        for co in 0..4 {
            let pred = m4[(tg.n, tg.template * 4 + co, tg.y, tg.x)];
            total += f64::from(tg.weight * smooth_l1_scalar(pred - tg.delta[co]));
        }
    }
    let targets = targets.to_vec();
    let back = t.grad_enabled().then(|| BackOp {
        parents: vec![reg_map],
        run: Box::new(move |dy: &Arr| {
            let g = dy.iter().next().copied().unwrap();
            let mut dx = Array4::<f32>::zeros((n, c, h, w));
            let m4 = as4(&mv);
            for tg in &targets {
                for co in 0..4 {
                    let pred = m4[(tg.n, tg.template * 4 + co, tg.y, tg.x)];
                    let d = pred - tg.delta[co];
                    let grad = if d.abs() < 1.0 { d } else { d.signum() };
                    dx[(tg.n, tg.template * 4 + co, tg.y, tg.x)] += g * tg.weight * grad;
                }
            }
            vec![dx.into_dyn()]
        }),
    });
    t.push(Arr::from_elem(IxDyn(&[]), total as f32), None, back)
}
