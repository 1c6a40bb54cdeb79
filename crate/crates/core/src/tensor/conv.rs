//! 2-d convolution via im2col + matrix product.

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

use super::{NodeId, Tape};

/// Output spatial size for one axis.
fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfold `[n, c, h, w]` into `[c*kh*kw, n*oh*ow]` (zero padding).
pub fn im2col(
    x: &ArrayViewD<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = out_len(h, k, stride, pad);
    let ow = out_len(w, k, stride, pad);
    let mut col = Array2::<f64>::zeros((c * k * k, n * oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, (ni * oh + oy) * ow + ox]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Fold `[c*kh*kw, n*oh*ow]` back onto `[n, c, h, w]`, accumulating
/// overlaps. Exact adjoint of [`im2col`].
pub fn col2im(
    col: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let oh = out_len(h, k, stride, pad);
    let ow = out_len(w, k, stride, pad);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[ni, ci, iy as usize, ix as usize]] +=
                                col[[row, (ni * oh + oy) * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Plain forward convolution on raw arrays (used by oracles and tests).
pub fn conv2d_raw(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (n, _cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_k) = (w.shape()[0], w.shape()[1] * w.shape()[2] * w.shape()[3]);
    let k = w.shape()[2];
    let (col, oh, ow) = im2col(&x.view(), k, stride, pad);
    let wm = Array2::from_shape_vec((cout, cin_k), w.iter().copied().collect()).unwrap();
    let out_mat = wm.dot(&col); // [cout, n*oh*ow]
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, cout, oh, ow]));
    for co in 0..cout {
        let bias = b.map_or(0.0, |bb| bb[[co]]);
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[ni, co, oy, ox]] = out_mat[[co, (ni * oh + oy) * ow + ox]] + bias;
                }
            }
        }
    }
    let _ = (h, wd);
    out
}

impl Tape {
    /// Convolution of `x: [n, cin, h, w]` with `w: [cout, cin, k, k]` and
    /// optional bias `[cout]`, square kernel, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [n,c,h,w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [cout,cin,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);

        let bias = b.map(|bb| self.value(bb).clone());
        let v = conv2d_raw(self.value(x), self.value(w), bias.as_ref(), stride, pad);
        let oh = v.shape()[2];
        let ow = v.shape()[3];

        let needs =
            self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|bb| self.needs_grad(bb));
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                // g: [n, cout, oh, ow] -> [cout, n*oh*ow]
                let mut gm = Array2::<f64>::zeros((cout, n * oh * ow));
                for co in 0..cout {
                    for ni in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gm[[co, (ni * oh + oy) * ow + ox]] = g[[ni, co, oy, ox]];
                            }
                        }
                    }
                }
                if t.needs_grad(w) {
                    let (col, _, _) = im2col(&t.value(x).view(), k, stride, pad);
                    let gw = gm.dot(&col.t()); // [cout, cin*k*k]
                    let gw = ArrayD::from_shape_vec(
                        IxDyn(&[cout, cin, k, k]),
                        gw.iter().copied().collect(),
                    )
                    .unwrap();
                    gs.accum(w, gw);
                }
                if t.needs_grad(x) {
                    let wm = Array2::from_shape_vec(
                        (cout, cin * k * k),
                        t.value(w).iter().copied().collect(),
                    )
                    .unwrap();
                    let gcol = wm.t().dot(&gm); // [cin*k*k, n*oh*ow]
                    gs.accum(x, col2im(&gcol, n, cin, h, wd, k, stride, pad));
                }
                if let Some(bb) = b {
                    if t.needs_grad(bb) {
                        let mut gb = ArrayD::<f64>::zeros(IxDyn(&[cout]));
                        for co in 0..cout {
                            let mut s = 0.0;
                            for ni in 0..n {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        s += g[[ni, co, oy, ox]];
                                    }
                                }
                            }
                            gb[[co]] = s;
                        }
                        gs.accum(bb, gb);
                    }
                }
            })),
            needs,
        )
    }
}
