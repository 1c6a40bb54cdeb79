//! Tape operations: forward evaluation plus a captured backward step.

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{broadcast_shape, reduce_to_shape, NodeId, Tape};

fn bcast_zip(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tape {
    // ---------------------------------------------------------------------
    // elementwise binary ops (numpy-style broadcasting)
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                if t.needs_grad(a) {
                    gs.accum(a, reduce_to_shape(g, &sa));
                }
                if t.needs_grad(b) {
                    gs.accum(b, reduce_to_shape(g, &sb));
                }
            })),
            needs,
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                if t.needs_grad(a) {
                    gs.accum(a, reduce_to_shape(g, &sa));
                }
                if t.needs_grad(b) {
                    gs.accum(b, reduce_to_shape(&(-g), &sb));
                }
            })),
            needs,
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                if t.needs_grad(a) {
                    let gb = bcast_zip(g, t.value(b), |gg, y| gg * y);
                    gs.accum(a, reduce_to_shape(&gb, &sa));
                }
                if t.needs_grad(b) {
                    let ga = bcast_zip(g, t.value(a), |gg, x| gg * x);
                    gs.accum(b, reduce_to_shape(&ga, &sb));
                }
            })),
            needs,
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_zip(self.value(a), self.value(b), |x, y| x / y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                if t.needs_grad(a) {
                    let gb = bcast_zip(g, t.value(b), |gg, y| gg / y);
                    gs.accum(a, reduce_to_shape(&gb, &sa));
                }
                if t.needs_grad(b) {
                    let num = bcast_zip(g, t.value(a), |gg, x| gg * x);
                    let gb = bcast_zip(&num, t.value(b), |n, y| -n / (y * y));
                    gs.accum(b, reduce_to_shape(&gb, &sb));
                }
            })),
            needs,
        )
    }

    // ---------------------------------------------------------------------
    // elementwise unary ops
    // ---------------------------------------------------------------------

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| gs.accum(a, g.mapv(|x| x * c)))),
            needs,
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| gs.accum(a, g.clone()))),
            needs,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let mask = t.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                gs.accum(a, g * &mask);
            })),
            needs,
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs_grad(a);
        let out = NodeId(self.nodes.len());
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let y = t.value(out);
                let gg = Zip::from(g).and(y).map_collect(|&gg, &yy| gg * yy * (1.0 - yy));
                gs.accum(a, gg);
            })),
            needs,
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        let needs = self.needs_grad(a);
        let out = NodeId(self.nodes.len());
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let y = t.value(out);
                let gg = Zip::from(g).and(y).map_collect(|&gg, &yy| gg * (1.0 - yy * yy));
                gs.accum(a, gg);
            })),
            needs,
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        let needs = self.needs_grad(a);
        let out = NodeId(self.nodes.len());
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                gs.accum(a, g * t.value(out));
            })),
            needs,
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let gg = Zip::from(g).and(t.value(a)).map_collect(|&gg, &x| gg / x);
                gs.accum(a, gg);
            })),
            needs,
        )
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        let needs = self.needs_grad(a);
        let out = NodeId(self.nodes.len());
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let y = t.value(out);
                let gg = Zip::from(g).and(y).map_collect(|&gg, &yy| gg * 0.5 / yy);
                gs.accum(a, gg);
            })),
            needs,
        )
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let gg = Zip::from(g).and(t.value(a)).map_collect(|&gg, &x| gg * 2.0 * x);
                gs.accum(a, gg);
            })),
            needs,
        )
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let gg = Zip::from(g)
                    .and(t.value(a))
                    .map_collect(|&gg, &x| if x > lo && x < hi { gg } else { 0.0 });
                gs.accum(a, gg);
            })),
            needs,
        )
    }

    // ---------------------------------------------------------------------
    // reductions and shape changes
    // ---------------------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let s = g.iter().next().copied().unwrap();
                gs.accum(a, ArrayD::from_elem(IxDyn(&shape), s));
            })),
            needs,
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let mut v = self.value(a).clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in &sorted {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let gb = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axes backward broadcast")
                    .to_owned();
                gs.accum(a, gb);
            })),
            needs,
        )
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let mut n = 1.0;
        for &ax in axes {
            n *= self.shape(a)[ax] as f64;
        }
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / n)
    }

    /// Reshape to `dims` (row-major order preserved).
    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> NodeId {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(dims), flat).expect("reshape size mismatch");
        let needs = self.needs_grad(a);
        let orig = self.shape(a).to_vec();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let flat: Vec<f64> = g.iter().copied().collect();
                gs.accum(
                    a,
                    ArrayD::from_shape_vec(IxDyn(&orig), flat).expect("reshape backward"),
                );
            })),
            needs,
        )
    }

    /// Transpose of a 2-d node.
    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.shape(a).len(), 2, "transpose2 needs a matrix");
        let v = self.value(a).t().to_owned();
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.t().to_owned());
            })),
            needs,
        )
    }

    /// Matrix product of 2-d nodes: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs 2-d");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs 2-d");
        let v = av.dot(&bv).into_dyn();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let av = t.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let bv = t.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if t.needs_grad(a) {
                    gs.accum(a, gm.dot(&bv.t()).into_dyn());
                }
                if t.needs_grad(b) {
                    gs.accum(b, av.t().dot(&gm).into_dyn());
                }
            })),
            needs,
        )
    }

    // ---------------------------------------------------------------------
    // structural ops
    // ---------------------------------------------------------------------

    /// Concatenate along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        let ids = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(
            v,
            Some(Box::new(move |t, g, gs| {
                let mut start = 0isize;
                for (i, &p) in ids.iter().enumerate() {
                    let len = sizes[i] as isize;
                    if t.needs_grad(p) {
                        let sl = g
                            .slice_axis(Axis(axis), Slice::new(start, Some(start + len), 1))
                            .to_owned();
                        gs.accum(p, sl);
                    }
                    start += len;
                }
            })),
            needs,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
            .to_owned();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                gs.accum(a, full);
            })),
            needs,
        )
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `-lambda`.
    pub fn grad_reversal(&mut self, a: NodeId, lambda: f64) -> NodeId {
        let v = self.value(a).clone();
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                gs.accum(a, g.mapv(|x| -lambda * x));
            })),
            needs,
        )
    }

    /// Cut the graph: same value, no gradient.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---------------------------------------------------------------------
    // spatial ops on [n, c, h, w]
    // ---------------------------------------------------------------------

    /// Global average pool to `[n, c]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool needs [n,c,h,w]");
        let m = self.mean_axes(a, &[2, 3]);
        self.reshape(m, &[s[0], s[1]])
    }

    /// Global max pool to `[n, c]`; gradient flows to the (first) argmax.
    pub fn global_max_pool(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "global_max_pool needs [n,c,h,w]");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = self.value(a);
        let mut v = ArrayD::zeros(IxDyn(&[n, c]));
        let mut arg = vec![0usize; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for y in 0..h {
                    for xx in 0..w {
                        let val = x[[i, j, y, xx]];
                        if val > best {
                            best = val;
                            bi = y * w + xx;
                        }
                    }
                }
                v[[i, j]] = best;
                arg[i * c + j] = bi;
            }
        }
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for j in 0..c {
                        let flat = arg[i * c + j];
                        gx[[i, j, flat / w, flat % w]] = g[[i, j]];
                    }
                }
                gs.accum(a, gx);
            })),
            needs,
        )
    }

    /// Mean over the channel axis, keeping it: `[n, 1, h, w]`.
    pub fn channel_mean_map(&mut self, a: NodeId) -> NodeId {
        self.mean_axes(a, &[1])
    }

    /// Max over the channel axis, keeping it: `[n, 1, h, w]`.
    pub fn channel_max_map(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = self.value(a);
        let mut v = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
        let mut arg = vec![0usize; n * h * w];
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut bc = 0usize;
                    for j in 0..c {
                        let val = x[[i, j, y, xx]];
                        if val > best {
                            best = val;
                            bc = j;
                        }
                    }
                    v[[i, 0, y, xx]] = best;
                    arg[(i * h + y) * w + xx] = bc;
                }
            }
        }
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let bc = arg[(i * h + y) * w + xx];
                            gx[[i, bc, y, xx]] = g[[i, 0, y, xx]];
                        }
                    }
                }
                gs.accum(a, gx);
            })),
            needs,
        )
    }

    /// Edge-replicating spatial pad of `[n, c, h, w]` by `p` on every side.
    pub fn replicate_pad(&mut self, a: NodeId, p: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "replicate_pad needs [n,c,h,w]");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h + 2 * p, w + 2 * p);
        let x = self.value(a);
        let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        let mut v = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        for i in 0..n {
            for j in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let sy = clampi(y as isize - p as isize, h);
                        let sx = clampi(xx as isize - p as isize, w);
                        v[[i, j, y, xx]] = x[[i, j, sy, sx]];
                    }
                }
            }
        }
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for j in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let sy = clampi(y as isize - p as isize, h);
                                let sx = clampi(xx as isize - p as isize, w);
                                gx[[i, j, sy, sx]] += g[[i, j, y, xx]];
                            }
                        }
                    }
                }
                gs.accum(a, gx);
            })),
            needs,
        )
    }

    /// Bilinear resize of `[n, c, h, w]` to `[n, c, oh, ow]` (half-pixel
    /// centers, clamped borders).
    pub fn bilinear_resize(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4, "bilinear_resize needs [n,c,h,w]");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        // (y0, y1, fy) per output row; same per column.
        let map_axis = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f64)> {
            let scale = len_in as f64 / len_out as f64;
            (0..len_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(len_in - 1);
                    let i1 = (i0 + 1).min(len_in - 1);
                    (i0, i1, src - src.floor())
                })
                .collect()
        };
        let ys = map_axis(h, oh);
        let xs = map_axis(w, ow);
        let x = self.value(a);
        let mut v = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        for i in 0..n {
            for j in 0..c {
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let top = x[[i, j, y0, x0]] * (1.0 - fx) + x[[i, j, y0, x1]] * fx;
                        let bot = x[[i, j, y1, x0]] * (1.0 - fx) + x[[i, j, y1, x1]] * fx;
                        v[[i, j, oy, ox]] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        let needs = self.needs_grad(a);
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for j in 0..c {
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gg = g[[i, j, oy, ox]];
                                gx[[i, j, y0, x0]] += gg * (1.0 - fx) * (1.0 - fy);
                                gx[[i, j, y0, x1]] += gg * fx * (1.0 - fy);
                                gx[[i, j, y1, x0]] += gg * (1.0 - fx) * fy;
                                gx[[i, j, y1, x1]] += gg * fx * fy;
                            }
                        }
                    }
                }
                gs.accum(a, gx);
            })),
            needs,
        )
    }

    /// Gather pixel feature columns: rows `(n, y, x)` of `[n, c, h, w]`
    /// into `[m, c]`.
    pub fn gather_pixels(&mut self, a: NodeId, coords: &[(usize, usize, usize)]) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let (c, h, w) = (s[1], s[2], s[3]);
        let x = self.value(a);
        let m = coords.len();
        let mut v = ArrayD::zeros(IxDyn(&[m, c]));
        for (r, &(i, y, xx)) in coords.iter().enumerate() {
            for j in 0..c {
                v[[r, j]] = x[[i, j, y, xx]];
            }
        }
        let needs = self.needs_grad(a);
        let coords = coords.to_vec();
        let shape = s.clone();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                for (r, &(i, y, xx)) in coords.iter().enumerate() {
                    for j in 0..c {
                        gx[[i, j, y, xx]] += g[[r, j]];
                    }
                }
                let _ = (h, w);
                gs.accum(a, gx);
            })),
            needs,
        )
    }

    /// Gather rows of a matrix (with repetition): `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let cols = s[1];
        let x = self.value(a);
        let mut v = ArrayD::zeros(IxDyn(&[idx.len(), cols]));
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..cols {
                v[[r, j]] = x[[i, j]];
            }
        }
        let needs = self.needs_grad(a);
        let idx = idx.to_vec();
        let shape = s.clone();
        self.push(
            v,
            Some(Box::new(move |_, g, gs| {
                let mut gx = ArrayD::zeros(IxDyn(&shape));
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        gx[[i, j]] += g[[r, j]];
                    }
                }
                gs.accum(a, gx);
            })),
            needs,
        )
    }

    // ---------------------------------------------------------------------
    // composite helpers
    // ---------------------------------------------------------------------

    /// Softmax over axis 1 (shift-invariant; the subtracted max is a
    /// constant, which leaves values and gradients exact).
    pub fn softmax_axis1(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut mx = x.clone();
        let folded = mx.fold_axis(Axis(1), f64::NEG_INFINITY, |&m, &v| m.max(v));
        mx = folded.insert_axis(Axis(1));
        let mc = self.constant(mx);
        let shifted = self.sub(a, mc);
        let e = self.exp(shifted);
        let s = self.sum_axes(e, &[1]);
        self.div(e, s)
    }

    /// Row-wise L2 normalization of `[m, d]` with an epsilon guard.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let sq = self.square(a);
        let ss = self.sum_axes(sq, &[1]);
        let ss = self.add_scalar(ss, eps);
        let norm = self.sqrt(ss);
        self.div(a, norm)
    }
}
