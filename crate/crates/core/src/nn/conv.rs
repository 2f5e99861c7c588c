//! Volumetric convolution, pooling and resampling operators.
//!
//! All tensors are `[batch, channels, depth, height, width]`. Planar
//! (2-d) networks run with `depth == 1` and unit kernel depth.

use super::graph::{Graph, Var};
use super::tensor::{matmul_into, Element, Mat, Tensor};

/// Kernel, stride and zero padding per spatial axis `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [k; 3], stride: [stride; 3], pad: [pad; 3] }
    }

    /// `k x k` in-plane kernel with unit depth.
    pub fn planar(k: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [1, k, k], stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad[a];
            assert!(padded >= self.kernel[a], "kernel larger than padded input on axis {a}");
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn dims5(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    assert_eq!(shape.len(), 5, "expected [B, C, D, H, W], got {shape:?}");
    (shape[0], shape[1], [shape[2], shape[3], shape[4]])
}

/// Unfolds one sample `[C, D, H, W]` into `[C * taps, out_voxels]`.
fn im2col<E: Element>(x: &[E], c: usize, dims: [usize; 3], geom: &ConvGeom, out: [usize; 3], col: &mut [E]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let n = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for a in 0..kd {
            for b in 0..kh {
                for cc in 0..kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    row += 1;
                    for oz in 0..od {
                        let iz = (oz * sd + a) as isize - pd as isize;
                        let zblk = &mut dst[oz * oh * ow..(oz + 1) * oh * ow];
                        if iz < 0 || iz >= d as isize {
                            zblk.fill(E::zero());
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + b) as isize - ph as isize;
                            let yrow = &mut zblk[oy * ow..(oy + 1) * ow];
                            if iy < 0 || iy >= h as isize {
                                yrow.fill(E::zero());
                                continue;
                            }
                            let base = ((ci * d + iz as usize) * h + iy as usize) * w;
                            let src = &x[base..base + w];
                            if sw == 1 {
                                let shift = cc as isize - pw as isize;
                                let lo = (-shift).max(0) as usize;
                                let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                if lo >= hi {
                                    yrow.fill(E::zero());
                                    continue;
                                }
                                yrow[..lo].fill(E::zero());
                                let s0 = (lo as isize + shift) as usize;
                                yrow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                                yrow[hi..].fill(E::zero());
                            } else {
                                for (ox, v) in yrow.iter_mut().enumerate() {
                                    let ix = (ox * sw + cc) as isize - pw as isize;
                                    *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { E::zero() };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[C, D, H, W]`.
fn col2im<E: Element>(col: &[E], c: usize, dims: [usize; 3], geom: &ConvGeom, out: [usize; 3], x: &mut [E]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let n = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for a in 0..kd {
            for b in 0..kh {
                for cc in 0..kw {
                    let src = &col[row * n..(row + 1) * n];
                    row += 1;
                    for oz in 0..od {
                        let iz = (oz * sd + a) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + b) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = ((ci * d + iz as usize) * h + iy as usize) * w;
                            let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for (ox, &v) in srow.iter().enumerate() {
                                let ix = (ox * sw + cc) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'s, E: Element> Graph<'s, E> {
    /// Cross-correlation with weights `[Co, Ci, kd, kh, kw]` and bias `[Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (bt, ci, dims) = dims5(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5, "conv weight must be 5-d");
        assert_eq!(ws[1], ci, "conv input channels {ci} != weight {}", ws[1]);
        assert_eq!([ws[2], ws[3], ws[4]], geom.kernel, "conv kernel mismatch");
        let co = ws[0];
        let out = geom.out_dims(dims);
        let n: usize = out.iter().product();
        let k = ci * geom.taps();
        let in_len = ci * dims.iter().product::<usize>();
        let pointwise = geom.is_pointwise();

        let mut y = vec![E::zero(); bt * co * n];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let mut col = if pointwise { Vec::new() } else { vec![E::zero(); k * n] };
            for s in 0..bt {
                let xs = &xd[s * in_len..(s + 1) * in_len];
                let colm = if pointwise {
                    Mat::new(xs, k, n)
                } else {
                    im2col(xs, ci, dims, &geom, out, &mut col);
                    Mat::new(&col, k, n)
                };
                matmul_into(Mat::new(wd, co, k), colm, &mut y[s * co * n..(s + 1) * co * n], E::zero());
            }
            if let Some(b) = b {
                let bias = self.value(b).data();
                for s in 0..bt {
                    for (o, &bv) in bias.iter().enumerate() {
                        for v in &mut y[(s * co + o) * n..(s * co + o + 1) * n] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let out_t = Tensor::from_vec(&[bt, co, out[0], out[1], out[2]], y);
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(
            out_t,
            &parents,
            Box::new(move |c| {
                let xd = c.inputs[0].data();
                let wd = c.inputs[1].data();
                let g = c.grad.data();
                let mut dx = c.needs[0].then(|| vec![E::zero(); xd.len()]);
                let mut dw = c.needs[1].then(|| vec![E::zero(); wd.len()]);
                let mut col = if pointwise { Vec::new() } else { vec![E::zero(); k * n] };
                let mut dcol = if pointwise || dx.is_none() { Vec::new() } else { vec![E::zero(); k * n] };
                for s in 0..bt {
                    let gs = Mat::new(&g[s * co * n..(s + 1) * co * n], co, n);
                    let xs = &xd[s * in_len..(s + 1) * in_len];
                    if let Some(dw) = dw.as_mut() {
                        let colm = if pointwise {
                            Mat::new(xs, k, n)
                        } else {
                            im2col(xs, ci, dims, &geom, out, &mut col);
                            Mat::new(&col, k, n)
                        };
                        matmul_into(gs, colm.t(), dw, E::one());
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if pointwise {
                            matmul_into(Mat::new(wd, co, k).t(), gs, dxs, E::zero());
                        } else {
                            matmul_into(Mat::new(wd, co, k).t(), gs, &mut dcol, E::zero());
                            col2im(&dcol, ci, dims, &geom, out, dxs);
                        }
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d)),
                    dw.map(|d| Tensor::from_vec(c.inputs[1].shape(), d)),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| channel_sums(g, bt, co, n)));
                }
                res
            }),
        )
    }

    /// Transposed convolution whose kernel equals its stride (non-overlapping
    /// up-sampling). Weights `[Ci, Co, kd, kh, kw]`, bias `[Co]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bt, ci, dims) = dims5(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5, "transposed conv weight must be 5-d");
        assert_eq!(ws[0], ci, "transposed conv channel mismatch");
        let co = ws[1];
        let kern = [ws[2], ws[3], ws[4]];
        let taps: usize = kern.iter().product();
        let n: usize = dims.iter().product();
        let out_dims = [dims[0] * kern[0], dims[1] * kern[1], dims[2] * kern[2]];
        let out_n: usize = out_dims.iter().product();
        let rows = co * taps;
        let scatter = move |m: &[E], y: &mut [E]| {
            // m: [Co * taps, N] -> y: [Co, D*kd, H*kh, W*kw]
            let [d, h, wd] = dims;
            let [kd, kh, kw] = kern;
            let (oh, ow) = (h * kh, wd * kw);
            for o in 0..co {
                for a in 0..kd {
                    for bb in 0..kh {
                        for cc in 0..kw {
                            let r = o * taps + (a * kh + bb) * kw + cc;
                            let src = &m[r * n..(r + 1) * n];
                            for z in 0..d {
                                for yy in 0..h {
                                    let obase = ((o * d * kd + z * kd + a) * oh + yy * kh + bb) * ow + cc;
                                    let srow = &src[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                                    for (xx, &v) in srow.iter().enumerate() {
                                        y[obase + xx * kw] = v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        let gather = move |y: &[E], m: &mut [E]| {
            let [d, h, wd] = dims;
            let [kd, kh, kw] = kern;
            let (oh, ow) = (h * kh, wd * kw);
            for o in 0..co {
                for a in 0..kd {
                    for bb in 0..kh {
                        for cc in 0..kw {
                            let r = o * taps + (a * kh + bb) * kw + cc;
                            let dst = &mut m[r * n..(r + 1) * n];
                            for z in 0..d {
                                for yy in 0..h {
                                    let obase = ((o * d * kd + z * kd + a) * oh + yy * kh + bb) * ow + cc;
                                    let drow = &mut dst[(z * h + yy) * wd..(z * h + yy + 1) * wd];
                                    for (xx, v) in drow.iter_mut().enumerate() {
                                        *v = y[obase + xx * kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };

        let mut y = vec![E::zero(); bt * co * out_n];
        {
            let xd = self.value(x).data();
            let wmat = Mat::new(self.value(w).data(), ci, rows);
            let mut m = vec![E::zero(); rows * n];
            for s in 0..bt {
                matmul_into(wmat.t(), Mat::new(&xd[s * ci * n..(s + 1) * ci * n], ci, n), &mut m, E::zero());
                scatter(&m, &mut y[s * co * out_n..(s + 1) * co * out_n]);
            }
            if let Some(b) = b {
                let bias = self.value(b).data();
                for s in 0..bt {
                    for (o, &bv) in bias.iter().enumerate() {
                        for v in &mut y[(s * co + o) * out_n..(s * co + o + 1) * out_n] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let out_t = Tensor::from_vec(&[bt, co, out_dims[0], out_dims[1], out_dims[2]], y);
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(
            out_t,
            &parents,
            Box::new(move |c| {
                let xd = c.inputs[0].data();
                let wmat = Mat::new(c.inputs[1].data(), ci, rows);
                let g = c.grad.data();
                let mut gm = vec![E::zero(); rows * n];
                let mut dx = c.needs[0].then(|| vec![E::zero(); xd.len()]);
                let mut dw = c.needs[1].then(|| vec![E::zero(); ci * rows]);
                for s in 0..bt {
                    gather(&g[s * co * out_n..(s + 1) * co * out_n], &mut gm);
                    let gmat = Mat::new(&gm, rows, n);
                    if let Some(dx) = dx.as_mut() {
                        matmul_into(wmat, gmat, &mut dx[s * ci * n..(s + 1) * ci * n], E::zero());
                    }
                    if let Some(dw) = dw.as_mut() {
                        matmul_into(Mat::new(&xd[s * ci * n..(s + 1) * ci * n], ci, n), gmat.t(), dw, E::one());
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d)),
                    dw.map(|d| Tensor::from_vec(c.inputs[1].shape(), d)),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| channel_sums(g, bt, co, out_n)));
                }
                res
            }),
        )
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool3d(&mut self, x: Var, geom: ConvGeom) -> Var {
        let (bt, ch, dims) = dims5(self.shape(x));
        let out = geom.out_dims(dims);
        let [d, h, w] = dims;
        let in_n = d * h * w;
        let out_n: usize = out.iter().product();
        let xd = self.value(x).data();
        let mut y = vec![E::zero(); bt * ch * out_n];
        let mut arg = vec![0usize; bt * ch * out_n];
        for plane in 0..bt * ch {
            let src = &xd[plane * in_n..(plane + 1) * in_n];
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut best = E::neg_infinity();
                        let mut best_i = usize::MAX;
                        for a in 0..geom.kernel[0] {
                            let iz = (oz * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for b in 0..geom.kernel[1] {
                                let iy = (oy * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for cc in 0..geom.kernel[2] {
                                    let ix = (ox * geom.stride[2] + cc) as isize - geom.pad[2] as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let i = (iz as usize * h + iy as usize) * w + ix as usize;
                                    if best_i == usize::MAX || src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = plane * out_n + (oz * out[1] + oy) * out[2] + ox;
                        y[o] = best;
                        arg[o] = best_i;
                    }
                }
            }
        }
        let out_t = Tensor::from_vec(&[bt, ch, out[0], out[1], out[2]], y);
        self.push(
            out_t,
            &[x],
            Box::new(move |c| {
                let mut dx = Tensor::zeros(c.inputs[0].shape());
                let dxd = dx.data_mut();
                for (o, &gv) in c.grad.data().iter().enumerate() {
                    let plane = o / out_n;
                    dxd[plane * in_n + arg[o]] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Nearest-neighbour up-sampling by integer factors per axis.
    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let (bt, ch, dims) = dims5(self.shape(x));
        let [d, h, w] = dims;
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let in_n = d * h * w;
        let out_n = od * oh * ow;
        let xd = self.value(x).data();
        let mut y = vec![E::zero(); bt * ch * out_n];
        for plane in 0..bt * ch {
            for z in 0..od {
                for yy in 0..oh {
                    let srow = plane * in_n + ((z / fd) * h + yy / fh) * w;
                    let drow = plane * out_n + (z * oh + yy) * ow;
                    for xx in 0..ow {
                        y[drow + xx] = xd[srow + xx / fw];
                    }
                }
            }
        }
        let out_t = Tensor::from_vec(&[bt, ch, od, oh, ow], y);
        self.push(
            out_t,
            &[x],
            Box::new(move |c| {
                let mut dx = Tensor::zeros(c.inputs[0].shape());
                let dxd = dx.data_mut();
                let g = c.grad.data();
                for plane in 0..bt * ch {
                    for z in 0..od {
                        for yy in 0..oh {
                            let srow = plane * in_n + ((z / fd) * h + yy / fh) * w;
                            let drow = plane * out_n + (z * oh + yy) * ow;
                            for xx in 0..ow {
                                dxd[srow + xx / fw] += g[drow + xx];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn channel_sums<E: Element>(g: &[E], bt: usize, co: usize, n: usize) -> Tensor<E> {
    let mut db = vec![E::zero(); co];
    for s in 0..bt {
        for (o, d) in db.iter_mut().enumerate() {
            *d += g[(s * co + o) * n..(s * co + o + 1) * n].iter().copied().sum::<E>();
        }
    }
    Tensor::from_vec(&[co], db)
}
