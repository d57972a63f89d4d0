//! Convolution (im2col + GEMM) and nearest-neighbour upsampling.

use super::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride-1 convolution keeping the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.padding >= span,
            "kernel span {span} exceeds padded input {input}+2·{}",
            self.padding
        );
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let Geometry { c, h, w, kh, kw, oh, ow, spec } = *g;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize * d;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let Geometry { c, h, w, kh, kw, oh, ow, spec } = *g;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - p + kj as isize * d;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-d convolution of a `(B, C, H, W)` input with `(O, C, kh, kw)`
    /// weights and an optional `(O)` bias.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, spec: Conv2dSpec) -> Var<'t, T> {
        let xv = self.value();
        let wv = weight.value();
        let (b, c, h, w) = xv.dims4().expect("conv2d input must be 4-d");
        let (o, c2, kh, kw) = wv.dims4().expect("conv2d weight must be 4-d");
        assert_eq!(c, c2, "conv2d channel mismatch: input {c}, weight {c2}");
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh: spec.output_size(h, kh),
            ow: spec.output_size(w, kw),
            spec,
        };
        let (oh, ow) = (geo.oh, geo.ow);
        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let mut out = vec![T::zero(); b * o * ohw];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ohw] };
        for bi in 0..b {
            let xb = &xv.data()[bi * c * h * w..(bi + 1) * c * h * w];
            let cols: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut col);
                &col
            };
            let ob = &mut out[bi * o * ohw..(bi + 1) * o * ohw];
            T::gemm(o, ckk, ohw, wv.data(), ckk as isize, 1, cols, ohw as isize, 1, T::zero(), ob);
        }
        let bias_v = bias.map(|bv| bv.value());
        if let Some(bv) = &bias_v {
            assert_eq!(bv.numel(), o, "conv2d bias length");
            for bi in 0..b {
                for oc in 0..o {
                    let bval = bv.data()[oc];
                    for v in &mut out[(bi * o + oc) * ohw..(bi * o + oc + 1) * ohw] {
                        *v = *v + bval;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, o, oh, ow], out).expect("conv2d output");
        let mut parents = vec![self, weight];
        if let Some(bv) = bias {
            parents.push(bv);
        }
        let has_bias = bias.is_some();
        self.tape.op(out, &parents, move |g, needs| {
            let need_x = needs[0];
            let need_w = needs[1];
            let need_b = has_bias && needs[2];
            let mut dx = need_x.then(|| vec![T::zero(); b * c * h * w]);
            let mut dw = need_w.then(|| vec![T::zero(); o * ckk]);
            let mut col = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * ohw }];
            let mut dcol = vec![T::zero(); if need_x { ckk * ohw } else { 0 }];
            for bi in 0..b {
                let gb = &g.data()[bi * o * ohw..(bi + 1) * o * ohw];
                if let Some(dw) = dw.as_mut() {
                    let xb = &xv.data()[bi * c * h * w..(bi + 1) * c * h * w];
                    let cols: &[T] = if geo.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &geo, &mut col);
                        &col
                    };
                    // dW += g_b · colᵀ
                    T::gemm(o, ohw, ckk, gb, ohw as isize, 1, cols, 1, ohw as isize, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol = Wᵀ · g_b
                    T::gemm(ckk, o, ohw, wv.data(), 1, ckk as isize, gb, ohw as isize, 1, T::zero(), &mut dcol);
                    let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
                    if geo.is_pointwise() {
                        for (d, &s) in dxb.iter_mut().zip(&dcol) {
                            *d = *d + s;
                        }
                    } else {
                        col2im(&dcol, &geo, dxb);
                    }
                }
            }
            let db = need_b.then(|| {
                let mut db = vec![T::zero(); o];
                for bi in 0..b {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let start = (bi * o + oc) * ohw;
                        *acc = *acc + g.data()[start..start + ohw].iter().copied().sum::<T>();
                    }
                }
                Tensor::new(vec![o], db).expect("bias grad")
            });
            let mut grads = vec![
                dx.map(|d| Tensor::new(vec![b, c, h, w], d).expect("dx")),
                dw.map(|d| Tensor::new(vec![o, c, kh, kw], d).expect("dw")),
            ];
            if has_bias {
                grads.push(db);
            }
            grads
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t, T> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4().expect("upsample input must be 4-d");
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out).expect("upsample output");
        self.tape.op(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for plane in 0..b * c {
                let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let i = (y / factor) * w + x / factor;
                        dst[i] = dst[i] + src[y * ow + x];
                    }
                }
            }
            vec![Some(Tensor::new(vec![b, c, h, w], dx).expect("upsample grad"))]
        })
    }
}
