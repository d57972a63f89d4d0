use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::Var;
use crate::tensor::{broadcast_shape, broadcast_to, sum_to, Scalar, Tensor};

fn expect_broadcast(a: &[usize], b: &[usize]) -> Vec<usize> {
    broadcast_shape(a, b)
        .unwrap_or_else(|| panic!("shapes {a:?} and {b:?} do not broadcast"))
}

/// Broadcast-aware binary op. `grad` returns (d out/d a, d out/d b) at one
/// element given `(a, b)`.
fn binary<'t, T: Scalar>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    f: impl Fn(T, T) -> T,
    grad: impl Fn(T, T) -> (T, T) + 'static,
) -> Var<'t, T> {
    let av = a.value();
    let bv = b.value();
    let a_shape = av.shape().to_vec();
    let b_shape = bv.shape().to_vec();
    let out_shape = expect_broadcast(&a_shape, &b_shape);
    let ab = if a_shape == out_shape { av } else { Rc::new(broadcast_to(&av, &out_shape)) };
    let bb = if b_shape == out_shape { bv } else { Rc::new(broadcast_to(&bv, &out_shape)) };
    let out = ab.zip_map(&bb, f);
    a.tape.op(out, &[a, b], move |g, needs| {
        let mut ga = needs[0].then(|| Vec::with_capacity(g.numel()));
        let mut gb = needs[1].then(|| Vec::with_capacity(g.numel()));
        for ((&gv, &x), &y) in g.data().iter().zip(ab.data()).zip(bb.data()) {
            let (dx, dy) = grad(x, y);
            if let Some(ga) = ga.as_mut() {
                ga.push(gv * dx);
            }
            if let Some(gb) = gb.as_mut() {
                gb.push(gv * dy);
            }
        }
        let wrap = |d: Option<Vec<T>>, shape: &[usize]| {
            d.map(|d| {
                let full = Tensor::new(g.shape().to_vec(), d).expect("grad shape");
                sum_to(&full, shape)
            })
        };
        vec![wrap(ga, &a_shape), wrap(gb, &b_shape)]
    })
}

fn unary<'t, T: Scalar>(
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    // derivative given (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let xv = x.value();
    let out = Rc::new(xv.map(f));
    let out_c = out.clone();
    x.tape.op(out, &[x], move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(out_c.data())
            .map(|((&gv, &xi), &yi)| gv * df(xi, yi))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("grad shape"))]
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        binary(self, other, |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        binary(self, other, |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        binary(self, other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        binary(self, other, |a, b| a / b, |a, b| (T::one() / b, -a / (b * b)))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        unary(self, move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: T) -> Var<'t, T> {
        unary(self, move |v| v * s, move |_, _| s)
    }

    pub fn relu(self) -> Var<'t, T> {
        unary(
            self,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        unary(
            self,
            move |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        unary(self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        unary(
            self,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(self) -> Var<'t, T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        unary(self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        unary(self, |v| v.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn square(self) -> Var<'t, T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        unary(
            self,
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// `max(x, floor)`; gradient passes where `x > floor`.
    pub fn floor_at(self, floor: T) -> Var<'t, T> {
        unary(
            self,
            move |v| v.max(floor),
            move |x, _| if x > floor { T::one() } else { T::zero() },
        )
    }

    /// `max(floor, sqrt(x))` for `x ≥ 0`; the gradient is zero wherever the
    /// floor is active, so constant inputs never produce `inf · 0`.
    pub fn sqrt_floored(self, floor: T) -> Var<'t, T> {
        unary(
            self,
            move |v| v.max(T::zero()).sqrt().max(floor),
            move |_, y| if y > floor { T::lit(0.5) / y } else { T::zero() },
        )
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape.op(Tensor::scalar(v.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum_all().mul_scalar(T::one() / T::lit(n as f64))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(self, axes: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out = sum_to(&v, &out_shape);
        self.tape.op(out, &[self], move |g, _| vec![Some(broadcast_to(g, &in_shape))])
    }

    pub fn mean_keepdim(self, axes: &[usize]) -> Var<'t, T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_keepdim(axes).mul_scalar(T::one() / T::lit(count as f64))
    }

    pub fn broadcast_as(self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let target = expect_broadcast(&in_shape, shape);
        assert_eq!(target, shape, "cannot broadcast {in_shape:?} to {shape:?}");
        let out = broadcast_to(&v, shape);
        self.tape.op(out, &[self], move |g, _| vec![Some(sum_to(g, &in_shape))])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let out = (*v).clone().reshape(shape.to_vec()).expect("reshape");
        self.tape.op(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(in_shape.clone()).expect("reshape grad"))]
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        assert!(start + len <= in_shape[axis], "narrow out of range");
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let full = in_shape[axis];
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let out = Tensor::new(out_shape, data).expect("narrow");
        self.tape.op(out, &[self], move |g, _| {
            let mut gd = vec![T::zero(); in_shape.iter().product()];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gd[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(in_shape.clone(), gd).expect("narrow grad"))]
        })
    }

    /// Frobenius norm of the whole tensor. The gradient at the origin is
    /// taken as zero.
    pub fn l2_norm(self) -> Var<'t, T> {
        let v = self.value();
        let norm = v.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        self.tape.op(Tensor::scalar(norm), &[self], move |g, _| {
            let scale = if norm > T::zero() { g.data()[0] / norm } else { T::zero() };
            vec![Some(v.scale(scale))]
        })
    }

    /// Softmax along axis 1 of a `(B, K, H, W)` tensor.
    pub fn softmax_channels(self) -> Var<'t, T> {
        let v = self.value();
        let (b, k, h, w) = v.dims4().expect("softmax_channels needs 4-d input");
        let out = Rc::new(channel_softmax(&v));
        let y = out.clone();
        self.tape.op(out, &[self], move |g, _| {
            let hw = h * w;
            let mut gd = vec![T::zero(); g.numel()];
            for bi in 0..b {
                let base = bi * k * hw;
                for p in 0..hw {
                    let mut dot = T::zero();
                    for c in 0..k {
                        let i = base + c * hw + p;
                        dot = dot + g.data()[i] * y.data()[i];
                    }
                    for c in 0..k {
                        let i = base + c * hw + p;
                        gd[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), gd).expect("softmax grad"))]
        })
    }

    /// Mean negative log-likelihood of `labels` under channel-softmax of
    /// `self`, skipping pixels equal to `ignore`. Returns the loss and the
    /// number of counted pixels; with no counted pixels the loss is 0.
    pub fn cross_entropy(self, labels: &[u8], ignore: u8) -> (Var<'t, T>, usize) {
        let v = self.value();
        let (b, k, h, w) = v.dims4().expect("cross_entropy needs 4-d logits");
        let hw = h * w;
        assert_eq!(labels.len(), b * hw, "label count");
        let probs = channel_softmax(&v);
        let mut total = T::zero();
        let mut count = 0usize;
        for bi in 0..b {
            for p in 0..hw {
                let lab = labels[bi * hw + p];
                if lab == ignore {
                    continue;
                }
                let lab = lab as usize;
                assert!(lab < k, "label {lab} out of range for {k} classes");
                // log-sum-exp in a numerically stable form
                let base = bi * k * hw + p;
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(v.data()[base + c * hw]);
                }
                let mut s = T::zero();
                for c in 0..k {
                    s = s + (v.data()[base + c * hw] - mx).exp();
                }
                total = total + (mx + s.ln() - v.data()[base + lab * hw]);
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::lit(count as f64) };
        let labels: Vec<u8> = labels.to_vec();
        let var = self.tape.op(Tensor::scalar(loss), &[self], move |g, _| {
            let mut gd = vec![T::zero(); probs.numel()];
            if count > 0 {
                let scale = g.data()[0] / T::lit(count as f64);
                for bi in 0..b {
                    for p in 0..hw {
                        let lab = labels[bi * hw + p];
                        if lab == ignore {
                            continue;
                        }
                        let base = bi * k * hw + p;
                        for c in 0..k {
                            let i = base + c * hw;
                            let onehot = if c == lab as usize { T::one() } else { T::zero() };
                            gd[i] = (probs.data()[i] - onehot) * scale;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(probs.shape().to_vec(), gd).expect("ce grad"))]
        });
        (var, count)
    }
}

/// Channel-axis softmax of a `(B, K, H, W)` tensor.
pub fn channel_softmax<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let (b, k, h, w) = v.dims4().expect("4-d input");
    let hw = h * w;
    let mut out = vec![T::zero(); v.numel()];
    for bi in 0..b {
        let base = bi * k * hw;
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(v.data()[base + c * hw + p]);
            }
            let mut s = T::zero();
            for c in 0..k {
                let e = (v.data()[base + c * hw + p] - mx).exp();
                out[base + c * hw + p] = e;
                s = s + e;
            }
            for c in 0..k {
                out[base + c * hw + p] = out[base + c * hw + p] / s;
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out).expect("softmax shape")
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t, T: Scalar> Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        self.mul_scalar(-T::one())
    }
}
