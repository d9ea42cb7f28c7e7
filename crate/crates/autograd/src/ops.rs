//! Elementwise maps, reductions and channel broadcasting.

use crate::tensor::{numel, Backward, BackwardCtx, Tensor};

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

struct Add;
impl Backward for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

struct Sub;
impl Backward for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone()), ctx.needs[1].then(|| ctx.grad.neg())]
    }
}

struct Mul;
impl Backward for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let [a, b] = ctx.inputs else { unreachable!() };
        vec![
            ctx.needs[0].then(|| ctx.grad.mul(b)),
            ctx.needs[1].then(|| ctx.grad.mul(a)),
        ]
    }
}

struct Div;
impl Backward for Div {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let [_, b] = ctx.inputs else { unreachable!() };
        let ga = ctx.grad.div(b);
        let gb = ctx.needs[1].then(|| ga.mul(ctx.output).neg());
        vec![ctx.needs[0].then_some(ga), gb]
    }
}

struct Neg;
impl Backward for Neg {
    fn name(&self) -> &'static str {
        "neg"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.neg())]
    }
}

struct AddScalar;
impl Backward for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone())]
    }
}

struct MulScalar(f64);
impl Backward for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.mul_scalar(self.0))]
    }
}

struct Exp;
impl Backward for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.mul(ctx.output))]
    }
}

struct Sqrt;
impl Backward for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.div(&ctx.output.mul_scalar(2.0)))]
    }
}

struct Square;
impl Backward for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.mul(&ctx.inputs[0]).mul_scalar(2.0))]
    }
}

struct Tanh;
impl Backward for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let y = ctx.output;
        let d = y.square().neg().add_scalar(1.0);
        vec![Some(ctx.grad.mul(&d))]
    }
}

struct Sigmoid;
impl Backward for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let y = ctx.output;
        let d = y.mul(&y.neg().add_scalar(1.0));
        vec![Some(ctx.grad.mul(&d))]
    }
}

struct LeakyRelu(f64);
impl Backward for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let slope = Tensor::new(map(x, |v| if v > 0.0 { 1.0 } else { self.0 }), x.shape());
        vec![Some(ctx.grad.mul(&slope))]
    }
}

struct Elu;
impl Backward for Elu {
    fn name(&self) -> &'static str {
        "elu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let pos = Tensor::new(map(x, |v| if v > 0.0 { 1.0 } else { 0.0 }), x.shape());
        let neg = Tensor::new(map(x, |v| if v > 0.0 { 0.0 } else { 1.0 }), x.shape());
        // d/dx elu(x) = exp(x) = elu(x) + 1 for x <= 0
        let d = pos.add(&neg.mul(&ctx.output.add_scalar(1.0)));
        vec![Some(ctx.grad.mul(&d))]
    }
}

struct SumAll;
impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.expand_scalar(ctx.inputs[0].shape()))]
    }
}

struct ExpandScalar;
impl Backward for ExpandScalar {
    fn name(&self) -> &'static str {
        "expand_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let s = ctx.grad.sum_all().reshape(ctx.inputs[0].shape());
        vec![Some(s)]
    }
}

struct Reshape;
impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.reshape(ctx.inputs[0].shape()))]
    }
}

struct ChannelSum;
impl Backward for ChannelSum {
    fn name(&self) -> &'static str {
        "channel_sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.channel_expand(&ctx.inputs[0].shape()[1..]))]
    }
}

struct ChannelExpand;
impl Backward for ChannelExpand {
    fn name(&self) -> &'static str {
        "channel_expand"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.channel_sum())]
    }
}

struct Norm2;
impl Backward for Norm2 {
    fn name(&self) -> &'static str {
        "norm2"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let n = ctx.output.item();
        if n == 0.0 {
            // Subgradient at the origin.
            return vec![Some(Tensor::zeros(x.shape()))];
        }
        let scale = ctx.grad.div(ctx.output).reshape(&[]).expand_scalar(x.shape());
        vec![Some(x.mul(&scale))]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        Tensor::from_op(zip_map(self, other, |a, b| a + b), self.shape(), Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        Tensor::from_op(zip_map(self, other, |a, b| a - b), self.shape(), Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        Tensor::from_op(zip_map(self, other, |a, b| a * b), self.shape(), Mul, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        Tensor::from_op(zip_map(self, other, |a, b| a / b), self.shape(), Div, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(map(self, |a| -a), self.shape(), Neg, vec![self.clone()])
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(map(self, |a| a + s), self.shape(), AddScalar, vec![self.clone()])
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(map(self, |a| a * s), self.shape(), MulScalar(s), vec![self.clone()])
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(map(self, f64::exp), self.shape(), Exp, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(map(self, f64::sqrt), self.shape(), Sqrt, vec![self.clone()])
    }

    pub fn square(&self) -> Tensor {
        Tensor::from_op(map(self, |a| a * a), self.shape(), Square, vec![self.clone()])
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(map(self, f64::tanh), self.shape(), Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor {
        let f = |a: f64| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        };
        Tensor::from_op(map(self, f), self.shape(), Sigmoid, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        Tensor::from_op(
            map(self, |a| if a > 0.0 { a } else { a * slope }),
            self.shape(),
            LeakyRelu(slope),
            vec![self.clone()],
        )
    }

    pub fn elu(&self) -> Tensor {
        Tensor::from_op(
            map(self, |a| if a > 0.0 { a } else { a.exp_m1() }),
            self.shape(),
            Elu,
            vec![self.clone()],
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], &[], SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Euclidean norm of all elements, with zero subgradient at the origin.
    pub fn norm2(&self) -> Tensor {
        let s = self.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_op(vec![s], &[], Norm2, vec![self.clone()])
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), 1, "expand_scalar on non-scalar {:?}", self.shape());
        Tensor::from_op(vec![self.data()[0]; numel(shape)], shape, ExpandScalar, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        if shape == self.shape() {
            return self.clone();
        }
        Tensor::from_op(self.to_vec(), shape, Reshape, vec![self.clone()])
    }

    /// Sums over every axis except the first: `[C, ...] -> [C]`.
    pub fn channel_sum(&self) -> Tensor {
        let c = self.shape()[0];
        let inner = self.numel() / c.max(1);
        let out: Vec<f64> = self.data().chunks(inner.max(1)).take(c).map(|ch| ch.iter().sum()).collect();
        Tensor::from_op(out, &[c], ChannelSum, vec![self.clone()])
    }

    pub fn channel_mean(&self) -> Tensor {
        let inner = self.numel() / self.shape()[0];
        self.channel_sum().mul_scalar(1.0 / inner as f64)
    }

    /// Repeats a `[C]` vector over trailing axes `rest`: `[C] -> [C, rest...]`.
    pub fn channel_expand(&self, rest: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 1, "channel_expand needs a vector");
        let inner = numel(rest);
        let mut out = Vec::with_capacity(self.numel() * inner);
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, inner));
        }
        let mut shape = vec![self.numel()];
        shape.extend_from_slice(rest);
        Tensor::from_op(out, &shape, ChannelExpand, vec![self.clone()])
    }

    /// `x + b[c]` for every channel `c`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Tensor {
        self.add(&bias.channel_expand(&self.shape()[1..]))
    }

    /// `x * s[c]` for every channel `c`.
    pub fn mul_channel(&self, scale: &Tensor) -> Tensor {
        self.mul(&scale.channel_expand(&self.shape()[1..]))
    }

    /// Inner product of all elements.
    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.mul(other).sum_all()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::grad;

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = vec![0.3, -0.7, 1.2, -0.1, 0.05, 2.0];
        let y = vec![1.1, 0.4, -0.6, 0.9, -1.3, 0.2];
        let report = check_gradients(&[x, y], &[&[2, 3], &[2, 3]], |ts| {
            let (a, b) = (&ts[0], &ts[1]);
            let t = a.mul(b).add(&a.tanh()).sub(&b.sigmoid().div(&a.square().add_scalar(1.0)));
            let u = t.leaky_relu(0.2).add(&b.elu()).add(&a.exp().mul_scalar(0.1));
            u.add(&a.square().add_scalar(0.5).sqrt()).norm2()
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn channel_ops_round_trip_gradients() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = vec![0.5, -0.25, 1.5];
        let report = check_gradients(&[x, b], &[&[3, 2, 2], &[3]], |ts| {
            let y = ts[0].add_channel_bias(&ts[1]).mul_channel(&ts[1]);
            y.channel_mean().square().sum_all()
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Tensor::param(vec![2.0], &[1]);
        let y = x.square().mul(&x).sum_all();
        let g = grad(&y, &[&x], true).remove(0);
        assert!((g.item() - 12.0).abs() < 1e-12);
        let h = grad(&g.sum_all(), &[&x], false).remove(0);
        assert!((h.item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn norm2_at_origin_has_zero_gradient() {
        let x = Tensor::param(vec![0.0; 4], &[4]);
        let g = grad(&x.norm2(), &[&x], false).remove(0);
        assert_eq!(g.data(), &[0.0; 4]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        let y = crate::no_grad(|| x.square());
        assert!(!y.requires_grad());
        assert!(x.square().requires_grad());
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let x = Tensor::param(vec![1.0], &[1]);
        let z = Tensor::param(vec![5.0, 6.0], &[2]);
        let g = grad(&x.square().sum_all(), &[&x, &z], false);
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }
}
