use crate::tensor::{Backward, BackwardCtx, Tensor};

/// `op(a) @ op(b)` where `op` optionally transposes a 2-D operand.
struct MatMul {
    ta: bool,
    tb: bool,
}

fn dims(t: &Tensor, transposed: bool) -> (usize, usize) {
    assert_eq!(t.rank(), 2, "matmul operands must be 2-D, got {:?}", t.shape());
    let (r, c) = (t.shape()[0], t.shape()[1]);
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

pub(crate) fn gemm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> (Vec<f64>, usize, usize) {
    let (m, k) = dims(a, ta);
    let (k2, n) = dims(b, tb);
    assert_eq!(k, k2, "matmul inner dims {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
    let mut out: Vec<f64> = Vec::with_capacity(m * n);
    // Row-major strides of the stored matrices, swapped when transposed.
    let (a_cols, b_cols) = (a.shape()[1] as isize, b.shape()[1] as isize);
    let (rsa, csa) = if ta { (1, a_cols) } else { (a_cols, 1) };
    let (rsb, csb) = if tb { (1, b_cols) } else { (b_cols, 1) };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: pointers and strides describe the full, live buffers of
        // `a`, `b` and `out` with the dimensions checked above. With beta
        // zero, dgemm writes every element of `out` without reading it.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
            out.set_len(m * n);
        }
    } else {
        out.resize(m * n, 0.0);
    }
    (out, m, n)
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let [a, b] = ctx.inputs else { unreachable!() };
        let g = ctx.grad;
        let ga = ctx.needs[0].then(|| {
            if self.ta {
                b.matmul_ex(g, self.tb, true)
            } else {
                g.matmul_ex(b, false, !self.tb)
            }
        });
        let gb = ctx.needs[1].then(|| {
            if self.tb {
                g.matmul_ex(a, true, self.ta)
            } else {
                a.matmul_ex(g, !self.ta, false)
            }
        });
        vec![ga, gb]
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_ex(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_ex(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (out, m, n) = gemm(self, other, ta, tb);
        Tensor::from_op(out, &[m, n], MatMul { ta, tb }, vec![self.clone(), other.clone()])
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_gradients;
    use crate::Tensor;

    #[test]
    fn matmul_matches_naive_product() {
        let a = Tensor::new(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = Tensor::new(vec![7., 8., 9., 10., 11., 12.], &[3, 2]);
        assert_eq!(a.matmul(&b).data(), &[58., 64., 139., 154.]);
        // a^T a
        let ata = a.matmul_ex(&a, true, false);
        assert_eq!(ata.shape(), &[3, 3]);
        assert_eq!(ata.data()[0], 17.0);
        assert_eq!(a.matmul_ex(&a, false, true).data(), &[14., 32., 32., 77.]);
    }

    #[test]
    fn matmul_second_order_gradients() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
            let b: Vec<f64> = (0..6).map(|i| (i as f64 * 1.3).sin()).collect();
            let sa: &[usize] = if ta { &[3, 2] } else { &[2, 3] };
            let sb: &[usize] = if tb { &[2, 3] } else { &[3, 2] };
            // A loss whose gradient itself depends on both operands.
            let report = check_gradients(&[a, b], &[sa, sb], |ts| {
                let c = ts[0].matmul_ex(&ts[1], ta, tb);
                let g = crate::grad(&c.square().sum_all(), &[&ts[0]], true).remove(0);
                g.square().sum_all().add(&c.sum_all())
            });
            assert!(report.max_rel_error < 1e-6, "ta={ta} tb={tb}: {report:?}");
        }
    }
}
