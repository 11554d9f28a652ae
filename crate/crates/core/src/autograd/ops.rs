//! Elementwise, reduction and reshaping ops.

use super::{Ctx, Var};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_index, broadcast_shape, reduce_to_shape, split_axis, Tensor};

fn binary_values<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> (Tensor<T>, Option<(Vec<usize>, Vec<usize>)>) {
    if a.shape() == b.shape() {
        return (a.zip_map(b, f), None);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let ia = broadcast_index(a.shape(), &shape);
    let ib = broadcast_index(b.shape(), &shape);
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    (Tensor::from_vec(&shape, data), Some((ia, ib)))
}

/// Gathers the broadcast operand values aligned with the output.
fn expand<T: Scalar>(t: &Tensor<T>, idx: &Option<Vec<usize>>) -> Vec<T> {
    match idx {
        None => t.data().to_vec(),
        Some(ix) => ix.iter().map(|&i| t.data()[i]).collect(),
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Broadcasting binary op with local partial derivatives `da(a,b)`, `db(a,b)`.
    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let (va, vb) = (self.value(), other.value());
        let (out, idx) = binary_values(&va, &vb, f);
        let (ia, ib) = match idx {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        self.graph.push(out, &[self, other], move |ctx: &Ctx<'_, T>| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let ea = expand(a, &ia);
            let eb = expand(b, &ib);
            let g = ctx.grad.data();
            let shape = ctx.grad.shape();
            let ga = ctx.needs[0].then(|| {
                let full = Tensor::from_vec(
                    shape,
                    g.iter().zip(ea.iter().zip(&eb)).map(|(&g, (&x, &y))| g * da(x, y)).collect(),
                );
                reduce_to_shape(&full, a.shape())
            });
            let gb = ctx.needs[1].then(|| {
                let full = Tensor::from_vec(
                    shape,
                    g.iter().zip(ea.iter().zip(&eb)).map(|(&g, (&x, &y))| g * db(x, y)).collect(),
                );
                reduce_to_shape(&full, b.shape())
            });
            vec![ga, gb]
        })
    }

    /// Elementwise op with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let out = self.value().map(f);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(ctx.grad.shape(), data))]
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a / b, |_, b| T::one() / b, |a, b| -a / (b * b))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(
            other,
            |a, b| if a <= b { a } else { b },
            |a, b| if a <= b { T::one() } else { T::zero() },
            |a, b| if a <= b { T::zero() } else { T::one() },
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(
            other,
            |a, b| if a >= b { a } else { b },
            |a, b| if a >= b { T::one() } else { T::zero() },
            |a, b| if a >= b { T::zero() } else { T::one() },
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Var<'g, T> {
        self.unary(|x| x.abs(), |x, _| x.signum() * T::from_u8((x != T::zero()) as u8).unwrap())
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn atan(self) -> Var<'g, T> {
        self.unary(|x| x.atan(), |x, _| T::one() / (T::one() + x * x))
    }

    pub fn sum(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, &[self], |ctx: &Ctx<'_, T>| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let out = (*self.value()).clone().reshape(shape);
        self.graph.push(out, &[self], |ctx: &Ctx<'_, T>| {
            vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Var<'g, T> {
        let v = self.value();
        let out = transpose_last2(&v);
        self.graph.push(out, &[self], |ctx: &Ctx<'_, T>| vec![Some(transpose_last2(ctx.grad))])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let out = self.value().narrow(axis, start, len);
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let shape = ctx.inputs[0].shape();
            let (outer, dim, inner) = split_axis(shape, axis);
            let mut g = Tensor::zeros(shape);
            let src = ctx.grad.data();
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                g.data_mut()[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Gathers entries of the flattened tensor into a rank-1 result.
    pub fn gather_flat(self, indices: &[usize]) -> Var<'g, T> {
        let v = self.value();
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::from_vec(&[indices.len()], data);
        let indices = indices.to_vec();
        self.graph.push(out, &[self], move |ctx: &Ctx<'_, T>| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            for (&i, &gv) in indices.iter().zip(ctx.grad.data()) {
                g.data_mut()[i] += gv;
            }
            vec![Some(g)]
        })
    }
}

/// Concatenates vars along `axis`.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs, axis);
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    parts[0].graph.push(out, parts, move |ctx: &Ctx<'_, T>| {
        let mut start = 0;
        sizes
            .iter()
            .zip(ctx.needs)
            .map(|(&len, &need)| {
                let g = need.then(|| ctx.grad.narrow(axis, start, len));
                start += len;
                g
            })
            .collect()
    })
}

pub(crate) fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let r = t.rank();
    assert!(r >= 2);
    let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch = t.numel() / (rows * cols).max(1);
    let mut out = vec![T::zero(); t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_vec(&shape, out)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn broadcast_mul_gradients() {
        let g = Graph::<f64>::new();
        let a = g.variable(Tensor::from_vec(&[1, 1, 2], vec![2.0, 3.0]));
        let b = g.variable(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = a.mul(b).sum();
        assert_eq!(y.item(), 2.0 + 6.0 + 6.0 + 12.0);
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let b = g.variable(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let grads = g.backward(a.mul(b).sum());
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_var_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = x.mul(x).add(x);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn concat_narrow_gradients() {
        let g = Graph::<f64>::new();
        let a = g.variable(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
        let b = g.variable(Tensor::from_vec(&[1, 1], vec![5.0]));
        let c = super::concat(&[a, b], 1);
        let y = c.narrow(1, 1, 2).scale(2.0).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}
