//! Dense row-major arrays and the elementwise / reduction primitives every
//! other module builds on.
//!
//! Images follow the channel-major convention `C x H x W`; network batches
//! add a leading batch axis (`N x C x H x W`).

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense array with shape metadata. `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Pixel position `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelIndex {
    pub row: usize,
    pub col: usize,
}

impl PixelIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sqrt,
    Exp,
    Ln,
    Square,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
}

impl UnaryOp {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Square => x * x,
            UnaryOp::Relu => x.max(T::zero()),
        }
    }
}

impl BinaryOp {
    fn apply<T: Real>(self, x: T, y: T) -> T {
        match self {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
            BinaryOp::Max => x.max(y),
            BinaryOp::Min => x.min(y),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "data",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch { left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::OutOfBounds { index: index.to_vec(), shape: self.shape.clone() });
        }
        Ok(index.iter().zip(&self.shape).fold(0, |acc, (i, d)| acc * d + i))
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let o = self.offset(index)?;
        self.data[o] = value;
        Ok(())
    }

    /// Value of a 2-D map at a pixel (last two axes of a rank-2 tensor).
    pub fn at(&self, p: PixelIndex) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[p.row * self.shape[1] + p.col]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn checked(self, what: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Pointwise unary op.
    pub fn unary(&self, op: UnaryOp) -> Result<Self> {
        self.map(|x| op.apply(x)).checked("unary op")
    }

    /// Pointwise binary op. Shapes must be equal, or one side a single value.
    pub fn binary(&self, op: BinaryOp, other: &Self) -> Result<Self> {
        let out = if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| op.apply(a, b)).collect();
            Self { shape: self.shape.clone(), data }
        } else if other.is_scalar() {
            let b = other.data[0];
            self.map(|a| op.apply(a, b))
        } else if self.is_scalar() {
            let a = self.data[0];
            other.map(|b| op.apply(a, b))
        } else {
            return Err(Error::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        };
        out.checked("binary op")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += s * other`; shapes must match.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone() });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Saturate into the closed interval `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::invalid("lo", format!("clamp needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(self.map(|x| x.max(lo).min(hi)))
    }

    /// Reduce over `axes` (any order, no duplicates). The reduced axes are
    /// removed from the result shape; reducing every axis yields a rank-0
    /// tensor.
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::invalid("axes", format!("{axes:?} invalid for shape {:?}", self.shape)));
            }
            reduced[a] = true;
        }
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| self.shape[a]).product();
        if count == 0 || self.data.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| self.shape[a]).collect();
        let init = match kind {
            ReduceKind::Sum | ReduceKind::Mean => T::zero(),
            ReduceKind::Min => T::infinity(),
            ReduceKind::Max => T::neg_infinity(),
        };
        let mut out = vec![init; numel(&out_shape)];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for a in 0..rank {
                if !reduced[a] {
                    o = o * self.shape[a] + idx[a];
                }
            }
            let slot = &mut out[o];
            *slot = match kind {
                ReduceKind::Sum | ReduceKind::Mean => *slot + v,
                ReduceKind::Min => slot.min(v),
                ReduceKind::Max => slot.max(v),
            };
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        if kind == ReduceKind::Mean {
            let c = T::from_usize(count).unwrap();
            out.iter_mut().for_each(|x| *x /= c);
        }
        Self { shape: out_shape, data: out }.checked("reduction")
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::EmptyReduction);
        }
        Ok(self.sum() / T::from_usize(self.data.len()).unwrap())
    }

    pub fn min_value(&self) -> Result<T> {
        self.data.iter().copied().reduce(T::min).ok_or(Error::EmptyReduction)
    }

    pub fn max_value(&self) -> Result<T> {
        self.data.iter().copied().reduce(T::max).ok_or(Error::EmptyReduction)
    }

    /// Slice `[i]` along the leading axis as an owned tensor.
    pub fn index_axis0(&self, i: usize) -> Self {
        let inner = numel(&self.shape[1..]);
        Self { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("parts", "nothing to stack"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch { left: first.shape.clone(), right: p.shape.clone() });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[1.0, 2.0]).add(&t(&[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(t(&[2.0, 2.0]).mul(&Tensor::scalar(0.0)).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(t(&[0.25]).unary(UnaryOp::Sqrt).unwrap().data(), &[0.5]);
    }

    #[test]
    fn elementwise_rejects_mismatch_and_non_finite() {
        let err = t(&[1.0, 2.0]).add(&t(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref left, ref right } if left == &[2] && right == &[3]));
        assert!(matches!(t(&[-1.0]).unary(UnaryOp::Sqrt), Err(Error::NonFinite(_))));
        assert!(t(&[1.0]).binary(BinaryOp::Div, &t(&[0.0])).is_err());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(t(&[-2.0, 0.5, 3.0]).clamp(-1.0, 1.0).unwrap().data(), &[-1.0, 0.5, 1.0]);
        assert_eq!(t(&[0.0]).clamp(-1.0, 1.0).unwrap().data(), &[0.0]);
        assert!(t(&[0.0]).clamp(1.0, 1.0).is_err());
        assert!(t(&[0.0]).clamp(2.0, 1.0).is_err());
    }

    #[test]
    fn reduce_examples() {
        let s = t(&[1.0, 2.0, 3.0]).reduce(ReduceKind::Sum, &[0]).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.data(), &[6.0]);
        assert_eq!(t(&[1.0, 3.0]).reduce(ReduceKind::Mean, &[0]).unwrap().data(), &[2.0]);
        let c = Tensor::full(&[4, 5], 1.25);
        assert_eq!(c.reduce(ReduceKind::Max, &[0, 1]).unwrap().data(), &[1.25]);
    }

    #[test]
    fn reduce_over_axes_keeps_others() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let r = a.reduce(ReduceKind::Sum, &[1]).unwrap();
        assert_eq!(r.shape(), &[2, 4]);
        assert_eq!(r.get(&[1, 2]).unwrap(), 102.0 + 112.0 + 122.0);
        let m = a.reduce(ReduceKind::Min, &[2, 0]).unwrap();
        assert_eq!(m.data(), &[0.0, 10.0, 20.0]);
        assert!(a.reduce(ReduceKind::Sum, &[3]).is_err());
        assert!(a.reduce(ReduceKind::Sum, &[1, 1]).is_err());
        let empty = Tensor::<f64>::zeros(&[0, 3]);
        assert!(matches!(empty.reduce(ReduceKind::Mean, &[0]), Err(Error::EmptyReduction)));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f64; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    proptest! {
        #[test]
        fn set_get_round_trip(h in 1usize..6, w in 1usize..6, r in 0usize..6, c in 0usize..6, v in -1e6f64..1e6) {
            let mut a = Tensor::<f64>::zeros(&[h, w]);
            let (r, c) = (r % h, c % w);
            let before = a.get(&[r, c]).unwrap();
            a.set(&[r, c], v).unwrap();
            prop_assert_eq!(a.get(&[r, c]).unwrap(), v);
            a.set(&[r, c], before).unwrap();
            prop_assert_eq!(a, Tensor::zeros(&[h, w]));
        }

        #[test]
        fn sum_is_linear(xs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..64)) {
            let a = t(&xs.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = t(&xs.iter().map(|p| p.1).collect::<Vec<_>>());
            let lhs = a.add(&b).unwrap().sum();
            let rhs = a.sum() + b.sum();
            let scale = a.data().iter().chain(b.data()).map(|x| x.abs()).sum::<f64>().max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }
}
