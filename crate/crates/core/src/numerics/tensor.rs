use super::float::{gemm, Float, MatRef};
use crate::error::{bail, Result};

/// Dense row-major array of floats.
///
/// Gradient state is not stored here: a [`Tensor`] is a plain value. The
/// autodiff [`Graph`](super::Graph) wraps tensors in nodes that carry the
/// `requires_grad` flag and the gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(Shape, "shape {:?} holds {} elements but {} were given", shape, numel, data.len());
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Shape, "ragged rows");
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => bail!(Shape, "expected a 2-D tensor, got shape {:?}", s),
        }
    }

    /// Rows of a 2-D tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }

    /// Appends one row to a 2-D tensor.
    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        let (r, c) = self.dims2()?;
        if row.len() != c {
            bail!(Shape, "row of width {} pushed onto [{}x{}]", row.len(), r, c);
        }
        self.data.extend_from_slice(row);
        self.shape[0] += 1;
        Ok(())
    }

    /// Keeps the first `n` rows of a 2-D tensor.
    pub fn truncate_rows(&mut self, n: usize) {
        let c = self.cols();
        if n < self.shape[0] {
            self.data.truncate(n * c);
            self.shape[0] = n;
        }
    }

    /// New 2-D tensor made of the selected rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { shape: vec![rows.len(), c], data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of(x.f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Matrix product `[m x k] * [k x n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            bail!(Shape, "matmul of {:?} and {:?}: inner dimensions differ", self.shape, other.shape);
        }
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(&self.data, m, k), MatRef::new(&other.data, k, n), &mut out, false);
        Tensor::new(vec![m, n], out)
    }
}

/// Row-wise softmax over the last dimension at the given temperature.
///
/// `temperature == 0` returns the greedy limit: a point mass at the row
/// argmax (ties to the lower index).
pub fn softmax<T: Float>(x: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature >= 0.0) {
        bail!(Parameter, "softmax temperature must be non-negative, got {temperature}");
    }
    let width = *x.shape().last().ok_or_else(|| crate::HassError::Shape("softmax of a 0-d tensor".into()))?;
    let mut out = x.clone();
    if width == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(width) {
        if temperature == 0.0 {
            let best = argmax(row);
            row.iter_mut().enumerate().for_each(|(i, v)| *v = if i == best { T::one() } else { T::zero() });
        } else {
            softmax_in_place(row, T::of(1.0 / temperature));
        }
    }
    Ok(out)
}

/// Stable softmax of `row * inv_temp`, in place.
pub(crate) fn softmax_in_place<T: Float>(row: &mut [T], inv_temp: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_temp).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::new(vec![4], vec![0.0; 4]).unwrap();
        assert_eq!(softmax(&x, 1.0).unwrap().data(), &[0.25; 4]);

        let x = Tensor::<f64>::new(vec![2], vec![2f64.ln(), 0.0]).unwrap();
        let p = softmax(&x, 1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);

        // Direct evaluation: renormalized exp(x / T).
        let x = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax(&x, 0.5).unwrap();
        let e: Vec<f64> = [2.0f64, 4.0, 6.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in p.data().iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_negative_temperature() {
        let x = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(softmax(&x, -1.0), Err(crate::HassError::Parameter(_))));
    }

    #[test]
    fn softmax_zero_temperature_is_argmax_point_mass() {
        let x = Tensor::<f32>::new(vec![4], vec![0.1, 0.9, 0.9, 0.2]).unwrap();
        assert_eq!(softmax(&x, 0.0).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f32>::new(vec![2, 2], vec![1000.0, 999.0, -1e4, -1e4]).unwrap();
        let p = softmax(&x, 1.0).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert!((p.data()[2] - 0.5).abs() < 1e-6);
    }
}
