use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

/// Floating-point element type usable by the computation graph.
///
/// Training and inference run in `f32`; gradient checking runs in `f64`.
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array.
///
/// Graph primitives operate on rank-2 arrays; a rank-1 array of length `n`
/// is read as a `1 x n` row.
#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeError {
    pub shape: Vec<usize>,
    pub len: usize,
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "shape {:?} does not hold {} values", self.shape, self.len)
    }
}

impl core::error::Error for ShapeError {}

impl<T: Real> Array<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != values.len() {
            return Err(ShapeError { shape, len: values.len() });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1, 1], values: vec![v] }
    }

    /// Builds a `rows x cols` matrix from `f64` values.
    ///
    /// Panics when `values.len() != rows * cols`.
    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), rows * cols, "matrix literal size");
        Self { shape: vec![rows, cols], values: values.iter().map(|&v| T::from_f64(v)).collect() }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, ShapeError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn row(values: Vec<T>) -> Self {
        let n = values.len().max(1);
        let values = if values.is_empty() { vec![T::zero()] } else { values };
        Self { shape: vec![1, n], values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` view; rank-1 arrays are rows, higher ranks fold leading axes.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap_or(&1);
                (self.values.len() / cols, cols)
            }
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.dims2();
        self.values[r * cols + c]
    }

    pub fn cast<U: Real>(&self) -> Array<U> {
        Array { shape: self.shape.clone(), values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, ShapeError> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(ShapeError { shape, len: self.values.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }
}

impl<T: fmt::Debug> fmt::Debug for Array<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array").field("shape", &self.shape).field("values", &self.values).finish()
    }
}

/// Named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: alloc::string::String,
    pub value: Array<T>,
    pub requires_grad: bool,
    pub grad: Option<Array<T>>,
}

/// Ordered collection of parameters addressed by index or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique; a duplicate panics since it is a
    /// programming error in model construction.
    pub fn insert(&mut self, name: &str, value: Array<T>) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.params.push(Parameter { name: name.into(), value, requires_grad: true, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    requires_grad: p.requires_grad,
                    grad: p.grad.as_ref().map(Array::cast),
                })
                .collect(),
        }
    }
}
