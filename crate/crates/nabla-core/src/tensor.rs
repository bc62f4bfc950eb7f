use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense NCHW shape. All four extents are explicit even for logically
/// lower-rank values (a scalar is `1x1x1x1`, a class-probability row is
/// `Nx K x1x1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Flat offset of `(n, c, h, w)` in row-major NCHW order.
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Dense NCHW tensor owning its buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("buffer of {} elements for shape {}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![E::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, v: E) -> Self {
        Tensor { shape, data: vec![v; shape.numel()] }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: Shape::new(1, 1, 1, 1), data: vec![v] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: E) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Single element of a scalar-shaped tensor.
    pub fn item(&self) -> Result<E> {
        if !self.shape.is_scalar() {
            return Err(Error::shape("item", format!("expected scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Elementwise copy into a different precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64_())).collect(),
        }
    }
}
