use num_traits::Float;

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + std::fmt::Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32_(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32_(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32_(self) -> f32 {
        self as f32
    }
}
