use crate::AdError;

/// Dense row-major tensor of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches
    /// and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(AdError::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} must be non-empty with positive dimensions"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AdError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteInput { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        assert!(numel > 0, "zeros: shape {shape:?} has no elements");
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, AdError> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self, AdError> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        Self::new(vec![rows, cols], data)
    }

    /// Internal constructor for op outputs; only checks finiteness.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Self, AdError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite { op });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, AdError> {
        Self::new(shape, self.data.clone())
    }

    /// Overwrites one entry; used by finite-difference probes and optimizers.
    pub fn set(&mut self, index: usize, value: f64) -> Result<(), AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFiniteInput { index });
        }
        self.data[index] = value;
        Ok(())
    }

    /// Elementwise in-place update. Fails (leaving the tensor untouched) if
    /// any updated value would be non-finite.
    pub fn update(&mut self, mut f: impl FnMut(usize, f64) -> f64) -> Result<(), AdError> {
        let next: Vec<f64> = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i, v))
            .collect();
        if let Some(index) = next.iter().position(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteInput { index });
        }
        self.data = next;
        Ok(())
    }
}
