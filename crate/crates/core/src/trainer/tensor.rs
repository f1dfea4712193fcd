use crate::scalar::Scalar;
use crate::shapecheck::TensorShape;

/// A batch of samples sharing one per-sample shape, stored sample-major with
/// channels innermost (NHWC for spatial tensors).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    batch: usize,
    shape: TensorShape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(batch: usize, shape: TensorShape, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            batch * shape.numel(),
            "tensor data length must equal batch * numel"
        );
        Self { batch, shape, data }
    }

    pub fn zeros(batch: usize, shape: TensorShape) -> Self {
        Self::new(batch, shape, vec![S::zero(); batch * shape.numel()])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[S] {
        let per = self.shape.numel();
        &self.data[i * per..(i + 1) * per]
    }

    /// Same data viewed under a new per-sample shape with equal size.
    pub fn reshaped(self, shape: TensorShape) -> Self {
        assert_eq!(shape.numel(), self.shape.numel());
        Self { shape, ..self }
    }

    /// Index of the largest entry of each sample.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let per = self.shape.numel();
        self.data
            .chunks(per)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
