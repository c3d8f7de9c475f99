use super::Real;

/// Activation tensor in `[c][n][h][w]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Tensor { c, n, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.c, self.n, self.h, self.w)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// The `h x w` plane of channel `c`, sample `b`.
    pub fn plane(&self, c: usize, b: usize) -> &[T] {
        let hw = self.plane_len();
        let start = (c * self.n + b) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, c: usize, b: usize) -> &mut [T] {
        let hw = self.plane_len();
        let start = (c * self.n + b) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape(), "tensor add shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
