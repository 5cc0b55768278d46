//! Dense 3-D float tensor used for images, feature maps and gradients.

use num_traits::Float;

use crate::error::{Error, Result};

/// Row-major `(height, width, channels)` grid, channel-fastest:
/// `data[(y * width + x) * channels + c]`.
///
/// Generic over the float type so the same kernels can run in `f32`
/// (production) and `f64` (gradient verification).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Float> Tensor3<T> {
    /// All-zero tensor. Dimensions must all be at least 1.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(
            height >= 1 && width >= 1 && channels >= 1,
            "tensor dimensions must be >= 1"
        );
        Tensor3 {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Wrap an existing buffer; `data.len()` must equal `h * w * c`.
    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height < 1 || width < 1 || channels < 1 {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "buffer length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: T) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Read with coordinates clamped to the frame (edge-extend sampling).
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> T {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
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

    /// Elementwise map, preserving shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor3<T> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
    }

    /// Convert the element type (used by the double-precision verification path).
    pub fn cast<U: Float>(&self) -> Tensor3<U> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("float cast"))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_fastest() {
        let mut t: Tensor3 = Tensor3::zeros(2, 3, 4);
        t.set(1, 2, 3, 7.0);
        assert_eq!(t.data()[(1 * 3 + 2) * 4 + 3], 7.0);
        assert_eq!(t.get(1, 2, 3), 7.0);
    }

    #[test]
    fn from_data_rejects_bad_length() {
        let r: Result<Tensor3> = Tensor3::from_data(2, 2, 1, vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn from_data_rejects_zero_dimension() {
        let r: Result<Tensor3> = Tensor3::from_data(0, 2, 1, vec![]);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn clamped_reads_extend_edges() {
        let t: Tensor3 = Tensor3::from_data(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.get_clamped(-5, 0, 0), 1.0);
        assert_eq!(t.get_clamped(1, 10, 0), 4.0);
    }

    #[test]
    fn cast_round_trips() {
        let t: Tensor3 = Tensor3::from_data(1, 2, 1, vec![0.5, -1.25]).unwrap();
        let d: Tensor3<f64> = t.cast();
        let b: Tensor3<f32> = d.cast();
        assert_eq!(t, b);
    }
}
