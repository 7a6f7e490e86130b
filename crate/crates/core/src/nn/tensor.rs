use crate::error::{Error, Result};

/// A `(channels, height, width)` block of values in channel-major order.
/// Flat vectors are represented with `height == width == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                context: format!("tensor {channels}x{height}x{width}"),
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor value");
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn flat(data: Vec<f64>) -> Self {
        Tensor {
            channels: data.len(),
            height: 1,
            width: 1,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks `first` then `second` along the channel axis.
    pub fn concat_channels(first: &Tensor, second: &Tensor) -> Result<Tensor> {
        if (first.height, first.width) != (second.height, second.width) {
            return Err(Error::ShapeMismatch {
                context: "channel concatenation spatial size".into(),
                expected: first.height * first.width,
                actual: second.height * second.width,
            });
        }
        let mut data = Vec::with_capacity(first.len() + second.len());
        data.extend_from_slice(&first.data);
        data.extend_from_slice(&second.data);
        Ok(Tensor {
            channels: first.channels + second.channels,
            height: first.height,
            width: first.width,
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `channels` planes and the rest.
    pub fn split_channels(self, channels: usize) -> (Tensor, Tensor) {
        assert!(channels <= self.channels);
        let n = self.height * self.width;
        let mut data = self.data;
        let rest = data.split_off(channels * n);
        (
            Tensor {
                channels,
                height: self.height,
                width: self.width,
                data,
            },
            Tensor {
                channels: self.channels - channels,
                height: self.height,
                width: self.width,
                data: rest,
            },
        )
    }
}
