use crate::error::{Error, Result};
use crate::tensor::Element;

/// Channel-first voxel grid `(C, D, H, W)` with physical spacing in mm.
///
/// Images are `Volume<f32>`; label maps are `Volume<u8>` with one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    channels: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

pub type LabelVolume = Volume<u8>;

impl<T: Element> Volume<T> {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "volume needs positive extents, got channels {channels} dims {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        let numel = channels * dims.iter().product::<usize>();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "volume ({channels}, {dims:?}) needs {numel} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(channels: usize, dims: [usize; 3], spacing: [f64; 3], value: T) -> Self {
        let numel = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, spacing, vec![value; numel]).expect("filled volume shape")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
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

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(c, d, h, w)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Zero-pads the high side of every axis up to `dims`.
    pub fn pad_to(&self, dims: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| dims[a] < self.dims[a]) {
            return Err(Error::Shape(format!(
                "cannot pad {:?} down to {:?}",
                self.dims, dims
            )));
        }
        let mut out = Self::filled(self.channels, dims, self.spacing, T::PAD);
        for c in 0..self.channels {
            for d in 0..self.dims[0] {
                for h in 0..self.dims[1] {
                    let src = self.index(c, d, h, 0);
                    let dst = out.index(c, d, h, 0);
                    out.data[dst..dst + self.dims[2]]
                        .copy_from_slice(&self.data[src..src + self.dims[2]]);
                }
            }
        }
        Ok(out)
    }

    /// Keeps the low corner of extent `dims`.
    pub fn crop_to(&self, dims: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| dims[a] > self.dims[a] || dims[a] == 0) {
            return Err(Error::Shape(format!(
                "cannot crop {:?} to {:?}",
                self.dims, dims
            )));
        }
        let mut data = Vec::with_capacity(self.channels * dims.iter().product::<usize>());
        for c in 0..self.channels {
            for d in 0..dims[0] {
                for h in 0..dims[1] {
                    let src = self.index(c, d, h, 0);
                    data.extend_from_slice(&self.data[src..src + dims[2]]);
                }
            }
        }
        Self::new(self.channels, dims, self.spacing, data)
    }
}

impl LabelVolume {
    /// Binary mask of voxels equal to `class`.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}
