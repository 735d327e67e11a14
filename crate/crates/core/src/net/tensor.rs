use crate::net::NetError;
use crate::real::Real;
use crate::volgrid::{Heatmap, Volume3D};

/// Dense `(channels, depth, height, width)` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self, NetError> {
        if shape.contains(&0) {
            return Err(NetError::Shape(format!("zero-sized tensor {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(NetError::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for c in 0..shape[0] {
            for z in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([c, z, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// `(depth, height, width)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
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
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.shape[1] + z) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, z, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Single-channel tensor from a volume.
    pub fn from_volume(vol: &Volume3D) -> Self {
        let [d, h, w] = vol.dims();
        Self {
            shape: [1, d, h, w],
            data: vol.values().iter().map(|&v| T::of_f64(v as f64)).collect(),
        }
    }

    pub fn from_heatmap(hm: &Heatmap) -> Self {
        let [d, h, w] = hm.dims();
        Self {
            shape: [hm.classes(), d, h, w],
            data: hm.values().iter().map(|&v| T::of_f64(v as f64)).collect(),
        }
    }

    pub fn to_heatmap(&self, spacing: f32) -> Result<Heatmap, NetError> {
        let values = self.data.iter().map(|v| v.as_f64() as f32).collect();
        Ok(Heatmap::new(
            self.shape[0],
            self.spatial(),
            values,
            spacing,
        )?)
    }
}
