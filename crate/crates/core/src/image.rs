//! Minimal row-major image container.

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// Range along the viewing ray in meters; 0 marks a missing measurement.
pub type DepthImage = Image<f32>;

impl<T: Clone> Image<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }
}

impl<T> Image<T> {
    /// Returns `None` when `data` does not hold exactly `width × height` pixels.
    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Option<Self> {
        (data.len() == width as usize * height as usize).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, u: u32, v: u32) -> &T {
        &self.data[self.index(u, v)]
    }

    pub fn get_mut(&mut self, u: u32, v: u32) -> &mut T {
        let i = self.index(u, v);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, T> {
        self.data.chunks(self.width as usize)
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    #[inline]
    fn index(&self, u: u32, v: u32) -> usize {
        debug_assert!(u < self.width && v < self.height);
        v as usize * self.width as usize + u as usize
    }
}
