use ndarray::{Array2, ArrayView2};

/// Dense activation tensor in `(C, N, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    /// Stacks equally sized single-channel images into a `(1, N, H, W)` batch.
    pub fn from_images<'a>(images: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Self {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            let d = img.dim();
            assert!(dims.is_none_or(|prev| prev == d), "batch images differ in shape");
            dims = Some(d);
            data.extend(img.iter().copied());
            n += 1;
        }
        let (h, w) = dims.expect("empty batch");
        Self { c: 1, n, h, w, data }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    fn plane_offset(&self, c: usize, n: usize) -> usize {
        (c * self.n + n) * self.h * self.w
    }

    pub fn plane(&self, c: usize, n: usize) -> &[f32] {
        let o = self.plane_offset(c, n);
        &self.data[o..o + self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [f32] {
        let o = self.plane_offset(c, n);
        let len = self.h * self.w;
        &mut self.data[o..o + len]
    }

    /// All samples of channel `c`, contiguous.
    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.n * self.h * self.w;
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let len = self.n * self.h * self.w;
        &mut self.data[c * len..(c + 1) * len]
    }

    pub fn to_array(&self, c: usize, n: usize) -> Array2<f32> {
        Array2::from_shape_vec((self.h, self.w), self.plane(c, n).to_vec())
            .expect("plane matches shape")
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: the first `c_first` channels and the rest.
    pub fn split(mut self, c_first: usize) -> (Tensor, Tensor) {
        let at = c_first * self.n * self.h * self.w;
        let rest = self.data.split_off(at);
        let second = Tensor {
            c: self.c - c_first,
            n: self.n,
            h: self.h,
            w: self.w,
            data: rest,
        };
        self.c = c_first;
        (self, second)
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Mutable handle on one named tensor of a model.
pub enum Slot<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Buffer),
}

impl Slot<'_> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Slot::Param(p) => &p.shape,
            Slot::Buffer(b) => &b.shape,
        }
    }

    pub fn value(&self) -> &[f32] {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => &b.value,
        }
    }

    pub fn value_mut(&mut self) -> &mut [f32] {
        match self {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => &mut b.value,
        }
    }
}
