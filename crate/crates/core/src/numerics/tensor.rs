use crate::error::{shape_err, Result};

/// Dense row-major array of `f64` values.
///
/// A `Tensor` is a plain value. Gradient bookkeeping lives on the
/// [`Graph`](super::Graph) node that owns it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the sub-block selected by per-axis half-open ranges.
    pub fn slice(&self, ranges: &[std::ops::Range<usize>]) -> Result<Tensor> {
        check_ranges(&self.shape, ranges)?;
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        let strides = strides(&self.shape);
        let inner = ranges.last().map_or(0, |r| r.len());
        let last = ranges.len() - 1;
        for_each_index(&out_shape[..last], |idx| {
            let mut off = 0;
            for (a, &i) in idx.iter().enumerate() {
                off += (ranges[a].start + i) * strides[a];
            }
            off += ranges[last].start;
            out.extend_from_slice(&self.data[off..off + inner]);
        });
        Tensor::new(out_shape, out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_ranges(shape: &[usize], ranges: &[std::ops::Range<usize>]) -> Result<()> {
    if ranges.len() != shape.len() || shape.is_empty() {
        return Err(shape_err!("slice rank {} does not match shape {:?}", ranges.len(), shape));
    }
    for (r, &d) in ranges.iter().zip(shape) {
        if r.start >= r.end || r.end > d {
            return Err(shape_err!("slice range {r:?} out of bounds for extent {d}"));
        }
    }
    Ok(())
}

/// Calls `f` with every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.is_empty() {
        f(&[]);
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut a = shape.len();
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}
