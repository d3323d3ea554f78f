use crate::error::{ensure_finite, Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a `[rows.len(), dim]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), dim], data)
    }

    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Number of rows of a matrix (first axis).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row width of a matrix (product of trailing axes).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols().max(1))
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.data, what)
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices, where `op(A)` is
/// `m x k` and `op(B)` is `k x n`. Transposition only changes strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have the asserted lengths and the strides above
    // address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Named, ordered parameter segments. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in segments.iter().enumerate() {
            if segments[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("duplicate parameter segment {name:?}")));
            }
        }
        Ok(ParamVector { segments })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn total_count(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Tensor> {
        self.segments.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.segments.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn segment_at(&self, i: usize) -> &Tensor {
        &self.segments[i].1
    }

    pub(crate) fn segment_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.segments[i].1
    }

    /// Offset of segment `name` within `to_flat()`.
    pub fn offset_of(&self, name: &str) -> Option<usize> {
        let mut off = 0;
        for (n, t) in &self.segments {
            if n == name {
                return Some(off);
            }
            off += t.len();
        }
        None
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, layout needs {}",
                flat.len(),
                self.total_count()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.segments {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += scale * other`, layouts must match.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        for ((_, a), (_, b)) in self.segments.iter_mut().zip(&other.segments) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, t) in &self.segments {
            ensure_finite(t.data(), &format!("{what} ({name})"))?;
        }
        Ok(())
    }
}
