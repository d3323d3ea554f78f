//! Histograms and distribution distances.

use std::fmt;

use crate::error::{Error, Result};
use crate::samples::SampleSet;

/// Default number of bins per axis: an 8 x 8 grid, 64 cells in total. Finer
/// grids are dominated by counting noise at 100k samples; two independent
/// reference runs already differ by a JS distance of about 0.055 at 64 x 64.
pub const DEFAULT_BINS: usize = 8;

/// Fractional margin added on each side of the reference range.
pub const EXTENT_MARGIN: f64 = 0.05;

/// Baseline proportion added to every bin before taking logs.
pub const PMF_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite())
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(Error::Config(format!(
                "invalid extent [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Extent { x_min, x_max, y_min, y_max })
    }

    /// Range of the first two columns of `reference` widened by
    /// `EXTENT_MARGIN` of the span on each side.
    pub fn from_reference(reference: &SampleSet) -> Result<Self> {
        if reference.is_empty() || reference.dim() < 2 {
            return Err(Error::Shape("extent needs a nonempty two-column sample set".into()));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in reference.points().iter_rows() {
            for j in 0..2 {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let pad = |j: usize| {
            let span = hi[j] - lo[j];
            if span > 0.0 { EXTENT_MARGIN * span } else { 0.5 }
        };
        Extent::new(lo[0] - pad(0), hi[0] + pad(0), lo[1] - pad(1), hi[1] + pad(1))
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x_min, self.x_max, self.y_min, self.y_max)
    }
}

/// Counts over a regular grid. Row-major with `y` as the slow index.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    extent: Extent,
    bins: (usize, usize),
    counts: Vec<u64>,
}

impl Histogram2D {
    pub fn new(extent: Extent, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Config("histogram needs at least one bin per axis".into()));
        }
        Ok(Histogram2D {
            extent,
            bins: (nx, ny),
            counts: vec![0; nx * ny],
        })
    }

    /// Histogram of the first two columns of `samples`.
    pub fn from_samples(samples: &SampleSet, extent: Extent, nx: usize, ny: usize) -> Result<Self> {
        if samples.dim() < 2 {
            return Err(Error::Shape("histogram needs two columns".into()));
        }
        let mut h = Histogram2D::new(extent, nx, ny)?;
        for p in samples.points().iter_rows() {
            h.insert(p[0], p[1])?;
        }
        Ok(h)
    }

    fn bin(v: f64, lo: f64, hi: f64, n: usize) -> usize {
        let k = ((v - lo) / (hi - lo) * n as f64).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(n - 1)
        }
    }

    /// Adds one point; points outside the extent land in the nearest edge bin.
    pub fn insert(&mut self, x: f64, y: f64) -> Result<()> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::NumericFault(format!("non-finite point ({x}, {y})")));
        }
        let e = &self.extent;
        let i = Self::bin(x, e.x_min, e.x_max, self.bins.0);
        let j = Self::bin(y, e.y_min, e.y_max, self.bins.1);
        self.counts[j * self.bins.0 + i] += 1;
        Ok(())
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn bins(&self) -> (usize, usize) {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Center of bin `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let e = &self.extent;
        let dx = (e.x_max - e.x_min) / self.bins.0 as f64;
        let dy = (e.y_max - e.y_min) / self.bins.1 as f64;
        (e.x_min + (i as f64 + 0.5) * dx, e.y_min + (j as f64 + 0.5) * dy)
    }

    /// Mass fraction per bin.
    pub fn proportions(&self) -> Vec<f64> {
        let n = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    fn check_compatible(&self, other: &Histogram2D) -> Result<()> {
        if self.bins != other.bins || self.extent != other.extent {
            return Err(Error::Shape(format!(
                "histograms differ: {:?} over {} vs {:?} over {}",
                self.bins, self.extent, other.bins, other.extent
            )));
        }
        Ok(())
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Jensen-Shannon distance between two nonnegative vectors, each normalized
/// to sum 1. Natural log, so the value lies in `[0, sqrt(ln 2)]`.
pub fn js_distance_vectors(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("vector lengths {} and {}", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("probability vectors must be finite and nonnegative".into()));
    }
    let p = normalized(p);
    let q = normalized(q);
    let mut js = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    Ok(js.max(0.0).sqrt())
}

/// Jensen-Shannon distance of two histograms after adding one count to every
/// bin.
pub fn js_distance(hp: &Histogram2D, hq: &Histogram2D) -> Result<f64> {
    hp.check_compatible(hq)?;
    let p: Vec<f64> = hp.counts.iter().map(|&c| c as f64 + 1.0).collect();
    let q: Vec<f64> = hq.counts.iter().map(|&c| c as f64 + 1.0).collect();
    js_distance_vectors(&p, &q)
}

/// Mean squared difference of log proportions after adding `PMF_FLOOR` to
/// every proportion and renormalizing.
pub fn pmf_error_vectors(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("vector lengths {} and {}", p.len(), q.len())));
    }
    let floor = |v: &[f64]| normalized(&v.iter().map(|x| x + PMF_FLOOR).collect::<Vec<_>>());
    let p = floor(&normalized(p));
    let q = floor(&normalized(q));
    Ok(p.iter().zip(&q).map(|(a, b)| (a.ln() - b.ln()).powi(2)).sum::<f64>() / p.len() as f64)
}

pub fn pmf_error(hp: &Histogram2D, hq: &Histogram2D) -> Result<f64> {
    hp.check_compatible(hq)?;
    if hp.total() == 0 || hq.total() == 0 {
        return Err(Error::Domain("empty histogram".into()));
    }
    pmf_error_vectors(&hp.proportions(), &hq.proportions())
}

/// Exact Wasserstein-1 distance between two empirical 1D distributions,
/// `integral |F_a - F_b|`.
pub fn w1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("W1 needs nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NumericFault("non-finite sample in W1".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut w = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        w += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(w)
}

/// Per-coordinate W1 between two sample sets of equal dimension.
pub fn coordinate_w1(a: &SampleSet, b: &SampleSet) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    (0..a.dim()).map(|j| w1_distance(&a.column(j), &b.column(j))).collect()
}

/// Metric values of one comparison.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.rows.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// `name = value` lines.
    pub fn to_text(&self) -> String {
        self.rows.iter().map(|(n, v)| format!("{n} = {v:.6e}\n")).collect()
    }

    /// `metric,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.rows {
            s.push_str(&format!("{n},{v:.9e}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn js_closed_forms() {
        assert_eq!(js_distance_vectors(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let disjoint = js_distance_vectors(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((disjoint - 2f64.ln().sqrt()).abs() < 1e-12);
        // KL(p||m) = ln(4/3), KL(q||m) = (ln(2/3) + ln 2) / 2
        let want = (0.5 * (4.0f64 / 3.0).ln() + 0.25 * ((2.0f64 / 3.0).ln() + 2f64.ln())).sqrt();
        let got = js_distance_vectors(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.4645).abs() < 1e-3);
    }

    #[test]
    fn js_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.random_range(1..20);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 1e-9).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) + 1e-9).collect();
            let a = js_distance_vectors(&p, &q).unwrap();
            let b = js_distance_vectors(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a <= 2f64.ln().sqrt() + 1e-12);
            assert!(js_distance_vectors(&p, &p).unwrap() < 1e-7);
        }
    }

    #[test]
    fn pmf_closed_form() {
        let e = pmf_error_vectors(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let want = (2f64.ln().powi(2) + (2.0f64 / 3.0).ln().powi(2)) / 2.0;
        assert!((e - want).abs() < 1e-5, "{e} vs {want}");
        assert!((e - 0.3224).abs() < 1e-3);
        assert_eq!(pmf_error_vectors(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let ab = pmf_error_vectors(&[1.0, 0.0, 3.0], &[0.2, 0.5, 0.1]).unwrap();
        let ba = pmf_error_vectors(&[0.2, 0.5, 0.1], &[1.0, 0.0, 3.0]).unwrap();
        assert!((ab - ba).abs() < 1e-12 && ab > 0.0);
    }

    #[test]
    fn histogram_clips_to_edges_and_ignores_order() {
        let e = Extent::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let pts = [(0.1, 0.1), (5.0, -3.0), (0.99, 0.5), (-1.0, 2.0)];
        let mut a = Histogram2D::new(e, 4, 4).unwrap();
        let mut b = Histogram2D::new(e, 4, 4).unwrap();
        for &(x, y) in &pts {
            a.insert(x, y).unwrap();
        }
        for &(x, y) in pts.iter().rev() {
            b.insert(x, y).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(a.total(), 4);
        assert_eq!(a.counts()[3], 1);
        assert_eq!(a.counts()[12], 1);
        assert!(a.insert(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn mismatched_histograms_rejected() {
        let a = Histogram2D::new(Extent::new(0.0, 1.0, 0.0, 1.0).unwrap(), 4, 4).unwrap();
        let b = Histogram2D::new(Extent::new(0.0, 2.0, 0.0, 1.0).unwrap(), 4, 4).unwrap();
        let c = Histogram2D::new(Extent::new(0.0, 1.0, 0.0, 1.0).unwrap(), 4, 5).unwrap();
        assert!(matches!(js_distance(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(pmf_error(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn extent_has_margin() {
        let s = SampleSet::from_points(Tensor::new(vec![2, 2], vec![0.0, 1.0, 10.0, 3.0]).unwrap()).unwrap();
        let e = Extent::from_reference(&s).unwrap();
        assert_eq!(e, Extent::new(-0.5, 10.5, 0.9, 3.1).unwrap());
    }

    fn brute_w1(a: &[f64], b: &[f64]) -> f64 {
        // Equal sizes: optimal coupling matches sorted order.
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn w1_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(w1_distance(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.7).collect();
        assert!((w1_distance(&a, &b).unwrap() - 0.7).abs() < 1e-9);
        let c: Vec<f64> = (0..1000).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        assert!((w1_distance(&a, &c).unwrap() - brute_w1(&a, &c)).abs() < 1e-9);
        // Unequal sizes: duplicate each point of a twice.
        let a2: Vec<f64> = a.iter().flat_map(|&v| [v, v]).collect();
        assert!((w1_distance(&a2, &c).unwrap() - brute_w1(&a, &c)).abs() < 1e-9);
        assert!(w1_distance(&[], &a).is_err());
    }
}
