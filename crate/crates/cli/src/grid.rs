//! Regular 2D scalar grids, their text form and PPM rendering.

use std::fmt::Write as _;

use fpdiff::metrics::{Extent, Histogram2D};
use fpdiff::{Error, Result};

/// Values at cell centers, row-major with `y` rows from bottom to top.
/// Non-finite values mark cells without data.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub extent: Extent,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

const HEADER: &str = "# fpdiff grid";

impl Grid {
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let e = &self.extent;
        (
            e.x_min + (i as f64 + 0.5) * (e.x_max - e.x_min) / self.nx as f64,
            e.y_min + (j as f64 + 0.5) * (e.y_max - e.y_min) / self.ny as f64,
        )
    }

    /// `-ln` of the bin proportions; empty bins stay non-finite.
    pub fn free_energy_of(hist: &Histogram2D) -> Self {
        let (nx, ny) = hist.bins();
        let total = hist.total().max(1) as f64;
        let values = hist
            .counts()
            .iter()
            .map(|&c| if c > 0 { -(c as f64 / total).ln() } else { f64::NAN })
            .collect();
        Grid { extent: hist.extent(), nx, ny, values }
    }

    /// Shifts so that the smallest finite value is zero.
    pub fn shifted_to_zero(mut self) -> Self {
        let min = self.values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            for v in &mut self.values {
                *v -= min;
            }
        }
        self
    }

    pub fn to_text(&self) -> String {
        let e = &self.extent;
        let mut s = format!(
            "{HEADER} nx={} ny={} x_min={:e} x_max={:e} y_min={:e} y_max={:e}\n",
            self.nx, self.ny, e.x_min, e.x_max, e.y_min, e.y_max
        );
        for row in self.values.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |d: &str| Error::Config(format!("grid file: {d}"));
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty"))?;
        let fields = head.strip_prefix(HEADER).ok_or_else(|| bad("missing header"))?;
        let get = |key: &str| -> Result<f64> {
            fields
                .split_whitespace()
                .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| bad(&format!("header lacks {key}")))?
                .parse()
                .map_err(|_| bad(&format!("bad {key}")))
        };
        let (nx, ny) = (get("nx")?, get("ny")?);
        let extent = Extent::new(get("x_min")?, get("x_max")?, get("y_min")?, get("y_max")?)?;
        if !(nx >= 1.0 && ny >= 1.0 && nx.fract() == 0.0 && ny.fract() == 0.0 && nx * ny <= 1e8) {
            return Err(bad("bad dimensions"));
        }
        let (nx, ny) = (nx as usize, ny as usize);
        let mut values = Vec::with_capacity(nx * ny);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(&format!("bad value `{v}`"))))
                .collect::<Result<_>>()?;
            if row.len() != nx {
                return Err(bad("row length differs from nx"));
            }
            values.extend(row);
        }
        if values.len() != nx * ny {
            return Err(bad("row count differs from ny"));
        }
        Ok(Grid { extent, nx, ny, values })
    }

    /// Binary PPM, top row first. Finite values map linearly from the
    /// minimum to the maximum onto the color ramp; other cells are white.
    pub fn to_ppm(&self) -> Vec<u8> {
        let finite = self.values.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P6\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        for j in (0..self.ny).rev() {
            for i in 0..self.nx {
                let v = self.values[j * self.nx + i];
                if v.is_finite() {
                    let k = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as usize;
                    out.extend_from_slice(&RAMP[k]);
                } else {
                    out.extend_from_slice(&[255, 255, 255]);
                }
            }
        }
        out
    }
}

/// 256-entry ramp from dark blue (low free energy) through teal and green to
/// yellow, interpolated between fixed anchors.
static RAMP: std::sync::LazyLock<[[u8; 3]; 256]> = std::sync::LazyLock::new(|| {
    const ANCHORS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let mut ramp = [[0u8; 3]; 256];
    for (k, c) in ramp.iter_mut().enumerate() {
        let pos = k as f64 / 255.0 * (ANCHORS.len() - 1) as f64;
        let seg = (pos.floor() as usize).min(ANCHORS.len() - 2);
        let f = pos - seg as f64;
        for ch in 0..3 {
            let v = ANCHORS[seg][ch] + f * (ANCHORS[seg + 1][ch] - ANCHORS[seg][ch]);
            c[ch] = v.round() as u8;
        }
    }
    ramp
});

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let g = Grid {
            extent: Extent::new(-1.0, 1.0, 0.0, 2.0).unwrap(),
            nx: 3,
            ny: 2,
            values: vec![0.0, 1.5, f64::NAN, -2.0, 1e-300, 7.0],
        };
        let back = Grid::parse(&g.to_text()).unwrap();
        assert_eq!(back.nx, 3);
        assert_eq!(back.extent, g.extent);
        assert!(back.values[2].is_nan());
        assert_eq!(back.values[4], 1e-300);
    }

    #[test]
    fn ppm_has_header_and_pixels() {
        let g = Grid {
            extent: Extent::new(0.0, 1.0, 0.0, 1.0).unwrap(),
            nx: 2,
            ny: 2,
            values: vec![0.0, 1.0, 2.0, f64::NAN],
        };
        let ppm = g.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 12);
        // Top-right pixel is the empty cell.
        assert_eq!(&ppm[11 + 3..11 + 6], &[255, 255, 255]);
        assert_eq!(&ppm[11 + 6..11 + 9], &RAMP[0]);
    }

    #[test]
    fn ramp_runs_dark_to_bright() {
        let lum = |c: [u8; 3]| c.iter().map(|&v| v as u32).sum::<u32>();
        assert!(lum(RAMP[0]) < lum(RAMP[255]));
        assert_eq!(RAMP[0], [68, 1, 84]);
        assert_eq!(RAMP[255], [253, 231, 37]);
    }

    #[test]
    fn malformed_grids_are_errors() {
        for text in ["", "# other", "# fpdiff grid nx=2 ny=1 x_min=0 x_max=1 y_min=0 y_max=1\n1 2 3\n"] {
            assert!(Grid::parse(text).is_err());
        }
    }
}
