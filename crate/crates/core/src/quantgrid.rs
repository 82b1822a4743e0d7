//! Weight quantization levels, nearest-level projection and the metaplastic
//! modulation function.
//!
//! A [`QuantGrid`] is an ordered, possibly unequally spaced set of weight
//! levels. Interval widths are always looked up per interval, so device
//! derived grids with uneven spacing behave the same as uniform ones.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantGrid {
    levels: Vec<f64>,
}

/// Result of projecting a hidden weight onto the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub index: usize,
    pub value: f64,
}

/// Consolidation steepness `m*`. Zero disables modulation entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MetaParams {
    m_star: f64,
}

impl MetaParams {
    pub fn new(m_star: f64) -> Result<Self> {
        if !m_star.is_finite() || m_star < 0.0 {
            return Err(Error::config(format!(
                "m* must be finite and non-negative, got {m_star}"
            )));
        }
        Ok(Self { m_star })
    }

    pub const fn identity() -> Self {
        Self { m_star: 0.0 }
    }

    pub fn m_star(&self) -> f64 {
        self.m_star
    }
}

impl TryFrom<f64> for MetaParams {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        MetaParams::new(value)
    }
}

impl From<MetaParams> for f64 {
    fn from(p: MetaParams) -> f64 {
        p.m_star
    }
}

impl QuantGrid {
    /// Builds a grid from explicit levels. Levels must be finite and strictly
    /// increasing, with at least two of them.
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::config(format!(
                "a quantization grid needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        if let Some(bad) = levels.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite grid level {bad}")));
        }
        if let Some(w) = levels.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "grid levels must be strictly increasing ({} >= {})",
                w[0], w[1]
            )));
        }
        Ok(Self { levels })
    }

    /// `n` equally spaced levels spanning `[lo, hi]`, endpoints included.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::config(format!("uniform grid needs n >= 2, got {n}")));
        }
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::config(format!(
                "uniform grid bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let span = hi - lo;
        let last = (n - 1) as f64;
        let mut levels: Vec<f64> = (0..n).map(|i| lo + span * (i as f64) / last).collect();
        levels[n - 1] = hi;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn level(&self, index: usize) -> f64 {
        self.levels[index]
    }

    pub fn min(&self) -> f64 {
        self.levels[0]
    }

    pub fn max(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    /// Width of the interval between level `i` and level `i + 1`.
    pub fn interval(&self, i: usize) -> f64 {
        self.levels[i + 1] - self.levels[i]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.levels.len();
        (0..n).all(|i| (self.levels[i] + self.levels[n - 1 - i]).abs() <= tol)
    }

    /// Index of the level closest to zero (lower index on ties).
    pub fn zero_index(&self) -> usize {
        self.nearest_index(0.0)
    }

    /// Nearest level index without input validation. NaN maps to index 0.
    #[inline]
    pub fn nearest_index(&self, w: f64) -> usize {
        let levels = &self.levels;
        let upper = levels.partition_point(|&q| q < w);
        if upper == 0 {
            return 0;
        }
        if upper == levels.len() {
            return levels.len() - 1;
        }
        let lower = upper - 1;
        // ties go to the lower index
        if w - levels[lower] <= levels[upper] - w {
            lower
        } else {
            upper
        }
    }

    /// Nearest-level projection. Inputs outside the grid clamp to the closest
    /// endpoint; exact midpoints resolve to the lower level.
    pub fn project(&self, w_h: f64) -> Result<Projection> {
        if !w_h.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot project non-finite hidden weight {w_h}"
            )));
        }
        let index = self.nearest_index(w_h);
        Ok(Projection {
            index,
            value: self.levels[index],
        })
    }

    /// Width of the interval that houses `w_h` given its projection at
    /// `index`. When `w_h` sits exactly on the level the left interval is used
    /// (the right one for the lowest level).
    fn housing_interval(&self, w_h: f64, w_s: f64, index: usize) -> f64 {
        let last = self.levels.len() - 1;
        if w_h > w_s {
            self.interval(index.min(last - 1))
        } else if index == 0 {
            self.interval(0)
        } else {
            self.interval(index - 1)
        }
    }

    /// Metaplastic modulation `1 - tanh^2(2 m* |w_h - w_s| / I - m*)` where
    /// `I` is the width of the interval containing `w_h`.
    ///
    /// The value is 1 at interval midpoints, `1 - tanh^2(m*)` on a level and
    /// lies in `(0, 1]`. Outside the grid the distance to the endpoint level is
    /// capped at half of the outermost interval.
    #[inline]
    pub fn meta_value(&self, params: MetaParams, w_h: f64, w_s: f64, index: usize) -> f64 {
        let m = params.m_star;
        if m == 0.0 {
            return 1.0;
        }
        let width = self.housing_interval(w_h, w_s, index);
        let dist = (w_h - w_s).abs().min(0.5 * width);
        let arg = 2.0 * m / width * dist - m;
        // sech^2 keeps the result strictly positive where tanh saturates to 1
        let c = arg.cosh();
        1.0 / (c * c)
    }

    /// Hidden weights are kept within half an outer interval past the extreme
    /// levels.
    pub fn clip_bounds(&self) -> (f64, f64) {
        let n = self.levels.len();
        (
            self.levels[0] - 0.5 * self.interval(0),
            self.levels[n - 1] + 0.5 * self.interval(n - 2),
        )
    }

    /// Plain-text form: one decimal level per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.levels {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    /// Parses levels separated by whitespace or commas. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("");
            for tok in body
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
            {
                let v: f64 = tok.parse().map_err(|_| Error::ParseLine {
                    what: "grid text",
                    line: lineno + 1,
                    msg: format!("not a decimal number: {tok:?}"),
                })?;
                levels.push(v);
            }
        }
        Self::new(levels)
    }
}

impl TryFrom<Vec<f64>> for QuantGrid {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        QuantGrid::new(levels)
    }
}

impl From<QuantGrid> for Vec<f64> {
    fn from(g: QuantGrid) -> Vec<f64> {
        g.levels
    }
}
