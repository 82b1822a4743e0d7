//! Behavioural model of a single 1T1R memristor cell.
//!
//! A cell has one low-conductance state (level 0) and several
//! high-conductance states set by the compliance current (levels 1..).
//! Programming is single shot: the conductance is drawn once from the
//! level's distribution and kept until the next program call.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ENDURANCE: u32 = 100_000;

/// Conductance distribution of one programmable level, in microsiemens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-level conductance statistics. Row 0 is the LCS; rows 1.. are HCS
/// levels in increasing conductance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct LevelSpec {
    levels: Vec<LevelStat>,
}

impl LevelSpec {
    pub fn new(levels: Vec<LevelStat>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::config("a level spec needs the LCS and at least one HCS level"));
        }
        if levels.len() > 128 {
            return Err(Error::config(format!("too many device levels ({})", levels.len())));
        }
        for (k, l) in levels.iter().enumerate() {
            if !(l.mean.is_finite() && l.std.is_finite()) || l.mean < 0.0 || l.std < 0.0 {
                return Err(Error::config(format!(
                    "level {k}: mean and std must be finite and non-negative (got {}, {})",
                    l.mean, l.std
                )));
            }
        }
        if let Some(k) = (1..levels.len()).find(|&k| levels[k - 1].mean >= levels[k].mean) {
            return Err(Error::config(format!(
                "level means must be strictly increasing (level {} = {} >= level {k} = {})",
                k - 1,
                levels[k - 1].mean,
                levels[k].mean
            )));
        }
        Ok(Self { levels })
    }

    /// LCS at 2 uS, eight HCS levels linearly spaced 20..90 uS, all with a
    /// relative spread of `rel_sigma`.
    pub fn linear_default(rel_sigma: f64) -> Self {
        let mut means = vec![2.0];
        means.extend((0..8).map(|i| 20.0 + 10.0 * i as f64));
        Self::new(
            means
                .into_iter()
                .map(|mean| LevelStat { mean, std: rel_sigma * mean })
                .collect(),
        )
        .expect("default spec is monotone")
    }

    /// Same means with every standard deviation set to zero.
    pub fn noiseless(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|l| LevelStat { mean: l.mean, std: 0.0 }).collect(),
        }
    }

    pub fn levels(&self) -> &[LevelStat] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of HCS levels, i.e. the largest programmable level index.
    pub fn max_level(&self) -> u8 {
        (self.levels.len() - 1) as u8
    }

    pub fn mean(&self, level: u8) -> f64 {
        self.levels[level as usize].mean
    }

    pub fn std(&self, level: u8) -> f64 {
        self.levels[level as usize].std
    }

    /// Text table, one `level mean std` row per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# level mean_uS std_uS\n");
        for (k, l) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "{k} {} {}", l.mean, l.std);
        }
        out
    }

    /// Parses the text table written by [`LevelSpec::to_text`]. Rows must be
    /// listed in level order starting at 0.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ParseLine { what: "level spec", line: lineno + 1, msg };
            let cols: Vec<&str> = body.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, found {}", cols.len())));
            }
            let level: usize = cols[0].parse().map_err(|_| err(format!("bad level {:?}", cols[0])))?;
            if level != levels.len() {
                return Err(err(format!("expected level {}, found {level}", levels.len())));
            }
            let mean: f64 = cols[1].parse().map_err(|_| err(format!("bad mean {:?}", cols[1])))?;
            let std: f64 = cols[2].parse().map_err(|_| err(format!("bad std {:?}", cols[2])))?;
            levels.push(LevelStat { mean, std });
        }
        Self::new(levels)
    }
}

impl Default for LevelSpec {
    fn default() -> Self {
        Self::linear_default(0.08)
    }
}

impl TryFrom<Vec<[f64; 3]>> for LevelSpec {
    type Error = Error;

    fn try_from(rows: Vec<[f64; 3]>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r[0] != i as f64 {
                return Err(Error::config(format!("level spec row {i} is labelled {}", r[0])));
            }
        }
        Self::new(rows.iter().map(|r| LevelStat { mean: r[1], std: r[2] }).collect())
    }
}

impl From<LevelSpec> for Vec<[f64; 3]> {
    fn from(spec: LevelSpec) -> Self {
        spec.levels
            .iter()
            .enumerate()
            .map(|(k, l)| [k as f64, l.mean, l.std])
            .collect()
    }
}

/// Emitted when a cell is programmed past its endurance budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnduranceEvent {
    pub ops: u32,
    pub budget: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceCell {
    /// `None` until the first program operation.
    pub level: Option<u8>,
    /// Stored conductance in microsiemens.
    pub g: f64,
    pub ops: u32,
    pub endurance_budget: u32,
}

impl Default for DeviceCell {
    fn default() -> Self {
        Self::new(DEFAULT_ENDURANCE)
    }
}

/// Draws from `Normal(mean, std)` truncated below at zero.
fn sample_conductance<R: Rng + ?Sized>(stat: LevelStat, rng: &mut R) -> f64 {
    if stat.std == 0.0 {
        return stat.mean;
    }
    let normal = Normal::new(stat.mean, stat.std).expect("validated std");
    for _ in 0..64 {
        let g = normal.sample(rng);
        if g >= 0.0 {
            return g;
        }
    }
    0.0
}

impl DeviceCell {
    pub fn new(endurance_budget: u32) -> Self {
        Self {
            level: None,
            g: 0.0,
            ops: 0,
            endurance_budget,
        }
    }

    /// Single-shot programming to `target`. Always counts one operation.
    pub fn program<R: Rng + ?Sized>(&mut self, target: u8, spec: &LevelSpec, rng: &mut R) -> Result<Option<EnduranceEvent>> {
        if target > spec.max_level() {
            return Err(Error::Usage(format!(
                "cannot program level {target}; device has levels 0..={}",
                spec.max_level()
            )));
        }
        self.level = Some(target);
        self.g = sample_conductance(spec.levels[target as usize], rng);
        self.ops = self.ops.saturating_add(1);
        if self.ops > self.endurance_budget {
            if self.ops == self.endurance_budget.saturating_add(1) {
                log::warn!(
                    "device exceeded its endurance budget of {} programming operations",
                    self.endurance_budget
                );
            }
            return Ok(Some(EnduranceEvent { ops: self.ops, budget: self.endurance_budget }));
        }
        Ok(None)
    }

    /// Reads the stored conductance with optional zero-mean Gaussian read
    /// noise. Negative results clamp to zero.
    pub fn read<R: Rng + ?Sized>(&self, read_noise_sigma: f64, rng: &mut R) -> f64 {
        if read_noise_sigma <= 0.0 {
            return self.g;
        }
        let noise: f64 = rng.sample(rand_distr::StandardNormal);
        (self.g + read_noise_sigma * noise).max(0.0)
    }
}

/// Which cell of a differential pair a dump row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
}

/// One row of a device-state dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DumpRecord {
    pub tile: usize,
    pub row: usize,
    pub col: usize,
    pub side: Side,
    pub level: Option<u8>,
    pub g: f64,
    pub ops: u32,
}

pub const DUMP_HEADER: &str = "# tile row col side level g_uS ops";

/// Writes dump rows as whitespace-separated columns. Unprogrammed cells show
/// `-` in the level column.
pub fn write_dump<W: Write>(mut out: W, records: impl IntoIterator<Item = DumpRecord>) -> std::io::Result<()> {
    writeln!(out, "{DUMP_HEADER}")?;
    for r in records {
        let side = match r.side {
            Side::Plus => '+',
            Side::Minus => '-',
        };
        match r.level {
            Some(l) => writeln!(out, "{} {} {} {side} {l} {} {}", r.tile, r.row, r.col, r.g, r.ops)?,
            None => writeln!(out, "{} {} {} {side} - {} {}", r.tile, r.row, r.col, r.g, r.ops)?,
        }
    }
    Ok(())
}

fn parse_dump_line(line: &str, lineno: usize) -> Result<Option<DumpRecord>> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let err = |msg: String| Error::ParseLine { what: "device dump", line: lineno, msg };
    let cols: Vec<&str> = body.split_whitespace().collect();
    if cols.len() != 7 {
        return Err(err(format!("expected 7 columns, found {}", cols.len())));
    }
    let int = |i: usize, name: &str| -> Result<usize> {
        cols[i].parse().map_err(|_| err(format!("bad {name} {:?}", cols[i])))
    };
    let side = match cols[3] {
        "+" => Side::Plus,
        "-" => Side::Minus,
        other => return Err(err(format!("bad side {other:?}"))),
    };
    let level = match cols[4] {
        "-" => None,
        s => Some(s.parse::<u8>().map_err(|_| err(format!("bad level {s:?}")))?),
    };
    let g: f64 = cols[5].parse().map_err(|_| err(format!("bad conductance {:?}", cols[5])))?;
    if !g.is_finite() || g < 0.0 {
        return Err(err(format!("conductance must be finite and non-negative, got {g}")));
    }
    let ops: u32 = cols[6].parse().map_err(|_| err(format!("bad op count {:?}", cols[6])))?;
    Ok(Some(DumpRecord {
        tile: int(0, "tile")?,
        row: int(1, "row")?,
        col: int(2, "col")?,
        side,
        level,
        g,
        ops,
    }))
}

/// Parses a device dump from text.
pub fn parse_dump(text: &str) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(r) = parse_dump_line(line, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// Streaming variant of [`parse_dump`] for large dumps.
pub fn read_dump<R: BufRead>(reader: R) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(r) = parse_dump_line(&line?, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

    #[test]
    fn default_spec_values() {
        let s = LevelSpec::default();
        assert_eq!(s.num_levels(), 9);
        assert_eq!(s.mean(0), 2.0);
        assert_eq!(s.mean(1), 20.0);
        assert_eq!(s.mean(8), 90.0);
        assert!((s.std(8) - 7.2).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mk = |pairs: &[(f64, f64)]| {
            LevelSpec::new(pairs.iter().map(|&(mean, std)| LevelStat { mean, std }).collect())
        };
        assert!(mk(&[(1.0, 0.1)]).is_err());
        assert!(mk(&[(1.0, 0.1), (1.0, 0.1)]).is_err());
        assert!(mk(&[(1.0, -0.1), (2.0, 0.1)]).is_err());
        assert!(mk(&[(1.0, 0.1), (f64::NAN, 0.1)]).is_err());
        // overlapping distributions are allowed
        assert!(mk(&[(1.0, 5.0), (2.0, 5.0)]).is_ok());
    }

    #[test]
    fn zero_variance_program_is_exact() {
        let spec = LevelSpec::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = DeviceCell::default();
        cell.program(0, &spec, &mut rng).unwrap();
        assert_eq!(cell.g, 2.0);
        cell.program(5, &spec, &mut rng).unwrap();
        assert_eq!((cell.level, cell.g, cell.ops), (Some(5), 60.0, 2));
    }

    #[test]
    fn repeated_programs_resample_and_count() {
        let spec = LevelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cell = DeviceCell::default();
        cell.program(3, &spec, &mut rng).unwrap();
        let first = cell.g;
        cell.program(3, &spec, &mut rng).unwrap();
        assert_ne!(first, cell.g);
        assert_eq!(cell.ops, 2);
    }

    #[test]
    fn out_of_range_level_rejected() {
        let mut cell = DeviceCell::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cell.program(9, &LevelSpec::default(), &mut rng).is_err());
        assert_eq!(cell.ops, 0);
    }

    #[test]
    fn endurance_exceedance_is_reported_not_fatal() {
        let spec = LevelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cell = DeviceCell::new(2);
        assert_eq!(cell.program(1, &spec, &mut rng).unwrap(), None);
        assert_eq!(cell.program(2, &spec, &mut rng).unwrap(), None);
        assert_eq!(
            cell.program(3, &spec, &mut rng).unwrap(),
            Some(EnduranceEvent { ops: 3, budget: 2 })
        );
        assert_eq!(cell.level, Some(3));
    }

    #[test]
    fn truncation_keeps_conductance_non_negative() {
        let spec = LevelSpec::new(vec![
            LevelStat { mean: 0.1, std: 1.0 },
            LevelStat { mean: 1.0, std: 1.0 },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cell = DeviceCell::default();
        for _ in 0..2000 {
            cell.program(0, &spec, &mut rng).unwrap();
            assert!(cell.g >= 0.0);
        }
    }

    // Two-sided one-sample Kolmogorov-Smirnov statistic.
    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn programmed_conductances_follow_configured_distribution() {
        let spec = LevelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16_384;
        // alpha = 0.01 asymptotic critical value
        let critical = 1.628 / (n as f64).sqrt();
        for level in 0..=spec.max_level() {
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let mut cell = DeviceCell::default();
                cell.program(level, &spec, &mut rng).unwrap();
                samples.push(cell.g);
            }
            let dist = StatNormal::new(spec.mean(level), spec.std(level)).unwrap();
            let d = ks_statistic(samples, |x| dist.cdf(x));
            assert!(d < critical, "level {level}: KS D = {d} >= {critical}");
        }
    }

    #[test]
    fn read_paths() {
        let spec = LevelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cell = DeviceCell::default();
        cell.program(4, &spec, &mut rng).unwrap();
        assert_eq!(cell.read(0.0, &mut rng), cell.g);

        let sigma = 2.0;
        let n = 10_000;
        let mean = (0..n).map(|_| cell.read(sigma, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - cell.g).abs() < 3.0 * sigma / (n as f64).sqrt());

        let low = DeviceCell { level: Some(0), g: 0.01, ops: 1, endurance_budget: 10 };
        assert!((0..1000).all(|_| low.read(5.0, &mut rng) >= 0.0));
    }

    #[test]
    fn level_spec_text_and_toml_forms() {
        let spec = LevelSpec::default();
        assert_eq!(LevelSpec::parse_text(&spec.to_text()).unwrap(), spec);
        assert!(LevelSpec::parse_text("0 1 0.1\n2 3 0.1\n").is_err());
        assert!(LevelSpec::parse_text("0 1\n").is_err());

        #[derive(Deserialize)]
        struct Wrap {
            levels: LevelSpec,
        }
        let w: Wrap = toml::from_str("levels = [[0, 2.0, 0.1], [1, 20, 1.5]]").unwrap();
        assert_eq!(w.levels.mean(1), 20.0);
        assert!(toml::from_str::<Wrap>("levels = [[1, 2.0, 0.1], [0, 20, 1.5]]").is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let records = vec![
            DumpRecord { tile: 0, row: 1, col: 2, side: Side::Plus, level: Some(8), g: 89.25, ops: 3 },
            DumpRecord { tile: 1, row: 0, col: 0, side: Side::Minus, level: None, g: 0.0, ops: 0 },
        ];
        let mut buf = Vec::new();
        write_dump(&mut buf, records.clone()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(DUMP_HEADER));
        assert_eq!(parse_dump(&text).unwrap(), records);
        assert_eq!(read_dump(text.as_bytes()).unwrap(), records);
        assert!(matches!(parse_dump("0 0 0 * 1 1.0 1"), Err(Error::ParseLine { line: 1, .. })));
        assert!(parse_dump("0 0 0 + 1 -1.0 1").is_err());
    }
}
