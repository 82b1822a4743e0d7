//! Crossbar tiles of differential memristor pairs.
//!
//! A signed weight level `k` is stored in two adjacent cells: the plus cell
//! holds HCS level `k` for positive weights, the minus cell holds `|k|` for
//! negative ones, and the idle side sits in the LCS. Zero is two matched LCS
//! cells. The decoded weight is `gain * (g_plus - g_minus)`.

use std::io::Write;
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::device::{write_dump, DeviceCell, DumpRecord, LevelSpec, Side};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::quantgrid::QuantGrid;

/// Side of a physical array in cells (128 x 128 = 16 kb).
pub const PHYSICAL_ARRAY_DIM: usize = 128;

/// Maps a signed level to `(plus_level, minus_level)` device levels.
pub fn encode_level(k: i32, max_level: u8) -> Result<(u8, u8)> {
    let m = max_level as i32;
    if !(-m..=m).contains(&k) {
        return Err(Error::Usage(format!("signed level {k} outside -{m}..={m}")));
    }
    Ok(match k {
        k if k > 0 => (k as u8, 0),
        k if k < 0 => (0, (-k) as u8),
        _ => (0, 0),
    })
}

/// The weight grid induced by a device level spec.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGrid {
    pub grid: QuantGrid,
    /// Weight units per microsiemens.
    pub gain: f64,
    pub max_level: u8,
}

impl DeviceGrid {
    /// Grid index of signed level `k`.
    pub fn index_of(&self, k: i32) -> usize {
        (k + self.max_level as i32) as usize
    }

    /// Signed level of grid index `i`.
    pub fn signed_level(&self, index: usize) -> i32 {
        index as i32 - self.max_level as i32
    }
}

/// Builds the `2 * max_level + 1` level weight grid of a differential pair,
/// scaled so the top level equals `target_max`.
pub fn derive_grid(spec: &LevelSpec, target_max: f64) -> Result<DeviceGrid> {
    if !(target_max.is_finite() && target_max > 0.0) {
        return Err(Error::config(format!("target_max must be positive, got {target_max}")));
    }
    let max_level = spec.max_level();
    let lcs = spec.mean(0);
    let gain = target_max / (spec.mean(max_level) - lcs);
    let m = max_level as i32;
    let levels = (-m..=m)
        .map(|k| {
            let (p, n) = encode_level(k, max_level).expect("in range");
            if p == n {
                0.0
            } else {
                gain * (spec.mean(p) - spec.mean(n))
            }
        })
        .collect();
    Ok(DeviceGrid {
        grid: QuantGrid::new(levels)?,
        gain,
        max_level,
    })
}

/// Number of physical arrays needed to hold a `rows x cols` differential
/// layer (two cells per synapse).
pub fn physical_array_count(rows: usize, cols: usize) -> usize {
    rows.div_ceil(PHYSICAL_ARRAY_DIM) * (2 * cols).div_ceil(PHYSICAL_ARRAY_DIM)
}

/// Programming activity of one write call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteReport {
    pub ops: u64,
    pub endurance_events: u64,
}

impl std::ops::AddAssign for WriteReport {
    fn add_assign(&mut self, rhs: Self) {
        self.ops += rhs.ops;
        self.endurance_events += rhs.endurance_events;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarTile {
    rows: usize,
    cols: usize,
    plus: Vec<DeviceCell>,
    minus: Vec<DeviceCell>,
    gain: f64,
    /// `gain * (g_plus - g_minus)`, refreshed whenever a cell is programmed.
    decoded: Array2<f64>,
}

impl CrossbarTile {
    /// A tile of pristine (never programmed) cells.
    pub fn new(rows: usize, cols: usize, gain: f64, endurance_budget: u32) -> Self {
        Self {
            rows,
            cols,
            plus: vec![DeviceCell::new(endurance_budget); rows * cols],
            minus: vec![DeviceCell::new(endurance_budget); rows * cols],
            gain,
            decoded: Array2::zeros((rows, cols)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn cell(&self, row: usize, col: usize, side: Side) -> &DeviceCell {
        let i = row * self.cols + col;
        match side {
            Side::Plus => &self.plus[i],
            Side::Minus => &self.minus[i],
        }
    }

    /// Signed level currently stored at `(row, col)`, if both cells have been
    /// programmed.
    pub fn stored_level(&self, row: usize, col: usize) -> Option<i32> {
        let i = row * self.cols + col;
        match (self.plus[i].level, self.minus[i].level) {
            (Some(p), Some(n)) => Some(p as i32 - n as i32),
            _ => None,
        }
    }

    /// Weight matrix decoded from the stored conductances.
    pub fn decoded_weights(&self) -> &Array2<f64> {
        &self.decoded
    }

    fn write_with<F>(&mut self, shape: (usize, usize), spec: &LevelSpec, rng: &mut ChaCha8Rng, mut level_at: F) -> Result<WriteReport>
    where
        F: FnMut(usize, usize) -> i32,
    {
        if shape != (self.rows, self.cols) {
            return Err(Error::shape("crossbar write", (self.rows, self.cols), shape));
        }
        let max = spec.max_level();
        let mut report = WriteReport::default();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (tp, tm) = encode_level(level_at(r, c), max)?;
                let i = r * self.cols + c;
                let mut touched = false;
                for (cell, target) in [(&mut self.plus[i], tp), (&mut self.minus[i], tm)] {
                    if cell.level != Some(target) {
                        if cell.program(target, spec, rng)?.is_some() {
                            report.endurance_events += 1;
                        }
                        report.ops += 1;
                        touched = true;
                    }
                }
                if touched {
                    self.decoded[[r, c]] = self.gain * (self.plus[i].g - self.minus[i].g);
                }
            }
        }
        Ok(report)
    }

    /// Programs the tile towards a matrix of signed levels. Only cells whose
    /// target device level differs from the stored one are programmed.
    pub fn write_weights(&mut self, levels: ArrayView2<'_, i32>, spec: &LevelSpec, rng: &mut ChaCha8Rng) -> Result<WriteReport> {
        self.write_with(levels.dim(), spec, rng, |r, c| levels[[r, c]])
    }

    /// Same as [`CrossbarTile::write_weights`] with levels given as grid
    /// indices of a device grid.
    pub fn write_indices(&mut self, indices: &Array2<u16>, grid: &DeviceGrid, spec: &LevelSpec, rng: &mut ChaCha8Rng) -> Result<WriteReport> {
        self.write_with(indices.dim(), spec, rng, |r, c| grid.signed_level(indices[[r, c]] as usize))
    }

    /// Column currents for input voltages `x`:
    /// `y_j = gain * sum_i (g+_ij - g-_ij) * x_i`.
    pub fn mvm_forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape("mvm_forward input", self.rows, x.len()));
        }
        let mut y = Array1::zeros(self.cols);
        for (r, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let base = r * self.cols;
            for (c, yc) in y.iter_mut().enumerate() {
                *yc += (self.plus[base + c].g - self.minus[base + c].g) * xi;
            }
        }
        Ok(y * self.gain)
    }

    /// Row currents for errors applied to the columns:
    /// `z_i = gain * sum_j (g+_ij - g-_ij) * delta_j`.
    pub fn mvm_backward(&self, delta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if delta.len() != self.cols {
            return Err(Error::shape("mvm_backward input", self.cols, delta.len()));
        }
        let mut z = Array1::zeros(self.rows);
        for (r, zr) in z.iter_mut().enumerate() {
            let base = r * self.cols;
            let mut acc = 0.0;
            for (c, &d) in delta.iter().enumerate() {
                acc += (self.plus[base + c].g - self.minus[base + c].g) * d;
            }
            *zr = acc;
        }
        Ok(z * self.gain)
    }

    /// Decoded weights read through Gaussian read noise of `sigma` uS per cell.
    pub fn read_weights(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (i, w) in out.iter_mut().enumerate() {
            *w = self.gain * (self.plus[i].read(sigma, rng) - self.minus[i].read(sigma, rng));
        }
        out
    }

    pub fn total_ops(&self) -> u64 {
        self.plus.iter().chain(&self.minus).map(|c| c.ops as u64).sum()
    }

    pub fn cells(&self) -> impl Iterator<Item = &DeviceCell> {
        self.plus.iter().chain(self.minus.iter())
    }

    fn records(&self, tile: usize) -> impl Iterator<Item = DumpRecord> + '_ {
        (0..self.rows * self.cols).flat_map(move |i| {
            let (row, col) = (i / self.cols, i % self.cols);
            [(Side::Plus, &self.plus[i]), (Side::Minus, &self.minus[i])].map(|(side, c)| DumpRecord {
                tile,
                row,
                col,
                side,
                level: c.level,
                g: c.g,
                ops: c.ops,
            })
        })
    }
}

/// One tile per network layer plus the device model shared by all of them.
#[derive(Debug)]
pub struct CrossbarArray {
    pub tiles: Vec<CrossbarTile>,
    pub spec: LevelSpec,
    pub grid: DeviceGrid,
    read_noise: f64,
    noise_rng: Mutex<ChaCha8Rng>,
}

impl CrossbarArray {
    pub fn new(shapes: &[(usize, usize)], spec: LevelSpec, target_max: f64, endurance_budget: u32, read_noise: f64, seed: u64) -> Result<Self> {
        if !(read_noise.is_finite() && read_noise >= 0.0) {
            return Err(Error::config(format!("read noise must be non-negative, got {read_noise}")));
        }
        let grid = derive_grid(&spec, target_max)?;
        let tiles = shapes
            .iter()
            .map(|&(r, c)| CrossbarTile::new(r, c, grid.gain, endurance_budget))
            .collect();
        Ok(Self {
            tiles,
            spec,
            grid,
            read_noise,
            noise_rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    /// Tiles shaped like the layers of `net`.
    pub fn for_network(net: &Network, spec: LevelSpec, target_max: f64, endurance_budget: u32, read_noise: f64, seed: u64) -> Result<Self> {
        let shapes: Vec<_> = net.layers.iter().map(|l| l.w_quant.dim()).collect();
        Self::new(&shapes, spec, target_max, endurance_budget, read_noise, seed)
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tiles.iter().map(CrossbarTile::shape).collect()
    }

    fn tile(&self, l: usize) -> Result<&CrossbarTile> {
        self.tiles
            .get(l)
            .ok_or_else(|| Error::Usage(format!("no crossbar tile for layer {l}")))
    }

    fn weights_for_read(&self, tile: &CrossbarTile) -> Option<Array2<f64>> {
        (self.read_noise > 0.0).then(|| {
            let mut rng = self.noise_rng.lock().expect("noise rng poisoned");
            tile.read_weights(self.read_noise, &mut rng)
        })
    }

    /// Batched forward product `x * W` for layer `l`; each row of `x` is one
    /// input vector. Equivalent to calling `mvm_forward` per row.
    pub fn forward_batch(&self, l: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
        let tile = self.tile(l)?;
        if x.ncols() != tile.rows {
            return Err(Error::shape("crossbar forward", tile.rows, x.ncols()));
        }
        Ok(match self.weights_for_read(tile) {
            Some(w) => x.dot(&w),
            None => x.dot(&tile.decoded),
        })
    }

    /// Batched transpose product `delta * W^T` for layer `l`.
    pub fn backward_batch(&self, l: usize, delta: &Array2<f64>) -> Result<Array2<f64>> {
        let tile = self.tile(l)?;
        if delta.ncols() != tile.cols {
            return Err(Error::shape("crossbar backward", tile.cols, delta.ncols()));
        }
        Ok(match self.weights_for_read(tile) {
            Some(w) => delta.dot(&w.t()),
            None => delta.dot(&tile.decoded.t()),
        })
    }

    /// Brings every tile in line with the quantized levels of `net`.
    pub fn write_network(&mut self, net: &Network, rng: &mut ChaCha8Rng) -> Result<WriteReport> {
        if self.tiles.len() != net.layers.len() {
            return Err(Error::shape("crossbar layers", net.layers.len(), self.tiles.len()));
        }
        let mut report = WriteReport::default();
        for (tile, layer) in self.tiles.iter_mut().zip(&net.layers) {
            if layer.grid.len() != self.grid.grid.len() {
                return Err(Error::config(format!(
                    "layer grid has {} levels but the device grid has {}",
                    layer.grid.len(),
                    self.grid.grid.len()
                )));
            }
            report += tile.write_indices(&layer.level_index, &self.grid, &self.spec, rng)?;
        }
        Ok(report)
    }

    pub fn total_ops(&self) -> u64 {
        self.tiles.iter().map(CrossbarTile::total_ops).sum()
    }

    /// Programming-operation count of every cell.
    pub fn ops_counts(&self) -> Vec<u32> {
        self.tiles.iter().flat_map(|t| t.cells().map(|c| c.ops)).collect()
    }

    pub fn num_cells(&self) -> usize {
        self.tiles.iter().map(|t| 2 * t.rows * t.cols).sum()
    }

    pub fn physical_arrays(&self) -> usize {
        self.tiles.iter().map(|t| physical_array_count(t.rows, t.cols)).sum()
    }

    pub fn dump_records(&self) -> impl Iterator<Item = DumpRecord> + '_ {
        self.tiles.iter().enumerate().flat_map(|(i, t)| t.records(i))
    }

    pub fn write_dump<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_dump(out, self.dump_records())
    }

    /// Rebuilds tiles from dump rows. Every cell of every tile in `shapes`
    /// must appear exactly once.
    pub fn from_dump(records: &[DumpRecord], shapes: &[(usize, usize)], spec: LevelSpec, target_max: f64, endurance_budget: u32) -> Result<Self> {
        let mut xbar = Self::new(shapes, spec, target_max, endurance_budget, 0.0, 0)?;
        let mut seen: Vec<Vec<bool>> = xbar.tiles.iter().map(|t| vec![false; 2 * t.rows * t.cols]).collect();
        let max = xbar.spec.max_level();
        for r in records {
            let tile = xbar
                .tiles
                .get_mut(r.tile)
                .ok_or_else(|| Error::Usage(format!("dump references missing tile {}", r.tile)))?;
            if r.row >= tile.rows || r.col >= tile.cols {
                return Err(Error::Usage(format!(
                    "dump cell ({}, {}) outside tile {} of shape {:?}",
                    r.row, r.col, r.tile, (tile.rows, tile.cols)
                )));
            }
            if r.level.is_some_and(|l| l > max) {
                return Err(Error::Usage(format!("dump level {:?} exceeds device maximum {max}", r.level)));
            }
            let i = r.row * tile.cols + r.col;
            let slot = match r.side {
                Side::Plus => i,
                Side::Minus => tile.rows * tile.cols + i,
            };
            if std::mem::replace(&mut seen[r.tile][slot], true) {
                return Err(Error::Usage(format!("duplicate dump entry for tile {} cell ({}, {})", r.tile, r.row, r.col)));
            }
            let cell = match r.side {
                Side::Plus => &mut tile.plus[i],
                Side::Minus => &mut tile.minus[i],
            };
            cell.level = r.level;
            cell.g = r.g;
            cell.ops = r.ops;
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(Error::Usage("dump does not cover every cell".into()));
        }
        for tile in &mut xbar.tiles {
            let gain = tile.gain;
            let (plus, minus) = (&tile.plus, &tile.minus);
            // decoded is row-major, same order as the cell vectors
            for (i, w) in tile.decoded.iter_mut().enumerate() {
                *w = gain * (plus[i].g - minus[i].g);
            }
        }
        Ok(xbar)
    }
}

/// Hardware initialization: each hidden weight is drawn from a Gaussian
/// centred on the midpoint of a randomly chosen interval next to zero, with a
/// standard deviation of a quarter of that interval. Layers with a fan-in of
/// at least 512 use the two intervals adjacent to zero, narrower layers the
/// four central ones. The projected levels are then programmed into `xbar`.
pub fn init_hardware_weights(net: &mut Network, xbar: &mut CrossbarArray, rng: &mut ChaCha8Rng) -> Result<WriteReport> {
    for layer in &mut net.layers {
        let intervals = central_intervals(&layer.grid, layer.fan_in());
        let (lo, hi) = layer.grid.clip_bounds();
        let dists: Vec<(Normal<f64>, f64, f64)> = intervals
            .iter()
            .map(|&i| {
                let (a, b) = (layer.grid.level(i), layer.grid.level(i + 1));
                (Normal::new(0.5 * (a + b), 0.25 * (b - a)).expect("positive width"), a, b)
            })
            .collect();
        for w in layer.w_hidden.iter_mut() {
            let (d, _, _) = &dists[rng.gen_range(0..dists.len())];
            *w = d.sample(rng).clamp(lo, hi);
        }
        layer.requantize();
    }
    xbar.write_network(net, rng)
}

/// Interval indices used by [`init_hardware_weights`] for a layer.
pub fn central_intervals(grid: &QuantGrid, fan_in: usize) -> Vec<usize> {
    let z = grid.zero_index();
    let n_int = grid.len() - 1;
    let half = if fan_in >= 512 { 1 } else { 2 };
    let start = z.saturating_sub(half);
    let end = (z + half).min(n_int);
    (start..end).collect()
}

/// Applies `f` to `(decoded, nominal)` pairs of every synapse; used to compare
/// stored conductances against the software quantized weights.
pub fn zip_decoded(xbar: &CrossbarArray, net: &Network, mut f: impl FnMut(f64, f64)) {
    for (tile, layer) in xbar.tiles.iter().zip(&net.layers) {
        Zip::from(&tile.decoded).and(&layer.w_quant).for_each(|&d, &q| f(d, q));
    }
}
