//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "MPLASTCK"
//! version   u32      currently 1
//! epoch     u64
//! layers    u32
//! per layer:
//!   rows u32, cols u32
//!   grid_len u32, grid levels f64 x grid_len
//!   hidden weights f64 x rows*cols (row-major)
//!   level indices u16 x rows*cols
//!   has_bn u8; if 1: gamma, beta, running_mean, running_var (f64 x cols each)
//! adam: t u64, beta1 f64, beta2 f64, eps f64
//!   per layer: m f64 x rows*cols, v f64 x rows*cols
//!   per layer with bn: m_gamma, v_gamma, m_beta, v_beta (f64 x cols each)
//! rng: seed 32 bytes, stream u64, word_pos u128
//! task_bn: count u32; per task: present u8; if 1, for every layer with bn:
//!   gamma, beta, running_mean, running_var (f64 x cols each)
//! crc32     u32      over every preceding byte
//! ```
//!
//! Quantized weights are not stored; they are rebuilt from the level indices
//! and checked against the projection of the hidden weights on load.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::net::{BatchNorm, BnState, DenseLayer, Network};
use crate::optim::AdamState;
use crate::quantgrid::QuantGrid;

pub const MAGIC: &[u8; 8] = b"MPLASTCK";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub network: Network,
    pub adam: AdamState,
    pub rng: RngState,
    /// Batch-norm state kept per task, empty when tasks share one.
    pub task_bn: Vec<Option<BnState>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: "checkpoint",
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Checks that `count` items of `width` bytes are still available before
    /// anything is allocated for them.
    fn reserve(&self, count: usize, width: usize) -> Result<()> {
        match count.checked_mul(width) {
            Some(n) if n <= self.bytes.len() - self.pos => Ok(()),
            _ => Err(self.err(format!("declared {count} items exceed remaining data"))),
        }
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.reserve(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows.checked_mul(cols).ok_or_else(|| self.err("matrix size overflow"))?;
        Ok(Array2::from_shape_vec((rows, cols), self.f64_vec(n)?).expect("sized"))
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f64_vec(n)?))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.epoch);
        w.u32(self.network.layers.len() as u32);
        for layer in &self.network.layers {
            w.u32(layer.fan_in() as u32);
            w.u32(layer.fan_out() as u32);
            w.u32(layer.grid.len() as u32);
            w.f64s(layer.grid.levels());
            w.f64s(layer.w_hidden.iter());
            for &i in &layer.level_index {
                w.u16(i);
            }
            match &layer.bn {
                Some(bn) => {
                    w.u8(1);
                    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                        w.f64s(v.iter());
                    }
                }
                None => w.u8(0),
            }
        }
        let a = &self.adam;
        w.u64(a.t);
        w.f64(a.beta1);
        w.f64(a.beta2);
        w.f64(a.eps);
        for (m, v) in a.m_w.iter().zip(&a.v_w) {
            w.f64s(m.iter());
            w.f64s(v.iter());
        }
        for l in 0..a.m_gamma.len() {
            if let (Some(mg), Some(vg), Some(mb), Some(vb)) = (&a.m_gamma[l], &a.v_gamma[l], &a.m_beta[l], &a.v_beta[l]) {
                for v in [mg, vg, mb, vb] {
                    w.f64s(v.iter());
                }
            }
        }
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u128(self.rng.word_pos);
        w.u32(self.task_bn.len() as u32);
        for state in &self.task_bn {
            match state {
                Some(layers) => {
                    w.u8(1);
                    for bn in layers.iter().flatten() {
                        for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                            w.f64s(v.iter());
                        }
                    }
                }
                None => w.u8(0),
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse { what: "checkpoint", offset: 0, msg: "bad magic".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: 8,
                msg: format!("unsupported version {version}"),
            });
        }
        if bytes.len() < 4 + r.pos {
            return Err(r.err("truncated"));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: body_len,
                msg: "checksum mismatch".into(),
            });
        }
        let mut r = Reader { bytes: &bytes[..body_len], pos: r.pos };

        let epoch = r.u64()?;
        let n_layers = r.u32()? as usize;
        r.reserve(n_layers, 12)?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let grid_len = r.u32()? as usize;
            let grid = QuantGrid::new(r.f64_vec(grid_len)?).map_err(|e| r.err(format!("layer {l} grid: {e}")))?;
            if grid.len() > u16::MAX as usize {
                return Err(r.err(format!("layer {l}: grid too large")));
            }
            let w_hidden = r.matrix(rows, cols)?;
            r.reserve(rows * cols, 2)?;
            let mut level_index = Array2::<u16>::zeros((rows, cols));
            for v in level_index.iter_mut() {
                *v = r.u16()?;
            }
            let bn = match r.u8()? {
                0 => None,
                1 => Some(BatchNorm {
                    gamma: r.vector(cols)?,
                    beta: r.vector(cols)?,
                    running_mean: r.vector(cols)?,
                    running_var: r.vector(cols)?,
                }),
                other => return Err(r.err(format!("bad batch-norm flag {other}"))),
            };
            let mut w_quant = Array2::zeros((rows, cols));
            for ((q, &i), &h) in w_quant.iter_mut().zip(&level_index).zip(&w_hidden) {
                if !h.is_finite() || grid.nearest_index(h) != i as usize {
                    return Err(r.err(format!("layer {l}: level index {i} is not the projection of hidden weight {h}")));
                }
                *q = grid.level(i as usize);
            }
            layers.push(DenseLayer { w_hidden, w_quant, level_index, bn, grid });
        }
        if let Some(w) = layers.windows(2).find(|w| w[0].fan_out() != w[1].fan_in()) {
            return Err(r.err(format!("layer chaining mismatch {} -> {}", w[0].fan_out(), w[1].fan_in())));
        }
        if layers.is_empty() {
            return Err(r.err("checkpoint has no layers"));
        }
        let network = Network { layers };

        let mut adam = AdamState::for_network(&network);
        adam.t = r.u64()?;
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.eps = r.f64()?;
        for (l, layer) in network.layers.iter().enumerate() {
            let (rows, cols) = layer.w_hidden.dim();
            adam.m_w[l] = r.matrix(rows, cols)?;
            adam.v_w[l] = r.matrix(rows, cols)?;
        }
        for (l, layer) in network.layers.iter().enumerate() {
            if layer.bn.is_some() {
                let cols = layer.fan_out();
                adam.m_gamma[l] = Some(r.vector(cols)?);
                adam.v_gamma[l] = Some(r.vector(cols)?);
                adam.m_beta[l] = Some(r.vector(cols)?);
                adam.v_beta[l] = Some(r.vector(cols)?);
            }
        }
        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let n_tasks = r.u32()? as usize;
        r.reserve(n_tasks, 1)?;
        let mut task_bn = Vec::with_capacity(n_tasks);
        for t in 0..n_tasks {
            task_bn.push(match r.u8()? {
                0 => None,
                1 => Some(
                    network
                        .layers
                        .iter()
                        .map(|layer| {
                            layer
                                .bn
                                .as_ref()
                                .map(|_| {
                                    let cols = layer.fan_out();
                                    Ok(BatchNorm {
                                        gamma: r.vector(cols)?,
                                        beta: r.vector(cols)?,
                                        running_mean: r.vector(cols)?,
                                        running_var: r.vector(cols)?,
                                    })
                                })
                                .transpose()
                        })
                        .collect::<Result<BnState>>()?,
                ),
                other => return Err(r.err(format!("task {t}: bad batch-norm flag {other}"))),
            });
        }
        if r.pos != body_len {
            return Err(r.err(format!("{} trailing bytes", body_len - r.pos)));
        }
        Ok(Self {
            epoch,
            network,
            adam,
            rng: RngState { seed, stream, word_pos },
            task_bn,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let grid = QuantGrid::uniform(17, -1.5, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = Network::new(&[6, 5, 3], &grid, false).unwrap();
        net.init_software(&mut rng);
        let mut adam = AdamState::for_network(&net);
        adam.t = 17;
        adam.m_w[0][[1, 2]] = 0.25;
        adam.v_gamma[0].as_mut().unwrap()[3] = 1e-7;
        rng.next_u64();
        let mut other = net.bn_state();
        other[0].as_mut().unwrap().beta[1] = -0.5;
        Checkpoint {
            epoch: 3,
            network: net,
            adam,
            rng: RngState::capture(&rng),
            task_bn: vec![Some(other), None],
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let expected: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        let mut resumed = state.restore();
        let got: Vec<u64> = (0..4).map(|_| resumed.next_u64()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode();
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        assert!(matches!(Checkpoint::decode(&flipped), Err(Error::Parse { .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(&bytes[..5]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad_magic), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn inconsistent_level_index_rejected() {
        let mut ck = sample();
        let idx = ck.network.layers[0].level_index[[0, 0]];
        ck.network.layers[0].level_index[[0, 0]] = if idx == 0 { 1 } else { idx - 1 };
        assert!(Checkpoint::decode(&ck.encode()).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
