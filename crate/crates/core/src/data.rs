//! IDX dataset ingestion (MNIST, Fashion-MNIST), shuffled minibatches and
//! sequential task schedules.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Images stored as raw bytes; [`DatasetSplit::batch`] scales them to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

/// Decoded IDX image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            what,
            offset,
            msg: format!("truncated header (file is {} bytes)", bytes.len()),
        })
}

/// Parses an IDX3 (`0x00000803`) unsigned-byte image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    const WHAT: &str = "IDX image file";
    let magic = read_be_u32(bytes, 0, WHAT)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            what: WHAT,
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4, WHAT)? as usize;
    let rows = read_be_u32(bytes, 8, WHAT)? as usize;
    let cols = read_be_u32(bytes, 12, WHAT)? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Parse {
            what: WHAT,
            offset: 4,
            msg: format!("dimensions {count}x{rows}x{cols} overflow"),
        })?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Parse {
            what: WHAT,
            offset: 16 + body.len().min(need),
            msg: format!("payload has {} bytes, header declares {need}", body.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

/// Parses an IDX1 (`0x00000801`) label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const WHAT: &str = "IDX label file";
    let magic = read_be_u32(bytes, 0, WHAT)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            what: WHAT,
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Parse {
            what: WHAT,
            offset: 8 + body.len().min(count),
            msg: format!("payload has {} bytes, header declares {count}", body.len()),
        });
    }
    if let Some(pos) = body.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Parse {
            what: WHAT,
            offset: 8 + pos,
            msg: format!("label {} out of range 0..{NUM_CLASSES}", body[pos]),
        });
    }
    Ok(body.to_vec())
}

/// Encodes an IDX3 image file. `pixels` holds `count * rows * cols` bytes.
pub fn encode_idx_images(rows: u32, cols: u32, pixels: &[u8]) -> Result<Vec<u8>> {
    let per = rows as usize * cols as usize;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::shape("IDX image payload", format!("multiple of {per}"), pixels.len()));
    }
    let count = u32::try_from(pixels.len() / per).map_err(|_| Error::config("too many images for IDX"))?;
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Encodes an IDX1 label file.
pub fn encode_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let count = u32::try_from(labels.len()).map_err(|_| Error::config("too many labels for IDX"))?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&count.to_be_bytes());
    out.extend_from_slice(labels);
    Ok(out)
}

/// Writes a split as uncompressed `{train,t10k}-{images,labels}` files into
/// `dir`, the layout [`load_split`] reads.
pub fn write_split(dir: &Path, split: Split, data: &DatasetSplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = split.prefix();
    std::fs::write(
        dir.join(format!("{p}-images-idx3-ubyte")),
        encode_idx_images(data.rows as u32, data.cols as u32, &data.pixels)?,
    )?;
    std::fs::write(dir.join(format!("{p}-labels-idx1-ubyte")), encode_idx_labels(&data.labels)?)?;
    Ok(())
}

/// Reads a file fully, inflating it when it carries a gzip header.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?)
    .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

impl DatasetSplit {
    pub fn from_parts(name: impl Into<String>, images: IdxImages, labels: Vec<u8>) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::shape(
                "image/label counts",
                images.count,
                labels.len(),
            ));
        }
        Ok(Self {
            name: name.into(),
            rows: images.rows,
            cols: images.cols,
            pixels: images.pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let d = self.input_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Gathers the given sample indices into a `batch x input_dim` matrix of
    /// pixels scaled by 1/255, plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let d = self.input_dim();
        let mut x = Array2::<f64>::zeros((indices.len(), d));
        for (mut row, &i) in x.rows_mut().into_iter().zip(indices) {
            for (dst, &p) in row.iter_mut().zip(self.raw_image(i)) {
                *dst = p as f64 / 255.0;
            }
        }
        let y = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (x, y)
    }

    /// One epoch of shuffled minibatches. Every index appears exactly once;
    /// the final short batch is kept.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        Ok(Batches {
            split: self,
            order,
            batch_size,
            pos: 0,
        })
    }
}

pub struct Batches<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Array2<f64>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.split.batch(idx))
    }
}

/// Loads an image/label IDX pair. Either file may be gzip-compressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetSplit::from_parts(name, images, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn locate(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}

/// Loads `train-*` or `t10k-*` files from a directory using the standard
/// MNIST file names, with or without a `.gz` suffix.
pub fn load_split(dir: &Path, split: Split, name: &str) -> Result<DatasetSplit> {
    let p = split.prefix();
    let images = locate(dir, &format!("{p}-images-idx3-ubyte"));
    let labels = locate(dir, &format!("{p}-labels-idx1-ubyte"));
    let mut s = load_idx(&images, &labels)?;
    s.name = name.to_string();
    Ok(s)
}

/// One task of a sequential schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub dir: PathBuf,
    pub epochs: usize,
    /// Overrides the run-wide `m*` for this task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_star: Option<f64>,
}

/// Ordered tasks plus a number of leading epochs trained with `m* = 0`.
/// A task with zero epochs is evaluated but never trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSchedule {
    pub tasks: Vec<TaskSpec>,
    pub pretrain_epochs: usize,
}

/// One scheduled epoch (1-based global numbering).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub task: usize,
    pub m_star: f64,
}

impl TaskSchedule {
    pub fn validate(&self) -> Result<()> {
        for t in &self.tasks {
            if t.name.is_empty() {
                return Err(Error::config("task names must not be empty"));
            }
            if let Some(m) = t.m_star {
                if !m.is_finite() || m < 0.0 {
                    return Err(Error::config(format!("task {:?}: invalid m* {m}", t.name)));
                }
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.tasks.iter().map(|t| t.epochs).sum()
    }

    /// Expands the schedule into per-epoch plans.
    pub fn plan(&self, default_m_star: f64) -> Vec<EpochPlan> {
        let mut out = Vec::with_capacity(self.total_epochs());
        let mut epoch = 0;
        for (task, spec) in self.tasks.iter().enumerate() {
            let m = spec.m_star.unwrap_or(default_m_star);
            for _ in 0..spec.epochs {
                epoch += 1;
                let m_star = if epoch <= self.pretrain_epochs { 0.0 } else { m };
                out.push(EpochPlan { epoch, task, m_star });
            }
        }
        out
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::idx_pair;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn two_image_fixture() -> (Vec<u8>, Vec<u8>) {
        let a: Vec<u8> = (0..6).map(|i| i * 40).collect();
        let b: Vec<u8> = vec![255, 0, 128, 1, 2, 3];
        idx_pair(2, 3, &[a, b], &[7, 2])
    }

    #[test]
    fn fixture_pixels_recovered_exactly() {
        let (img, lab) = two_image_fixture();
        let images = parse_idx_images(&img).unwrap();
        assert_eq!((images.count, images.rows, images.cols), (2, 2, 3));
        let split = DatasetSplit::from_parts("fixture", images, parse_idx_labels(&lab).unwrap()).unwrap();
        let (x, y) = split.batch(&[1, 0]);
        assert_eq!(y, vec![2, 7]);
        assert_eq!(x[[0, 0]], 1.0);
        assert_eq!(x[[0, 2]], 128.0 / 255.0);
        assert_eq!(x[[1, 5]], 200.0 / 255.0);
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encoders_match_fixture_bytes() {
        let (img, lab) = two_image_fixture();
        let images = parse_idx_images(&img).unwrap();
        assert_eq!(encode_idx_images(2, 3, &images.pixels).unwrap(), img);
        assert_eq!(encode_idx_labels(&[7, 2]).unwrap(), lab);
        assert!(encode_idx_images(2, 3, &[0; 7]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let split = DatasetSplit::from_parts("f", images, vec![7, 2]).unwrap();
        write_split(dir.path(), Split::Test, &split).unwrap();
        let back = load_split(dir.path(), Split::Test, "f").unwrap();
        assert_eq!(back.labels(), split.labels());
        assert_eq!(back.raw_image(1), split.raw_image(1));
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let (mut img, mut lab) = two_image_fixture();
        img[3] = 0x01;
        match parse_idx_images(&img) {
            Err(Error::Parse { offset: 0, msg, .. }) => assert!(msg.contains("magic")),
            other => panic!("unexpected {other:?}"),
        }
        lab[3] = 0x03;
        assert!(matches!(parse_idx_labels(&lab), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncated_files_rejected() {
        let (img, lab) = two_image_fixture();
        assert!(parse_idx_images(&img[..10]).is_err());
        assert!(parse_idx_images(&img[..img.len() - 1]).is_err());
        assert!(parse_idx_labels(&lab[..lab.len() - 1]).is_err());
        assert!(parse_idx_labels(&[]).is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let (_, lab) = idx_pair(1, 1, &[vec![0]], &[10]);
        assert!(matches!(parse_idx_labels(&lab), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let (img, _) = two_image_fixture();
        let (_, lab) = idx_pair(2, 3, &[], &[1, 2, 3]);
        let images = parse_idx_images(&img).unwrap();
        let labels = parse_idx_labels(&lab).unwrap();
        assert!(matches!(
            DatasetSplit::from_parts("x", images, labels),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn load_plain_and_gzip_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = two_image_fixture();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), &img).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&lab).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();
        let split = load_split(dir.path(), Split::Test, "fixture").unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.labels(), &[7, 2]);
        assert_eq!(split.name, "fixture");
        assert!(load_split(dir.path(), Split::Train, "missing").is_err());
    }

    fn split_of(n: usize) -> DatasetSplit {
        let images: Vec<Vec<u8>> = (0..n).map(|i| vec![i as u8]).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (img, lab) = idx_pair(1, 1, &images, &labels);
        DatasetSplit::from_parts("s", parse_idx_images(&img).unwrap(), parse_idx_labels(&lab).unwrap()).unwrap()
    }

    #[test]
    fn batches_cover_every_index_once() {
        let split = split_of(23);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [0; 23];
        let mut sizes = Vec::new();
        for (x, _) in split.batches(5, &mut rng).unwrap() {
            sizes.push(x.nrows());
            for v in x.iter() {
                seen[(v * 255.0).round() as usize] += 1;
            }
        }
        assert_eq!(sizes, vec![5, 5, 5, 5, 3]);
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let split = split_of(50);
        let a = split.batches(7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().order().to_vec();
        let b = split.batches(7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().order().to_vec();
        let c = split.batches(7, &mut ChaCha8Rng::seed_from_u64(10)).unwrap().order().to_vec();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_batch_and_zero_batch() {
        let split = split_of(12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(split.batches(12, &mut rng).unwrap().count(), 1);
        assert!(split.batches(0, &mut rng).is_err());
    }

    #[test]
    fn schedule_plan_applies_pretraining() {
        let sched = TaskSchedule {
            tasks: vec![
                TaskSpec { name: "a".into(), dir: "a".into(), epochs: 3, m_star: None },
                TaskSpec { name: "b".into(), dir: "b".into(), epochs: 2, m_star: Some(1.0) },
            ],
            pretrain_epochs: 2,
        };
        sched.validate().unwrap();
        let plan = sched.plan(3.0);
        let ms: Vec<f64> = plan.iter().map(|p| p.m_star).collect();
        assert_eq!(ms, vec![0.0, 0.0, 3.0, 1.0, 1.0]);
        assert_eq!(plan.iter().map(|p| p.task).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1]);
        assert_eq!(plan.last().unwrap().epoch, 5);

        let idle = TaskSchedule {
            tasks: vec![TaskSpec { name: "z".into(), dir: "z".into(), epochs: 0, m_star: None }],
            pretrain_epochs: 0,
        };
        idle.validate().unwrap();
        assert!(idle.plan(3.0).is_empty());

        let bad = TaskSchedule {
            tasks: vec![TaskSpec { name: "z".into(), dir: "z".into(), epochs: 1, m_star: Some(-1.0) }],
            pretrain_epochs: 0,
        };
        assert!(bad.validate().is_err());
    }
}
