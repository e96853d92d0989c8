//! Model input encoding: frames become 10-byte vectors, windows of `n`
//! consecutive vectors become labelled blocks.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::can::{CanFrame, Label};

/// Messages per block.
pub const WINDOW: usize = 4;
/// Bytes per encoded message: 2 id bytes plus 8 payload bytes.
pub const MESSAGE_BYTES: usize = 10;
/// Bytes per block at the default window.
pub const BLOCK_BYTES: usize = WINDOW * MESSAGE_BYTES;

/// `[id_hi, id_lo, payload[0..8]]`, id big-endian.
pub type EncodedMessage = [u8; MESSAGE_BYTES];

pub fn encode_frame(frame: &CanFrame) -> EncodedMessage {
    let mut out = [0u8; MESSAGE_BYTES];
    out[0] = (frame.can_id >> 8) as u8;
    out[1] = (frame.can_id & 0xff) as u8;
    out[2..].copy_from_slice(&frame.payload);
    out
}

/// A window of encoded messages with its label. `data` holds the raw bytes
/// reinterpreted as two's-complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBlock {
    pub data: Vec<i8>,
    pub label: Label,
    /// Index of the first frame of the window in the source stream.
    pub window_start: u64,
}

impl FeatureBlock {
    pub fn from_frames(frames: &[CanFrame], window_start: u64) -> Self {
        let mut data = Vec::with_capacity(frames.len() * MESSAGE_BYTES);
        for f in frames {
            data.extend(encode_frame(f).iter().map(|&b| b as i8));
        }
        let labels: Vec<Label> = frames.iter().map(|f| f.label).collect();
        FeatureBlock {
            data,
            label: label_block(&labels),
            window_start,
        }
    }

    /// Real-valued model input: byte / 128.
    pub fn to_real(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|&b| b as f64 / 128.0)
    }
}

/// Benign iff every frame is benign, otherwise the class of the earliest
/// attack frame.
pub fn label_block(labels: &[Label]) -> Label {
    labels
        .iter()
        .copied()
        .find(|l| l.is_attack())
        .unwrap_or(Label::Benign)
}

/// Slides a window of `n` frames over the stream with the given stride.
/// `stride == n` gives the non-overlapping dataset layout; `stride == 1`
/// gives one block per arriving frame.
pub fn build_blocks(frames: &[CanFrame], n: usize, stride: usize) -> Vec<FeatureBlock> {
    assert!(n > 0 && stride > 0, "window and stride must be positive");
    if frames.len() < n {
        log::warn!("{} frames is fewer than the window of {}; no blocks", frames.len(), n);
        return Vec::new();
    }
    (0..=frames.len() - n)
        .step_by(stride)
        .map(|start| FeatureBlock::from_frames(&frames[start..start + n], start as u64))
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("split ratios {0:?} must sum to 100")]
    Ratios([u32; 3]),
    #[error("cannot split an empty block set")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<FeatureBlock>,
    pub validation: Vec<FeatureBlock>,
    pub test: Vec<FeatureBlock>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

pub const DEFAULT_RATIOS: [u32; 3] = [85, 10, 5];

/// Seeded shuffle followed by a contiguous cut. Validation and test sizes
/// are floored; the remainder goes to training.
pub fn split_dataset(
    blocks: Vec<FeatureBlock>,
    ratios: [u32; 3],
    seed: u64,
) -> Result<DatasetSplit, SplitError> {
    if ratios.iter().sum::<u32>() != 100 {
        return Err(SplitError::Ratios(ratios));
    }
    if blocks.is_empty() {
        return Err(SplitError::Empty);
    }
    let mut blocks = blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blocks.shuffle(&mut rng);

    let total = blocks.len();
    let n_val = total * ratios[1] as usize / 100;
    let n_test = total * ratios[2] as usize / 100;
    let n_train = total - n_val - n_test;

    let test = blocks.split_off(n_train + n_val);
    let validation = blocks.split_off(n_train);
    Ok(DatasetSplit {
        train: blocks,
        validation,
        test,
        seed,
    })
}

/// Per-class block counts.
pub fn class_balance(blocks: &[FeatureBlock]) -> [usize; Label::COUNT] {
    let mut counts = [0; Label::COUNT];
    for b in blocks {
        counts[b.label.index()] += 1;
    }
    counts
}

const BLOCK_MAGIC: &[u8; 6] = b"CANBLK";
const BLOCK_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum BlockFileError {
    #[error("not a block file (bad magic)")]
    Magic,
    #[error("unsupported block file version {0}")]
    Version(u8),
    #[error("block {index} has {found} bytes, window expects {expected}")]
    Width { index: usize, found: usize, expected: usize },
    #[error("bad label byte {0}")]
    Label(u8),
    #[error("truncated block file")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes blocks as a binary file: an 8-byte header (`CANBLK`, version,
/// window size) followed by fixed records of data bytes, a label byte and
/// a little-endian u64 window index.
pub fn write_blocks<W: Write>(mut out: W, window: usize, blocks: &[FeatureBlock]) -> Result<(), BlockFileError> {
    out.write_all(BLOCK_MAGIC)?;
    out.write_all(&[BLOCK_VERSION, window as u8])?;
    let width = window * MESSAGE_BYTES;
    for (index, b) in blocks.iter().enumerate() {
        if b.data.len() != width {
            return Err(BlockFileError::Width {
                index,
                found: b.data.len(),
                expected: width,
            });
        }
        let bytes: Vec<u8> = b.data.iter().map(|&v| v as u8).collect();
        out.write_all(&bytes)?;
        out.write_all(&[b.label.index() as u8])?;
        out.write_all(&b.window_start.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_blocks<R: Read>(mut input: R) -> Result<(usize, Vec<FeatureBlock>), BlockFileError> {
    let mut header = [0u8; 8];
    input.read_exact(&mut header).map_err(|_| BlockFileError::Truncated)?;
    if &header[..6] != BLOCK_MAGIC {
        return Err(BlockFileError::Magic);
    }
    if header[6] != BLOCK_VERSION {
        return Err(BlockFileError::Version(header[6]));
    }
    let window = header[7] as usize;
    let width = window * MESSAGE_BYTES;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let record = width + 1 + 8;
    if body.len() % record != 0 {
        return Err(BlockFileError::Truncated);
    }
    let blocks = body
        .chunks_exact(record)
        .map(|r| {
            let label = Label::from_index(r[width] as usize).ok_or(BlockFileError::Label(r[width]))?;
            let mut idx = [0u8; 8];
            idx.copy_from_slice(&r[width + 1..]);
            Ok(FeatureBlock {
                data: r[..width].iter().map(|&b| b as i8).collect(),
                label,
                window_start: u64::from_le_bytes(idx),
            })
        })
        .collect::<Result<Vec<_>, BlockFileError>>()?;
    Ok((window, blocks))
}
