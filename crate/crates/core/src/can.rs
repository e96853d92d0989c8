//! CAN frame representation and Car-Hacking capture ingestion.
//!
//! A capture is UTF-8 text with one record per line:
//!
//! ```text
//! timestamp,ID_hex,DLC,D0,...,D{DLC-1},flag
//! 1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R
//! ```
//!
//! The trailing flag only says whether a frame was injected (`T`) or not
//! (`R`). Which attack an injected frame belongs to is a property of the
//! whole file, so the caller supplies it.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// Largest standard (11-bit) identifier plus one.
pub const MAX_STD_ID: u16 = 0x800;

/// Ground-truth class of a frame, block or prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    DoS,
    Fuzzing,
    SpoofRpm,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Benign, Label::DoS, Label::Fuzzing, Label::SpoofRpm];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::DoS => 1,
            Label::Fuzzing => 2,
            Label::SpoofRpm => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn is_attack(self) -> bool {
        self != Label::Benign
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "Benign",
            Label::DoS => "DoS",
            Label::Fuzzing => "Fuzzing",
            Label::SpoofRpm => "SpoofRPM",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown class `{0}` (expected benign, dos, fuzzing or spoof)")]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "benign" | "normal" => Ok(Label::Benign),
            "dos" => Ok(Label::DoS),
            "fuzzing" | "fuzzy" | "fuzz" => Ok(Label::Fuzzing),
            "spoof" | "spoofrpm" | "rpm" | "spoof_rpm" | "spoof-rpm" => Ok(Label::SpoofRpm),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

/// One timestamped standard CAN frame with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanFrame {
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub can_id: u16,
    pub dlc: u8,
    /// Always 8 bytes; bytes at `dlc..` are zero.
    pub payload: [u8; 8],
    pub label: Label,
}

impl CanFrame {
    /// Builds a frame, zeroing payload bytes past `dlc`.
    pub fn new(
        timestamp: f64,
        can_id: u16,
        dlc: u8,
        payload: [u8; 8],
        label: Label,
    ) -> Result<Self, FrameError> {
        if can_id >= MAX_STD_ID {
            return Err(FrameError::IdOutOfRange(can_id as u32));
        }
        if dlc > 8 {
            return Err(FrameError::DlcOutOfRange(dlc as usize));
        }
        let mut payload = payload;
        payload[dlc as usize..].fill(0);
        Ok(CanFrame {
            timestamp,
            can_id,
            dlc,
            payload,
            label,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.payload[..self.dlc as usize]
    }

    /// Formats the frame as a capture record. Timestamps are written with
    /// microsecond resolution, matching the dataset.
    pub fn to_record(&self) -> String {
        let mut s = format!("{:.6},{:04x},{}", self.timestamp, self.can_id, self.dlc);
        for b in self.data() {
            s.push_str(&format!(",{:02x}", b));
        }
        s.push_str(if self.label.is_attack() { ",T" } else { ",R" });
        s
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("CAN id 0x{0:x} is not a standard 11-bit identifier")]
    IdOutOfRange(u32),
    #[error("DLC {0} exceeds 8")]
    DlcOutOfRange(usize),
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("too few fields ({0})")]
    TooShort(usize),
    #[error("bad timestamp `{0}`")]
    Timestamp(String),
    #[error("bad hex {what} `{text}`")]
    Hex { what: &'static str, text: String },
    #[error("bad DLC `{0}`")]
    Dlc(String),
    #[error("bad flag `{0}` (expected R or T)")]
    Flag(String),
}

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: FrameError,
    },
    #[error("{path}: line {line}: {source}")]
    File {
        path: PathBuf,
        line: usize,
        #[source]
        source: FrameError,
    },
    #[error("{path}: line {line}: timestamp {ts} goes backwards")]
    NonMonotonic { path: PathBuf, line: usize, ts: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_hex_byte(text: &str) -> Result<u8, FrameError> {
    if text.is_empty() || text.len() > 2 {
        return Err(FrameError::Hex {
            what: "byte",
            text: text.to_string(),
        });
    }
    u8::from_str_radix(text, 16).map_err(|_| FrameError::Hex {
        what: "byte",
        text: text.to_string(),
    })
}

/// Parses a single record, without line context.
pub fn parse_record(line: &str, attack_class: Label) -> Result<CanFrame, FrameError> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() < 4 {
        return Err(FrameError::TooShort(fields.len()));
    }
    let timestamp: f64 = fields[0]
        .parse()
        .ok()
        .filter(|t: &f64| t.is_finite())
        .ok_or_else(|| FrameError::Timestamp(fields[0].to_string()))?;

    let id_text = fields[1];
    if id_text.is_empty() || id_text.len() > 4 {
        return Err(FrameError::Hex {
            what: "id",
            text: id_text.to_string(),
        });
    }
    let can_id = u32::from_str_radix(id_text, 16).map_err(|_| FrameError::Hex {
        what: "id",
        text: id_text.to_string(),
    })?;
    if can_id >= MAX_STD_ID as u32 {
        return Err(FrameError::IdOutOfRange(can_id));
    }

    let dlc: usize = fields[2]
        .parse()
        .map_err(|_| FrameError::Dlc(fields[2].to_string()))?;
    if dlc > 8 {
        return Err(FrameError::DlcOutOfRange(dlc));
    }
    let expected = 4 + dlc;
    if fields.len() != expected {
        return Err(FrameError::FieldCount {
            expected,
            found: fields.len(),
        });
    }

    let mut payload = [0u8; 8];
    for (slot, text) in payload.iter_mut().zip(&fields[3..3 + dlc]) {
        *slot = parse_hex_byte(text)?;
    }

    let label = match fields[3 + dlc] {
        "R" | "r" => Label::Benign,
        "T" | "t" => attack_class,
        other => return Err(FrameError::Flag(other.to_string())),
    };

    CanFrame::new(timestamp, can_id as u16, dlc as u8, payload, label)
}

/// Parses one capture line; errors carry the 1-based line number.
pub fn parse_capture_line(
    line: &str,
    line_no: usize,
    attack_class: Label,
) -> Result<CanFrame, CaptureError> {
    parse_record(line, attack_class).map_err(|source| CaptureError::Parse {
        line: line_no,
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Skip malformed lines and count them.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptureStats {
    pub total: usize,
    pub per_label: [usize; Label::COUNT],
    pub duration: f64,
    pub frame_rate: f64,
    pub skipped_lines: usize,
}

impl CaptureStats {
    pub fn from_frames(frames: &[CanFrame]) -> Self {
        let mut per_label = [0usize; Label::COUNT];
        for f in frames {
            per_label[f.label.index()] += 1;
        }
        let duration = match (frames.first(), frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        };
        let frame_rate = if duration > 0.0 {
            frames.len() as f64 / duration
        } else {
            0.0
        };
        CaptureStats {
            total: frames.len(),
            per_label,
            duration,
            frame_rate,
            skipped_lines: 0,
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.per_label[label.index()]
    }
}

impl fmt::Display for CaptureStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} frames over {:.3} s ({:.1} fps)", self.total, self.duration, self.frame_rate)?;
        for l in Label::ALL {
            write!(f, ", {}={}", l, self.count(l))?;
        }
        if self.skipped_lines > 0 {
            write!(f, ", skipped={}", self.skipped_lines)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Capture {
    pub frames: Vec<CanFrame>,
    pub stats: CaptureStats,
}

/// Parses a whole capture from a reader. Blank lines are ignored.
pub fn read_capture_from<R: BufRead>(
    reader: R,
    source: &Path,
    attack_class: Label,
    mode: ParseMode,
) -> Result<Capture, CaptureError> {
    let mut frames: Vec<CanFrame> = Vec::new();
    let mut skipped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source_err| CaptureError::Io {
            path: source.to_path_buf(),
            source: source_err,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, attack_class) {
            Ok(frame) => {
                if let Some(prev) = frames.last() {
                    if frame.timestamp < prev.timestamp {
                        match mode {
                            ParseMode::Strict => {
                                return Err(CaptureError::NonMonotonic {
                                    path: source.to_path_buf(),
                                    line: line_no,
                                    ts: frame.timestamp,
                                })
                            }
                            ParseMode::Lenient => {
                                skipped += 1;
                                continue;
                            }
                        }
                    }
                }
                frames.push(frame);
            }
            Err(e) => match mode {
                ParseMode::Strict => {
                    return Err(CaptureError::File {
                        path: source.to_path_buf(),
                        line: line_no,
                        source: e,
                    })
                }
                ParseMode::Lenient => {
                    log::debug!("{}:{}: skipping: {}", source.display(), line_no, e);
                    skipped += 1;
                }
            },
        }
    }
    if frames.is_empty() {
        log::warn!("{}: capture contains no frames", source.display());
    }
    if skipped > 0 {
        log::warn!("{}: skipped {} malformed lines", source.display(), skipped);
    }
    let mut stats = CaptureStats::from_frames(&frames);
    stats.skipped_lines = skipped;
    Ok(Capture { frames, stats })
}

pub fn read_capture(
    path: impl AsRef<Path>,
    attack_class: Label,
    mode: ParseMode,
) -> Result<Capture, CaptureError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CaptureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_capture_from(BufReader::new(file), path, attack_class, mode)
}

/// Writes frames in capture format, one record per line.
pub fn write_capture<W: Write>(mut out: W, frames: &[CanFrame]) -> std::io::Result<()> {
    for f in frames {
        writeln!(out, "{}", f.to_record())?;
    }
    out.flush()
}
