//! WAV and CSV reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::GroundTruthRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    Pcm16,
    #[default]
    Float32,
}

impl std::str::FromStr for SampleFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" | "i16" => Ok(SampleFormat::Pcm16),
            "float32" | "f32" => Ok(SampleFormat::Float32),
            other => Err(Error::InvalidConfig(format!(
                "unknown sample format '{other}' (expected pcm16 or float32)"
            ))),
        }
    }
}

/// Multichannel audio, one vector per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn num_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav_from(BufReader::new(file)).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<Audio> {
    let fail = |e: hound::Error| Error::format("<wav>", e);
    let mut wav = WavReader::new(reader).map_err(fail)?;
    let spec = wav.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Float, 32) => wav
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(fail)?,
        (HoundFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            wav.samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(fail)?
        }
        (format, bits) => {
            return Err(Error::format(
                "<wav>",
                format!("unsupported sample format {format:?} with {bits} bits"),
            ))
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels.max(1)); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            out[c].push(v);
        }
    }
    Ok(Audio {
        channels: out,
        sample_rate: spec.sample_rate,
    })
}

pub fn write_wav(path: impl AsRef<Path>, audio: &Audio, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav_to(BufWriter::new(file), audio, format).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

pub fn write_wav_to<W: Write + std::io::Seek>(
    writer: W,
    audio: &Audio,
    format: SampleFormat,
) -> Result<()> {
    let fail = |e: hound::Error| Error::format("<wav>", e);
    let channels = audio.channels.len();
    if channels == 0 || channels > u16::MAX as usize {
        return Err(Error::format("<wav>", format!("cannot write {channels} channels")));
    }
    let len = audio.num_samples();
    if audio.channels.iter().any(|c| c.len() != len) {
        return Err(Error::format("<wav>", "channels differ in length"));
    }
    let spec = match format {
        SampleFormat::Pcm16 => WavSpec {
            channels: channels as u16,
            sample_rate: audio.sample_rate,
            bits_per_sample: 16,
            sample_format: HoundFormat::Int,
        },
        SampleFormat::Float32 => WavSpec {
            channels: channels as u16,
            sample_rate: audio.sample_rate,
            bits_per_sample: 32,
            sample_format: HoundFormat::Float,
        },
    };
    let mut wav = WavWriter::new(writer, spec).map_err(fail)?;
    let mut clipped = 0usize;
    for n in 0..len {
        for ch in &audio.channels {
            let v = ch[n];
            match format {
                SampleFormat::Pcm16 => {
                    let scaled = (v * 32768.0).round();
                    if !(-32768.0..=32767.0).contains(&scaled) {
                        clipped += 1;
                    }
                    wav.write_sample(scaled.clamp(-32768.0, 32767.0) as i16)
                        .map_err(fail)?;
                }
                SampleFormat::Float32 => wav.write_sample(v as f32).map_err(fail)?,
            }
        }
    }
    if clipped > 0 {
        warn!("{clipped} samples clipped while writing 16-bit PCM");
    }
    wav.finalize().map_err(fail)
}

/// One confirmed source at one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub source_id: u64,
    /// Degrees in (-180, 180].
    pub azimuth: f64,
    /// Degrees in [-90, 90].
    pub elevation: f64,
    pub existence: f64,
    pub activity: f64,
}

/// One beamformer peak at one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub timestamp: f64,
    pub rank: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub energy: f64,
    pub confidence: f64,
    /// Refined distance in meters, empty when refinement is off.
    pub distance: Option<f64>,
}

pub const TRAJECTORY_HEADER: &[&str] =
    &["timestamp", "source_id", "azimuth", "elevation", "existence", "activity"];
pub const DIAGNOSTIC_HEADER: &[&str] =
    &["timestamp", "rank", "azimuth", "elevation", "energy", "confidence", "distance"];
pub const GROUND_TRUTH_HEADER: &[&str] =
    &["timestamp", "source_id", "azimuth", "elevation", "active"];

fn write_csv_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(BufWriter::new(file), header, rows).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

/// Writes `header` followed by the rows; the header is written even when
/// there are no rows.
pub fn write_csv_to<W: Write, T: Serialize>(writer: W, header: &[&str], rows: &[T]) -> Result<()> {
    let fail = |e: csv::Error| Error::format("<csv>", e);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::format("<csv>", e))
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, rows: &[TrajectoryRecord]) -> Result<()> {
    write_csv_rows(path.as_ref(), TRAJECTORY_HEADER, rows)
}

pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    read_csv_rows(path.as_ref())
}

pub fn write_trajectory_json(path: impl AsRef<Path>, rows: &[TrajectoryRecord]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(rows).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_json(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Reads a trajectory file, choosing CSV or JSON by extension.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        read_trajectory_json(path)
    } else {
        read_trajectory_csv(path)
    }
}

pub fn write_diagnostics_csv(path: impl AsRef<Path>, rows: &[DiagnosticRecord]) -> Result<()> {
    write_csv_rows(path.as_ref(), DIAGNOSTIC_HEADER, rows)
}

pub fn write_ground_truth_csv(path: impl AsRef<Path>, rows: &[GroundTruthRow]) -> Result<()> {
    write_csv_rows(path.as_ref(), GROUND_TRUTH_HEADER, rows)
}

pub fn read_ground_truth_csv(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRow>> {
    read_csv_rows(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn audio() -> Audio {
        Audio {
            channels: vec![
                vec![0.0, 0.5, -0.5, 0.25],
                vec![0.1, -0.1, 0.0, 0.999],
            ],
            sample_rate: 48_000,
        }
    }

    #[test]
    fn wav_round_trip_float() {
        let a = audio();
        let mut buf = Cursor::new(Vec::new());
        write_wav_to(&mut buf, &a, SampleFormat::Float32).unwrap();
        let b = read_wav_from(Cursor::new(buf.into_inner())).unwrap();
        assert_eq!(b.sample_rate, 48_000);
        for (x, y) in a.channels.iter().flatten().zip(b.channels.iter().flatten()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn wav_round_trip_pcm16() {
        let a = audio();
        let mut buf = Cursor::new(Vec::new());
        write_wav_to(&mut buf, &a, SampleFormat::Pcm16).unwrap();
        let b = read_wav_from(Cursor::new(buf.into_inner())).unwrap();
        assert_eq!(b.channels.len(), 2);
        for (x, y) in a.channels.iter().flatten().zip(b.channels.iter().flatten()) {
            assert!((x - y).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn malformed_wav_is_format_error() {
        let err = read_wav_from(Cursor::new(b"not a wav file".to_vec())).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn trajectory_csv_header_and_round_trip() {
        let rows = vec![TrajectoryRecord {
            timestamp: 0.5,
            source_id: 3,
            azimuth: -12.5,
            elevation: 4.0,
            existence: 1.0,
            activity: 0.75,
        }];
        let mut buf = Vec::new();
        write_csv_to(&mut buf, TRAJECTORY_HEADER, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("timestamp,source_id,azimuth,elevation,existence,activity\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory_csv(&p, &rows).unwrap();
        assert_eq!(read_trajectory(&p).unwrap(), rows);
        let p = dir.path().join("t.json");
        write_trajectory_json(&p, &rows).unwrap();
        assert_eq!(read_trajectory(&p).unwrap(), rows);

        let mut buf = Vec::new();
        write_csv_to::<_, TrajectoryRecord>(&mut buf, TRAJECTORY_HEADER, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "timestamp,source_id,azimuth,elevation,existence,activity\n"
        );
    }

    #[test]
    fn ground_truth_round_trip() {
        let rows = vec![GroundTruthRow {
            timestamp: 0.1,
            source_id: 0,
            azimuth: 10.0,
            elevation: -5.0,
            active: true,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        write_ground_truth_csv(&p, &rows).unwrap();
        assert_eq!(read_ground_truth_csv(&p).unwrap(), rows);
        assert!(matches!(
            read_ground_truth_csv(dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
    }
}
