//! File formats: mono WAV, the EMB1 binary embedding matrix with its JSON id
//! sidecar, JSON dataset manifests, and the CSV shift report.
//!
//! Readers reject inconsistent lengths instead of truncating.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AudioClip, DatasetManifest, EmbeddingSet, LabelMode, LabelTargets, Labels, ManifestClip,
    MetricName, ModelError, PerturbationKind, ReportRow, ShiftReport,
};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const EMB_HEADER_LEN: usize = 12;

pub const REPORT_HEADER: [&str; 6] = ["dataset", "embedder", "kind", "value", "metric", "score"];

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported WAV format: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("{path}: corrupt file: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("{path}: bad magic, expected EMB1")]
    BadMagic { path: PathBuf },
    #[error("{path}: payload is {actual} bytes, header implies {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: sidecar lists {ids} ids, embedding file has {rows} rows")]
    SidecarMismatch {
        path: PathBuf,
        ids: usize,
        rows: usize,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path) -> impl FnOnce(ModelError) -> IoError + '_ {
    move |source| IoError::Invalid {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// WAV

/// Read a mono PCM16 or float32 WAV file. The clip id is the file stem.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, IoError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_wav_with_id(path, id)
}

pub fn read_wav_with_id(
    path: impl AsRef<Path>,
    id: impl Into<String>,
) -> Result<AudioClip, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (samples, rate) = decode_wav(&bytes).map_err(|e| e.at(path))?;
    AudioClip::new(id, samples, rate).map_err(invalid(path))
}

enum WavFault {
    Unsupported(String),
    Corrupt(String),
}

impl WavFault {
    fn at(self, path: &Path) -> IoError {
        match self {
            WavFault::Unsupported(reason) => IoError::UnsupportedFormat {
                path: path.to_path_buf(),
                reason,
            },
            WavFault::Corrupt(reason) => IoError::CorruptFile {
                path: path.to_path_buf(),
                reason,
            },
        }
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct WavFormat {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits: u16,
}

fn decode_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32), WavFault> {
    use WavFault::*;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Corrupt("missing RIFF/WAVE header".into()));
    }
    let riff_len = le_u32(bytes, 4) as usize;
    if riff_len + 8 > bytes.len() {
        return Err(Corrupt(format!(
            "RIFF size {} exceeds file length {}",
            riff_len + 8,
            bytes.len()
        )));
    }
    let end = riff_len + 8;
    let mut pos = 12;
    let mut format: Option<WavFormat> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= end {
        let chunk_id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= end)
            .ok_or_else(|| {
                Corrupt(format!(
                    "chunk {:?} overruns the file",
                    String::from_utf8_lossy(chunk_id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match chunk_id {
            b"fmt " => {
                if size < 16 {
                    return Err(Corrupt(format!("fmt chunk too short ({size} bytes)")));
                }
                let mut tag = le_u16(body, 0);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(Corrupt("extensible fmt chunk too short".into()));
                    }
                    tag = le_u16(body, 24);
                }
                format = Some(WavFormat {
                    tag,
                    channels: le_u16(body, 2),
                    sample_rate: le_u32(body, 4),
                    block_align: le_u16(body, 12),
                    bits: le_u16(body, 14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    if pos != end && pos != end + 1 {
        return Err(Corrupt("trailing bytes after last chunk".into()));
    }
    let fmt = format.ok_or_else(|| Corrupt("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Corrupt("no data chunk".into()))?;
    if fmt.channels != 1 {
        return Err(Unsupported(format!(
            "{} channels, only mono is supported",
            fmt.channels
        )));
    }
    let samples = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => {
            check_block(&fmt, 2, data.len())?;
            data.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            check_block(&fmt, 4, data.len())?;
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        (tag, bits) => {
            return Err(Unsupported(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    };
    Ok((samples, fmt.sample_rate))
}

fn check_block(fmt: &WavFormat, width: usize, len: usize) -> Result<(), WavFault> {
    if fmt.block_align as usize != width {
        return Err(WavFault::Corrupt(format!(
            "block align {} does not match {}-byte mono samples",
            fmt.block_align, width
        )));
    }
    if !len.is_multiple_of(width) {
        return Err(WavFault::Corrupt(format!(
            "data chunk of {len} bytes is not a whole number of samples"
        )));
    }
    Ok(())
}

/// Write a mono float32 WAV. Samples are stored as-is (no clipping); the
/// payload round-trips exactly for amplitudes representable in `f32`.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let n = clip.len();
    let data_len = (n * 4) as u32;
    let mut out = Vec::with_capacity(58 + n * 4);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(4 + 26 + 12 + 8 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&18u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(b"fact");
    out.extend_from_slice(&4u32.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// EMB1

/// Default sidecar location for an embedding file: `<path>.ids.json`.
pub fn default_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

pub fn read_embeddings(
    path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<EmbeddingSet, IoError> {
    let path = path.as_ref();
    let sidecar_path = sidecar_path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < EMB_HEADER_LEN {
        return Err(IoError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("{} bytes is shorter than the EMB1 header", bytes.len()),
        });
    }
    if &bytes[0..4] != EMB_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let n = le_u32(&bytes, 4) as usize;
    let d = le_u32(&bytes, 8) as usize;
    let payload = &bytes[EMB_HEADER_LEN..];
    let expected = n as u64 * d as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(IoError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let ids_text = fs::read_to_string(sidecar_path).map_err(io_err(sidecar_path))?;
    let ids: Vec<String> = serde_json::from_str(&ids_text).map_err(|source| IoError::Json {
        path: sidecar_path.to_path_buf(),
        source,
    })?;
    if ids.len() != n {
        return Err(IoError::SidecarMismatch {
            path: sidecar_path.to_path_buf(),
            ids: ids.len(),
            rows: n,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingSet::new(ids, data, d).map_err(invalid(path))
}

/// Write an EMB1 file (float32, row-major) and its JSON id sidecar.
pub fn write_embeddings(
    set: &EmbeddingSet,
    path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let sidecar_path = sidecar_path.as_ref();
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + set.as_slice().len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    for &v in set.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))?;
    let ids = serde_json::to_string(set.clip_ids()).map_err(|source| IoError::Json {
        path: sidecar_path.to_path_buf(),
        source,
    })?;
    fs::write(sidecar_path, ids).map_err(io_err(sidecar_path))
}

/// Convert a CSV of embeddings into an [`EmbeddingSet`].
///
/// The first row is a header (`id,<dim names...>`); every following row is a
/// clip id followed by `d` reals.
pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<EmbeddingSet, IoError> {
    let path = path.as_ref();
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let dim = reader.headers().map_err(csv_err)?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| IoError::Parse {
                path: path.to_path_buf(),
                reason: format!("`{field}` is not a number (clip `{}`)", &record[0]),
            })?;
            data.push(v);
        }
    }
    EmbeddingSet::new(ids, data, dim).map_err(invalid(path))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    clips: Vec<RawClip>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_mode: Option<LabelMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<String, RawLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    folds: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawClip {
    id: String,
    path: PathBuf,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawLabel {
    Index(usize),
    Vector(Vec<u8>),
}

/// Parse a JSON manifest. Relative audio paths resolve against the
/// manifest's directory.
///
/// ```json
/// {
///   "label_mode": "single",
///   "classes": ["dog", "siren"],
///   "clips": [{"id": "c1", "path": "c1.wav"}],
///   "labels": {"c1": 1},
///   "folds": {"c1": 0}
/// }
/// ```
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base).map_err(|e| match e {
        ManifestFault::Json(source) => IoError::Json {
            path: path.to_path_buf(),
            source,
        },
        ManifestFault::Model(source) => IoError::Invalid {
            path: path.to_path_buf(),
            source,
        },
    })
}

enum ManifestFault {
    Json(serde_json::Error),
    Model(ModelError),
}

fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest, ManifestFault> {
    let raw: RawManifest = serde_json::from_str(text).map_err(ManifestFault::Json)?;
    let bad = |m: String| ManifestFault::Model(ModelError::InvalidManifest(m));
    let clips: Vec<ManifestClip> = raw
        .clips
        .into_iter()
        .map(|c| ManifestClip {
            path: if c.path.is_absolute() {
                c.path
            } else {
                base.join(c.path)
            },
            id: c.id,
        })
        .collect();
    let labels = match raw.label_mode {
        None => {
            if !raw.labels.is_empty() || !raw.classes.is_empty() {
                return Err(bad("labels given without label_mode".into()));
            }
            None
        }
        Some(mode) => {
            if raw.labels.len() != clips.len() {
                if let Some(c) = clips.iter().find(|c| !raw.labels.contains_key(&c.id)) {
                    return Err(bad(format!("clip `{}` has no label", c.id)));
                }
                return Err(bad("labels reference unknown clip ids".into()));
            }
            let lookup = |id: &str| &raw.labels[id];
            let targets = match mode {
                LabelMode::Single => LabelTargets::Single(
                    clips
                        .iter()
                        .map(|c| match lookup(&c.id) {
                            RawLabel::Index(k) => Ok(*k),
                            RawLabel::Vector(_) => {
                                Err(bad(format!("clip `{}`: expected a class index", c.id)))
                            }
                        })
                        .collect::<Result<_, _>>()?,
                ),
                LabelMode::Multi => LabelTargets::Multi(
                    clips
                        .iter()
                        .map(|c| match lookup(&c.id) {
                            RawLabel::Vector(v) if v.iter().all(|&b| b <= 1) => {
                                Ok(v.iter().map(|&b| b == 1).collect())
                            }
                            _ => Err(bad(format!("clip `{}`: expected a 0/1 vector", c.id))),
                        })
                        .collect::<Result<_, _>>()?,
                ),
            };
            Some(Labels {
                classes: raw.classes,
                targets,
            })
        }
    };
    let folds = match raw.folds {
        None => None,
        Some(map) => Some(
            clips
                .iter()
                .map(|c| {
                    map.get(&c.id)
                        .copied()
                        .ok_or_else(|| bad(format!("clip `{}` has no fold", c.id)))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    DatasetManifest::new(clips, labels, folds).map_err(ManifestFault::Model)
}

/// Serialize a manifest back to JSON. Paths are written as stored.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut raw = RawManifest {
        clips: manifest
            .clips()
            .iter()
            .map(|c| RawClip {
                id: c.id.clone(),
                path: c.path.clone(),
            })
            .collect(),
        label_mode: manifest.labels().map(Labels::mode),
        classes: manifest
            .labels()
            .map(|l| l.classes.clone())
            .unwrap_or_default(),
        labels: BTreeMap::new(),
        folds: manifest.folds().map(|f| {
            manifest
                .clips()
                .iter()
                .zip(f)
                .map(|(c, &k)| (c.id.clone(), k))
                .collect()
        }),
    };
    if let Some(labels) = manifest.labels() {
        for (i, c) in manifest.clips().iter().enumerate() {
            let label = match &labels.targets {
                LabelTargets::Single(t) => RawLabel::Index(t[i]),
                LabelTargets::Multi(t) => RawLabel::Vector(t[i].iter().map(|&b| b as u8).collect()),
            };
            raw.labels.insert(c.id.clone(), label);
        }
    }
    let text = serde_json::to_string_pretty(&raw).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Report CSV

/// Format a real with 9 significant digits, `%.9g` style.
pub fn format_sig9(x: f64) -> String {
    const PRECISION: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..PRECISION).contains(&exp) {
        let decimals = (PRECISION - 1 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Render the report CSV: fixed header, canonical row order, 9 significant
/// digits.
pub fn render_report_csv(report: &ShiftReport) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer
        .write_record(REPORT_HEADER)
        .expect("writing to memory");
    for row in report.sorted_rows() {
        writer
            .write_record([
                row.dataset.as_str(),
                row.embedder.as_str(),
                row.kind.as_str(),
                &format_sig9(row.value),
                row.metric.as_str(),
                &format_sig9(row.score),
            ])
            .expect("writing to memory");
    }
    writer.into_inner().expect("flushing to memory")
}

pub fn write_report_csv(report: &ShiftReport, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let bytes = render_report_csv(report);
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}

/// Read a report CSV written by [`write_report_csv`]. Failure rows are not
/// part of this file and come back empty.
pub fn read_report_csv(path: impl AsRef<Path>) -> Result<ShiftReport, IoError> {
    let path = path.as_ref();
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let parse_err = |reason: String| IoError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(parse_err(format!("unexpected header {:?}", header)));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(csv_err)?;
        let num = |s: &str| -> Result<f64, IoError> {
            s.parse::<f64>()
                .map_err(|_| parse_err(format!("`{s}` is not a number")))
        };
        rows.push(ReportRow {
            dataset: r[0].to_string(),
            embedder: r[1].to_string(),
            kind: r[2]
                .parse::<PerturbationKind>()
                .map_err(|e| parse_err(e.to_string()))?,
            value: num(&r[3])?,
            metric: r[4]
                .parse::<MetricName>()
                .map_err(|e| parse_err(e.to_string()))?,
            score: num(&r[5])?,
        });
    }
    Ok(ShiftReport {
        rows,
        failures: Vec::new(),
    })
}

/// Failure log companion to the report: `dataset,embedder,kind,value,metric,message`.
pub fn write_failures_csv(report: &ShiftReport, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut failures: Vec<_> = report.failures.iter().collect();
    failures.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then_with(|| a.embedder.cmp(&b.embedder))
            .then_with(|| a.kind.as_str().cmp(b.kind.as_str()))
            .then_with(|| a.value.total_cmp(&b.value))
            .then_with(|| a.metric.as_str().cmp(b.metric.as_str()))
    });
    writer
        .write_record(["dataset", "embedder", "kind", "value", "metric", "message"])
        .expect("writing to memory");
    for f in failures {
        writer
            .write_record([
                f.dataset.as_str(),
                f.embedder.as_str(),
                f.kind.as_str(),
                &format_sig9(f.value),
                f.metric.as_str(),
                f.message.as_str(),
            ])
            .expect("writing to memory");
    }
    let bytes = writer.into_inner().expect("flushing to memory");
    fs::write(path, bytes).map_err(io_err(path))
}
