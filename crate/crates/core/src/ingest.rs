//! Frame extraction through an external tool.
//!
//! The core never decodes video. This adapter shells out to an
//! ffmpeg-compatible executable, once per video record:
//!
//! ```text
//! <tool> -version
//! <tool> -nostdin -loglevel error -i <video> <out>/<sample_id>/%06d.png
//! ```
//!
//! and rewrites the manifest so each record points at its frame directory
//! with the extracted frame count.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DatasetManifest, SampleRecord};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("frame extraction tool `{0}` not found on PATH")]
    ToolMissing(String),
    #[error("`{tool}` failed on {video}: {stderr}")]
    ToolFailed {
        tool: String,
        video: PathBuf,
        stderr: String,
    },
    #[error("{video}: extraction produced no frames")]
    NoFrames { video: PathBuf },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Provenance written next to the rewritten manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub tool: String,
    pub tool_version: String,
    pub extracted: Vec<String>,
    pub passed_through: Vec<String>,
}

fn tool_version(tool: &str) -> Result<String, IngestError> {
    let out = Command::new(tool).arg("-version").output().map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            IngestError::ToolMissing(tool.to_string())
        } else {
            IngestError::Io(e)
        }
    })?;
    let text = String::from_utf8_lossy(&out.stdout);
    Ok(text.lines().next().unwrap_or("").trim().to_string())
}

fn count_files(dir: &Path) -> io::Result<u64> {
    Ok(fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_file())
        .count() as u64)
}

/// Extracts frames for every record whose media is a file. Records that
/// already point at a directory keep it, with `n_frames` recounted.
///
/// `base` resolves relative media refs; the rewritten refs are absolute.
pub fn ingest(
    manifest: &DatasetManifest,
    base: &Path,
    tool: &str,
    frames_root: &Path,
) -> Result<(DatasetManifest, IngestReport), IngestError> {
    let tool_version = tool_version(tool)?;
    let mut report = IngestReport {
        tool: tool.to_string(),
        tool_version,
        extracted: Vec::new(),
        passed_through: Vec::new(),
    };
    let mut records = Vec::with_capacity(manifest.len());
    for rec in &manifest.records {
        let media = base.join(&rec.media_ref);
        let mut out: SampleRecord = rec.clone();
        if media.is_dir() {
            out.media_ref = media.clone();
            out.n_frames = count_files(&media)?;
            report.passed_through.push(rec.id.clone());
        } else {
            let dir = frames_root.join(&rec.id);
            fs::create_dir_all(&dir)?;
            let result = Command::new(tool)
                .args(["-nostdin", "-loglevel", "error", "-i"])
                .arg(&media)
                .arg(dir.join("%06d.png"))
                .output()?;
            if !result.status.success() {
                return Err(IngestError::ToolFailed {
                    tool: tool.to_string(),
                    video: media,
                    stderr: String::from_utf8_lossy(&result.stderr).trim().to_string(),
                });
            }
            let n = count_files(&dir)?;
            if n == 0 {
                return Err(IngestError::NoFrames { video: media });
            }
            out.media_ref = dir;
            out.n_frames = n;
            report.extracted.push(rec.id.clone());
        }
        records.push(out);
    }
    Ok((DatasetManifest::new(records, manifest.split), report))
}
