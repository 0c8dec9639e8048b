//! Parameter checkpoints: a `key = value` text manifest listing the segment
//! layout plus a raw little-endian `f64` array next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::params::{LayerSegment, Layout, ParamVector, SegmentKind};
use crate::error::{Error, Result};
use crate::fsutil;

const FORMAT: &str = "harmodt-params-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    /// Free-form metadata carried in the manifest as `extra.<key> = <value>`.
    pub extra: BTreeMap<String, String>,
}

fn values_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f64")
}

pub fn save_checkpoint(manifest: &Path, ckpt: &Checkpoint) -> Result<()> {
    let values = values_path(manifest);
    let mut text = String::new();
    text.push_str(&format!("format = {FORMAT}\n"));
    text.push_str(&format!(
        "values_file = {}\n",
        values.file_name().unwrap().to_string_lossy()
    ));
    text.push_str(&format!("len = {}\n", ckpt.params.len()));
    for (k, v) in &ckpt.extra {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::config(format!("extra entry {k:?} is not a single line")));
        }
        text.push_str(&format!("extra.{k} = {v}\n"));
    }
    for s in ckpt.params.layout().segments() {
        text.push_str(&format!(
            "segment = {} {} {} {} {} {}\n",
            s.name,
            s.offset,
            s.size,
            s.fan_in,
            s.fan_out,
            s.kind.as_str()
        ));
    }
    let mut bytes = Vec::with_capacity(ckpt.params.len() * 8);
    for v in ckpt.params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fsutil::write_atomic(&values, &bytes)?;
    fsutil::write_atomic(manifest, text.as_bytes())
}

pub fn load_checkpoint(manifest: &Path) -> Result<Checkpoint> {
    let text = fsutil::read_string(manifest)?;
    let mut len = None;
    let mut values_file = None;
    let mut segments = Vec::new();
    let mut extra = BTreeMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| Error::data_at(manifest, Some(line_offset), "expected `key = value`"))?;
        match key {
            "format" if value == FORMAT => {}
            "format" => {
                return Err(Error::data_at(
                    manifest,
                    Some(line_offset),
                    format!("unsupported format {value}"),
                ))
            }
            "len" => {
                len = Some(value.parse::<usize>().map_err(|_| {
                    Error::data_at(manifest, Some(line_offset), "len is not an integer")
                })?)
            }
            "values_file" => values_file = Some(value.to_string()),
            "segment" => segments.push(parse_segment(value).ok_or_else(|| {
                Error::data_at(manifest, Some(line_offset), "malformed segment line")
            })?),
            k if k.starts_with("extra.") => {
                extra.insert(k["extra.".len()..].to_string(), value.to_string());
            }
            other => {
                return Err(Error::data_at(
                    manifest,
                    Some(line_offset),
                    format!("unknown key {other}"),
                ))
            }
        }
    }
    let len = len.ok_or_else(|| Error::data_at(manifest, None, "missing len"))?;
    let values_file =
        values_file.ok_or_else(|| Error::data_at(manifest, None, "missing values_file"))?;
    let layout = Layout::from_segments(segments)
        .map_err(|e| Error::data_at(manifest, None, e.to_string()))?;
    if layout.len() != len {
        return Err(Error::data_at(
            manifest,
            None,
            format!("segments cover {} values but len is {len}", layout.len()),
        ));
    }
    let vpath = manifest.with_file_name(values_file);
    let bytes = fsutil::read(&vpath)?;
    if bytes.len() != len * 8 {
        return Err(Error::data_at(
            &vpath,
            Some(bytes.len() as u64),
            format!("expected {} bytes", len * 8),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        params: ParamVector::from_values(layout, values)?,
        extra,
    })
}

fn parse_segment(s: &str) -> Option<LayerSegment> {
    let mut it = s.split_whitespace();
    let name = it.next()?.to_string();
    let offset = it.next()?.parse().ok()?;
    let size = it.next()?.parse().ok()?;
    let fan_in = it.next()?.parse().ok()?;
    let fan_out = it.next()?.parse().ok()?;
    let kind = SegmentKind::parse(it.next()?)?;
    if it.next().is_some() {
        return None;
    }
    Some(LayerSegment {
        name,
        offset,
        size,
        fan_in,
        fan_out,
        kind,
    })
}
