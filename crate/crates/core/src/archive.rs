//! `LCB1` frame archive.
//!
//! ```text
//! "LCB1"  u32 N  u32 T  u32 K          little-endian
//! N·T·K   f32                          frame, time, channel order
//! N       u8                           class index into the manifest
//! manifest                             UTF-8, one class name per line
//! ```
//!
//! Manifest lines starting with `#` carry dataset metadata and are not
//! classes: `# channels=I,II,...`, `# sampling_rate=64`, one
//! `# record=<name>` per source record, and `# record_ids=<id>*<run>,...`
//! giving each frame's record as run lengths. Readers fall back to
//! defaults when they are absent.

use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::{FrameDataset, STANDARD_LEADS};
use crate::wfdb::DiagnosisLabel;

pub const MAGIC: &[u8; 4] = b"LCB1";

fn bad(reason: impl Into<String>) -> Error {
    Error::BadContainer {
        path: None,
        reason: reason.into(),
    }
}

pub fn encode_archive(ds: &FrameDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut classes: Vec<&str> = Vec::new();
    let mut label_bytes = Vec::with_capacity(ds.n);
    for l in &ds.labels {
        let idx = match classes.iter().position(|c| *c == l.class_name) {
            Some(i) => i,
            None => {
                classes.push(&l.class_name);
                classes.len() - 1
            }
        };
        label_bytes.push(u8::try_from(idx).map_err(|_| bad("more than 256 classes"))?);
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| bad("dimension exceeds u32"));
    let mut out = Vec::with_capacity(16 + ds.data.len() * 4 + ds.n + 256);
    out.extend_from_slice(MAGIC);
    for v in [ds.n, ds.t, ds.k] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for v in &ds.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&label_bytes);

    let mut manifest = String::new();
    manifest.push_str(&format!("# channels={}\n", ds.channel_names.join(",")));
    manifest.push_str(&format!("# sampling_rate={}\n", ds.sampling_rate));
    for r in &ds.record_names {
        manifest.push_str(&format!("# record={r}\n"));
    }
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &id in &ds.record_ids {
        match runs.last_mut() {
            Some((last, count)) if *last == id => *count += 1,
            _ => runs.push((id, 1)),
        }
    }
    let runs: Vec<String> = runs.iter().map(|(id, c)| format!("{id}*{c}")).collect();
    manifest.push_str(&format!("# record_ids={}\n", runs.join(",")));
    for c in classes {
        manifest.push_str(c);
        manifest.push('\n');
    }
    out.extend_from_slice(manifest.as_bytes());
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<FrameDataset> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing LCB1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, t, k) = (u32_at(4), u32_at(8), u32_at(12));
    let count = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(k))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let data_end = 16 + count * 4;
    if bytes.len() < data_end + n {
        return Err(bad(format!("expected at least {} bytes, found {}", data_end + n, bytes.len())));
    }
    let data: Vec<f64> = bytes[16..data_end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let label_idx = &bytes[data_end..data_end + n];
    let manifest = std::str::from_utf8(&bytes[data_end + n..]).map_err(|_| bad("manifest is not UTF-8"))?;

    let mut classes = Vec::new();
    let mut channel_names = None;
    let mut sampling_rate = 64.0;
    let mut record_names = Vec::new();
    let mut record_ids = None;
    for line in manifest.lines() {
        let Some(meta) = line.strip_prefix('#') else {
            classes.push(line.to_string());
            continue;
        };
        let Some((key, value)) = meta.trim().split_once('=') else { continue };
        match key {
            "channels" => channel_names = Some(value.split(',').map(String::from).collect::<Vec<_>>()),
            "sampling_rate" => sampling_rate = value.parse().map_err(|_| bad(format!("bad sampling rate {value:?}")))?,
            "record" => record_names.push(value.to_string()),
            "record_ids" => {
                let mut ids = Vec::with_capacity(n);
                for run in value.split(',').filter(|s| !s.is_empty()) {
                    let (id, c) = run.split_once('*').ok_or_else(|| bad(format!("bad record run {run:?}")))?;
                    let id: usize = id.parse().map_err(|_| bad(format!("bad record id {id:?}")))?;
                    let c: usize = c.parse().map_err(|_| bad(format!("bad run length {c:?}")))?;
                    ids.extend(std::iter::repeat_n(id, c));
                }
                record_ids = Some(ids);
            }
            _ => {}
        }
    }
    let labels = label_idx
        .iter()
        .map(|&i| {
            let name = classes.get(i as usize).ok_or_else(|| bad(format!("label index {i} beyond manifest")))?;
            let label = DiagnosisLabel::from_class_name(name);
            if label.is_unknown() {
                return Err(bad(format!("unknown class {name:?}")));
            }
            Ok(label)
        })
        .collect::<Result<Vec<_>>>()?;
    let channel_names = channel_names.unwrap_or_else(|| {
        if k == 12 {
            STANDARD_LEADS.iter().map(|s| s.to_string()).collect()
        } else {
            (0..k).map(|i| format!("ch{i}")).collect()
        }
    });
    let (record_ids, record_names) = match record_ids {
        Some(ids) => (ids, record_names),
        None => ((0..n).collect(), (0..n).map(|i| format!("frame{i}")).collect()),
    };
    let ds = FrameDataset {
        data,
        n,
        t,
        k,
        labels,
        channel_names,
        sampling_rate,
        record_ids,
        record_names,
    };
    ds.validate().map_err(|e| bad(e.to_string()))?;
    Ok(ds)
}

pub fn write_archive(path: &Path, ds: &FrameDataset) -> Result<()> {
    let bytes = encode_archive(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<FrameDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes).map_err(|e| match e {
        Error::BadContainer { reason, .. } => Error::BadContainer {
            path: Some(path.to_path_buf()),
            reason,
        },
        other => other,
    })
}
