//! Binary tensor/checkpoint formats and manifest parsing.
//!
//! All binary formats are little-endian and versioned:
//! - clip file:    magic "VTPC", u16 version, u8 dtype (0 = f32), u8 rank,
//!   u32 dims (T, H, W, C), f32 payload row-major
//! - feature file: same layout, magic "VTPF", dims (T, d)
//! - checkpoint:   magic "VTPK", u16 version, u32 tensor count, per tensor
//!   { u16 name length, UTF-8 name, u8 rank, u32 dims, f32 payload }, then
//!   u32 config-blob length and UTF-8 JSON bytes

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const CLIP_MAGIC: &[u8; 4] = b"VTPC";
pub const FEATURE_MAGIC: &[u8; 4] = b"VTPF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTPK";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ── byte cursor ─────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!("truncated file: needed {} bytes for {}", n, what),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let off = self.offset();
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::format(
                off,
                format!("bad magic {:?}, want {:?}", got, std::str::from_utf8(want).unwrap()),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.offset(), "trailing bytes after payload"));
        }
        Ok(())
    }
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor_payload(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.reserve(4 * t.numel());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// ── clip and feature files ──────────────────────────────────────────

fn write_tensor_file(path: &Path, magic: &[u8; 4], rank: u8, t: &Tensor<f32>) -> Result<()> {
    assert_eq!(t.rank(), rank as usize);
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(magic);
    push_u16(&mut out, FORMAT_VERSION);
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in t.dims() {
        let d32 = u32::try_from(d).map_err(|_| Error::shape(format!("extent {} exceeds u32", d)))?;
        push_u32(&mut out, d32);
    }
    push_tensor_payload(&mut out, t);
    write_atomic(path, &out)
}

fn read_tensor_file(path: &Path, magic: &[u8; 4], rank: u8) -> Result<Tensor<f32>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(magic)?;
    let off = r.offset();
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(off, format!("unsupported version {version}")));
    }
    let off = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(off, format!("unsupported dtype {dtype}")));
    }
    let off = r.offset();
    let got_rank = r.u8("rank")?;
    if got_rank != rank {
        return Err(Error::format(off, format!("rank {got_rank}, want {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        dims.push(r.u32("dim")? as usize);
    }
    let off = r.offset();
    let numel = checked_numel(&dims)
        .map_err(|e| Error::format(off, format!("bad dims: {e}")))?;
    let data = r.f32_vec(numel, "payload")?;
    r.done()?;
    Tensor::new(dims, data)
}

/// Write a `[T, H, W, 3]` video clip tensor.
pub fn write_clip(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    write_tensor_file(path, CLIP_MAGIC, 4, frames)
}

pub fn read_clip(path: &Path) -> Result<Tensor<f32>> {
    read_tensor_file(path, CLIP_MAGIC, 4)
}

/// Write a `[T, d]` pooled-feature tensor.
pub fn write_features(path: &Path, feats: &Tensor<f32>) -> Result<()> {
    write_tensor_file(path, FEATURE_MAGIC, 2, feats)
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    read_tensor_file(path, FEATURE_MAGIC, 2)
}

// ── checkpoints ─────────────────────────────────────────────────────

/// Named-tensor parameter archive plus the producing configuration.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config_json: String,
    pub format_version: u16,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor<f32>)>, config_json: String) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (n, _) in &tensors {
            if !seen.insert(n.clone()) {
                return Err(Error::format(0, format!("duplicate tensor name {n:?}")));
            }
        }
        Ok(Checkpoint { tensors, config_json, format_version: FORMAT_VERSION })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u16(&mut out, ckpt.format_version);
    push_u32(&mut out, u32::try_from(ckpt.tensors.len()).expect("tensor count"));
    for (name, t) in &ckpt.tensors {
        let nb = name.as_bytes();
        push_u16(&mut out, u16::try_from(nb.len()).expect("name length"));
        out.extend_from_slice(nb);
        out.push(u8::try_from(t.rank()).expect("rank"));
        for &d in t.dims() {
            push_u32(&mut out, u32::try_from(d).expect("dim"));
        }
        push_tensor_payload(&mut out, t);
    }
    let cb = ckpt.config_json.as_bytes();
    push_u32(&mut out, u32::try_from(cb.len()).expect("config length"));
    out.extend_from_slice(cb);
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let off = r.offset();
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(off, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let off = r.offset();
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(off, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(off, format!("duplicate tensor name {name:?}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let off = r.offset();
        let numel =
            checked_numel(&dims).map_err(|e| Error::format(off, format!("bad dims: {e}")))?;
        let data = r.f32_vec(numel, "tensor payload")?;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    let blob_len = r.u32("config length")? as usize;
    let off = r.offset();
    let config_json = std::str::from_utf8(r.take(blob_len, "config blob")?)
        .map_err(|_| Error::format(off, "config blob is not UTF-8"))?
        .to_string();
    r.done()?;
    Ok(Checkpoint { tensors, config_json, format_version: version })
}

// ── manifests ───────────────────────────────────────────────────────

/// One corpus clip: path, transcript, per-word frame spans (inclusive), and
/// an optional per-frame speech-label file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_path: String,
    pub transcript: String,
    pub word_boundaries: Vec<(usize, usize)>,
    pub vsd_labels_path: Option<String>,
}

/// Parse the tab-separated manifest: columns clip_path, transcript,
/// boundaries (space-separated "start:end"), optional vsd_labels_path.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let body = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        let lineno = ln + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 || cols.len() > 4 {
            return Err(Error::data(format!(
                "manifest line {lineno}: expected 3 or 4 tab-separated columns, got {}",
                cols.len()
            )));
        }
        let transcript = cols[1].trim().to_string();
        let n_words = transcript.split_whitespace().count();
        let mut boundaries = Vec::new();
        for span in cols[2].split_whitespace() {
            let (s, e) = span
                .split_once(':')
                .ok_or_else(|| Error::data(format!("manifest line {lineno}: bad span {span:?}")))?;
            let s: usize = s.parse().map_err(|_| {
                Error::data(format!("manifest line {lineno}: bad span start {span:?}"))
            })?;
            let e: usize = e.parse().map_err(|_| {
                Error::data(format!("manifest line {lineno}: bad span end {span:?}"))
            })?;
            if e < s {
                return Err(Error::data(format!(
                    "manifest line {lineno}: span end before start in {span:?}"
                )));
            }
            if let Some(&(_, prev_end)) = boundaries.last() {
                if s <= prev_end {
                    return Err(Error::data(format!(
                        "manifest line {lineno}: overlapping or unordered span {span:?}"
                    )));
                }
            }
            boundaries.push((s, e));
        }
        if boundaries.len() != n_words {
            return Err(Error::data(format!(
                "manifest line {lineno}: {} boundary spans but {} transcript words",
                boundaries.len(),
                n_words
            )));
        }
        entries.push(ManifestEntry {
            clip_path: cols[0].to_string(),
            transcript,
            word_boundaries: boundaries,
            vsd_labels_path: cols.get(3).map(|s| s.to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut body = String::new();
    for e in entries {
        let spans: Vec<String> =
            e.word_boundaries.iter().map(|(s, t)| format!("{s}:{t}")).collect();
        body.push_str(&e.clip_path);
        body.push('\t');
        body.push_str(&e.transcript);
        body.push('\t');
        body.push_str(&spans.join(" "));
        if let Some(v) = &e.vsd_labels_path {
            body.push('\t');
            body.push_str(v);
        }
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

/// One 0/1 label per line, frame-aligned to the clip.
pub fn read_vsd_labels(path: &Path) -> Result<Vec<u8>> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        match line.trim() {
            "0" => out.push(0),
            "1" => out.push(1),
            other => {
                return Err(Error::data(format!(
                    "labels line {}: expected 0 or 1, got {other:?}",
                    ln + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_vsd_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut body = String::with_capacity(labels.len() * 2);
    for &l in labels {
        body.push(if l == 0 { '0' } else { '1' });
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn clip_round_trip_is_bitwise() {
        let dir = tmp();
        let p = dir.path().join("a.vtpc");
        let t = Tensor::from_fn(&[2, 3, 3, 3], |i| (i as f32 * 0.37).sin());
        write_clip(&p, &t).unwrap();
        let back = read_clip(&p).unwrap();
        assert_eq!(back.dims(), t.dims());
        let same = back
            .data()
            .iter()
            .zip(t.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn clip_header_and_payload_lengths_add_up() {
        let dir = tmp();
        let p = dir.path().join("b.vtpc");
        let t = Tensor::<f32>::zeros(&[10, 32, 32, 3]);
        write_clip(&p, &t).unwrap();
        let len = std::fs::metadata(&p).unwrap().len();
        // magic 4 + version 2 + dtype 1 + rank 1 + dims 16 + payload
        assert_eq!(len, 24 + 10 * 32 * 32 * 3 * 4);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tmp();
        let p = dir.path().join("c.vtpc");
        let t = Tensor::<f32>::zeros(&[1, 2, 2, 3]);
        write_clip(&p, &t).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        match read_clip(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("want format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tmp();
        let p = dir.path().join("d.vtpc");
        let t = Tensor::<f32>::zeros(&[1, 2, 2, 3]);
        write_clip(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_clip(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("e.vtpf");
        let t = Tensor::<f32>::zeros(&[4, 8]);
        write_features(&p, &t).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip_preserves_bits_and_config() {
        let dir = tmp();
        let p = dir.path().join("m.vtpk");
        let ckpt = Checkpoint::new(
            vec![
                ("a.w".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)),
                ("a.b".into(), Tensor::from_fn(&[3], |i| (i as f32).exp())),
            ],
            r#"{"d":64}"#.to_string(),
        )
        .unwrap();
        save_checkpoint(&p, &ckpt).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config_json, ckpt.config_json);
        assert_eq!(back.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(ckpt.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dims(), t2.dims());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // second save produces identical bytes
        let p2 = dir.path().join("m2.vtpk");
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_duplicate_names() {
        let r = Checkpoint::new(
            vec![
                ("x".into(), Tensor::<f32>::zeros(&[1])),
                ("x".into(), Tensor::<f32>::zeros(&[1])),
            ],
            String::new(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tmp();
        let p = dir.path().join("manifest.tsv");
        let entries = vec![
            ManifestEntry {
                clip_path: "clips/0.vtpc".into(),
                transcript: "pa ko".into(),
                word_boundaries: vec![(0, 7), (8, 15)],
                vsd_labels_path: None,
            },
            ManifestEntry {
                clip_path: "clips/1.vtpc".into(),
                transcript: "ri".into(),
                word_boundaries: vec![(0, 7)],
                vsd_labels_path: Some("labels/1.txt".into()),
            },
        ];
        write_manifest(&p, &entries).unwrap();
        let back = parse_manifest(&p).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn manifest_word_count_mismatch_reports_line() {
        let dir = tmp();
        let p = dir.path().join("manifest.tsv");
        std::fs::write(&p, "a.vtpc\tpa ko\t0:7 8:15\nb.vtpc\tpa ko\t0:7 8:15 16:23\n").unwrap();
        match parse_manifest(&p) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("want data error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_overlapping_spans_rejected() {
        let dir = tmp();
        let p = dir.path().join("manifest.tsv");
        std::fs::write(&p, "a.vtpc\tpa ko\t0:8 8:15\n").unwrap();
        assert!(parse_manifest(&p).is_err());
    }
}
