//! On-disk gradient features.
//!
//! A feature file is a fixed little-endian header followed by a row-major `f32` payload:
//!
//! ```text
//! [magic "GISTFEAT"][u32 version=1][u64 n_rows][u64 dim][u32 scalar_width=4]
//! [u32 tag_len][tag bytes (UTF-8)][payload: n_rows * dim * f32]
//! ```
//!
//! Example identifiers live in a JSON-lines sidecar at `<path>.manifest.jsonl`, one
//! `{"example_id": .., "row_index": ..}` object per row, so the payload stays seekable by
//! arithmetic alone. Values are stored as `f32`; everything downstream accumulates in `f64`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"GISTFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const SCALAR_WIDTH: u32 = 4;
pub const MANIFEST_SUFFIX: &str = ".manifest.jsonl";

/// Header length without the tag bytes.
const FIXED_HEADER_LEN: u64 = 8 + 4 + 8 + 8 + 4 + 4;
const MAX_TAG_LEN: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFileHeader {
    pub magic: [u8; 8],
    pub version: u32,
    pub n_rows: u64,
    pub dim: u64,
    pub scalar_width: u32,
    pub checkpoint_tag: String,
}

impl FeatureFileHeader {
    pub fn new(n_rows: usize, dim: usize, checkpoint_tag: impl Into<String>) -> Self {
        Self {
            magic: *FEATURE_MAGIC,
            version: FEATURE_VERSION,
            n_rows: n_rows as u64,
            dim: dim as u64,
            scalar_width: SCALAR_WIDTH,
            checkpoint_tag: checkpoint_tag.into(),
        }
    }

    /// Bytes occupied by the header, i.e. the payload offset.
    pub fn encoded_len(&self) -> u64 {
        FIXED_HEADER_LEN + self.checkpoint_tag.len() as u64
    }

    pub fn payload_len(&self) -> Option<u64> {
        self.n_rows
            .checked_mul(self.dim)?
            .checked_mul(u64::from(self.scalar_width))
    }

    pub fn row_bytes(&self) -> u64 {
        self.dim * u64::from(self.scalar_width)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.magic)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.n_rows.to_le_bytes())?;
        w.write_all(&self.dim.to_le_bytes())?;
        w.write_all(&self.scalar_width.to_le_bytes())?;
        w.write_all(&(self.checkpoint_tag.len() as u32).to_le_bytes())?;
        w.write_all(self.checkpoint_tag.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let truncated = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                GistError::Format("file too short for a feature header".into())
            } else {
                GistError::Io(e)
            }
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != FEATURE_MAGIC {
            return Err(GistError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(truncated)?;
        if version != FEATURE_VERSION {
            return Err(GistError::Format(format!("unsupported version {version}")));
        }
        let n_rows = read_u64(r).map_err(truncated)?;
        let dim = read_u64(r).map_err(truncated)?;
        let scalar_width = read_u32(r).map_err(truncated)?;
        if scalar_width != SCALAR_WIDTH {
            return Err(GistError::Format(format!(
                "unsupported scalar width {scalar_width}"
            )));
        }
        if dim == 0 {
            return Err(GistError::Format("dim must be at least 1".into()));
        }
        let tag_len = read_u32(r).map_err(truncated)?;
        if tag_len > MAX_TAG_LEN {
            return Err(GistError::Format(format!(
                "checkpoint tag length {tag_len} is implausible"
            )));
        }
        let mut tag = vec![0u8; tag_len as usize];
        r.read_exact(&mut tag).map_err(truncated)?;
        let checkpoint_tag = String::from_utf8(tag)
            .map_err(|_| GistError::Format("checkpoint tag is not UTF-8".into()))?;
        let header = Self {
            magic,
            version,
            n_rows,
            dim,
            scalar_width,
            checkpoint_tag,
        };
        if header.payload_len().is_none() {
            return Err(GistError::Format("declared payload size overflows".into()));
        }
        Ok(header)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Dense per-example gradients, one row per example.
///
/// Rows are kept in the `f32` storage precision; readers widen to `f64` on use.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    data: Vec<f32>,
    dim: usize,
    example_ids: Vec<String>,
    checkpoint_tag: String,
}

impl GradientMatrix {
    /// Builds a matrix from row-major data, rejecting non-finite values and duplicate ids.
    pub fn new(
        data: Vec<f32>,
        dim: usize,
        example_ids: Vec<String>,
        checkpoint_tag: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(GistError::arg("gradient dimension must be at least 1"));
        }
        if data.len() != dim * example_ids.len() {
            return Err(GistError::arg(format!(
                "{} values do not form {} rows of dim {dim}",
                data.len(),
                example_ids.len()
            )));
        }
        let m = Self {
            data,
            dim,
            example_ids,
            checkpoint_tag: checkpoint_tag.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Rounds `f64` rows to storage precision.
    pub fn from_f64_rows(
        rows: &[Vec<f64>],
        example_ids: Vec<String>,
        checkpoint_tag: impl Into<String>,
    ) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| {
            GistError::arg("cannot infer dim from zero rows; use GradientMatrix::empty")
        })?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(GistError::arg(format!(
                    "row {i} has length {} != {dim}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Self::new(data, dim, example_ids, checkpoint_tag)
    }

    pub fn empty(dim: usize, checkpoint_tag: impl Into<String>) -> Result<Self> {
        Self::new(Vec::new(), dim, Vec::new(), checkpoint_tag)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.data.chunks(self.dim).enumerate() {
            if let Some(j) = row.iter().position(|x| !x.is_finite()) {
                return Err(GistError::Validation {
                    row: i,
                    reason: format!("non-finite value {} at column {j}", row[j]),
                });
            }
        }
        let mut seen = HashSet::with_capacity(self.example_ids.len());
        for (i, id) in self.example_ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(GistError::Validation {
                    row: i,
                    reason: format!("duplicate example id {id:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.example_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn checkpoint_tag(&self) -> &str {
        &self.checkpoint_tag
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.n_rows() {
            return Err(GistError::arg(format!(
                "row range {range:?} outside [0, {})",
                self.n_rows()
            )));
        }
        Ok(Self {
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            dim: self.dim,
            example_ids: self.example_ids[range].to_vec(),
            checkpoint_tag: self.checkpoint_tag.clone(),
        })
    }

    /// Concatenates matrices with equal dim, keeping the first checkpoint tag.
    pub fn concat(parts: &[GradientMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| GistError::arg("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for p in parts {
            if p.dim != first.dim {
                return Err(GistError::arg(format!("dim {} != {}", p.dim, first.dim)));
            }
            data.extend_from_slice(&p.data);
            ids.extend(p.example_ids.iter().cloned());
        }
        Self::new(data, first.dim, ids, first.checkpoint_tag.clone())
    }

    /// Splits into consecutive chunks of at most `chunk_rows` rows.
    pub fn chunks(&self, chunk_rows: usize) -> Result<Vec<GradientMatrix>> {
        if chunk_rows == 0 {
            return Err(GistError::arg("chunk_rows must be positive"));
        }
        chunk_ranges(self.n_rows(), chunk_rows)
            .map(|r| self.slice_rows(r))
            .collect()
    }

    pub fn header(&self) -> FeatureFileHeader {
        FeatureFileHeader::new(self.n_rows(), self.dim, self.checkpoint_tag.clone())
    }
}

/// Deterministic chunk boundaries for `n_rows` rows in chunks of `chunk_rows`.
pub fn chunk_ranges(n_rows: usize, chunk_rows: usize) -> impl Iterator<Item = Range<usize>> {
    assert!(chunk_rows > 0, "chunk_rows must be positive");
    (0..n_rows)
        .step_by(chunk_rows)
        .map(move |s| s..(s + chunk_rows).min(n_rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Target,
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub example_id: String,
    pub source_tag: Option<String>,
    /// Offset of the row's first byte in the feature file.
    pub byte_offset: u64,
}

/// Identifiers of one pool, in row order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub pool: PoolKind,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    example_id: String,
    row_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_tag: Option<String>,
}

impl DatasetManifest {
    pub fn for_header(header: &FeatureFileHeader, ids: &[String], pool: PoolKind) -> Result<Self> {
        let base = header.encoded_len();
        let entries = ids
            .iter()
            .enumerate()
            .map(|(i, id)| ManifestEntry {
                example_id: id.clone(),
                source_tag: None,
                byte_offset: base + i as u64 * header.row_bytes(),
            })
            .collect();
        let m = Self { entries, pool };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(e.example_id.as_str()) {
                return Err(GistError::Corruption(format!(
                    "manifest repeats example id {:?} at row {i}",
                    e.example_id
                )));
            }
            if i > 0 && e.byte_offset <= self.entries[i - 1].byte_offset {
                return Err(GistError::Corruption(format!(
                    "manifest offsets not strictly increasing at row {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn example_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.example_id.clone()).collect()
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let line = ManifestLine {
                example_id: e.example_id.clone(),
                row_index: i as u64,
                source_tag: e.source_tag.clone(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses a sidecar against the header it belongs to.
    pub fn read_jsonl<R: BufRead>(
        r: R,
        header: &FeatureFileHeader,
        pool: PoolKind,
    ) -> Result<Self> {
        let base = header.encoded_len();
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| GistError::Corruption(format!("manifest line {}: {e}", i + 1)))?;
            if parsed.row_index != entries.len() as u64 {
                return Err(GistError::Corruption(format!(
                    "manifest line {} has row_index {} but {} was expected",
                    i + 1,
                    parsed.row_index,
                    entries.len()
                )));
            }
            entries.push(ManifestEntry {
                example_id: parsed.example_id,
                source_tag: parsed.source_tag,
                byte_offset: base + parsed.row_index * header.row_bytes(),
            });
        }
        if entries.len() as u64 != header.n_rows {
            return Err(GistError::Corruption(format!(
                "manifest lists {} examples but the header declares {}",
                entries.len(),
                header.n_rows
            )));
        }
        let m = Self { entries, pool };
        m.validate()?;
        Ok(m)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

/// Writes header and payload to `sink`. The manifest goes elsewhere; see [`save_features`].
pub fn write_features<W: Write>(
    matrix: &GradientMatrix,
    sink: &mut W,
) -> Result<FeatureFileHeader> {
    matrix.validate()?;
    let header = matrix.header();
    header.write_to(sink)?;
    let mut buf = Vec::with_capacity(matrix.dim() * 4);
    for row in matrix.rows() {
        buf.clear();
        for x in row {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(header)
}

/// Writes the feature file at `path` and its manifest sidecar.
pub fn save_features(matrix: &GradientMatrix, path: &Path) -> Result<FeatureFileHeader> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = write_features(matrix, &mut out)?;
    out.into_inner()
        .map_err(|e| GistError::Io(e.into_error()))?
        .sync_all()?;

    let manifest = DatasetManifest::for_header(&header, matrix.example_ids(), PoolKind::Candidate)?;
    let mut side = BufWriter::new(File::create(manifest_path(path))?);
    manifest.write_jsonl(&mut side)?;
    side.flush()?;
    Ok(header)
}

/// Random-access reader over one feature file plus its manifest.
#[derive(Debug)]
pub struct FeatureReader<R> {
    source: R,
    header: FeatureFileHeader,
    manifest: DatasetManifest,
}

impl FeatureReader<BufReader<File>> {
    /// Opens `path` and its sidecar manifest.
    pub fn open(path: &Path, pool: PoolKind) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let side = File::open(manifest_path(path)).map_err(|e| {
            GistError::Io(std::io::Error::new(
                e.kind(),
                format!("manifest {}: {e}", manifest_path(path).display()),
            ))
        })?;
        Self::with_manifest(file, |header| {
            DatasetManifest::read_jsonl(BufReader::new(side), header, pool)
        })
    }
}

impl<R: Read + Seek> FeatureReader<R> {
    /// Parses and size-checks the header of `source`; the manifest is built from it by `manifest`.
    pub fn with_manifest(
        mut source: R,
        manifest: impl FnOnce(&FeatureFileHeader) -> Result<DatasetManifest>,
    ) -> Result<Self> {
        source.seek(SeekFrom::Start(0))?;
        let header = FeatureFileHeader::read_from(&mut source)?;
        let total = source.seek(SeekFrom::End(0))?;
        let expected = header.encoded_len() + header.payload_len().expect("checked in read_from");
        if total < expected {
            return Err(GistError::Corruption(format!(
                "payload truncated: file has {total} bytes, header declares {expected}"
            )));
        }
        if total > expected {
            return Err(GistError::Corruption(format!(
                "{} trailing bytes after the declared payload",
                total - expected
            )));
        }
        let manifest = manifest(&header)?;
        if manifest.entries.len() as u64 != header.n_rows {
            return Err(GistError::Corruption(format!(
                "manifest lists {} examples but the header declares {}",
                manifest.entries.len(),
                header.n_rows
            )));
        }
        Ok(Self {
            source,
            header,
            manifest,
        })
    }

    /// A reader whose ids are synthesized as `row-<index>`; for sources without a sidecar.
    pub fn without_manifest(source: R, pool: PoolKind) -> Result<Self> {
        Self::with_manifest(source, |h| {
            let ids: Vec<String> = (0..h.n_rows).map(|i| format!("row-{i}")).collect();
            DatasetManifest::for_header(h, &ids, pool)
        })
    }

    pub fn header(&self) -> &FeatureFileHeader {
        &self.header
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn n_rows(&self) -> usize {
        self.header.n_rows as usize
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    /// Reads `row_range` (all rows when `None`).
    pub fn read(&mut self, row_range: Option<Range<usize>>) -> Result<GradientMatrix> {
        let n = self.n_rows();
        let range = row_range.unwrap_or(0..n);
        if range.start > range.end || range.end > n {
            return Err(GistError::arg(format!(
                "row range {range:?} outside [0, {n})"
            )));
        }
        let dim = self.dim();
        let offset = self.header.encoded_len() + range.start as u64 * self.header.row_bytes();
        self.source.seek(SeekFrom::Start(offset))?;
        let mut bytes = vec![0u8; range.len() * dim * 4];
        self.source.read_exact(&mut bytes).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                GistError::Corruption(format!("payload truncated while reading rows {range:?}"))
            } else {
                GistError::Io(e)
            }
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(GistError::Corruption(format!(
                "non-finite value in row {}",
                range.start + pos / dim
            )));
        }
        let ids = self.manifest.entries[range]
            .iter()
            .map(|e| e.example_id.clone())
            .collect();
        GradientMatrix::new(data, dim, ids, self.header.checkpoint_tag.clone())
    }

    /// Streams all rows in order, `chunk_rows` at a time; the last chunk may be short.
    pub fn chunks(&mut self, chunk_rows: usize) -> Result<ChunkStream<'_, R>> {
        if chunk_rows == 0 {
            return Err(GistError::arg("chunk_rows must be positive"));
        }
        let n = self.n_rows();
        Ok(ChunkStream {
            reader: self,
            next: 0,
            n,
            chunk_rows,
        })
    }
}

/// Reads `source` fully or a half-open row range of it.
pub fn read_features<R: Read + Seek>(
    reader: &mut FeatureReader<R>,
    row_range: Option<Range<usize>>,
) -> Result<GradientMatrix> {
    reader.read(row_range)
}

pub fn stream_chunks<R: Read + Seek>(
    reader: &mut FeatureReader<R>,
    chunk_rows: usize,
) -> Result<ChunkStream<'_, R>> {
    reader.chunks(chunk_rows)
}

/// Contiguous, in-order chunks over a [`FeatureReader`].
pub struct ChunkStream<'a, R> {
    reader: &'a mut FeatureReader<R>,
    next: usize,
    n: usize,
    chunk_rows: usize,
}

impl<R: Read + Seek> Iterator for ChunkStream<'_, R> {
    type Item = Result<GradientMatrix>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.n {
            return None;
        }
        let end = (self.next + self.chunk_rows).min(self.n);
        let range = self.next..end;
        self.next = end;
        Some(self.reader.read(Some(range)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.n - self.next).div_ceil(self.chunk_rows);
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ex{i}")).collect()
    }

    fn sample(n: usize, d: usize) -> GradientMatrix {
        let data = (0..n * d).map(|i| (i as f32) * 0.5 - 3.0).collect();
        GradientMatrix::new(data, d, ids(n), "ckpt-1").unwrap()
    }

    fn reader_for(m: &GradientMatrix) -> FeatureReader<Cursor<Vec<u8>>> {
        let mut buf = Vec::new();
        write_features(m, &mut buf).unwrap();
        let ids = m.example_ids().to_vec();
        FeatureReader::with_manifest(Cursor::new(buf), |h| {
            DatasetManifest::for_header(h, &ids, PoolKind::Candidate)
        })
        .unwrap()
    }

    #[test]
    fn one_by_three_has_twelve_payload_bytes() {
        let m = GradientMatrix::new(vec![1.0, 2.0, 3.0], 3, ids(1), "t").unwrap();
        let mut buf = Vec::new();
        let h = write_features(&m, &mut buf).unwrap();
        assert_eq!(buf.len() as u64, h.encoded_len() + 12);
        assert_eq!(&buf[..8], b"GISTFEAT");
        assert_eq!(
            f32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap()),
            3.0
        );
    }

    #[test]
    fn empty_pool_is_a_valid_file() {
        let m = GradientMatrix::empty(5, "t").unwrap();
        let mut r = reader_for(&m);
        assert_eq!(r.header().n_rows, 0);
        let back = r.read(None).unwrap();
        assert!(back.is_empty());
        assert_eq!(r.chunks(3).unwrap().count(), 0);
    }

    #[test]
    fn row_range_slices() {
        let m = sample(7, 5);
        let mut r = reader_for(&m);
        let part = r.read(Some(2..4)).unwrap();
        assert_eq!(part, m.slice_rows(2..4).unwrap());
        assert_eq!(part.example_ids(), &["ex2".to_string(), "ex3".to_string()]);
        assert!(matches!(r.read(Some(5..8)), Err(GistError::Argument(_))));
    }

    #[test]
    fn chunk_sizes() {
        let m = sample(7, 5);
        let mut r = reader_for(&m);
        let sizes: Vec<usize> = r.chunks(3).unwrap().map(|c| c.unwrap().n_rows()).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
        let sizes: Vec<usize> = r
            .chunks(100)
            .unwrap()
            .map(|c| c.unwrap().n_rows())
            .collect();
        assert_eq!(sizes, vec![7]);
        assert!(r.chunks(0).is_err());
    }

    #[test]
    fn chunk_concatenation_equals_full_read() {
        let m = sample(7, 5);
        let mut r = reader_for(&m);
        let parts: Vec<_> = r.chunks(3).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(
            GradientMatrix::concat(&parts).unwrap(),
            r.read(None).unwrap()
        );
    }

    #[test]
    fn non_finite_rejected_with_row() {
        let mut data = vec![0.0f32; 6];
        data[4] = f32::NAN;
        match GradientMatrix::new(data, 2, ids(3), "t") {
            Err(GistError::Validation { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = GradientMatrix::new(vec![0.0; 4], 2, vec!["a".into(), "a".into()], "t");
        assert!(matches!(err, Err(GistError::Validation { row: 1, .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let m = sample(2, 3);
        let mut buf = Vec::new();
        write_features(&m, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = FeatureReader::without_manifest(Cursor::new(bad), PoolKind::Target).unwrap_err();
        assert!(matches!(err, GistError::Format(_)));

        let mut bad = buf.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = FeatureReader::without_manifest(Cursor::new(bad), PoolKind::Target).unwrap_err();
        assert!(matches!(err, GistError::Format(_)));
    }

    #[test]
    fn truncated_and_padded_payloads() {
        let m = sample(3, 4);
        let mut buf = Vec::new();
        write_features(&m, &mut buf).unwrap();

        let short = buf[..buf.len() - 1].to_vec();
        let err =
            FeatureReader::without_manifest(Cursor::new(short), PoolKind::Target).unwrap_err();
        assert!(matches!(err, GistError::Corruption(_)));

        let mut long = buf.clone();
        long.push(0);
        let err = FeatureReader::without_manifest(Cursor::new(long), PoolKind::Target).unwrap_err();
        assert!(matches!(err, GistError::Corruption(_)));

        let err =
            FeatureReader::without_manifest(Cursor::new(buf[..10].to_vec()), PoolKind::Target)
                .unwrap_err();
        assert!(matches!(err, GistError::Format(_)));
    }

    #[test]
    fn manifest_round_trip_and_mismatch() {
        let m = sample(3, 2);
        let h = m.header();
        let man = DatasetManifest::for_header(&h, m.example_ids(), PoolKind::Target).unwrap();
        let mut text = Vec::new();
        man.write_jsonl(&mut text).unwrap();
        let first = String::from_utf8(text.clone()).unwrap();
        assert!(first.starts_with(r#"{"example_id":"ex0","row_index":0}"#));
        let back = DatasetManifest::read_jsonl(Cursor::new(&text), &h, PoolKind::Target).unwrap();
        assert_eq!(back, man);

        let short_header = FeatureFileHeader::new(4, 2, "ckpt-1");
        let err = DatasetManifest::read_jsonl(Cursor::new(&text), &short_header, PoolKind::Target);
        assert!(matches!(err, Err(GistError::Corruption(_))));
    }
}
