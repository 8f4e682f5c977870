//! Embedding bundles and the immutable store that all scoring reads from.
//!
//! A bundle file holds one kind of rows (images with labels, or texts with a
//! JSON metadata sidecar). An [`EmbeddingStore`] joins one image bundle with
//! any number of text bundles; text ids are positions in the concatenated
//! text matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PAPO";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

/// Rows whose norm is already this close to 1 are kept verbatim so that
/// save/load round-trips bit-exactly.
const UNIT_TOLERANCE: f64 = 1e-6;
const ZERO_NORM: f64 = 1e-12;

/// Dense row-major float32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimZero);
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidBundle(format!(
                "{} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidBundle(format!(
                    "row {i} has length {} (expected {dim})",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rescales every row to unit L2 norm.
    pub fn normalize_rows(&mut self) -> Result<()> {
        let dim = self.dim;
        for (i, row) in self.data.chunks_exact_mut(dim).enumerate() {
            normalize_in_place(row).map_err(|_| Error::ZeroNormRow { row: i })?;
        }
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.iter_rows().map(|r| (l2_norm(r) - 1.0).abs()).fold(0.0, f64::max)
    }

    fn append(&mut self, other: &Matrix) {
        debug_assert_eq!(self.dim, other.dim);
        self.data.extend_from_slice(&other.data);
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Dot product with float64 accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Normalizes `row` in place. Fails on rows with norm below 1e-12.
pub fn normalize_in_place(row: &mut [f32]) -> std::result::Result<(), ()> {
    let norm = l2_norm(row);
    if !norm.is_finite() || norm < ZERO_NORM {
        return Err(());
    }
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        for x in row.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    TemplateInstance,
    Description,
    SynonymInstance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMeta {
    pub kind: TextKind,
    pub class_id: usize,
    pub template_id: Option<usize>,
    pub source_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBundle {
    pub n_classes: usize,
    pub matrix: Matrix,
    pub labels: Vec<u32>,
}

impl ImageBundle {
    pub fn new(n_classes: usize, matrix: Matrix, labels: Vec<u32>) -> Result<Self> {
        let b = Self {
            n_classes,
            matrix,
            labels,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidBundle("n_classes is zero".into()));
        }
        if self.labels.len() != self.matrix.rows() {
            return Err(Error::InvalidBundle(format!(
                "{} labels for {} rows",
                self.labels.len(),
                self.matrix.rows()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.n_classes)
        {
            return Err(Error::InvalidBundle(format!(
                "label {l} of image {i} is >= n_classes {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_bundle(path.as_ref())? {
            Bundle::Image(b) => Ok(b),
            Bundle::Text(_) => Err(Error::InvalidBundle(format!(
                "{}: expected an image bundle, found a text bundle",
                path.as_ref().display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBundle {
    pub n_classes: usize,
    pub matrix: Matrix,
    pub meta: Vec<TextMeta>,
    /// Fingerprint of the encode manifest these rows were produced from.
    pub fingerprint: Option<String>,
}

impl TextBundle {
    pub fn new(n_classes: usize, matrix: Matrix, meta: Vec<TextMeta>, fingerprint: Option<String>) -> Result<Self> {
        let b = Self {
            n_classes,
            matrix,
            meta,
            fingerprint,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidBundle("n_classes is zero".into()));
        }
        if self.meta.len() != self.matrix.rows() {
            return Err(Error::InvalidBundle(format!(
                "{} metadata entries for {} text rows",
                self.meta.len(),
                self.matrix.rows()
            )));
        }
        for (i, m) in self.meta.iter().enumerate() {
            if m.class_id >= self.n_classes {
                return Err(Error::InvalidBundle(format!(
                    "text {i} has class {} >= n_classes {}",
                    m.class_id, self.n_classes
                )));
            }
            if m.kind == TextKind::TemplateInstance && m.template_id.is_none() {
                return Err(Error::InvalidBundle(format!(
                    "template instance {i} lacks a template id"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_bundle(path.as_ref())? {
            Bundle::Text(b) => Ok(b),
            Bundle::Image(_) => Err(Error::InvalidBundle(format!(
                "{}: expected a text bundle, found an image bundle",
                path.as_ref().display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Image(ImageBundle),
    Text(TextBundle),
}

impl Bundle {
    fn parts(&self) -> (u8, usize, &Matrix) {
        match self {
            Bundle::Image(b) => (0, b.n_classes, &b.matrix),
            Bundle::Text(b) => (1, b.n_classes, &b.matrix),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    text_id: usize,
    kind: TextKind,
    class_id: usize,
    template_id: Option<usize>,
    source_text: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    texts: Vec<SidecarEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SidecarFile {
    Full(Sidecar),
    Bare(Vec<SidecarEntry>),
}

pub fn sidecar_path(bundle: &Path) -> PathBuf {
    let mut s = bundle.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Reads a bundle file (and its sidecar, for text bundles). Rows are
/// renormalized to unit length.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);

    let mut header = [0u8; HEADER_LEN];
    if file_len < HEADER_LEN as u64 {
        return Err(Error::BadMagic { path: path.into() });
    }
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if header[0..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
        });
    }
    let kind = header[6];
    if kind > 1 {
        return Err(Error::InvalidBundle(format!("unknown bundle kind {kind}")));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_rows = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let n_classes = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::DimZero);
    }

    let per_row = dim as u64 * 4 + if kind == 0 { 4 } else { 0 };
    let payload = n_rows
        .checked_mul(per_row)
        .ok_or(Error::RowCountOverflow { rows: n_rows })?;
    let available = file_len - HEADER_LEN as u64;
    if payload > available {
        return Err(Error::RowCountOverflow { rows: n_rows });
    }
    if payload < available {
        return Err(Error::InvalidBundle(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            available - payload
        )));
    }
    let n = usize::try_from(n_rows).map_err(|_| Error::RowCountOverflow { rows: n_rows })?;

    let mut buf = vec![0u8; n * dim * 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut matrix = Matrix::new(dim, data)?;
    matrix.normalize_rows()?;

    if kind == 0 {
        let mut lbuf = vec![0u8; n * 4];
        r.read_exact(&mut lbuf).map_err(|e| Error::io(path, e))?;
        let labels = lbuf
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Bundle::Image(ImageBundle::new(n_classes, matrix, labels)?))
    } else {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let parsed: SidecarFile = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let (fingerprint, mut entries) = match parsed {
            SidecarFile::Full(s) => (s.fingerprint, s.texts),
            SidecarFile::Bare(v) => (None, v),
        };
        entries.sort_by_key(|e| e.text_id);
        if entries.iter().enumerate().any(|(i, e)| e.text_id != i) {
            return Err(Error::InvalidBundle(format!(
                "{}: text ids are not dense 0..{}",
                side.display(),
                n
            )));
        }
        let meta = entries
            .into_iter()
            .map(|e| TextMeta {
                kind: e.kind,
                class_id: e.class_id,
                template_id: e.template_id,
                source_text: e.source_text,
            })
            .collect();
        Ok(Bundle::Text(TextBundle::new(n_classes, matrix, meta, fingerprint)?))
    }
}

/// Writes a bundle in the little-endian binary layout; text bundles also get
/// a `<path>.meta.json` sidecar.
pub fn save_bundle(bundle: &Bundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (kind, n_classes, matrix) = bundle.parts();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[kind, 0]).map_err(io)?;
    w.write_all(&(matrix.dim() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(matrix.rows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(n_classes as u32).to_le_bytes()).map_err(io)?;
    for x in matrix.as_slice() {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    match bundle {
        Bundle::Image(b) => {
            for l in &b.labels {
                w.write_all(&l.to_le_bytes()).map_err(io)?;
            }
        }
        Bundle::Text(b) => {
            let side = Sidecar {
                fingerprint: b.fingerprint.clone(),
                texts: b
                    .meta
                    .iter()
                    .enumerate()
                    .map(|(i, m)| SidecarEntry {
                        text_id: i,
                        kind: m.kind,
                        class_id: m.class_id,
                        template_id: m.template_id,
                        source_text: m.source_text.clone(),
                    })
                    .collect(),
            };
            let side_path = sidecar_path(path);
            let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
            std::fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Image rows with labels plus the concatenated text rows of one or more
/// text bundles. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    n_classes: usize,
    images: Matrix,
    labels: Vec<u32>,
    texts: Matrix,
    text_meta: Vec<TextMeta>,
    segments: Vec<Range<usize>>,
    fingerprints: Vec<Option<String>>,
}

impl EmbeddingStore {
    pub fn new(images: ImageBundle, text_bundles: Vec<TextBundle>) -> Result<Self> {
        let dim = images.matrix.dim();
        let n_classes = images.n_classes;
        let mut texts = Matrix::empty(dim);
        let mut text_meta = Vec::new();
        let mut segments = Vec::new();
        let mut fingerprints = Vec::new();
        for (i, tb) in text_bundles.into_iter().enumerate() {
            if tb.matrix.dim() != dim {
                return Err(Error::InvalidBundle(format!(
                    "text bundle {i} has dim {} but images have dim {dim}",
                    tb.matrix.dim()
                )));
            }
            if tb.n_classes != n_classes {
                return Err(Error::InvalidBundle(format!(
                    "text bundle {i} has {} classes but images have {n_classes}",
                    tb.n_classes
                )));
            }
            let start = texts.rows();
            texts.append(&tb.matrix);
            text_meta.extend(tb.meta);
            segments.push(start..texts.rows());
            fingerprints.push(tb.fingerprint);
        }
        Ok(Self {
            dim,
            n_classes,
            images: images.matrix,
            labels: images.labels,
            texts,
            text_meta,
            segments,
            fingerprints,
        })
    }

    /// Loads an image bundle and text bundles from disk.
    pub fn open<P: AsRef<Path>>(image_path: P, text_paths: &[P]) -> Result<Self> {
        let images = ImageBundle::load(image_path)?;
        let texts = text_paths.iter().map(TextBundle::load).collect::<Result<Vec<_>>>()?;
        Self::new(images, texts)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
    pub fn n_images(&self) -> usize {
        self.labels.len()
    }
    pub fn n_texts(&self) -> usize {
        self.text_meta.len()
    }
    pub fn images(&self) -> &Matrix {
        &self.images
    }
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
    pub fn texts(&self) -> &Matrix {
        &self.texts
    }
    pub fn text_meta(&self) -> &[TextMeta] {
        &self.text_meta
    }
    pub fn meta(&self, text_id: usize) -> Option<&TextMeta> {
        self.text_meta.get(text_id)
    }
    /// Text-id range contributed by the `i`-th text bundle.
    pub fn segment(&self, i: usize) -> Option<Range<usize>> {
        self.segments.get(i).cloned()
    }
    pub fn segment_fingerprint(&self, i: usize) -> Option<&str> {
        self.fingerprints.get(i).and_then(|f| f.as_deref())
    }
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Same texts, different images; used to score a prompt on another split.
    pub fn with_images(&self, images: ImageBundle) -> Result<Self> {
        if images.matrix.dim() != self.dim || images.n_classes != self.n_classes {
            return Err(Error::InvalidBundle(
                "image bundle shape does not match text store".into(),
            ));
        }
        Ok(Self {
            images: images.matrix,
            labels: images.labels,
            ..self.clone()
        })
    }

    pub fn image_bundle(&self) -> ImageBundle {
        ImageBundle {
            n_classes: self.n_classes,
            matrix: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn text_bundle(&self, segment: usize) -> Option<TextBundle> {
        let range = self.segment(segment)?;
        let data = self.texts.as_slice()[range.start * self.dim..range.end * self.dim].to_vec();
        Some(TextBundle {
            n_classes: self.n_classes,
            matrix: Matrix::new(self.dim, data).ok()?,
            meta: self.text_meta[range].to_vec(),
            fingerprint: self.fingerprints[segment].clone(),
        })
    }

    /// Image indices grouped by label.
    pub fn images_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image_bundle() -> ImageBundle {
        let m = Matrix::from_rows(
            3,
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.6, 0.8, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        )
        .unwrap();
        ImageBundle::new(2, m, vec![0, 1, 1, 0]).unwrap()
    }

    #[test]
    fn normalizes_three_four_row() {
        let mut m = Matrix::from_rows(4, &[vec![3.0, 4.0, 0.0, 0.0]]).unwrap();
        m.normalize_rows().unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((m.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(m.row(0)[2], 0.0);
    }

    #[test]
    fn zero_row_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.bin");
        // bypass normalization by building the matrix directly
        let m = Matrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Bundle::Image(ImageBundle::new(1, m, vec![0, 0]).unwrap());
        save_bundle(&b, &p).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::ZeroNormRow { row: 1 })));
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.bin");
        save_bundle(&Bundle::Image(tiny_image_bundle()), &p).unwrap();
        let len = std::fs::metadata(&p).unwrap().len();
        // 24-byte header, 4 rows x 3 floats, 4 labels
        assert_eq!(len, 24 + 4 * 3 * 4 + 4 * 4);
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.bin");
        let b = tiny_image_bundle();
        save_bundle(&Bundle::Image(b.clone()), &p).unwrap();
        let back = ImageBundle::load(&p).unwrap();
        assert_eq!(back, b);
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.matrix), bits(&b.matrix));
    }

    #[test]
    fn text_round_trip_keeps_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("txt.bin");
        let m = Matrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let meta = vec![
            TextMeta {
                kind: TextKind::TemplateInstance,
                class_id: 0,
                template_id: Some(0),
                source_text: "a photo of a cat.".into(),
            },
            TextMeta {
                kind: TextKind::Description,
                class_id: 1,
                template_id: Some(0),
                source_text: "a photo of a dog. it barks.".into(),
            },
        ];
        let b = TextBundle::new(2, m, meta, Some("abc".into())).unwrap();
        save_bundle(&Bundle::Text(b.clone()), &p).unwrap();
        assert!(sidecar_path(&p).exists());
        assert_eq!(TextBundle::load(&p).unwrap(), b);
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, vec![0u8; 64]).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::BadMagic { .. })));

        let good = dir.path().join("img.bin");
        save_bundle(&Bundle::Image(tiny_image_bundle()), &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 2;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn oversized_row_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.bin");
        save_bundle(&Bundle::Image(tiny_image_bundle()), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::RowCountOverflow { .. })));
    }

    #[test]
    fn dim_zero_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.bin");
        save_bundle(&Bundle::Image(tiny_image_bundle()), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::DimZero)));
    }

    #[test]
    fn save_to_missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("no/such/dir/img.bin");
        let err = save_bundle(&Bundle::Image(tiny_image_bundle()), &p).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn store_concatenates_text_segments() {
        let m = |rows: &[Vec<f32>]| Matrix::from_rows(3, rows).unwrap();
        let meta = |c| TextMeta {
            kind: TextKind::Description,
            class_id: c,
            template_id: None,
            source_text: format!("t{c}"),
        };
        let a = TextBundle::new(2, m(&[vec![1.0, 0.0, 0.0]]), vec![meta(0)], None).unwrap();
        let b = TextBundle::new(
            2,
            m(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
            vec![meta(1), meta(1)],
            Some("fp".into()),
        )
        .unwrap();
        let s = EmbeddingStore::new(tiny_image_bundle(), vec![a, b]).unwrap();
        assert_eq!(s.n_texts(), 3);
        assert_eq!(s.segment(1), Some(1..3));
        assert_eq!(s.segment_fingerprint(1), Some("fp"));
        assert_eq!(s.text_bundle(1).unwrap().matrix.rows(), 2);
        assert_eq!(s.images_by_class(), vec![vec![0, 3], vec![1, 2]]);
    }
}
