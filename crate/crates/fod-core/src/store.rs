//! Bit-exact file formats: FOD containers, mask containers, scale tables,
//! model checkpoints, and dataset manifests.
//!
//! All containers share one framing: a 4-byte magic, a u16 little-endian
//! format version, a u32 header length, a UTF-8 `key = value` header, and a
//! raw little-endian payload. Readers validate every field and report the
//! byte offset of the first violation.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{FodError, Result};
use crate::kvtext::{fnv1a64, KvDoc, KvSection};
use crate::spharm::{FodImage, ScaleTable, N_VOLUMES};

pub const FORMAT_VERSION: u16 = 1;
pub const FOD_MAGIC: [u8; 4] = *b"FODC";
pub const MASK_MAGIC: [u8; 4] = *b"FODM";
pub const SCALE_MAGIC: [u8; 4] = *b"FODS";
pub const CKPT_MAGIC: [u8; 4] = *b"FODK";

fn write_framed(path: &Path, magic: [u8; 4], header: &str, payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(10 + header.len() + payload.len());
    bytes.extend_from_slice(&magic);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(payload);
    std::fs::write(path, &bytes).map_err(|e| FodError::io(path, e))
}

/// Returns (header text, payload bytes, payload byte offset).
fn read_framed(path: &Path, magic: [u8; 4]) -> Result<(String, Vec<u8>, u64)> {
    let mut file = std::fs::File::open(path).map_err(|e| FodError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| FodError::io(path, e))?;

    if bytes.len() < 10 {
        return Err(FodError::format(
            bytes.len() as u64,
            format!("file too short for framing: {} bytes", bytes.len()),
        ));
    }
    if bytes[0..4] != magic {
        return Err(FodError::format(
            0,
            format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(FodError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + header_len {
        return Err(FodError::format(
            bytes.len() as u64,
            format!(
                "truncated header: expected {} bytes, got {}",
                10 + header_len,
                bytes.len()
            ),
        ));
    }
    let header = String::from_utf8(bytes[10..10 + header_len].to_vec())
        .map_err(|e| FodError::format(10 + e.utf8_error().valid_up_to() as u64, "header is not UTF-8"))?;
    let payload = bytes[10 + header_len..].to_vec();
    Ok((header, payload, 10 + header_len as u64))
}

fn header_doc(header: &str) -> Result<KvDoc> {
    KvDoc::parse(header)
}

fn expect_payload_len(payload: &[u8], expected: usize, offset: u64) -> Result<()> {
    if payload.len() != expected {
        return Err(FodError::format(
            offset + payload.len().min(expected) as u64,
            format!(
                "payload length mismatch: expected {expected} bytes, got {}",
                payload.len()
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// FOD containers
// ---------------------------------------------------------------------------

pub fn write_fod(path: impl AsRef<Path>, image: &FodImage) -> Result<()> {
    image.validate()?;
    let (x, y, z) = image.dims;
    let mut sec = KvSection::new("");
    sec.set("dims", format!("{x} {y} {z}"))
        .set("n_volumes", N_VOLUMES)
        .set("l_max", 8)
        .set("voxel_size", format!("{:?}", image.voxel_size))
        .set("dtype", "f32le");
    let mut doc = KvDoc::new();
    doc.push(sec);

    let coeffs = image.coeffs.as_standard_layout();
    let mut payload = Vec::with_capacity(coeffs.len() * 4);
    for &c in coeffs.as_slice().expect("standard layout") {
        payload.extend_from_slice(&c.to_le_bytes());
    }
    write_framed(path.as_ref(), FOD_MAGIC, &doc.to_text(), &payload)
}

pub fn read_fod(path: impl AsRef<Path>) -> Result<FodImage> {
    let path = path.as_ref();
    let (header, payload, payload_offset) = read_framed(path, FOD_MAGIC)?;
    let doc = header_doc(&header)?;
    let dims: Vec<usize> = doc.get_list("", "dims")?;
    if dims.len() != 3 {
        return Err(FodError::format(10, "dims must have three entries"));
    }
    let n_volumes: usize = doc.get_parsed("", "n_volumes")?;
    if n_volumes != N_VOLUMES {
        return Err(FodError::format(
            10,
            format!("unsupported n_volumes {n_volumes}, expected {N_VOLUMES}"),
        ));
    }
    let dtype = doc.get("", "dtype").unwrap_or("");
    if dtype != "f32le" {
        return Err(FodError::format(10, format!("unsupported dtype {dtype:?}")));
    }
    let voxel_size: f32 = doc.get_parsed("", "voxel_size")?;
    let (x, y, z) = (dims[0], dims[1], dims[2]);
    let n = x * y * z * N_VOLUMES;
    expect_payload_len(&payload, n * 4, payload_offset)?;

    let mut values = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(FodError::format(
                payload_offset + (i * 4) as u64,
                "non-finite coefficient in payload",
            ));
        }
        values.push(v);
    }
    let coeffs = ndarray::Array4::from_shape_vec((x, y, z, N_VOLUMES), values)
        .expect("shape checked above");
    let brain_mask = FodImage::support_mask(&coeffs);
    Ok(FodImage {
        dims: (x, y, z),
        coeffs,
        voxel_size,
        brain_mask,
    })
}

// ---------------------------------------------------------------------------
// Mask containers
// ---------------------------------------------------------------------------

pub fn write_mask(
    path: impl AsRef<Path>,
    mask: &Array3<u8>,
    severity: f32,
) -> Result<()> {
    let (x, y, z) = mask.dim();
    if mask.iter().any(|&v| v > 1) {
        return Err(FodError::invalid("mask values must be 0 or 1"));
    }
    let mut sec = KvSection::new("");
    sec.set("dims", format!("{x} {y} {z}"))
        .set("severity", format!("{severity:?}"))
        .set("dtype", "u8");
    let mut doc = KvDoc::new();
    doc.push(sec);
    let std_mask = mask.as_standard_layout();
    write_framed(
        path.as_ref(),
        MASK_MAGIC,
        &doc.to_text(),
        std_mask.as_slice().expect("standard layout"),
    )
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(Array3<u8>, f32)> {
    let path = path.as_ref();
    let (header, payload, payload_offset) = read_framed(path, MASK_MAGIC)?;
    let doc = header_doc(&header)?;
    let dims: Vec<usize> = doc.get_list("", "dims")?;
    if dims.len() != 3 {
        return Err(FodError::format(10, "dims must have three entries"));
    }
    let severity: f32 = doc.get_parsed("", "severity")?;
    let n = dims[0] * dims[1] * dims[2];
    expect_payload_len(&payload, n, payload_offset)?;
    for (i, &b) in payload.iter().enumerate() {
        if b > 1 {
            return Err(FodError::format(
                payload_offset + i as u64,
                format!("mask byte must be 0 or 1, found {b}"),
            ));
        }
    }
    let mask = Array3::from_shape_vec((dims[0], dims[1], dims[2]), payload)
        .expect("shape checked above");
    Ok((mask, severity))
}

// ---------------------------------------------------------------------------
// Scale tables
// ---------------------------------------------------------------------------

pub fn write_scale_table(path: impl AsRef<Path>, table: &ScaleTable) -> Result<()> {
    table.validate()?;
    let mut sec = KvSection::new("");
    sec.set("orders", "0 2 4 6 8");
    let mut doc = KvDoc::new();
    doc.push(sec);
    let mut payload = Vec::with_capacity(20);
    for s in table.scale {
        payload.extend_from_slice(&s.to_le_bytes());
    }
    write_framed(path.as_ref(), SCALE_MAGIC, &doc.to_text(), &payload)
}

pub fn read_scale_table(path: impl AsRef<Path>) -> Result<ScaleTable> {
    let path = path.as_ref();
    let (_, payload, payload_offset) = read_framed(path, SCALE_MAGIC)?;
    expect_payload_len(&payload, 20, payload_offset)?;
    let mut scale = [0.0f32; 5];
    for (i, s) in scale.iter_mut().enumerate() {
        let b = &payload[i * 4..i * 4 + 4];
        *s = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    let table = ScaleTable { scale };
    table.validate()?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Full training state: metadata, normalization scales, rng state, model
/// parameters, and optimizer moments.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Structured metadata: `[checkpoint]`, `[net]`, `[train]`, `[schedule]`
    /// sections. Stored verbatim so config digests are stable.
    pub meta: KvDoc,
    pub scale: ScaleTable,
    pub rng_state: [u64; 5],
    pub params: Vec<(String, ArrayD<f32>)>,
    pub opt_m: Vec<ArrayD<f32>>,
    pub opt_v: Vec<ArrayD<f32>>,
    pub opt_step: u64,
}

fn push_tensor(bytes: &mut Vec<u8>, t: &ArrayD<f32>) {
    bytes.extend_from_slice(&(t.ndim() as u8).to_le_bytes());
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let std = t.as_standard_layout();
    for &v in std.as_slice().expect("standard layout") {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(FodError::format(
                self.base + self.bytes.len() as u64,
                format!(
                    "truncated checkpoint while reading {what}: expected {} bytes, got {}",
                    self.pos + n,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, what: &str) -> Result<ArrayD<f32>> {
        let ndim = self.u8(what)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32(what)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f32(what)?);
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape matches data"))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    for s in ckpt.scale.scale {
        payload.extend_from_slice(&s.to_le_bytes());
    }
    for w in ckpt.rng_state {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    payload.extend_from_slice(&ckpt.opt_step.to_le_bytes());
    payload.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (i, (name, tensor)) in ckpt.params.iter().enumerate() {
        payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        push_tensor(&mut payload, tensor);
        push_tensor(&mut payload, &ckpt.opt_m[i]);
        push_tensor(&mut payload, &ckpt.opt_v[i]);
    }
    write_framed(path.as_ref(), CKPT_MAGIC, &ckpt.meta.to_text(), &payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let (header, payload, payload_offset) = read_framed(path, CKPT_MAGIC)?;
    let meta = header_doc(&header)?;
    let mut cur = Cursor {
        bytes: &payload,
        pos: 0,
        base: payload_offset,
    };
    let mut scale = [0.0f32; 5];
    for s in scale.iter_mut() {
        *s = cur.f32("scale table")?;
    }
    let mut rng_state = [0u64; 5];
    for w in rng_state.iter_mut() {
        *w = cur.u64("rng state")?;
    }
    let opt_step = cur.u64("optimizer step")?;
    let n_params = cur.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params);
    let mut opt_m = Vec::with_capacity(n_params);
    let mut opt_v = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u16("parameter name length")? as usize;
        let name_bytes = cur.take(name_len, "parameter name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| FodError::format(payload_offset + cur.pos as u64, "parameter name not UTF-8"))?;
        let tensor = cur.tensor(&name)?;
        opt_m.push(cur.tensor(&name)?);
        opt_v.push(cur.tensor(&name)?);
        params.push((name, tensor));
    }
    if cur.pos != payload.len() {
        return Err(FodError::format(
            payload_offset + cur.pos as u64,
            format!("{} trailing bytes after checkpoint", payload.len() - cur.pos),
        ));
    }
    Ok(Checkpoint {
        meta,
        scale: ScaleTable { scale },
        rng_state,
        params,
        opt_m,
        opt_v,
        opt_step,
    })
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

/// One dataset item: paths are relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct ItemRef {
    pub id: String,
    pub gt: PathBuf,
    pub corrupted: PathBuf,
    pub mask: PathBuf,
    pub brain: PathBuf,
    pub severity: f32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub doc: KvDoc,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FodError::io(path, e))?;
        let doc = KvDoc::parse(&text)?;
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(DatasetManifest { doc, root })
    }

    pub fn items(&self, split: &str) -> Result<Vec<ItemRef>> {
        let ids: Vec<String> = self.doc.get_list(&format!("split {split}"), "items")?;
        ids.iter().map(|id| self.item(id)).collect()
    }

    pub fn item(&self, id: &str) -> Result<ItemRef> {
        let sec = format!("item {id}");
        let rel = |key: &str| -> Result<PathBuf> {
            let p: String = self.doc.get_parsed(&sec, key)?;
            Ok(self.root.join(p))
        };
        Ok(ItemRef {
            id: id.to_string(),
            gt: rel("gt")?,
            corrupted: rel("corrupted")?,
            mask: rel("mask")?,
            brain: rel("brain")?,
            severity: self.doc.get_parsed(&sec, "severity")?,
            seed: self.doc.get_parsed(&sec, "seed")?,
        })
    }
}

/// Loaded item: ground truth and corrupted images carry the stored brain
/// mask rather than the support-derived one.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub id: String,
    pub gt: FodImage,
    pub corrupted: FodImage,
    pub mask: Array3<u8>,
    pub severity: f32,
}

pub fn load_item(item: &ItemRef) -> Result<LoadedItem> {
    let (brain, _) = read_mask(&item.brain)?;
    let mut gt = read_fod(&item.gt)?;
    let mut corrupted = read_fod(&item.corrupted)?;
    gt.brain_mask = brain.clone();
    corrupted.brain_mask = brain;
    let (mask, severity) = read_mask(&item.mask)?;
    Ok(LoadedItem {
        id: item.id.clone(),
        gt,
        corrupted,
        mask,
        severity,
    })
}

/// Digest of a file's bytes; used to compare manifests across runs.
pub fn file_digest(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FodError::io(path, e))?;
    Ok(fnv1a64(&bytes))
}
