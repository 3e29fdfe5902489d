//! Hashed embedding tables.
//!
//! Raw 64-bit entity ids are mapped onto a fixed number of rows with the
//! SplitMix64 finalizer followed by a modulo reduction. Colliding ids share
//! a row; there is no probing or chaining. Tables are immutable once built
//! and every lookup widens to `f32` regardless of the storage dtype.
//!
//! Tables persist in the PEMB format (little-endian throughout):
//!
//! ```text
//! "PEMB" | format_version u16 | dtype u8 | reserved u8
//! | table_id_len u16 | table_id | version_id_len u16 | version_id
//! | num_rows u64 | dim u32 | group_size u32 | payload
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, Int4Store, QuantGroupParams};

pub const MAGIC: &[u8; 4] = b"PEMB";
pub const FORMAT_VERSION: u16 = 1;

/// Opaque entity identifier (user, pin, advertiser, ...). Zero is an ordinary id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u64);

impl From<u64> for EntityId {
    fn from(v: u64) -> Self {
        EntityId(v)
    }
}

/// SplitMix64 output finalizer.
#[inline]
pub fn splitmix64_mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Maps an id onto a row in `[0, num_rows)`. Stable across platforms and
/// releases: the on-disk and wire formats depend on it.
pub fn hash_to_row(id: EntityId, num_rows: usize) -> Result<usize> {
    if num_rows == 0 {
        return Err(Error::invalid("num_rows must be at least 1"));
    }
    Ok(row_for(id, num_rows))
}

#[inline]
pub(crate) fn row_for(id: EntityId, num_rows: usize) -> usize {
    (splitmix64_mix(id.0) % num_rows as u64) as usize
}

/// Expected fraction of `n_ids` uniformly hashed ids that do not end up
/// alone in a distinct bucket out of `num_rows`.
pub fn expected_collision_fraction(n_ids: u64, num_rows: u64) -> Result<f64> {
    if n_ids == 0 || num_rows == 0 {
        return Err(Error::invalid("n_ids and num_rows must both be positive"));
    }
    let n = n_ids as f64;
    let m = num_rows as f64;
    // (1 - 1/m)^n, stable for large m
    let empty = (n * (-1.0 / m).ln_1p()).exp();
    let occupied = m * (1.0 - empty);
    Ok((1.0 - occupied / n).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    Int4q,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::Int4q => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            2 => Ok(Dtype::Int4q),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
    Int4(Int4Store),
}

/// A versioned `num_rows x dim` matrix of row embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table_id: String,
    version_id: String,
    num_rows: usize,
    dim: usize,
    pub(crate) storage: Storage,
}

/// Batched lookup output, rows in query order.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupResult {
    pub dim: usize,
    pub embeddings: Vec<f32>,
    /// True where a different id in the same batch hashed to the same row.
    pub collided: Vec<bool>,
}

impl LookupResult {
    pub fn len(&self) -> usize {
        self.collided.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collided.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, so guard the degenerate case
        self.embeddings.chunks_exact(self.dim.max(1))
    }
}

fn check_header(table_id: &str, version_id: &str, num_rows: usize, dim: usize) -> Result<()> {
    if num_rows == 0 || dim == 0 {
        return Err(Error::invalid("num_rows and dim must be positive"));
    }
    if version_id.is_empty() {
        return Err(Error::invalid("version_id must be non-empty"));
    }
    if table_id.len() > u16::MAX as usize || version_id.len() > u16::MAX as usize {
        return Err(Error::invalid("identifier longer than 65535 bytes"));
    }
    Ok(())
}

impl EmbeddingTable {
    pub fn from_f32(
        table_id: impl Into<String>,
        version_id: impl Into<String>,
        num_rows: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (table_id, version_id) = (table_id.into(), version_id.into());
        check_header(&table_id, &version_id, num_rows, dim)?;
        if data.len() != num_rows * dim {
            return Err(Error::invalid(format!(
                "expected {} elements for {num_rows}x{dim}, got {}",
                num_rows * dim,
                data.len()
            )));
        }
        Ok(Self {
            table_id,
            version_id,
            num_rows,
            dim,
            storage: Storage::F32(data),
        })
    }

    pub fn from_f16(
        table_id: impl Into<String>,
        version_id: impl Into<String>,
        num_rows: usize,
        dim: usize,
        data: Vec<f16>,
    ) -> Result<Self> {
        let (table_id, version_id) = (table_id.into(), version_id.into());
        check_header(&table_id, &version_id, num_rows, dim)?;
        if data.len() != num_rows * dim {
            return Err(Error::invalid("element count does not match num_rows x dim"));
        }
        Ok(Self {
            table_id,
            version_id,
            num_rows,
            dim,
            storage: Storage::F16(data),
        })
    }

    pub(crate) fn from_int4(
        table_id: String,
        version_id: String,
        num_rows: usize,
        dim: usize,
        store: Int4Store,
    ) -> Result<Self> {
        check_header(&table_id, &version_id, num_rows, dim)?;
        if dim % 2 != 0 {
            return Err(Error::invalid("INT4 tables need an even dim"));
        }
        store.validate(num_rows, dim)?;
        Ok(Self {
            table_id,
            version_id,
            num_rows,
            dim,
            storage: Storage::Int4(store),
        })
    }

    pub fn table_id(&self) -> &str {
        &self.table_id
    }

    pub fn version_id(&self) -> &str {
        &self.version_id
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> Dtype {
        match self.storage {
            Storage::F32(_) => Dtype::F32,
            Storage::F16(_) => Dtype::F16,
            Storage::Int4(_) => Dtype::Int4q,
        }
    }

    pub fn group_size(&self) -> usize {
        match &self.storage {
            Storage::Int4(s) => s.group_size,
            _ => 0,
        }
    }

    /// Same data under a different version (and optionally table) id.
    pub fn relabeled(&self, table_id: Option<&str>, version_id: &str) -> Result<Self> {
        let table_id = table_id.unwrap_or(&self.table_id);
        check_header(table_id, version_id, self.num_rows, self.dim)?;
        let mut out = self.clone();
        out.table_id = table_id.to_string();
        out.version_id = version_id.to_string();
        Ok(out)
    }

    /// Converts a float table to half precision (round to nearest even).
    pub fn to_f16(&self) -> Result<Self> {
        let data = match &self.storage {
            Storage::F32(v) => v.iter().map(|&x| f16::from_f32(x)).collect(),
            Storage::F16(v) => v.clone(),
            Storage::Int4(_) => return Err(Error::invalid("cannot convert INT4 table to F16")),
        };
        Self::from_f16(
            self.table_id.clone(),
            self.version_id.clone(),
            self.num_rows,
            self.dim,
            data,
        )
    }

    /// Writes row `row` widened to f32 into `out` (length `dim`).
    pub fn read_row_into(&self, row: usize, out: &mut [f32]) {
        debug_assert!(row < self.num_rows);
        debug_assert_eq!(out.len(), self.dim);
        let start = row * self.dim;
        match &self.storage {
            Storage::F32(v) => out.copy_from_slice(&v[start..start + self.dim]),
            Storage::F16(v) => {
                for (o, h) in out.iter_mut().zip(&v[start..start + self.dim]) {
                    *o = h.to_f32();
                }
            }
            Storage::Int4(s) => quant::dequantize_into(s, self.dim, row, out),
        }
    }

    pub fn row(&self, row: usize) -> Result<Vec<f32>> {
        if row >= self.num_rows {
            return Err(Error::invalid(format!(
                "row {row} out of range for {} rows",
                self.num_rows
            )));
        }
        let mut out = vec![0.0; self.dim];
        self.read_row_into(row, &mut out);
        Ok(out)
    }

    /// Whole table widened to f32, row-major.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(v) => v.clone(),
            _ => {
                let mut out = vec![0.0; self.num_rows * self.dim];
                for (r, chunk) in out.chunks_exact_mut(self.dim).enumerate() {
                    self.read_row_into(r, chunk);
                }
                out
            }
        }
    }

    /// New table made of the given rows (in order), same dtype and version.
    pub fn select_rows(&self, rows: &[usize], table_id: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.num_rows) {
            return Err(Error::invalid(format!("row {bad} out of range")));
        }
        let d = self.dim;
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(rows.iter().flat_map(|&r| &v[r * d..(r + 1) * d]).copied().collect()),
            Storage::F16(v) => Storage::F16(rows.iter().flat_map(|&r| &v[r * d..(r + 1) * d]).copied().collect()),
            Storage::Int4(s) => {
                let g = s.groups_per_row;
                let b = quant::packed_row_bytes(d, s.group_size);
                Storage::Int4(Int4Store {
                    group_size: s.group_size,
                    groups_per_row: g,
                    params: rows.iter().flat_map(|&r| &s.params[r * g..(r + 1) * g]).copied().collect(),
                    codes: rows.iter().flat_map(|&r| &s.codes[r * b..(r + 1) * b]).copied().collect(),
                })
            }
        };
        let table_id = table_id.into();
        check_header(&table_id, &self.version_id, rows.len(), d)?;
        Ok(Self {
            table_id,
            version_id: self.version_id.clone(),
            num_rows: rows.len(),
            dim: d,
            storage,
        })
    }

    /// Gathers rows by index. Callers guarantee indices are in range.
    pub fn gather_rows(&self, rows: &[usize]) -> Vec<f32> {
        let mut out = vec![0.0; rows.len() * self.dim];
        for (&r, chunk) in rows.iter().zip(out.chunks_exact_mut(self.dim)) {
            self.read_row_into(r, chunk);
        }
        out
    }

    pub fn row_of(&self, id: EntityId) -> usize {
        row_for(id, self.num_rows)
    }

    pub fn lookup(&self, ids: &[EntityId]) -> LookupResult {
        let rows: Vec<usize> = ids.iter().map(|&id| self.row_of(id)).collect();
        LookupResult {
            dim: self.dim,
            embeddings: self.gather_rows(&rows),
            collided: collision_flags(ids, &rows),
        }
    }

    /// Payload bytes as laid out on disk, excluding the header.
    pub fn payload_bytes(&self) -> usize {
        match &self.storage {
            Storage::F32(_) => self.num_rows * self.dim * 4,
            Storage::F16(_) => self.num_rows * self.dim * 2,
            Storage::Int4(s) => self.num_rows * quant::row_payload_bytes(self.dim, s.group_size),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u8(self.dtype().code())?;
        w.write_u8(0)?;
        w.write_u16::<LittleEndian>(self.table_id.len() as u16)?;
        w.write_all(self.table_id.as_bytes())?;
        w.write_u16::<LittleEndian>(self.version_id.len() as u16)?;
        w.write_all(self.version_id.as_bytes())?;
        w.write_u64::<LittleEndian>(self.num_rows as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.group_size() as u32)?;
        match &self.storage {
            Storage::F32(v) => {
                for x in v {
                    w.write_f32::<LittleEndian>(*x)?;
                }
            }
            Storage::F16(v) => {
                for x in v {
                    w.write_u16::<LittleEndian>(x.to_bits())?;
                }
            }
            Storage::Int4(s) => s.write_payload(w, self.num_rows, self.dim)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a PEMB file".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported PEMB version {version}")));
        }
        let dtype = Dtype::from_code(r.read_u8()?)?;
        let _reserved = r.read_u8()?;
        let table_id = read_string(r)?;
        let version_id = read_string(r)?;
        let num_rows = usize::try_from(r.read_u64::<LittleEndian>()?)
            .map_err(|_| Error::Format("num_rows does not fit in memory".into()))?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let group_size = r.read_u32::<LittleEndian>()? as usize;
        check_header(&table_id, &version_id, num_rows, dim)
            .map_err(|e| Error::Format(e.to_string()))?;
        let n = num_rows
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("table too large".into()))?;
        let table = match dtype {
            Dtype::F32 => {
                if group_size != 0 {
                    return Err(Error::Format("group_size must be 0 for F32".into()));
                }
                let mut data = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut data)?;
                Self::from_f32(table_id, version_id, num_rows, dim, data)?
            }
            Dtype::F16 => {
                if group_size != 0 {
                    return Err(Error::Format("group_size must be 0 for F16".into()));
                }
                let mut bits = vec![0u16; n];
                r.read_u16_into::<LittleEndian>(&mut bits)?;
                let data = bits.into_iter().map(f16::from_bits).collect();
                Self::from_f16(table_id, version_id, num_rows, dim, data)?
            }
            Dtype::Int4q => {
                if group_size < 2 {
                    return Err(Error::Format("INT4 table with group_size < 2".into()));
                }
                let store = Int4Store::read_payload(r, num_rows, dim, group_size)?;
                Self::from_int4(table_id, version_id, num_rows, dim, store)
                    .map_err(|e| Error::Format(e.to_string()))?
            }
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::load(path, e.into()))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| Error::load(path, e))
    }

    /// Group parameters of an INT4 row, if this is an INT4 table.
    pub fn quant_params(&self, row: usize) -> Option<&[QuantGroupParams]> {
        match &self.storage {
            Storage::Int4(s) if row < self.num_rows => Some(s.row_params(row)),
            _ => None,
        }
    }
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("identifier is not UTF-8".into()))
}

/// `flags[i]` is set when some other, distinct id in the batch shares `rows[i]`.
pub(crate) fn collision_flags(ids: &[EntityId], rows: &[usize]) -> Vec<bool> {
    // row -> (first id seen, whether a second distinct id landed there)
    let mut seen: HashMap<usize, (EntityId, bool)> = HashMap::with_capacity(rows.len());
    for (&id, &row) in ids.iter().zip(rows) {
        seen.entry(row)
            .and_modify(|(first, shared)| {
                if *first != id {
                    *shared = true;
                }
            })
            .or_insert((id, false));
    }
    rows.iter().map(|r| seen[r].1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_table() -> EmbeddingTable {
        let data = (0..12).map(|x| x as f32 * 0.5 - 2.0).collect();
        EmbeddingTable::from_f32("t", "v1", 3, 4, data).unwrap()
    }

    #[test]
    fn modulo_one_is_always_zero() {
        assert_eq!(hash_to_row(EntityId(12345), 1).unwrap(), 0);
        assert_eq!(hash_to_row(EntityId(u64::MAX), 1).unwrap(), 0);
    }

    #[test]
    fn zero_rows_is_rejected() {
        assert!(matches!(hash_to_row(EntityId(1), 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn hash_is_deterministic() {
        let a = hash_to_row(EntityId(987_654_321), 4093).unwrap();
        let b = hash_to_row(EntityId(987_654_321), 4093).unwrap();
        assert_eq!(a, b);
    }

    // Golden values of the finalizer. These must never change.
    #[test]
    fn golden_mix_values() {
        assert_eq!(splitmix64_mix(0), 0);
        assert_eq!(splitmix64_mix(1), 0x5692_161D_100B_05E5);
        assert_eq!(splitmix64_mix(0x9E37_79B9_7F4A_7C15), 0xE220_A839_7B1D_CDAF);
        assert_eq!(hash_to_row(EntityId(1), 1000).unwrap(), (0x5692_161D_100B_05E5u64 % 1000) as usize);
    }

    #[test]
    fn collision_fraction_edges() {
        assert_eq!(expected_collision_fraction(1, 17).unwrap(), 0.0);
        assert!((expected_collision_fraction(2, 2).unwrap() - 0.25).abs() < 1e-12);
        assert!(expected_collision_fraction(0, 5).is_err());
        assert!(expected_collision_fraction(5, 0).is_err());
        // a single bucket: every id but one collides
        assert!((expected_collision_fraction(4, 1).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shared_bucket_gives_identical_rows() {
        let t = small_table();
        let a = EntityId(1);
        let b = (2..).map(EntityId).find(|&id| t.row_of(id) == t.row_of(a)).unwrap();
        let res = t.lookup(&[a, b, a]);
        assert_eq!(res.row(0), res.row(1));
        assert_eq!(res.collided, vec![true, true, true]);
        let alone = t.lookup(&[a, a]);
        assert_eq!(alone.collided, vec![false, false]);
    }

    #[test]
    fn empty_lookup() {
        let t = small_table();
        let res = t.lookup(&[]);
        assert!(res.is_empty());
        assert_eq!(res.dim, 4);
        assert!(res.embeddings.is_empty());
    }

    #[test]
    fn shape_is_validated() {
        assert!(EmbeddingTable::from_f32("t", "v", 2, 2, vec![0.0; 3]).is_err());
        assert!(EmbeddingTable::from_f32("t", "", 1, 1, vec![0.0]).is_err());
        assert!(EmbeddingTable::from_f32("t", "v", 0, 1, vec![]).is_err());
    }

    #[test]
    fn f32_and_f16_roundtrip_through_disk() {
        let t = small_table();
        for table in [t.clone(), t.to_f16().unwrap()] {
            let mut buf = Vec::new();
            table.write_to(&mut buf).unwrap();
            let back = EmbeddingTable::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, table);
        }
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let t = EmbeddingTable::from_f32("ab", "v9", 1, 2, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut expected = b"PEMB".to_vec();
        expected.extend([1, 0, 0, 0]);
        expected.extend([2, 0, b'a', b'b', 2, 0, b'v', b'9']);
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(0u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = small_table();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            EmbeddingTable::read_from(&mut bad_magic.as_slice()),
            Err(Error::Format(_))
        ));

        let truncated = &buf[..buf.len() - 1];
        assert!(EmbeddingTable::read_from(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(
            EmbeddingTable::read_from(&mut trailing.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
