//! Post-training INT4 quantization of embedding tables.
//!
//! Each row is split into groups of `group_size` elements. A group stores an
//! f32 scale, a u8 zero point and its 4-bit codes packed two per byte (low
//! nibble holds the even group-local index). The quantization range of a
//! group is `[min(v_min, 0), max(v_max, 0)]`, so exact zero is always
//! representable and one-signed groups keep the half-step error bound.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{EmbeddingTable, Storage};

pub const DEFAULT_GROUP_SIZE: usize = 64;
pub const MAX_CODE: u8 = 15;
/// scale f32 + zero_point u8 + pad u8
pub const GROUP_HEADER_BYTES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGroupParams {
    pub scale: f32,
    pub zero_point: u8,
}

/// Packed INT4 payload of a table.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Int4Store {
    pub(crate) group_size: usize,
    pub(crate) groups_per_row: usize,
    /// `num_rows * groups_per_row` entries
    pub(crate) params: Vec<QuantGroupParams>,
    /// `num_rows * packed_row_bytes` bytes
    pub(crate) codes: Vec<u8>,
}

pub fn groups_per_row(dim: usize, group_size: usize) -> usize {
    dim.div_ceil(group_size)
}

/// Group boundaries of a row as `(start, len)`.
fn groups(dim: usize, group_size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim)
        .step_by(group_size)
        .map(move |s| (s, group_size.min(dim - s)))
}

pub fn packed_row_bytes(dim: usize, group_size: usize) -> usize {
    groups(dim, group_size).map(|(_, len)| len.div_ceil(2)).sum()
}

/// Bytes one row occupies in the on-disk payload, parameters included.
pub fn row_payload_bytes(dim: usize, group_size: usize) -> usize {
    groups_per_row(dim, group_size) * GROUP_HEADER_BYTES + packed_row_bytes(dim, group_size)
}

pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0F) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

#[inline]
pub fn unpack_code(packed: &[u8], j: usize) -> u8 {
    let b = packed[j / 2];
    if j % 2 == 0 {
        b & 0x0F
    } else {
        b >> 4
    }
}

/// Quantizes one group. Inputs must be finite.
pub fn quantize_group(values: &[f32]) -> (QuantGroupParams, Vec<u8>) {
    let lo = values.iter().copied().fold(0.0f32, f32::min);
    let hi = values.iter().copied().fold(0.0f32, f32::max);
    let scale = (hi - lo) / MAX_CODE as f32;
    if scale == 0.0 || !scale.is_finite() {
        return (
            QuantGroupParams {
                scale: 0.0,
                zero_point: 0,
            },
            vec![0; values.len()],
        );
    }
    // round() is half-away-from-zero
    let zero_point = (-lo / scale).round().clamp(0.0, MAX_CODE as f32);
    let codes = values
        .iter()
        .map(|&x| ((x / scale).round() + zero_point).clamp(0.0, MAX_CODE as f32) as u8)
        .collect();
    (
        QuantGroupParams {
            scale,
            zero_point: zero_point as u8,
        },
        codes,
    )
}

#[inline]
pub fn dequantize_code(p: QuantGroupParams, code: u8) -> f32 {
    p.scale * (code as i32 - p.zero_point as i32) as f32
}

/// Shared by table lookup and `dequantize_row`.
pub(crate) fn dequantize_into(store: &Int4Store, dim: usize, row: usize, out: &mut [f32]) {
    let gs = store.group_size;
    let n_groups = groups_per_row(dim, gs);
    let params = &store.params[row * n_groups..(row + 1) * n_groups];
    let row_bytes = packed_row_bytes(dim, gs);
    let mut packed = &store.codes[row * row_bytes..(row + 1) * row_bytes];
    for ((start, len), &p) in groups(dim, gs).zip(params) {
        let nbytes = len.div_ceil(2);
        let (group_bytes, rest) = packed.split_at(nbytes);
        for j in 0..len {
            out[start + j] = dequantize_code(p, unpack_code(group_bytes, j));
        }
        packed = rest;
    }
}

impl Int4Store {
    pub(crate) fn row_params(&self, row: usize) -> &[QuantGroupParams] {
        &self.params[row * self.groups_per_row..(row + 1) * self.groups_per_row]
    }

    pub(crate) fn validate(&self, num_rows: usize, dim: usize) -> Result<()> {
        if self.group_size < 2 || self.groups_per_row != groups_per_row(dim, self.group_size) {
            return Err(Error::invalid("bad INT4 group layout"));
        }
        if self.params.len() != num_rows * groups_per_row(dim, self.group_size)
            || self.codes.len() != num_rows * packed_row_bytes(dim, self.group_size)
        {
            return Err(Error::invalid("INT4 payload does not match table shape"));
        }
        if self
            .params
            .iter()
            .any(|p| p.zero_point > MAX_CODE || !(p.scale >= 0.0 && p.scale.is_finite()))
        {
            return Err(Error::invalid("invalid INT4 group parameters"));
        }
        Ok(())
    }

    pub(crate) fn write_payload<W: Write>(&self, w: &mut W, num_rows: usize, dim: usize) -> Result<()> {
        let gs = self.group_size;
        let n_groups = groups_per_row(dim, gs);
        let row_bytes = packed_row_bytes(dim, gs);
        for row in 0..num_rows {
            let mut packed = &self.codes[row * row_bytes..(row + 1) * row_bytes];
            let params = &self.params[row * n_groups..(row + 1) * n_groups];
            for ((_, len), p) in groups(dim, gs).zip(params) {
                let (group_bytes, rest) = packed.split_at(len.div_ceil(2));
                w.write_f32::<LittleEndian>(p.scale)?;
                w.write_u8(p.zero_point)?;
                w.write_u8(0)?;
                w.write_all(group_bytes)?;
                packed = rest;
            }
        }
        Ok(())
    }

    pub(crate) fn read_payload<R: Read>(
        r: &mut R,
        num_rows: usize,
        dim: usize,
        group_size: usize,
    ) -> Result<Self> {
        let n_groups = groups_per_row(dim, group_size);
        let mut params = Vec::with_capacity(num_rows * n_groups);
        let mut codes = Vec::with_capacity(num_rows * packed_row_bytes(dim, group_size));
        for _ in 0..num_rows {
            for (_, len) in groups(dim, group_size) {
                let scale = r.read_f32::<LittleEndian>()?;
                let zero_point = r.read_u8()?;
                let _pad = r.read_u8()?;
                params.push(QuantGroupParams { scale, zero_point });
                let start = codes.len();
                codes.resize(start + len.div_ceil(2), 0);
                r.read_exact(&mut codes[start..])?;
            }
        }
        Ok(Self {
            group_size,
            groups_per_row: n_groups,
            params,
            codes,
        })
    }
}

/// An embedding table whose storage is INT4.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTable(EmbeddingTable);

impl QuantizedTable {
    pub fn from_table(table: EmbeddingTable) -> Result<Self> {
        match table.storage {
            Storage::Int4(_) => Ok(Self(table)),
            _ => Err(Error::invalid("table is not INT4-quantized")),
        }
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.0
    }

    pub fn into_table(self) -> EmbeddingTable {
        self.0
    }

    pub fn group_size(&self) -> usize {
        self.0.group_size()
    }

    fn store(&self) -> &Int4Store {
        match &self.0.storage {
            Storage::Int4(s) => s,
            _ => unreachable!("QuantizedTable always wraps INT4 storage"),
        }
    }

    pub fn groups(&self, row: usize) -> Result<&[QuantGroupParams]> {
        self.check_row(row)?;
        Ok(self.store().row_params(row))
    }

    /// Unpacked 4-bit codes of a row.
    pub fn codes(&self, row: usize) -> Result<Vec<u8>> {
        self.check_row(row)?;
        let dim = self.0.dim();
        let gs = self.group_size();
        let row_bytes = packed_row_bytes(dim, gs);
        let mut packed = &self.store().codes[row * row_bytes..(row + 1) * row_bytes];
        let mut out = Vec::with_capacity(dim);
        for (_, len) in groups(dim, gs) {
            let (g, rest) = packed.split_at(len.div_ceil(2));
            out.extend((0..len).map(|j| unpack_code(g, j)));
            packed = rest;
        }
        Ok(out)
    }

    pub fn dequantize_row(&self, row: usize) -> Result<Vec<f32>> {
        self.check_row(row)?;
        let mut out = vec![0.0; self.0.dim()];
        dequantize_into(self.store(), self.0.dim(), row, &mut out);
        Ok(out)
    }

    /// Full dequantized table as an F32 table with the same ids.
    pub fn dequantize(&self) -> EmbeddingTable {
        EmbeddingTable::from_f32(
            self.0.table_id(),
            self.0.version_id(),
            self.0.num_rows(),
            self.0.dim(),
            self.0.to_f32_vec(),
        )
        .expect("shape already validated")
    }

    fn check_row(&self, row: usize) -> Result<()> {
        if row >= self.0.num_rows() {
            return Err(Error::invalid(format!(
                "row {row} out of range for {} rows",
                self.0.num_rows()
            )));
        }
        Ok(())
    }
}

/// Quantizes an F32 or F16 table row by row.
pub fn quantize_int4(table: &EmbeddingTable, group_size: usize) -> Result<QuantizedTable> {
    if group_size < 2 {
        return Err(Error::invalid("group_size must be at least 2"));
    }
    if table.dtype() == crate::tables::Dtype::Int4q {
        return Err(Error::invalid("table is already INT4"));
    }
    let dim = table.dim();
    if dim % 2 != 0 {
        return Err(Error::invalid("INT4 quantization needs an even dim"));
    }
    let data = table.to_f32_vec();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite value at row {}, column {}",
            pos / dim,
            pos % dim
        )));
    }

    let rows: Vec<(Vec<QuantGroupParams>, Vec<u8>)> = data
        .par_chunks_exact(dim)
        .map(|row| {
            let mut params = Vec::with_capacity(groups_per_row(dim, group_size));
            let mut packed = Vec::with_capacity(packed_row_bytes(dim, group_size));
            for chunk in row.chunks(group_size) {
                let (p, codes) = quantize_group(chunk);
                params.push(p);
                packed.extend(pack_codes(&codes));
            }
            (params, packed)
        })
        .collect();

    let mut store = Int4Store {
        group_size,
        groups_per_row: groups_per_row(dim, group_size),
        params: Vec::with_capacity(table.num_rows() * groups_per_row(dim, group_size)),
        codes: Vec::with_capacity(table.num_rows() * packed_row_bytes(dim, group_size)),
    };
    for (p, c) in rows {
        store.params.extend(p);
        store.codes.extend(c);
    }
    let t = EmbeddingTable::from_int4(
        table.table_id().to_string(),
        table.version_id().to_string(),
        table.num_rows(),
        dim,
        store,
    )?;
    Ok(QuantizedTable(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub quantized_bytes: u64,
    pub ratio: f64,
}

pub fn f16_payload_bytes(num_rows: usize, dim: usize) -> u64 {
    (num_rows * dim * 2) as u64
}

/// Quantized payload (codes plus group parameters, no header) relative to
/// the F16 baseline.
pub fn size_report(table_f16_bytes: u64, qtable: &QuantizedTable) -> Result<SizeReport> {
    if table_f16_bytes == 0 {
        return Err(Error::invalid("baseline size must be positive"));
    }
    let quantized_bytes = qtable.table().payload_bytes() as u64;
    Ok(SizeReport {
        quantized_bytes,
        ratio: quantized_bytes as f64 / table_f16_bytes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: usize, dim: usize, data: Vec<f32>) -> EmbeddingTable {
        EmbeddingTable::from_f32("t", "v1", rows, dim, data).unwrap()
    }

    #[test]
    fn hand_evaluated_group() {
        // scale = 1.5 / 15, zero point 0, codes x / 0.1
        let q = quantize_int4(&table(1, 4, vec![0.0, 0.5, 1.0, 1.5]), 4).unwrap();
        let p = q.groups(0).unwrap()[0];
        assert_eq!(p.scale, 0.1f32);
        assert_eq!(p.zero_point, 0);
        assert_eq!(q.codes(0).unwrap(), vec![0, 5, 10, 15]);
        assert_eq!(q.dequantize_row(0).unwrap(), vec![0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn dequantize_from_params() {
        let p = QuantGroupParams {
            scale: 0.1,
            zero_point: 0,
        };
        let got: Vec<f32> = [0u8, 5, 10, 15].iter().map(|&c| dequantize_code(p, c)).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn all_zero_table_is_exact() {
        let q = quantize_int4(&table(3, 8, vec![0.0; 24]), 4).unwrap();
        for r in 0..3 {
            let zp = q.groups(r).unwrap()[0].zero_point;
            assert!(q.codes(r).unwrap().iter().all(|&c| c == zp));
            assert_eq!(q.dequantize_row(r).unwrap(), vec![0.0; 8]);
            assert!(q.groups(r).unwrap().iter().all(|p| p.scale == 0.0));
        }
    }

    #[test]
    fn one_signed_group_keeps_error_bound() {
        let vals = vec![10.0, 10.5, 11.0, 11.5];
        let q = quantize_int4(&table(1, 4, vals.clone()), 4).unwrap();
        let scale = q.groups(0).unwrap()[0].scale;
        for (x, y) in vals.iter().zip(q.dequantize_row(0).unwrap()) {
            assert!((x - y).abs() <= scale / 2.0 + 1e-6 * x.abs());
        }
    }

    #[test]
    fn non_finite_names_row_and_column() {
        let mut data = vec![0.0; 8];
        data[6] = f32::NAN;
        let err = quantize_int4(&table(2, 4, data), 4).unwrap_err();
        assert!(err.to_string().contains("row 1, column 2"), "{err}");
    }

    #[test]
    fn bad_group_sizes_and_rows() {
        let t = table(1, 4, vec![1.0; 4]);
        assert!(quantize_int4(&t, 1).is_err());
        assert!(quantize_int4(&table(1, 3, vec![1.0; 3]), 2).is_err());
        let q = quantize_int4(&t, 2).unwrap();
        assert!(q.dequantize_row(1).is_err());
    }

    #[test]
    fn pack_unpack_all_bytes() {
        for b in 0..=255u8 {
            let codes = [unpack_code(&[b], 0), unpack_code(&[b], 1)];
            assert!(codes.iter().all(|&c| c <= MAX_CODE));
            assert_eq!(pack_codes(&codes), vec![b]);
        }
    }

    #[test]
    fn payload_formula() {
        assert_eq!(row_payload_bytes(64, 64), 38);
        assert_eq!(row_payload_bytes(64, 16), 56);
        // odd tail group
        assert_eq!(row_payload_bytes(10, 4), 3 * 6 + 2 + 2 + 1);
    }

    #[test]
    fn size_report_ratios() {
        let t = table(1000, 64, (0..64_000).map(|i| ((i * 37 % 101) as f32 - 50.0) / 50.0).collect());
        let base = f16_payload_bytes(1000, 64);
        let r64 = size_report(base, &quantize_int4(&t, 64).unwrap()).unwrap();
        assert_eq!(r64.quantized_bytes, 38_000);
        assert!((r64.ratio - 38.0 / 128.0).abs() < 1e-12);
        let r16 = size_report(base, &quantize_int4(&t, 16).unwrap()).unwrap();
        assert!((r16.ratio - 0.4375).abs() < 1e-12);
        assert!(size_report(0, &quantize_int4(&t, 16).unwrap()).is_err());
    }

    #[test]
    fn ratio_approaches_quarter() {
        let mut prev = f64::INFINITY;
        for dim in [64usize, 256, 1024, 4096] {
            let ratio = row_payload_bytes(dim, dim) as f64 / (2 * dim) as f64;
            assert!(ratio < prev && ratio > 0.25);
            prev = ratio;
        }
        assert!(prev - 0.25 < 0.001);
    }

    #[test]
    fn int4_roundtrip_through_disk() {
        let t = table(5, 6, (0..30).map(|i| (i as f32).sin()).collect());
        let q = quantize_int4(&t, 4).unwrap();
        let mut buf = Vec::new();
        q.table().write_to(&mut buf).unwrap();
        assert_eq!(buf.len() - (4 + 2 + 2 + 2 + 1 + 2 + 2 + 8 + 4 + 4), q.table().payload_bytes());
        let back = EmbeddingTable::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(&back, q.table());
    }
}
