//! Block-structured flat parameter storage.
//!
//! Every gradient, preconditioner state and noise draw lives in the same
//! coordinate system: a flat `f64` vector partitioned into contiguous blocks,
//! one block per neuron with the bias at local index 0 followed by the
//! neuron's incoming weights.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

/// Magic bytes opening a parameter checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LBNN";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_DIM: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub size: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size
    }
}

/// Ordered, contiguous partition of `[0, dim)` into non-empty blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    blocks: Vec<Block>,
    dim: usize,
}

impl BlockLayout {
    /// Builds a layout from consecutive block sizes.
    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for size in sizes {
            if size == 0 {
                return Err(Error::contract(format!("block {} has size 0", blocks.len())));
            }
            blocks.push(Block { offset, size });
            offset += size;
        }
        Ok(Self { blocks, dim: offset })
    }

    /// Builds a layout from explicit `(offset, size)` pairs, checking that they tile `[0, dim)`.
    pub fn from_blocks(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut expected = 0;
        for (i, &(offset, size)) in pairs.iter().enumerate() {
            if offset != expected {
                return Err(Error::contract(format!(
                    "block {i} starts at {offset}, expected {expected}"
                )));
            }
            if size == 0 {
                return Err(Error::contract(format!("block {i} has size 0")));
            }
            expected += size;
        }
        Self::from_sizes(pairs.iter().map(|&(_, s)| s))
    }

    /// One block spanning the whole vector.
    pub fn single(dim: usize) -> Result<Self> {
        Self::from_sizes([dim])
    }

    /// `count` blocks of identical size.
    pub fn uniform(count: usize, size: usize) -> Result<Self> {
        Self::from_sizes(std::iter::repeat_n(size, count))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> Result<Block> {
        self.blocks.get(b).copied().ok_or(Error::BlockOutOfRange {
            index: b,
            count: self.blocks.len(),
        })
    }
}

/// Flat parameter vector tied to a [`BlockLayout`].
///
/// The layout is reference counted so snapshots and gradients share it cheaply.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<BlockLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<BlockLayout>) -> Self {
        Self {
            values: vec![0.0; layout.dim()],
            layout,
        }
    }

    /// Wraps `values`, rejecting length mismatches and non-finite entries.
    pub fn from_values(layout: Arc<BlockLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        let v = Self { values, layout };
        v.ensure_finite()?;
        Ok(v)
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub(crate) fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "dimension {} ({} blocks) vs {} ({} blocks)",
                self.dim(),
                self.layout.num_blocks(),
                other.dim(),
                other.layout.num_blocks()
            )))
        }
    }

    /// Entries of block `b`.
    pub fn block(&self, b: usize) -> Result<&[f64]> {
        let blk = self.layout.block(b)?;
        Ok(&self.values[blk.range()])
    }

    /// Mutable entries of block `b`; writes land in the underlying vector.
    pub fn block_mut(&mut self, b: usize) -> Result<&mut [f64]> {
        let blk = self.layout.block(b)?;
        Ok(&mut self.values[blk.range()])
    }

    /// `self += a * x`.
    pub fn axpy_in_place(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_layout(x)?;
        for (y, &xv) in self.values.iter_mut().zip(&x.values) {
            *y += a * xv;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!("non-finite parameter at coordinate {i}"))),
        }
    }

    /// Writes a checkpoint record: header followed by little-endian doubles.
    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        write_layout_header(&mut w, CHECKPOINT_MAGIC, &self.layout)?;
        w.f64s(&self.values)
    }

    /// Reads one checkpoint record.
    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        Self::read_record(&mut r)?.ok_or_else(|| Error::format(0, "empty checkpoint file"))
    }

    /// Reads every checkpoint record in a stream (an ensemble file is a concatenation).
    pub fn read_checkpoints<R: Read>(input: R) -> Result<Vec<Self>> {
        let mut r = Reader::new(input);
        let mut out = Vec::new();
        while let Some(v) = Self::read_record(&mut r)? {
            out.push(v);
        }
        Ok(out)
    }

    fn read_record<R: Read>(r: &mut Reader<R>) -> Result<Option<Self>> {
        let Some(layout) = read_layout_header(r, CHECKPOINT_MAGIC)? else {
            return Ok(None);
        };
        let at = r.offset();
        let values = r.f64s(layout.dim())?;
        let layout = Arc::new(layout);
        match Self::from_values(layout, values) {
            Ok(v) => Ok(Some(v)),
            Err(e) => Err(Error::format(at, e.to_string())),
        }
    }
}

/// `a * x + y`, leaving the inputs untouched.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.axpy_in_place(a, x)?;
    Ok(out)
}

pub(crate) fn write_layout_header<W: Write>(w: &mut Writer<W>, magic: &[u8; 4], layout: &BlockLayout) -> Result<()> {
    w.bytes(magic)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u64(layout.dim() as u64)?;
    w.u64(layout.num_blocks() as u64)?;
    for b in layout.blocks() {
        w.u64(b.offset as u64)?;
        w.u64(b.size as u64)?;
    }
    Ok(())
}

/// Returns `Ok(None)` on a clean end of stream before the magic bytes.
pub(crate) fn read_layout_header<R: Read>(r: &mut Reader<R>, magic: &[u8; 4]) -> Result<Option<BlockLayout>> {
    let start = r.offset();
    let mut m = [0u8; 4];
    if !r.try_exact(&mut m)? {
        return Ok(None);
    }
    if &m != magic {
        return Err(Error::format(
            start,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let at = r.offset();
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let dim = r.count(MAX_DIM)?;
    let at = r.offset();
    let nblocks = r.count(dim as u64)?;
    let mut pairs = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        let off = r.count(MAX_DIM)?;
        let size = r.count(MAX_DIM)?;
        pairs.push((off, size));
    }
    let layout = BlockLayout::from_blocks(&pairs).map_err(|e| Error::format(at, e.to_string()))?;
    if layout.dim() != dim {
        return Err(Error::format(
            at,
            format!("blocks cover {} entries, header says {dim}", layout.dim()),
        ));
    }
    Ok(Some(layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(layout: &Arc<BlockLayout>, v: &[f64]) -> ParamVector {
        ParamVector::from_values(layout.clone(), v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        let l = Arc::new(BlockLayout::single(2).unwrap());
        let v = pv(&l, &[3.5, -1.0]);
        assert_eq!(axpy(0.0, &pv(&l, &[9.0, 9.0]), &v).unwrap(), v);
        assert_eq!(
            axpy(1.0, &pv(&l, &[1.0, 2.0]), &pv(&l, &[3.0, 4.0])).unwrap().values(),
            &[4.0, 6.0]
        );
        let r = axpy(-0.1, &pv(&l, &[10.0, -10.0]), &pv(&l, &[0.0, 0.0])).unwrap();
        assert!((r.values()[0] + 1.0).abs() < 1e-15 && (r.values()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn axpy_rejects_layout_mismatch() {
        let a = Arc::new(BlockLayout::from_sizes([1, 1]).unwrap());
        let b = Arc::new(BlockLayout::single(2).unwrap());
        let err = axpy(1.0, &pv(&a, &[1.0, 2.0]), &pv(&b, &[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch(_)));
    }

    #[test]
    fn block_views() {
        let l = Arc::new(BlockLayout::from_sizes([3, 2]).unwrap());
        let mut v = pv(&l, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.block(1).unwrap(), &[3.0, 4.0]);
        v.block_mut(1).unwrap()[0] = 30.0;
        assert_eq!(v.values()[3], 30.0);
        assert!(matches!(v.block(2), Err(Error::BlockOutOfRange { index: 2, count: 2 })));

        let whole = Arc::new(BlockLayout::single(3).unwrap());
        assert_eq!(pv(&whole, &[7.0, 8.0, 9.0]).block(0).unwrap(), &[7.0, 8.0, 9.0]);
        let l2 = Arc::new(BlockLayout::from_sizes([2, 1]).unwrap());
        assert_eq!(pv(&l2, &[7.0, 8.0, 9.0]).block(0).unwrap(), &[7.0, 8.0]);
    }

    #[test]
    fn layout_validation() {
        assert!(BlockLayout::from_sizes([2, 0]).is_err());
        assert!(BlockLayout::from_blocks(&[(0, 2), (3, 1)]).is_err());
        let l = BlockLayout::from_blocks(&[(0, 2), (2, 1)]).unwrap();
        assert_eq!(l.dim(), 3);
    }

    #[test]
    fn rejects_non_finite() {
        let l = Arc::new(BlockLayout::single(2).unwrap());
        assert!(ParamVector::from_values(l, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn checkpoint_header_layout() {
        let l = Arc::new(BlockLayout::from_sizes([2, 1]).unwrap());
        let v = pv(&l, &[1.0, -2.0, 0.5]);
        let mut buf = Vec::new();
        v.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LBNN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        // two (offset, size) pairs, then three doubles
        assert_eq!(buf.len(), 24 + 4 * 8 + 3 * 8);
        assert_eq!(f64::from_le_bytes(buf[56..64].try_into().unwrap()), 1.0);
    }

    #[test]
    fn checkpoint_errors_carry_offsets() {
        let l = Arc::new(BlockLayout::single(2).unwrap());
        let mut buf = Vec::new();
        pv(&l, &[1.0, 2.0]).write_checkpoint(&mut buf).unwrap();
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            ParamVector::read_checkpoint(truncated),
            Err(Error::Format { .. })
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamVector::read_checkpoint(&bad[..]),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    fn layout_and_values() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        prop::collection::vec(1usize..6, 1..6).prop_flat_map(|sizes| {
            let dim: usize = sizes.iter().sum();
            (Just(sizes), prop::collection::vec(-1e6f64..1e6, dim))
        })
    }

    proptest! {
        #[test]
        fn blocks_concatenate_to_vector((sizes, values) in layout_and_values()) {
            let l = Arc::new(BlockLayout::from_sizes(sizes).unwrap());
            let v = ParamVector::from_values(l.clone(), values.clone()).unwrap();
            let joined: Vec<f64> = (0..l.num_blocks())
                .flat_map(|b| v.block(b).unwrap().to_vec())
                .collect();
            prop_assert_eq!(joined, values);
        }

        #[test]
        fn axpy_with_zero_is_exact((sizes, values) in layout_and_values()) {
            let l = Arc::new(BlockLayout::from_sizes(sizes).unwrap());
            let x = ParamVector::from_values(l.clone(), values).unwrap();
            let y = axpy(1.0, &x, &ParamVector::zeros(l)).unwrap();
            prop_assert!(x.values().iter().zip(y.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn checkpoint_roundtrip((sizes, values) in layout_and_values()) {
            let l = Arc::new(BlockLayout::from_sizes(sizes).unwrap());
            let x = ParamVector::from_values(l, values).unwrap();
            let mut buf = Vec::new();
            x.write_checkpoint(&mut buf).unwrap();
            x.write_checkpoint(&mut buf).unwrap();
            let back = ParamVector::read_checkpoints(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0], &x);
        }
    }
}
