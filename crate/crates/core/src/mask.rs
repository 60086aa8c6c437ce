//! Bit-packed boolean masks over a layer's `rows x cols` grid.
//!
//! One type serves both as an update mask (which stored weights changed) and
//! as a selection mask (which weights a recipe picks). Set algebra works at
//! word granularity and the population count is cached.
//!
//! # Binary format
//!
//! All integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8 | magic `WSMASK\0\x01` |
//! | 4 | `u32` name length `L` |
//! | L | layer name, UTF-8 |
//! | 8 | `u64` rows |
//! | 8 | `u64` cols |
//! | 8 | `u64` count of set bits |
//! | ⌈rows·cols/8⌉ | payload |
//!
//! The payload is row-major: element `(i, j)` has flat index `k = i*cols + j`
//! and lives in byte `k / 8` at bit `k % 8` (least significant bit first).
//! Padding bits in the last byte are zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MASK_MAGIC: &[u8; 8] = b"WSMASK\0\x01";

#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    name: String,
    rows: usize,
    cols: usize,
    words: Vec<u64>,
    count: usize,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("name", &self.name)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("count", &self.count)
            .finish()
    }
}

fn word_count(len: usize) -> usize {
    len.div_ceil(64)
}

impl Mask {
    pub fn empty(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Mask {
            name: name.into(),
            rows,
            cols,
            words: vec![0; word_count(rows * cols)],
            count: 0,
        }
    }

    pub fn full(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let mut m = Self::empty(name, rows, cols);
        m.words.iter_mut().for_each(|w| *w = u64::MAX);
        m.clear_tail();
        m.count = rows * cols;
        m
    }

    /// Builds a mask from a predicate on the flat row-major index.
    pub fn from_fn(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize) -> bool,
    ) -> Self {
        let len = rows * cols;
        let mut words = vec![0u64; word_count(len)];
        let mut count = 0;
        for (w, word) in words.iter_mut().enumerate() {
            let base = w * 64;
            let end = (base + 64).min(len);
            let mut bits = 0u64;
            for k in base..end {
                if f(k) {
                    bits |= 1 << (k - base);
                }
            }
            count += bits.count_ones() as usize;
            *word = bits;
        }
        Mask {
            name: name.into(),
            rows,
            cols,
            words,
            count,
        }
    }

    /// Wraps packed words (LSB-first, row-major). Bits past `rows * cols`
    /// are cleared.
    pub(crate) fn from_words(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        words: Vec<u64>,
    ) -> Self {
        assert_eq!(words.len(), word_count(rows * cols));
        let mut m = Mask {
            name: name.into(),
            rows,
            cols,
            words,
            count: 0,
        };
        m.clear_tail();
        m.recount();
        m
    }

    pub fn from_coords(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        coords: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut m = Self::empty(name, rows, cols);
        for (i, j) in coords {
            if i >= rows || j >= cols {
                return Err(Error::Shape(format!(
                    "coordinate ({i}, {j}) outside a {rows}x{cols} grid"
                )));
            }
            m.set(i, j, true);
        }
        Ok(m)
    }

    /// Row-major nested booleans; all rows must have equal length.
    pub fn from_rows(name: impl Into<String>, rows: &[&[bool]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self::from_fn(name, m, n, |k| rows[k / n][k % n]))
    }

    fn clear_tail(&mut self) {
        let len = self.rows * self.cols;
        let rem = len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    fn recount(&mut self) {
        self.count = self.words.iter().map(|w| w.count_ones() as usize).sum();
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Number of set coordinates.
    pub fn count(&self) -> usize {
        self.count
    }

    /// `count / (rows * cols)`; zero for a zero-sized grid.
    pub fn density(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.count as f64 / self.len() as f64
        }
    }

    #[inline]
    pub fn get_flat(&self, k: usize) -> bool {
        (self.words[k / 64] >> (k % 64)) & 1 == 1
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.get_flat(i * self.cols + j)
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.set_flat(i * self.cols + j, value)
    }

    pub fn set_flat(&mut self, k: usize, value: bool) {
        let (w, b) = (k / 64, k % 64);
        let was = (self.words[w] >> b) & 1 == 1;
        if value && !was {
            self.words[w] |= 1 << b;
            self.count += 1;
        } else if !value && was {
            self.words[w] &= !(1 << b);
            self.count -= 1;
        }
    }

    /// Flat indices of set bits, ascending.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + b)
            })
        })
    }

    /// Set coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.cols;
        self.ones().map(move |k| (k / n, k % n))
    }

    pub fn row_count(&self, i: usize) -> usize {
        (0..self.cols).filter(|&j| self.get(i, j)).count()
    }

    pub fn same_shape(&self, other: &Mask) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "mask `{}` is {}x{} but `{}` is {}x{}",
                self.name, self.rows, self.cols, other.name, other.rows, other.cols
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(u64, u64) -> u64) -> Result<Mask> {
        self.same_shape(other)?;
        let mut out = Mask {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            count: 0,
        };
        out.clear_tail();
        out.recount();
        Ok(out)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & b)
    }

    /// Elements of `self` not in `other`.
    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & !b)
    }

    pub fn complement(&self) -> Mask {
        let mut out = Mask {
            name: self.name.clone(),
            rows: self.rows,
            cols: self.cols,
            words: self.words.iter().map(|w| !w).collect(),
            count: 0,
        };
        out.clear_tail();
        out.count = self.len() - self.count;
        out
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &Mask) -> Result<usize> {
        Ok(self.count + other.count - self.intersection_count(other)?)
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let nbytes = self.len().div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(nbytes)
            .collect()
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(MASK_MAGIC)?;
        out.write_all(&(self.name.len() as u32).to_le_bytes())?;
        out.write_all(self.name.as_bytes())?;
        out.write_all(&(self.rows as u64).to_le_bytes())?;
        out.write_all(&(self.cols as u64).to_le_bytes())?;
        out.write_all(&(self.count as u64).to_le_bytes())?;
        out.write_all(&self.payload_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(44 + self.name.len() + self.len().div_ceil(8));
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(input: &mut impl Read) -> Result<Mask> {
        let io = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::Integrity("mask stream is truncated".into())
            }
            _ => Error::Parse(format!("cannot read mask: {e}")),
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MASK_MAGIC {
            return Err(Error::Parse("not a mask file (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        input.read_exact(&mut u32b).map_err(io)?;
        let name_len = u32::from_le_bytes(u32b) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Parse(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(io)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Parse("mask name is not UTF-8".into()))?;
        let mut u64b = [0u8; 8];
        let mut next_u64 = |input: &mut dyn Read| -> Result<u64> {
            input.read_exact(&mut u64b).map_err(io)?;
            Ok(u64::from_le_bytes(u64b))
        };
        let rows = next_u64(input)? as usize;
        let cols = next_u64(input)? as usize;
        let count = next_u64(input)? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Parse("mask dimensions overflow".into()))?;
        let mut payload = vec![0u8; len.div_ceil(8)];
        input.read_exact(&mut payload).map_err(io)?;
        let mut words = vec![0u64; word_count(len)];
        for (w, chunk) in words.iter_mut().zip(payload.chunks(8)) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_le_bytes(b);
        }
        let mut mask = Mask {
            name,
            rows,
            cols,
            words,
            count: 0,
        };
        let before: Vec<u64> = mask.words.last().copied().into_iter().collect();
        mask.clear_tail();
        if mask.words.last().copied().into_iter().collect::<Vec<_>>() != before {
            return Err(Error::Integrity(
                "nonzero padding bits in mask payload".into(),
            ));
        }
        mask.recount();
        if mask.count != count {
            return Err(Error::Integrity(format!(
                "mask header says {count} set bits, payload has {}",
                mask.count
            )));
        }
        Ok(mask)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mask> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_counts() {
        let mut m = Mask::empty("w", 3, 5);
        assert_eq!(m.count(), 0);
        m.set(1, 2, true);
        m.set(1, 2, true);
        m.set(2, 4, true);
        assert_eq!(m.count(), 2);
        assert!(m.get(1, 2));
        assert_eq!(m.coords().collect::<Vec<_>>(), vec![(1, 2), (2, 4)]);
        m.set(1, 2, false);
        assert_eq!(m.count(), 1);
        assert_eq!(Mask::full("f", 3, 5).count(), 15);
        assert_eq!(Mask::full("f", 3, 5).complement().count(), 0);
    }

    #[test]
    fn out_of_range_coordinate() {
        assert!(Mask::from_coords("w", 2, 2, [(2, 0)]).is_err());
    }

    #[test]
    fn set_algebra_shape_mismatch() {
        let a = Mask::empty("a", 2, 3);
        let b = Mask::empty("b", 3, 2);
        assert!(matches!(a.union(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_and_corrupt_streams() {
        let m = Mask::from_coords("layer", 3, 3, [(0, 0), (2, 2)]).unwrap();
        let bytes = m.to_bytes();
        assert!(matches!(
            Mask::read_from(&mut &bytes[..bytes.len() - 1]),
            Err(Error::Integrity(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Mask::read_from(&mut &bad[..]),
            Err(Error::Parse(_))
        ));
        let mut wrong_count = bytes.clone();
        let count_at = 8 + 4 + 5 + 16;
        wrong_count[count_at] = 3;
        assert!(matches!(
            Mask::read_from(&mut &wrong_count[..]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn payload_layout_is_lsb_first_row_major() {
        let m = Mask::from_coords("x", 2, 5, [(0, 1), (1, 3)]).unwrap();
        let bytes = m.to_bytes();
        let payload = &bytes[bytes.len() - 2..];
        // flat indices 1 and 8
        assert_eq!(payload, &[0b0000_0010, 0b0000_0001]);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..20, 1usize..20).prop_flat_map(|(r, c)| {
            proptest::collection::vec(any::<bool>(), r * c)
                .prop_map(move |bits| Mask::from_fn("p", r, c, |k| bits[k]))
        })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(m in arb_mask()) {
            let back = Mask::read_from(&mut &m.to_bytes()[..]).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn inclusion_exclusion(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..300)) {
            let n = bits.len();
            let a = Mask::from_fn("a", 1, n, |k| bits[k].0);
            let b = Mask::from_fn("b", 1, n, |k| bits[k].1);
            let u = a.union(&b).unwrap();
            let i = a.intersect(&b).unwrap();
            prop_assert_eq!(u.count() + i.count(), a.count() + b.count());
            prop_assert_eq!(a.complement().complement(), a.clone());
            prop_assert_eq!(a.union(&a.complement()).unwrap().count(), n);
            prop_assert_eq!(a.difference(&b).unwrap().count(), a.count() - i.count());
        }
    }
}
