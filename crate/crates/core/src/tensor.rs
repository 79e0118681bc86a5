//! Dense row-major `f64` tensors of rank 1 to 4 and the `TNSR` binary
//! container used for intermediate dumps and checkpoints.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Magic bytes opening every serialized tensor.
pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

/// Maximum supported rank.
pub const MAX_RANK: usize = 4;

/// A dense row-major array of 64-bit floats.
///
/// A rank-4 tensor is laid out as `[N, C, H, W]`; lower ranks drop leading
/// axes (`[N, H, W]` for per-sample maps, `[H, W]` for a single map).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be in 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Shape padded on the left with ones to rank 4.
    pub fn dims4(&self) -> [usize; 4] {
        let mut dims = [1usize; 4];
        let off = 4 - self.shape.len();
        dims[off..].copy_from_slice(&self.shape);
        dims
    }

    /// Flat offset of `(n, c, h, w)` in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims4();
        debug_assert!(c < cc && h < hh && w < ww);
        ((n * cc + c) * hh + h) * ww + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Serialize into the `TNSR` container: magic, rank (u32), dims (u32
    /// each), then the little-endian `f64` payload.
    pub fn write_tnsr<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TNSR_MAGIC)?;
        out.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &x in &self.data {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.rank() + 8 * self.numel());
        self.write_tnsr(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_tnsr<R: Read>(mut input: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::format("TNSR", format!("missing header: {e}")))?;
        if &magic != TNSR_MAGIC {
            return Err(Error::format("TNSR", "bad magic bytes"));
        }
        let mut word = [0u8; 4];
        input
            .read_exact(&mut word)
            .map_err(|e| Error::format("TNSR", format!("missing rank: {e}")))?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format("TNSR", format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input
                .read_exact(&mut word)
                .map_err(|e| Error::format("TNSR", format!("truncated dims: {e}")))?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let numel = check_shape(&shape).map_err(|e| Error::format("TNSR", e.to_string()))?;
        let mut data = Vec::with_capacity(numel);
        let mut val = [0u8; 8];
        for _ in 0..numel {
            input
                .read_exact(&mut val)
                .map_err(|e| Error::format("TNSR", format!("truncated payload: {e}")))?;
            data.push(f64::from_le_bytes(val));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<Tensor> {
        Tensor::read_tnsr(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn nchw_indexing_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        assert_eq!(t.at4(1, 2, 3, 4), (2 * 3 * 4 * 5 - 1) as f64);
        assert_eq!(t.at4(1, 0, 0, 0), 60.0);
        assert_eq!(t.at4(0, 1, 0, 0), 20.0);
        assert_eq!(t.at4(0, 0, 1, 0), 5.0);
    }

    #[test]
    fn tnsr_header_layout() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_tnsr_bytes();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn tnsr_rejects_garbage() {
        assert!(Tensor::from_tnsr_bytes(b"NOPE\x01\0\0\0").is_err());
        let mut bytes = Tensor::ones(&[3]).to_tnsr_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Tensor::from_tnsr_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn tnsr_round_trip(dims in proptest::collection::vec(1usize..5, 1..=4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            let back = Tensor::from_tnsr_bytes(&t.to_tnsr_bytes()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
