//! Dense `(n, c, h, w)` tensors.
//!
//! Storage is a flat row-major buffer with `w` varying fastest. A tensor is
//! immutable once built and every constructor rejects non-finite values, so
//! any `Tensor` in hand is guaranteed NaN/Inf free.

use std::fmt;
use std::io::{Read, Write};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type tag carried by every tensor and written into the binary format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating-point element types a [`Tensor`] may hold.
pub trait Scalar:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Extents of a 4-axis tensor: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        shape.validate()?;
        Ok(shape)
    }

    pub fn scalar() -> Self {
        Shape {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("zero extent in {self}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Componentwise binary operator for [`Tensor::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

const MAGIC: &[u8; 4] = b"DCAT";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps a buffer, checking its length against `shape` and rejecting NaN/Inf.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of length {} does not fit shape {shape}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {pos} of a {shape} tensor is {}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// `tensor_filled`: every element equal to `value`.
    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        shape.validate()?;
        Self::from_vec(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::one())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn ones_like(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: vec![T::one(); self.data.len()],
        }
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::from_vec(Shape::scalar(), vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// The `(h, w)` plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Value of a scalar-shaped tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape != Shape::scalar() {
            return Err(Error::shape(format!("item() on non-scalar {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        shape.validate()?;
        if shape.len() != self.shape.len() {
            return Err(Error::shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {} and {} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `elementwise_binary`: `out[i] = a[i] op b[i]` for identically shaped operands.
    pub fn elementwise(&self, other: &Self, kind: BinaryKind) -> Result<Self> {
        self.ensure_same_shape(other, "elementwise")?;
        let data = match kind {
            BinaryKind::Add => self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
            BinaryKind::Mul => self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        };
        Self::from_vec(self.shape, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryKind::Add)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryKind::Mul)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other, "sub")?;
        Self::from_vec(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        )
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s)
    }

    /// Zero-pads both spatial axes by `pad` pixels on every side.
    pub fn pad_zero(&self, pad: usize) -> Result<Self> {
        if pad == 0 {
            return Ok(self.clone());
        }
        let s = self.shape;
        let (hp, wp) = (s.h + 2 * pad, s.w + 2 * pad);
        let mut data = vec![T::zero(); s.n * s.c * hp * wp];
        for (plane_idx, src) in self.data.chunks_exact(s.plane()).enumerate() {
            let dst = &mut data[plane_idx * hp * wp..(plane_idx + 1) * hp * wp];
            for y in 0..s.h {
                let row = (y + pad) * wp + pad;
                dst[row..row + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
        Ok(Tensor {
            shape: s.with_spatial(hp, wp),
            data,
        })
    }

    /// Inverse of [`Tensor::pad_zero`]: drops `pad` pixels from every spatial border.
    pub fn crop(&self, pad: usize) -> Result<Self> {
        if pad == 0 {
            return Ok(self.clone());
        }
        let s = self.shape;
        if s.h <= 2 * pad || s.w <= 2 * pad {
            return Err(Error::shape(format!("cannot crop {pad} from {s}")));
        }
        let (h, w) = (s.h - 2 * pad, s.w - 2 * pad);
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for src in self.data.chunks_exact(s.plane()) {
            for y in 0..h {
                let row = (y + pad) * s.w + pad;
                data.extend_from_slice(&src[row..row + w]);
            }
        }
        Ok(Tensor {
            shape: s.with_spatial(h, w),
            data,
        })
    }

    /// Returns whether `|a - b| <= atol + rtol * |b|` holds everywhere, plus the
    /// largest absolute discrepancy.
    pub fn allclose(&self, other: &Self, atol: f64, rtol: f64) -> Result<(bool, f64)> {
        self.ensure_same_shape(other, "allclose")?;
        let mut ok = true;
        let mut max_err = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let (a, b) = (a.as_f64(), b.as_f64());
            let err = (a - b).abs();
            max_err = max_err.max(err);
            if err > atol + rtol * b.abs() {
                ok = false;
            }
        }
        Ok((ok, max_err))
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack_batch of an empty list"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(format!("stack_batch: {ts} does not match {s}")));
            }
            n += ts.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape { n, ..s },
            data,
        })
    }

    /// Extracts batch item `n` as a single-item tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let s = self.shape;
        if n >= s.n {
            return Err(Error::shape(format!("batch index {n} out of range for {s}")));
        }
        let len = s.c * s.plane();
        Ok(Tensor {
            shape: Shape { n: 1, ..s },
            data: self.data[n * len..(n + 1) * len].to_vec(),
        })
    }

    /// Serializes as `DCAT | dtype u8 | n,c,h,w as u32 | little-endian buffer`.
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(21 + self.data.len() * T::DTYPE.size_bytes());
        buf.extend_from_slice(MAGIC);
        buf.push(T::DTYPE.tag());
        for e in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads one record written by [`Tensor::write_to`]. The stored dtype must match `T`.
    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut header = [0u8; 21];
        read_exact_or_format(input, &mut header, "tensor header")?;
        if &header[..4] != MAGIC {
            return Err(Error::Format(format!("bad tensor magic {:?}", &header[..4])));
        }
        let dtype = DType::from_tag(header[4])
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", header[4])))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "stored dtype {dtype} does not match requested {}",
                T::DTYPE
            )));
        }
        let ext = |i: usize| u32::from_le_bytes(header[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape::new(ext(0), ext(1), ext(2), ext(3))
            .map_err(|e| Error::Format(format!("tensor record: {e}")))?;
        let size = dtype.size_bytes();
        let mut raw = vec![0u8; shape.len() * size];
        read_exact_or_format(input, &mut raw, "tensor payload")?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(shape, data).map_err(|e| Error::Format(format!("tensor record: {e}")))
    }
}

pub(crate) fn read_exact_or_format<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated {what}"))
        } else {
            Error::Format(format!("reading {what}: {e}"))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), data).unwrap()
    }

    #[test]
    fn filled_examples() {
        let z = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2).unwrap(), 0.0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let o = Tensor::<f32>::filled(Shape::new(1, 3, 4, 4).unwrap(), 1.0).unwrap();
        assert_eq!(o.len(), 48);
        assert!(o.data().iter().all(|&v| v == 1.0));
        let h = Tensor::<f64>::filled(Shape::new(2, 1, 3, 3).unwrap(), 0.5).unwrap();
        assert_eq!(h.len(), 18);
        assert!(h.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_extent_is_shape_error() {
        assert!(matches!(Shape::new(1, 0, 2, 2), Err(Error::Shape(_))));
        let bad = Shape { n: 1, c: 1, h: 0, w: 3 };
        assert!(matches!(Tensor::<f64>::filled(bad, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_nan_and_inf() {
        let s = Shape::new(1, 1, 1, 2).unwrap();
        assert!(matches!(Tensor::from_vec(s, vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(Tensor::from_vec(s, vec![f64::INFINITY, 0.0]), Err(Error::NonFinite(_))));
        let big = Tensor::from_vec(s, vec![f64::MAX, 1.0]).unwrap();
        assert!(matches!(big.add(&big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn elementwise_examples() {
        let a = t((1, 1, 1, 2), vec![1.0, 2.0]);
        let b = t((1, 1, 1, 2), vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let x = t((1, 2, 1, 2), vec![0.5, -1.5, 2.0, 7.25]);
        assert_eq!(x.mul(&x.ones_like()).unwrap(), x);
        assert_eq!(x.mul(&x.zeros_like()).unwrap().data(), &[0.0; 4]);
        assert!(matches!(a.add(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn pad_examples() {
        let one = t((1, 1, 1, 1), vec![5.0]);
        let p = one.pad_zero(1).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 3, 3).unwrap());
        assert_eq!(p.data(), &[0., 0., 0., 0., 5., 0., 0., 0., 0.]);
        assert_eq!(one.pad_zero(0).unwrap(), one);

        let sq = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let p = sq.pad_zero(2).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 6, 6).unwrap());
        assert_eq!(p.at(0, 0, 2, 2), 1.0);
        assert_eq!(p.at(0, 0, 2, 3), 2.0);
        assert_eq!(p.at(0, 0, 3, 2), 3.0);
        assert_eq!(p.at(0, 0, 3, 3), 4.0);
        assert_eq!(p.sum(), 10.0);
    }

    #[test]
    fn allclose_examples() {
        let x = t((1, 1, 1, 3), vec![1.0, -2.0, 3.0]);
        assert_eq!(x.allclose(&x, 0.0, 0.0).unwrap(), (true, 0.0));
        let a = t((1, 1, 1, 1), vec![1.0]);
        let b = t((1, 1, 1, 1), vec![1.0 + 1e-9]);
        assert!(a.allclose(&b, 1e-8, 0.0).unwrap().0);
        let c = t((1, 1, 1, 1), vec![1.1]);
        let (ok, err) = a.allclose(&c, 1e-8, 1e-8).unwrap();
        assert!(!ok);
        assert!((err - 0.1).abs() < 1e-12);
    }

    #[test]
    fn serialization_layout() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 2).unwrap(), vec![1.0, -2.0]).unwrap();
        let bytes = x.to_bytes();
        assert_eq!(&bytes[..4], b"DCAT");
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);

        let back = Tensor::<f32>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, x);
        assert!(matches!(
            Tensor::<f64>::read_from(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Tensor::<f32>::read_from(&mut &bytes[..27]),
            Err(Error::Format(_))
        ));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor<f64>> {
        (1usize..3, 1usize..3, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| {
            prop::collection::vec(-1e3f64..1e3, n * c * h * w)
                .prop_map(move |d| Tensor::from_vec(Shape::new(n, c, h, w).unwrap(), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pad_then_crop_is_identity(x in arb_tensor(), pad in 0usize..4) {
            prop_assert_eq!(x.pad_zero(pad).unwrap().crop(pad).unwrap(), x);
        }

        #[test]
        fn add_commutes_and_zero_is_identity(x in arb_tensor()) {
            let y = x.map(|v| v * 0.5 - 3.0).unwrap();
            prop_assert_eq!(x.add(&y).unwrap(), y.add(&x).unwrap());
            prop_assert_eq!(x.add(&x.zeros_like()).unwrap(), x.clone());
            prop_assert_eq!(x.mul(&x.ones_like()).unwrap(), x);
        }

        #[test]
        fn serialization_round_trip(x in arb_tensor()) {
            let back = Tensor::<f64>::read_from(&mut x.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
