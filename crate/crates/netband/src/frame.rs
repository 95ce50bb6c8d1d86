//! Length-prefixed frames and the binary payload codec.
//!
//! A frame is `"PPGW" | version u8 | type u8 | length u64 LE | payload`.
//! Matrices inside payloads are `tag u8 | ndim u8 | dims u64 LE… | data LE`,
//! row-major, with tag 1 for `f64` and 2 for `i64`.

use std::io::{ErrorKind, Read, Write};

use ppgwas_core::linalg::{IntMatrix, Mat, Vector};

use crate::error::{NetError, NetResult};

pub const MAGIC: [u8; 4] = *b"PPGW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const DEFAULT_MAX_PAYLOAD: u64 = 1 << 30;

const TAG_F64: u8 = 1;
const TAG_I64: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }

    /// Bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> u64 {
        (HEADER_LEN + self.payload.len()) as u64
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type);
    out.extend_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

/// Validates a header and returns `(msg_type, payload length)`.
pub fn parse_header(header: &[u8; HEADER_LEN], max_payload: u64) -> NetResult<(u8, u64)> {
    if header[..4] != MAGIC {
        return Err(NetError::Frame(format!("bad magic {:02x?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(NetError::Frame(format!("unsupported version {}", header[4])));
    }
    let len = u64::from_le_bytes(header[6..14].try_into().expect("eight bytes"));
    if len > max_payload {
        return Err(NetError::Frame(format!(
            "payload of {len} bytes exceeds limit {max_payload}"
        )));
    }
    Ok((header[5], len))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8], max_payload: u64) -> NetResult<Frame> {
    if bytes.len() < HEADER_LEN {
        return Err(NetError::Frame(format!("truncated header: {} bytes", bytes.len())));
    }
    let header: [u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().expect("header length");
    let (msg_type, len) = parse_header(&header, max_payload)?;
    let body = &bytes[HEADER_LEN..];
    if (body.len() as u64) < len {
        return Err(NetError::Frame(format!(
            "truncated payload: {} of {len} bytes",
            body.len()
        )));
    }
    if body.len() as u64 > len {
        return Err(NetError::Frame(format!(
            "{} trailing bytes after payload",
            body.len() as u64 - len
        )));
    }
    Ok(Frame::new(msg_type, body.to_vec()))
}

/// Reads one frame from a stream. `Ok(None)` means a clean end of stream
/// before any header byte.
pub fn read_frame<R: Read>(r: &mut R, max_payload: u64) -> NetResult<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(NetError::Frame(format!("truncated header: {got} bytes"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (msg_type, len) = parse_header(&header, max_payload)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => NetError::Frame(format!("truncated payload of {len} bytes")),
        _ => NetError::Io(e),
    })?;
    Ok(Some(Frame::new(msg_type, payload)))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> NetResult<()> {
    w.write_all(&encode_frame(frame))?;
    w.flush()?;
    Ok(())
}

/// Append-only payload builder.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn mat(&mut self, m: &Mat) -> &mut Self {
        self.u8(TAG_F64).u8(2).u64(m.nrows() as u64).u64(m.ncols() as u64);
        self.buf.reserve(m.len() * 8);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.buf.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        self
    }

    pub fn vector(&mut self, v: &Vector) -> &mut Self {
        self.u8(TAG_F64).u8(1).u64(v.len() as u64);
        self.buf.reserve(v.len() * 8);
        for x in v.iter() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn int_mat(&mut self, m: &IntMatrix) -> &mut Self {
        self.u8(TAG_I64).u8(2).u64(m.rows() as u64).u64(m.cols() as u64);
        for x in m.as_slice() {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn mats(&mut self, ms: &[Mat]) -> &mut Self {
        self.u32(ms.len() as u32);
        for m in ms {
            self.mat(m);
        }
        self
    }

    pub fn vectors(&mut self, vs: &[Vector]) -> &mut Self {
        self.u32(vs.len() as u32);
        for v in vs {
            self.vector(v);
        }
        self
    }
}

/// Cursor over a received payload.
pub struct PayloadReader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(what: &'static str, buf: &'a [u8]) -> Self {
        PayloadReader { what, buf, pos: 0 }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> NetResult<T> {
        Err(NetError::Payload {
            what: self.what,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> NetResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "needs {n} more bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn finish(&self) -> NetResult<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> NetResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> NetResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self) -> NetResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn f64(&mut self) -> NetResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> NetResult<usize> {
        let v = self.u64()?;
        match usize::try_from(v) {
            Ok(n) if n <= self.buf.len() => Ok(n),
            _ => self.fail(format!("length {v} exceeds payload")),
        }
    }

    pub fn bytes(&mut self) -> NetResult<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    pub fn str(&mut self) -> NetResult<String> {
        let b = self.bytes()?;
        match std::str::from_utf8(b) {
            Ok(s) => Ok(s.to_owned()),
            Err(_) => self.fail("string is not UTF-8"),
        }
    }

    fn header(&mut self, tag: u8, ndim: u8) -> NetResult<Vec<usize>> {
        let (t, d) = (self.u8()?, self.u8()?);
        if t != tag || d != ndim {
            return self.fail(format!(
                "expected element tag {tag} with {ndim} dims, found tag {t} with {d}"
            ));
        }
        let dims = (0..ndim)
            .map(|_| self.len())
            .collect::<NetResult<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        match count {
            Some(c) if c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos) => Ok(dims),
            _ => self.fail(format!("dimensions {dims:?} exceed payload")),
        }
    }

    fn f64s(&mut self, n: usize) -> NetResult<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    pub fn mat(&mut self) -> NetResult<Mat> {
        let dims = self.header(TAG_F64, 2)?;
        let data = self.f64s(dims[0] * dims[1])?;
        Ok(Mat::from_row_slice(dims[0], dims[1], &data))
    }

    pub fn vector(&mut self) -> NetResult<Vector> {
        let dims = self.header(TAG_F64, 1)?;
        Ok(Vector::from_vec(self.f64s(dims[0])?))
    }

    pub fn int_mat(&mut self) -> NetResult<IntMatrix> {
        let dims = self.header(TAG_I64, 2)?;
        let data = self
            .take(dims[0] * dims[1] * 8)?
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        Ok(IntMatrix::from_vec(dims[0], dims[1], data)?)
    }

    fn count(&mut self) -> NetResult<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return self.fail(format!("element count {n} exceeds payload"));
        }
        Ok(n)
    }

    pub fn mats(&mut self) -> NetResult<Vec<Mat>> {
        let n = self.count()?;
        (0..n).map(|_| self.mat()).collect()
    }

    pub fn vectors(&mut self) -> NetResult<Vec<Vector>> {
        let n = self.count()?;
        (0..n).map(|_| self.vector()).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_hello_bytes() {
        let bytes = encode_frame(&Frame::new(1, Vec::new()));
        assert_eq!(bytes, [0x50, 0x50, 0x47, 0x57, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_frame(&Frame::new(3, vec![1, 2, 3]));
        assert!(matches!(decode_frame(&bytes[..10], 64), Err(NetError::Frame(_))));
        assert!(matches!(decode_frame(&bytes[..16], 64), Err(NetError::Frame(_))));
        assert!(matches!(decode_frame(&bytes, 2), Err(NetError::Frame(_))));
        bytes[4] = 9;
        assert!(matches!(decode_frame(&bytes, 64), Err(NetError::Frame(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_frame(&bytes, 64), Err(NetError::Frame(_))));
    }

    #[test]
    fn truncated_stream_errors() {
        let bytes = encode_frame(&Frame::new(2, vec![7; 40]));
        let mut cut = &bytes[..30];
        assert!(matches!(read_frame(&mut cut, 1024), Err(NetError::Frame(_))));
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty, 1024).unwrap().is_none());
    }

    #[test]
    fn matrix_layout_is_row_major() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut w = PayloadWriter::new();
        w.mat(&m);
        let b = w.finish();
        assert_eq!(&b[..2], &[1, 2]);
        assert_eq!(u64::from_le_bytes(b[2..10].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[26..34].try_into().unwrap()), 2.0);
        let i = IntMatrix::from_vec(1, 2, vec![-1, 5]).unwrap();
        let mut w = PayloadWriter::new();
        w.int_mat(&i);
        assert_eq!(w.finish()[0], 2);
    }

    #[test]
    fn hostile_dimensions_rejected() {
        let mut w = PayloadWriter::new();
        w.u8(1).u8(2).u64(u64::MAX).u64(2);
        let b = w.finish();
        assert!(PayloadReader::new("test", &b).mat().is_err());
    }

    proptest! {
        #[test]
        fn frame_round_trip(t in any::<u8>(), payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = Frame::new(t, payload);
            let bytes = encode_frame(&f);
            prop_assert_eq!(bytes.len() as u64, f.wire_len());
            prop_assert_eq!(decode_frame(&bytes, 1024).unwrap(), f.clone());
            let mut r = bytes.as_slice();
            prop_assert_eq!(read_frame(&mut r, 1024).unwrap(), Some(f));
        }

        #[test]
        fn payload_round_trip(r in 0usize..5, c in 0usize..5, seed in any::<u64>(), s in "[a-z]{0,12}") {
            let m = Mat::from_fn(r, c, |i, j| (seed as f64).sin() * (i * 7 + j) as f64);
            let v = Vector::from_fn(c, |i, _| i as f64 - 0.5);
            let im = IntMatrix::from_vec(r, c, (0..r * c).map(|x| x as i64 - seed as i64).collect()).unwrap();
            let mut w = PayloadWriter::new();
            w.mat(&m).vector(&v).int_mat(&im).str(&s).mats(&[m.clone(), m.clone()]);
            let b = w.finish();
            let mut rd = PayloadReader::new("test", &b);
            prop_assert_eq!(rd.mat().unwrap(), m.clone());
            prop_assert_eq!(rd.vector().unwrap(), v);
            prop_assert_eq!(rd.int_mat().unwrap(), im);
            prop_assert_eq!(rd.str().unwrap(), s);
            prop_assert_eq!(rd.mats().unwrap(), vec![m.clone(), m]);
            prop_assert!(rd.finish().is_ok());
        }
    }
}
