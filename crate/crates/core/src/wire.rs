//! Frame format shared by every transport.
//!
//! ```text
//! u32  length of everything below, CRC included (little-endian)
//! u8   protocol version
//! u8   message kind
//! u32  iteration
//! u8   ndims, then ndims x u32 tensor dims
//! u8   dtype (0 = f32, 1 = f64)
//! u8   codec tag
//! f64  charged bits
//! ...  kind-specific body (a gradient body ends with the f64 loss)
//! u32  CRC32 of the bytes from the version through the body
//! ```
//!
//! All integers and floats are little-endian. Values travel as `f32` by
//! default and are widened to `f64` on receipt.

use std::io::{self, Read};

use serde::{Deserialize, Serialize};

use crate::baselines::Sparse;
use crate::codec::CodecKind;
use crate::error::ProtocolError;
use crate::tensor::Tensor;

pub const VERSION: u8 = 1;

/// Upper bound on a frame body, guarding allocations on corrupt input.
pub const MAX_FRAME: usize = 1 << 30;

type Decoded<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Decoded<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            tag => Err(ProtocolError::UnknownTag { what: "dtype", tag }),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Rounds values as a trip over the wire would.
    pub fn quantize(self, t: &Tensor) -> Tensor {
        match self {
            Dtype::F32 => t.map(|v| v as f32 as f64),
            Dtype::F64 => t.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageKind {
    Hello = 1,
    Ready = 2,
    Activation = 3,
    Gradient = 4,
    EvalRequest = 5,
    EvalResponse = 6,
    Shutdown = 7,
    Error = 8,
}

impl MessageKind {
    fn from_tag(tag: u8) -> Decoded<Self> {
        Ok(match tag {
            1 => MessageKind::Hello,
            2 => MessageKind::Ready,
            3 => MessageKind::Activation,
            4 => MessageKind::Gradient,
            5 => MessageKind::EvalRequest,
            6 => MessageKind::EvalResponse,
            7 => MessageKind::Shutdown,
            8 => MessageKind::Error,
            tag => return Err(ProtocolError::UnknownTag { what: "message", tag }),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(Tensor),
    Sparse(Sparse),
}

impl Payload {
    /// Shape written into the header dims block.
    fn dims(&self) -> &[usize] {
        match self {
            Payload::Dense(t) => t.shape(),
            Payload::Sparse(s) => &s.shape,
        }
    }

    pub fn into_dense(self) -> Tensor {
        match self {
            Payload::Dense(t) => t,
            Payload::Sparse(s) => s.to_dense(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Hard(Vec<u16>),
    /// `[T, L]` probability rows.
    Soft(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationPacket {
    pub iteration: u32,
    pub codec: CodecKind,
    pub charged_bits: f64,
    pub payload: Payload,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPacket {
    pub iteration: u32,
    pub codec: CodecKind,
    pub charged_bits: f64,
    pub payload: Payload,
    /// Server loss on the batch, reported for metrics only.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Run configuration as JSON.
    Hello(String),
    Ready,
    Activation(ActivationPacket),
    Gradient(GradientPacket),
    /// Uncompressed activations to classify; not charged.
    EvalRequest { iteration: u32, activations: Tensor },
    EvalResponse { iteration: u32, logits: Tensor },
    Shutdown,
    Error(String),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello(_) => MessageKind::Hello,
            Message::Ready => MessageKind::Ready,
            Message::Activation(_) => MessageKind::Activation,
            Message::Gradient(_) => MessageKind::Gradient,
            Message::EvalRequest { .. } => MessageKind::EvalRequest,
            Message::EvalResponse { .. } => MessageKind::EvalResponse,
            Message::Shutdown => MessageKind::Shutdown,
            Message::Error(_) => MessageKind::Error,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind() {
            MessageKind::Hello => "hello",
            MessageKind::Ready => "ready",
            MessageKind::Activation => "activation",
            MessageKind::Gradient => "gradient",
            MessageKind::EvalRequest => "eval request",
            MessageKind::EvalResponse => "eval response",
            MessageKind::Shutdown => "shutdown",
            MessageKind::Error => "error",
        }
    }
}

struct Writer {
    buf: Vec<u8>,
    dtype: Dtype,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn dims(&mut self, dims: &[usize]) {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
    }

    fn values(&mut self, values: &[f64]) {
        match self.dtype {
            Dtype::F32 => values
                .iter()
                .for_each(|&v| self.buf.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => values.iter().for_each(|&v| self.f64(v)),
        }
    }

    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn payload(&mut self, p: &Payload) {
        match p {
            Payload::Dense(t) => {
                self.u8(0);
                self.values(t.data());
            }
            Payload::Sparse(s) => {
                self.u8(1);
                self.u32(s.kept() as u32);
                self.values(s.values.data());
                s.indices.iter().for_each(|&i| self.u32(i));
            }
        }
    }
}

/// Serialises one message into a complete frame.
pub fn encode(msg: &Message, dtype: Dtype) -> Vec<u8> {
    let (iteration, dims, codec, bits): (u32, &[usize], u8, f64) = match msg {
        Message::Activation(p) => (p.iteration, p.payload.dims(), p.codec.tag(), p.charged_bits),
        Message::Gradient(p) => (p.iteration, p.payload.dims(), p.codec.tag(), p.charged_bits),
        Message::EvalRequest { iteration, activations } => (*iteration, activations.shape(), 0, 0.0),
        Message::EvalResponse { iteration, logits } => (*iteration, logits.shape(), 0, 0.0),
        _ => (0, &[], 0, 0.0),
    };
    let mut w = Writer {
        buf: vec![0; 4],
        dtype,
    };
    w.u8(VERSION);
    w.u8(msg.kind() as u8);
    w.u32(iteration);
    w.dims(dims);
    w.u8(dtype.tag());
    w.u8(codec);
    w.f64(bits);
    match msg {
        Message::Hello(s) | Message::Error(s) => w.text(s),
        Message::Ready | Message::Shutdown => {}
        Message::Activation(p) => {
            w.payload(&p.payload);
            match &p.labels {
                Labels::Hard(ys) => {
                    w.u8(0);
                    w.u32(ys.len() as u32);
                    ys.iter().for_each(|&y| w.u16(y));
                }
                Labels::Soft(t) => {
                    w.u8(1);
                    w.u32(t.rows() as u32);
                    w.u32(t.cols() as u32);
                    w.values(t.data());
                }
            }
        }
        Message::Gradient(p) => {
            w.payload(&p.payload);
            w.f64(p.loss);
        }
        Message::EvalRequest { activations: t, .. } | Message::EvalResponse { logits: t, .. } => {
            w.values(t.data())
        }
    }
    let crc = crc32fast::hash(&w.buf[4..]);
    w.u32(crc);
    let len = (w.buf.len() - 4) as u32;
    w.buf[..4].copy_from_slice(&len.to_le_bytes());
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    dtype: Dtype,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Decoded<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ProtocolError::Truncated { needed: n, available });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Decoded<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Decoded<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn f64(&mut self) -> Decoded<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn count(&mut self, n: usize, width: usize) -> Decoded<&'a [u8]> {
        let bytes = n
            .checked_mul(width)
            .filter(|&b| b <= MAX_FRAME)
            .ok_or_else(|| ProtocolError::Malformed(format!("element count {n} too large")))?;
        self.take(bytes)
    }

    fn values(&mut self, n: usize) -> Decoded<Vec<f64>> {
        let raw = self.count(n, self.dtype.width())?;
        Ok(match self.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect(),
        })
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Decoded<Tensor> {
        let n = checked_len(&shape)?;
        let data = self.values(n)?;
        Tensor::new(shape, data).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    fn text(&mut self) -> Decoded<String> {
        let n = self.u32()? as usize;
        let raw = self.count(n, 1)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ProtocolError::Malformed("text is not UTF-8".into()))
    }

    fn payload(&mut self, dims: Vec<usize>) -> Decoded<Payload> {
        match self.u8()? {
            0 => Ok(Payload::Dense(self.tensor(dims)?)),
            1 => {
                let batch = *dims
                    .first()
                    .ok_or_else(|| ProtocolError::Malformed("sparse payload without dims".into()))?;
                let width = checked_len(&dims)? / batch.max(1);
                let k = self.u32()? as usize;
                if k == 0 || k > width {
                    return Err(ProtocolError::Malformed(format!("{k} kept values of {width}")));
                }
                let values = self.tensor(vec![batch, k])?;
                let raw = self.count(batch * k, 4)?;
                let indices: Vec<u32> = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect();
                if indices.iter().any(|&i| i as usize >= width) {
                    return Err(ProtocolError::Malformed("sparse index out of range".into()));
                }
                Ok(Payload::Sparse(Sparse {
                    shape: dims,
                    values,
                    indices,
                }))
            }
            tag => Err(ProtocolError::UnknownTag { what: "payload", tag }),
        }
    }
}

fn checked_len(shape: &[usize]) -> Decoded<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_FRAME)
        .ok_or_else(|| ProtocolError::Malformed(format!("dims {shape:?} too large")))
}

/// Parses one complete frame, length prefix included. Returns the message
/// and the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Decoded<(Message, usize)> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("four bytes")) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::Malformed(format!("frame length {len} too large")));
    }
    if len < 4 {
        return Err(ProtocolError::Malformed(format!("frame length {len} below trailer size")));
    }
    if bytes.len() - 4 < len {
        return Err(ProtocolError::Truncated {
            needed: len,
            available: bytes.len() - 4,
        });
    }
    let frame = &bytes[4..4 + len];
    let (content, trailer) = frame.split_at(len - 4);
    let expected = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
    let computed = crc32fast::hash(content);
    let mut r = Reader {
        buf: content,
        pos: 0,
        dtype: Dtype::F64,
    };
    // The version is checked before the checksum so that a peer speaking a
    // different layout gets a precise error.
    let version = r.u8()?;
    if version != VERSION {
        return Err(ProtocolError::Version(version));
    }
    if expected != computed {
        return Err(ProtocolError::Checksum { expected, computed });
    }
    let kind = MessageKind::from_tag(r.u8()?)?;
    let iteration = r.u32()?;
    let ndims = r.u8()? as usize;
    let dims = (0..ndims)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Decoded<Vec<usize>>>()?;
    r.dtype = Dtype::from_tag(r.u8()?)?;
    let codec_tag = r.u8()?;
    let codec = CodecKind::from_tag(codec_tag).ok_or(ProtocolError::UnknownTag {
        what: "codec",
        tag: codec_tag,
    })?;
    let charged_bits = r.f64()?;
    let msg = match kind {
        MessageKind::Hello => Message::Hello(r.text()?),
        MessageKind::Error => Message::Error(r.text()?),
        MessageKind::Ready => Message::Ready,
        MessageKind::Shutdown => Message::Shutdown,
        MessageKind::Activation => {
            let payload = r.payload(dims)?;
            let labels = match r.u8()? {
                0 => {
                    let n = r.u32()? as usize;
                    let raw = r.count(n, 2)?;
                    Labels::Hard(
                        raw.chunks_exact(2)
                            .map(|c| u16::from_le_bytes(c.try_into().expect("two bytes")))
                            .collect(),
                    )
                }
                1 => {
                    let rows = r.u32()? as usize;
                    let cols = r.u32()? as usize;
                    Labels::Soft(r.tensor(vec![rows, cols])?)
                }
                tag => return Err(ProtocolError::UnknownTag { what: "label", tag }),
            };
            Message::Activation(ActivationPacket {
                iteration,
                codec,
                charged_bits,
                payload,
                labels,
            })
        }
        MessageKind::Gradient => Message::Gradient(GradientPacket {
            iteration,
            codec,
            charged_bits,
            payload: r.payload(dims)?,
            loss: r.f64()?,
        }),
        MessageKind::EvalRequest => Message::EvalRequest {
            iteration,
            activations: r.tensor(dims)?,
        },
        MessageKind::EvalResponse => Message::EvalResponse {
            iteration,
            logits: r.tensor(dims)?,
        },
    };
    if r.pos != content.len() {
        return Err(ProtocolError::Malformed(format!(
            "{} trailing bytes after {} body",
            content.len() - r.pos,
            msg.name()
        )));
    }
    Ok((msg, 4 + len))
}

/// Reads one whole frame from a stream. `Ok(None)` on a clean end of stream
/// before any byte of the frame.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut head = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(head) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame length {len} too large")));
    }
    let mut frame = vec![0u8; 4 + len];
    frame[..4].copy_from_slice(&head);
    reader.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(dtype: Dtype) -> Vec<Message> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = dtype.quantize(&Tensor::randn(&[2, 3, 4], 1.0, &mut rng));
        let sparse = crate::baselines::topk_encode(&t, 5).unwrap();
        vec![
            Message::Hello("{\"seed\":3}".into()),
            Message::Ready,
            Message::Activation(ActivationPacket {
                iteration: 7,
                codec: CodecKind::Base,
                charged_bits: 1234.5,
                payload: Payload::Dense(t.clone()),
                labels: Labels::Hard(vec![3, 9]),
            }),
            Message::Activation(ActivationPacket {
                iteration: 8,
                codec: CodecKind::Adc,
                charged_bits: 1.0,
                payload: Payload::Dense(t.clone()),
                labels: Labels::Soft(Tensor::from_rows(&[&[0.5, 0.5], &[0.25, 0.75]])),
            }),
            Message::Gradient(GradientPacket {
                iteration: 9,
                codec: CodecKind::TopK,
                charged_bits: 99.0,
                payload: Payload::Sparse(sparse),
                loss: 2.5,
            }),
            Message::EvalRequest {
                iteration: 1,
                activations: t.clone(),
            },
            Message::EvalResponse {
                iteration: 1,
                logits: t,
            },
            Message::Shutdown,
            Message::Error("boom".into()),
        ]
    }

    #[test]
    fn round_trip_both_dtypes() {
        for dtype in [Dtype::F32, Dtype::F64] {
            for msg in sample(dtype) {
                let bytes = encode(&msg, dtype);
                let (back, used) = decode(&bytes).unwrap();
                assert_eq!(used, bytes.len());
                assert_eq!(back, msg);
            }
        }
    }

    #[test]
    fn every_truncation_is_an_error() {
        for msg in sample(Dtype::F32) {
            let bytes = encode(&msg, Dtype::F32);
            for cut in 0..bytes.len() {
                assert!(decode(&bytes[..cut]).is_err(), "{} cut at {cut}", msg.name());
            }
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode(&Message::Error("abc".into()), Dtype::F32);
        let last_body = bytes.len() - 5;
        bytes[last_body] ^= 1;
        assert!(matches!(decode(&bytes), Err(ProtocolError::Checksum { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&Message::Ready, Dtype::F32);
        bytes[4] = 2;
        assert_eq!(decode(&bytes).unwrap_err(), ProtocolError::Version(2));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Message::Ready, Dtype::F32);
        // version, kind, iteration, ndims, dtype, codec, bits, crc
        assert_eq!(bytes.len(), 4 + 1 + 1 + 4 + 1 + 1 + 1 + 8 + 4);
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        assert_eq!(bytes[4], VERSION);
        assert_eq!(bytes[5], MessageKind::Ready as u8);
    }

    #[test]
    fn stream_reader_splits_frames() {
        let mut stream = Vec::new();
        for msg in sample(Dtype::F64) {
            stream.extend(encode(&msg, Dtype::F64));
        }
        let mut cursor = io::Cursor::new(stream);
        let mut n = 0;
        while let Some(frame) = read_frame(&mut cursor).unwrap() {
            decode(&frame).unwrap();
            n += 1;
        }
        assert_eq!(n, 9);
    }
}
