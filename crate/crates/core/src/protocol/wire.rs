//! Inter-robot records and their binary encoding.
//!
//! Every record is `tag: u8`, `len: u64 LE`, then `len` bytes of body. Bodies
//! use little-endian `u32`/`u64` integers and little-endian IEEE-754 `f64`;
//! variable-length arrays carry a `u64` element count first.
//!
//! | tag | record    | body                                                          |
//! |-----|-----------|---------------------------------------------------------------|
//! | 1   | CONNECT   | from u32, to u32, dim u64, points [f64]                       |
//! | 2   | MSG       | from u32, to u32, eta [f64], lambda [f64] (row-major, n×n)    |
//! | 3   | DECOUPLE  | from u32, to u32                                              |
//! | 4   | POSTERIOR | robot u32, version u64, dim u64, points [f64], mu [f64], sigma [f64], theta [f64] |

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::InfoGaussian;
use crate::inputs::InputSet;

/// A robot's inducing posterior as shared with peers.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    pub robot: u32,
    pub version: u64,
    pub z: InputSet,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Kernel log-parameters followed by `log σ`.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireRecord {
    Connect { from: u32, to: u32, z: InputSet },
    Msg { from: u32, to: u32, message: InfoGaussian },
    Decouple { from: u32, to: u32 },
    Posterior(PosteriorSnapshot),
}

const TAG_CONNECT: u8 = 1;
const TAG_MSG: u8 = 2;
const TAG_DECOUPLE: u8 = 3;
const TAG_POSTERIOR: u8 = 4;

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    put_u64(b, v.len() as u64);
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl WireRecord {
    pub fn encode(&self, out: &mut Vec<u8>) {
        let mut body = Vec::new();
        let tag = match self {
            WireRecord::Connect { from, to, z } => {
                put_u32(&mut body, *from);
                put_u32(&mut body, *to);
                put_u64(&mut body, z.dim() as u64);
                put_f64s(&mut body, z.as_flat());
                TAG_CONNECT
            }
            WireRecord::Msg { from, to, message } => {
                put_u32(&mut body, *from);
                put_u32(&mut body, *to);
                put_f64s(&mut body, message.eta.as_slice());
                put_f64s(&mut body, &row_major(&message.lambda));
                TAG_MSG
            }
            WireRecord::Decouple { from, to } => {
                put_u32(&mut body, *from);
                put_u32(&mut body, *to);
                TAG_DECOUPLE
            }
            WireRecord::Posterior(p) => {
                put_u32(&mut body, p.robot);
                put_u64(&mut body, p.version);
                put_u64(&mut body, p.z.dim() as u64);
                put_f64s(&mut body, p.z.as_flat());
                put_f64s(&mut body, p.mu.as_slice());
                put_f64s(&mut body, &row_major(&p.sigma));
                put_f64s(&mut body, &p.theta);
                TAG_POSTERIOR
            }
        };
        out.push(tag);
        put_u64(out, body.len() as u64);
        out.extend_from_slice(&body);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.encode(&mut v);
        v
    }

    /// Decodes one record from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(WireRecord, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let tag = r.u8()?;
        let len = r.u64()? as usize;
        let start = r.pos;
        if bytes.len() - start < len {
            return Err(Error::Parse {
                offset: start,
                message: format!("record body needs {len} bytes, {} available", bytes.len() - start),
            });
        }
        let mut body = Reader { bytes: &bytes[..start + len], pos: start };
        let rec = match tag {
            TAG_CONNECT => {
                let (from, to) = (body.u32()?, body.u32()?);
                let dim = body.u64()? as usize;
                let at = body.pos;
                let pts = body.f64s()?;
                let z = InputSet::from_flat(dim, pts)
                    .map_err(|_| Error::Parse { offset: at, message: format!("point data not divisible by dim {dim}") })?;
                WireRecord::Connect { from, to, z }
            }
            TAG_MSG => {
                let (from, to) = (body.u32()?, body.u32()?);
                let eta = body.f64s()?;
                let at = body.pos;
                let lam = body.f64s()?;
                let message = square(&eta, &lam, at)?;
                WireRecord::Msg { from, to, message }
            }
            TAG_DECOUPLE => WireRecord::Decouple { from: body.u32()?, to: body.u32()? },
            TAG_POSTERIOR => {
                let robot = body.u32()?;
                let version = body.u64()?;
                let dim = body.u64()? as usize;
                let at = body.pos;
                let z = InputSet::from_flat(dim, body.f64s()?)
                    .map_err(|_| Error::Parse { offset: at, message: format!("point data not divisible by dim {dim}") })?;
                let mu = body.f64s()?;
                let at = body.pos;
                let sigma = body.f64s()?;
                let g = square(&mu, &sigma, at)?;
                let theta = body.f64s()?;
                WireRecord::Posterior(PosteriorSnapshot { robot, version, z, mu: g.eta, sigma: g.lambda, theta })
            }
            other => return Err(Error::Parse { offset: 0, message: format!("unknown record tag {other}") }),
        };
        if body.pos != start + len {
            return Err(Error::Parse { offset: body.pos, message: format!("{} trailing bytes in record", start + len - body.pos) });
        }
        Ok((rec, start + len))
    }

    /// Decodes a concatenation of records.
    pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<WireRecord>> {
        let mut out = Vec::new();
        let mut base = 0;
        while !bytes.is_empty() {
            let (rec, used) = WireRecord::decode(bytes).map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse { offset: offset + base, message },
                e => e,
            })?;
            out.push(rec);
            bytes = &bytes[used..];
            base += used;
        }
        Ok(out)
    }
}

fn square(vec: &[f64], mat: &[f64], at: usize) -> Result<InfoGaussian> {
    let n = vec.len();
    if mat.len() != n * n {
        return Err(Error::Parse { offset: at, message: format!("expected {} matrix entries, found {}", n * n, mat.len()) });
    }
    Ok(InfoGaussian { eta: DVector::from_column_slice(vec), lambda: DMatrix::from_row_slice(n, n, mat) })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("expected {n} bytes, found {}", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or(Error::Parse { offset: self.pos, message: "length overflow".into() })?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
