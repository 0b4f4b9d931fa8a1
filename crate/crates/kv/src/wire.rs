//! Binary protocol. All integers are little-endian.
//!
//! ```text
//! request:  id: u64 | opcode: u8 (0 GET, 1 PUT) | key_len: u32 | key
//!           | PUT only: value_len: u32 | value
//! response: id: u64 | status: u8 (0 OK, 1 MISS)
//!           | OK only: value_len: u32 | value
//! ```
//!
//! Successful PUTs answer OK with an empty value. Responses carry the
//! request id and may arrive in any order.

pub const OP_GET: u8 = 0;
pub const OP_PUT: u8 = 1;
pub const STATUS_OK: u8 = 0;
pub const STATUS_MISS: u8 = 1;

/// Largest key or value accepted by either side.
pub const MAX_FIELD: usize = 1 << 20;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unknown opcode {0}")]
    Opcode(u8),
    #[error("unknown status {0}")]
    Status(u8),
    #[error("empty key")]
    EmptyKey,
    #[error("field of {0} bytes exceeds the limit")]
    TooLarge(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
}

impl Op {
    pub fn key(&self) -> &[u8] {
        match self {
            Op::Get { key } | Op::Put { key, .. } => key,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub op: Op,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    /// GET hit (with the value) or completed PUT (empty value).
    Ok(Vec<u8>),
    Miss,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub id: u64,
    pub status: Status,
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl Request {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.id.to_le_bytes());
        match &self.op {
            Op::Get { key } => {
                out.push(OP_GET);
                put_field(out, key);
            }
            Op::Put { key, value } => {
                out.push(OP_PUT);
                put_field(out, key);
                put_field(out, value);
            }
        }
    }

    /// Decodes one request from the front of `buf`. `Ok(None)` means more
    /// bytes are needed; otherwise returns the request and its length.
    pub fn decode(buf: &[u8]) -> Result<Option<(Request, usize)>, WireError> {
        let mut c = Cursor { buf, at: 0 };
        let Some(id) = c.u64() else { return Ok(None) };
        let Some(op) = c.u8() else { return Ok(None) };
        if op != OP_GET && op != OP_PUT {
            return Err(WireError::Opcode(op));
        }
        let key = match c.field()? {
            Some([]) => return Err(WireError::EmptyKey),
            Some(k) => k,
            None => return Ok(None),
        };
        let op = if op == OP_GET {
            Op::Get { key: key.to_vec() }
        } else {
            let Some(value) = c.field()? else { return Ok(None) };
            Op::Put {
                key: key.to_vec(),
                value: value.to_vec(),
            }
        };
        Ok(Some((Request { id, op }, c.at)))
    }
}

impl Response {
    pub fn encode(&self, out: &mut Vec<u8>) {
        encode_response(self.id, match &self.status {
            Status::Ok(v) => Some(v),
            Status::Miss => None,
        }, out);
    }

    pub fn decode(buf: &[u8]) -> Result<Option<(Response, usize)>, WireError> {
        let mut c = Cursor { buf, at: 0 };
        let Some(id) = c.u64() else { return Ok(None) };
        let Some(status) = c.u8() else { return Ok(None) };
        let status = match status {
            STATUS_OK => match c.field()? {
                Some(v) => Status::Ok(v.to_vec()),
                None => return Ok(None),
            },
            STATUS_MISS => Status::Miss,
            s => return Err(WireError::Status(s)),
        };
        Ok(Some((Response { id, status }, c.at)))
    }
}

/// Encodes a response without building a [`Response`]; `None` is a MISS.
pub fn encode_response(id: u64, value: Option<&[u8]>, out: &mut Vec<u8>) {
    out.extend_from_slice(&id.to_le_bytes());
    match value {
        Some(v) => {
            out.push(STATUS_OK);
            put_field(out, v);
        }
        None => out.push(STATUS_MISS),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn field(&mut self) -> Result<Option<&'a [u8]>, WireError> {
        let Some(len) = self.take(4) else { return Ok(None) };
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        if len > MAX_FIELD {
            return Err(WireError::TooLarge(len));
        }
        Ok(self.take(len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_layout_is_byte_exact() {
        let mut b = Vec::new();
        Request {
            id: 0x0102,
            op: Op::Get { key: b"ab".to_vec() },
        }
        .encode(&mut b);
        assert_eq!(b, [2, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, b'a', b'b']);
    }

    #[test]
    fn put_and_responses_round_trip() {
        let reqs = [
            Request { id: 7, op: Op::Put { key: vec![1; 8], value: vec![2; 16] } },
            Request { id: u64::MAX, op: Op::Get { key: vec![9] } },
        ];
        let mut b = Vec::new();
        for r in &reqs {
            r.encode(&mut b);
        }
        let (r1, n1) = Request::decode(&b).unwrap().unwrap();
        let (r2, n2) = Request::decode(&b[n1..]).unwrap().unwrap();
        assert_eq!([r1, r2], reqs);
        assert_eq!(n1 + n2, b.len());
        assert_eq!(n1, 8 + 1 + 4 + 8 + 4 + 16);

        let resps = [
            Response { id: 1, status: Status::Ok(b"v".to_vec()) },
            Response { id: 2, status: Status::Miss },
            Response { id: 3, status: Status::Ok(Vec::new()) },
        ];
        let mut b = Vec::new();
        for r in &resps {
            r.encode(&mut b);
        }
        assert_eq!(&b[9..14], &[1, 0, 0, 0, b'v']);
        let mut at = 0;
        for want in &resps {
            let (got, n) = Response::decode(&b[at..]).unwrap().unwrap();
            assert_eq!(&got, want);
            at += n;
        }
        assert_eq!(at, b.len());
    }

    #[test]
    fn every_strict_prefix_is_incomplete() {
        let mut b = Vec::new();
        Request { id: 5, op: Op::Put { key: b"key".to_vec(), value: b"value".to_vec() } }.encode(&mut b);
        for n in 0..b.len() {
            assert_eq!(Request::decode(&b[..n]).unwrap(), None, "prefix {n}");
        }
        let mut r = Vec::new();
        encode_response(5, Some(b"xyz"), &mut r);
        for n in 0..r.len() {
            assert_eq!(Response::decode(&r[..n]).unwrap(), None);
        }
    }

    #[test]
    fn malformed_frames() {
        let mut b = 1u64.to_le_bytes().to_vec();
        b.push(7);
        assert_eq!(Request::decode(&b), Err(WireError::Opcode(7)));
        let mut b = 1u64.to_le_bytes().to_vec();
        b.push(OP_GET);
        b.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(Request::decode(&b), Err(WireError::EmptyKey));
        let mut b = 1u64.to_le_bytes().to_vec();
        b.push(OP_GET);
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Request::decode(&b), Err(WireError::TooLarge(_))));
        let mut b = 1u64.to_le_bytes().to_vec();
        b.push(9);
        assert_eq!(Response::decode(&b), Err(WireError::Status(9)));
    }
}
