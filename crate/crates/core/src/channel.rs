//! Single-writer request/response slots, one pair per (client, trustee).
//!
//! A client thread owns the request slot of each pair it uses and a trustee
//! owns the matching response slot. A batch is published by flipping the
//! request ready flag; the trustee detects it because the flag now differs
//! from the response ready flag, serves every request, writes all responses
//! and copies the request flag into the response flag. No path in this
//! module uses an atomic read-modify-write instruction: flags are plain
//! byte loads and stores with acquire/release ordering.
//!
//! # Layout
//!
//! Offsets are relative to the start of each slot; every slot is 64-byte
//! aligned. Words are native-endian machine words (little-endian on the
//! supported targets), length prefixes are 4-byte little-endian.
//!
//! Request slot (1216 bytes):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0      | 1    | ready flag (0 or 1) |
//! | 1      | 1    | request count of the current batch |
//! | 2      | 1    | bytes used in the primary block |
//! | 3      | 1    | reserved |
//! | 4      | 2    | bytes used in the overflow block |
//! | 6      | 2    | reserved |
//! | 8      | 32   | placement bitmap, bit `i` set when request `i` lives in the overflow block |
//! | 40     | 24   | reserved (client bookkeeping) |
//! | 64     | 128  | primary block |
//! | 192    | 1024 | overflow block |
//!
//! Each request lies wholly inside one block. A request goes to the primary
//! block when it fits in the remaining primary space, otherwise to the
//! overflow block. Within a block requests are packed in submission order.
//!
//! Encoded request:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0      | 8    | code word (entry point of the delegated body) |
//! | 8      | 8    | environment descriptor: environment length in bits 0..32, bit 32 set when an argument payload follows |
//! | 16     | 8    | property word |
//! | 24     | env length rounded up to 8 | captured environment |
//! | ...    | 4    | argument length (only with bit 32) |
//! | ...    | n, rounded up so prefix + n is a multiple of 8 | argument bytes |
//!
//! Response slot:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0      | 1    | ready flag |
//! | 1      | 1    | number of faulted responses in the batch |
//! | 2      | 1    | bytes used in the primary block |
//! | 3      | 1    | reserved |
//! | 4      | 2    | bytes used in the overflow block |
//! | 6      | 2    | reserved |
//! | 8      | 8    | bytes used in the spill buffer |
//! | 16     | 8    | spill buffer address (valid while the flags are equal) |
//! | 24     | 40   | reserved |
//! | 64     | 128  | primary block |
//! | 192    | 1024 | overflow block |
//!
//! Responses are written in request order: into the primary block until one
//! does not fit, then into the overflow block until one does not fit, then
//! into the trustee-owned spill buffer. Statically sized responses carry no
//! prefix; variable-sized ones are preceded by a 4-byte length. A response
//! may be empty.

use std::cell::UnsafeCell;
use std::mem::MaybeUninit;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};

use thiserror::Error;

pub const PRIMARY_BLOCK: usize = 128;
pub const OVERFLOW_BLOCK: usize = 1024;
pub const SLOT_CAPACITY: usize = PRIMARY_BLOCK + OVERFLOW_BLOCK;
pub const WORD: usize = std::mem::size_of::<usize>();
/// Code word + environment descriptor + property word.
pub const MIN_REQUEST: usize = 3 * WORD;
pub const LEN_PREFIX: usize = 4;
pub const MAX_BATCH: usize = u8::MAX as usize;
pub const HEADER_BYTES: usize = 64;

const HAS_ARG: u64 = 1 << 32;
const ENV_LEN_MASK: u64 = u32::MAX as u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("encoded request needs {needed} bytes but only {available} are free")]
    WontFit { needed: usize, available: usize },
    #[error("previous batch has not completed")]
    BatchInFlight,
    #[error("responses are not ready")]
    NotReady,
}

#[inline]
pub const fn pad8(n: usize) -> usize {
    (n + 7) & !7
}

fn as_uninit(bytes: &[u8]) -> &[MaybeUninit<u8>] {
    // SAFETY: MaybeUninit<u8> has the same layout as u8 and every u8 is a
    // valid MaybeUninit<u8>.
    unsafe { &*(bytes as *const [u8] as *const [MaybeUninit<u8>]) }
}

/// A request ready to be copied into a slot.
#[derive(Clone, Copy, Debug)]
pub struct EncodedRequest<'a> {
    pub code: usize,
    pub property: usize,
    pub env: &'a [MaybeUninit<u8>],
    pub arg: Option<&'a [u8]>,
}

impl<'a> EncodedRequest<'a> {
    pub fn new(code: usize, property: usize, env: &'a [u8], arg: Option<&'a [u8]>) -> Self {
        EncodedRequest {
            code,
            property,
            env: as_uninit(env),
            arg,
        }
    }

    pub(crate) fn from_raw(
        code: usize,
        property: usize,
        env: &'a [MaybeUninit<u8>],
        arg: Option<&'a [u8]>,
    ) -> Self {
        EncodedRequest {
            code,
            property,
            env,
            arg,
        }
    }

    /// Size of the encoding: 24 + padded environment + padded argument.
    pub fn encoded_len(&self) -> usize {
        encoded_len(self.env.len(), self.arg.map(<[u8]>::len))
    }
}

pub const fn encoded_len(env_len: usize, arg_len: Option<usize>) -> usize {
    let arg = match arg_len {
        Some(n) => pad8(LEN_PREFIX + n),
        None => 0,
    };
    MIN_REQUEST + pad8(env_len) + arg
}

/// Encodes `req` at the start of `dst`, returning the number of bytes used.
pub fn encode_request(
    req: &EncodedRequest<'_>,
    dst: &mut [MaybeUninit<u8>],
) -> Result<usize, ChannelError> {
    let needed = req.encoded_len();
    if needed > dst.len() {
        return Err(ChannelError::WontFit {
            needed,
            available: dst.len(),
        });
    }
    // SAFETY: bounds checked above.
    unsafe { encode_unchecked(req, dst.as_mut_ptr()) };
    Ok(needed)
}

unsafe fn encode_unchecked(req: &EncodedRequest<'_>, dst: *mut MaybeUninit<u8>) {
    let mut descriptor = req.env.len() as u64;
    if req.arg.is_some() {
        descriptor |= HAS_ARG;
    }
    ptr::write_unaligned(dst as *mut usize, req.code);
    ptr::write_unaligned(dst.add(WORD) as *mut u64, descriptor);
    ptr::write_unaligned(dst.add(2 * WORD) as *mut usize, req.property);
    let mut at = MIN_REQUEST;
    ptr::copy_nonoverlapping(req.env.as_ptr(), dst.add(at), req.env.len());
    at += pad8(req.env.len());
    if let Some(arg) = req.arg {
        ptr::write_unaligned(dst.add(at) as *mut [u8; 4], (arg.len() as u32).to_le_bytes());
        ptr::copy_nonoverlapping(
            arg.as_ptr() as *const MaybeUninit<u8>,
            dst.add(at + LEN_PREFIX),
            arg.len(),
        );
    }
}

/// How the client decodes the response to one request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseShape {
    Fixed(usize),
    Variable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedResponse {
    pub bytes: Vec<u8>,
    pub fault: Option<String>,
}

#[cfg(debug_assertions)]
mod writer_check {
    use std::sync::atomic::{AtomicU64, Ordering};

    static NEXT: AtomicU64 = AtomicU64::new(1);
    thread_local! {
        static ME: u64 = NEXT.fetch_add(1, Ordering::Relaxed);
    }

    /// Records the first writer of a slot and asserts every later write
    /// comes from the same thread.
    #[derive(Default)]
    pub struct WriterId(AtomicU64);

    impl WriterId {
        pub fn check(&self) {
            let me = ME.with(|m| *m);
            let seen = self.0.load(Ordering::Relaxed);
            if seen == 0 {
                self.0.store(me, Ordering::Relaxed);
            } else {
                assert_eq!(seen, me, "slot written by a second thread");
            }
        }
    }
}

#[repr(C, align(64))]
struct RequestHeader {
    ready: AtomicU8,
    count: UnsafeCell<u8>,
    primary_len: UnsafeCell<u8>,
    _r0: u8,
    overflow_len: UnsafeCell<u16>,
    _r1: [u8; 2],
    placement: UnsafeCell<[u8; 32]>,
    // Client bookkeeping: a batch was submitted and its responses are unread.
    awaiting: UnsafeCell<bool>,
    _r2: [u8; 23],
}

#[repr(C, align(64))]
pub struct RequestSlot {
    header: RequestHeader,
    primary: UnsafeCell<[MaybeUninit<u8>; PRIMARY_BLOCK]>,
    overflow: UnsafeCell<[MaybeUninit<u8>; OVERFLOW_BLOCK]>,
    #[cfg(debug_assertions)]
    writer: writer_check::WriterId,
}

#[repr(C, align(64))]
struct ResponseHeader {
    ready: AtomicU8,
    fault_count: UnsafeCell<u8>,
    primary_len: UnsafeCell<u8>,
    _r0: u8,
    overflow_len: UnsafeCell<u16>,
    _r1: [u8; 2],
    spill_len: UnsafeCell<u64>,
    spill_ptr: UnsafeCell<usize>,
    _r2: [u8; 40],
}

#[repr(C, align(64))]
pub struct ResponseSlot {
    header: ResponseHeader,
    primary: UnsafeCell<[MaybeUninit<u8>; PRIMARY_BLOCK]>,
    overflow: UnsafeCell<[MaybeUninit<u8>; OVERFLOW_BLOCK]>,
    // Trustee-owned; the client only reads them while the flags are equal.
    spill: UnsafeCell<Vec<MaybeUninit<u8>>>,
    faults: UnsafeCell<Vec<(u8, String)>>,
    #[cfg(debug_assertions)]
    writer: writer_check::WriterId,
}

/// The dedicated request/response slots of one (client, trustee) couple.
#[repr(C, align(64))]
pub struct ChannelPair {
    request: RequestSlot,
    response: ResponseSlot,
    poisoned: AtomicBool,
}

// SAFETY: every field behind an UnsafeCell has exactly one writer thread and
// readers on the other side only look at it after an acquire load of the
// ready flag that was released after the writes.
unsafe impl Sync for ChannelPair {}
unsafe impl Send for ChannelPair {}

impl Default for ChannelPair {
    fn default() -> Self {
        Self::new()
    }
}

impl ChannelPair {
    pub fn new() -> Self {
        ChannelPair {
            request: RequestSlot {
                header: RequestHeader {
                    ready: AtomicU8::new(0),
                    count: UnsafeCell::new(0),
                    primary_len: UnsafeCell::new(0),
                    _r0: 0,
                    overflow_len: UnsafeCell::new(0),
                    _r1: [0; 2],
                    placement: UnsafeCell::new([0; 32]),
                    awaiting: UnsafeCell::new(false),
                    _r2: [0; 23],
                },
                primary: UnsafeCell::new([MaybeUninit::uninit(); PRIMARY_BLOCK]),
                overflow: UnsafeCell::new([MaybeUninit::uninit(); OVERFLOW_BLOCK]),
                #[cfg(debug_assertions)]
                writer: Default::default(),
            },
            response: ResponseSlot {
                header: ResponseHeader {
                    ready: AtomicU8::new(0),
                    fault_count: UnsafeCell::new(0),
                    primary_len: UnsafeCell::new(0),
                    _r0: 0,
                    overflow_len: UnsafeCell::new(0),
                    _r1: [0; 2],
                    spill_len: UnsafeCell::new(0),
                    spill_ptr: UnsafeCell::new(0),
                    _r2: [0; 40],
                },
                primary: UnsafeCell::new([MaybeUninit::uninit(); PRIMARY_BLOCK]),
                overflow: UnsafeCell::new([MaybeUninit::uninit(); OVERFLOW_BLOCK]),
                spill: UnsafeCell::new(Vec::new()),
                faults: UnsafeCell::new(Vec::new()),
                #[cfg(debug_assertions)]
                writer: Default::default(),
            },
            poisoned: AtomicBool::new(false),
        }
    }

    fn check_poison(&self) {
        if self.poisoned.load(Ordering::Relaxed) {
            panic!("delegation channel poisoned by a malformed batch");
        }
    }

    fn poison(&self, what: &str) -> ! {
        self.poisoned.store(true, Ordering::Relaxed);
        panic!("malformed delegation batch: {what}");
    }

    /// Ready flags differ: a batch was published and not yet served.
    /// Readable from either side.
    pub fn has_pending_batch(&self) -> bool {
        self.request.header.ready.load(Ordering::Acquire)
            != self.response.header.ready.load(Ordering::Acquire)
    }

    // ---- client side -------------------------------------------------------

    /// True while a submitted batch has not been fully consumed by the client.
    /// Client-only.
    pub fn awaiting_responses(&self) -> bool {
        // SAFETY: client-owned field.
        unsafe { *self.request.header.awaiting.get() }
    }

    /// Starts a new batch. Client-only.
    pub fn begin_batch(&self) -> Result<BatchWriter<'_>, ChannelError> {
        self.check_poison();
        if self.awaiting_responses() {
            return Err(ChannelError::BatchInFlight);
        }
        Ok(BatchWriter {
            pair: self,
            primary_used: 0,
            overflow_used: 0,
            count: 0,
            placement: [0; 32],
        })
    }

    /// Writes the longest prefix of `tasks` that fits and publishes it.
    pub fn try_submit_batch(&self, tasks: &[EncodedRequest<'_>]) -> Result<usize, ChannelError> {
        let mut batch = self.begin_batch()?;
        for task in tasks {
            if !batch.try_push(task) {
                break;
            }
        }
        Ok(batch.commit())
    }

    /// Returns a reader over the responses of the in-flight batch once the
    /// trustee has answered it. Client-only.
    pub fn response_reader(&self) -> Result<ResponseReader<'_>, ChannelError> {
        self.check_poison();
        if !self.awaiting_responses() {
            return Err(ChannelError::NotReady);
        }
        let mine = self.request.header.ready.load(Ordering::Relaxed);
        if self.response.header.ready.load(Ordering::Acquire) != mine {
            return Err(ChannelError::NotReady);
        }
        // SAFETY: flags are equal, so the trustee has released every response
        // field and will not touch them until the next batch is published.
        unsafe {
            let h = &self.response.header;
            Ok(ResponseReader {
                pair: self,
                remaining: *self.request.header.count.get() as usize,
                index: 0,
                primary_len: *h.primary_len.get() as usize,
                overflow_len: *h.overflow_len.get() as usize,
                spill_len: *h.spill_len.get() as usize,
                primary_at: 0,
                overflow_at: 0,
                spill_at: 0,
                faults: &*self.response.faults.get(),
                fault_count: *h.fault_count.get() as usize,
            })
        }
    }

    /// Decodes every response of the in-flight batch, one shape per request.
    pub fn poll_responses(
        &self,
        shapes: &[ResponseShape],
    ) -> Result<Vec<DecodedResponse>, ChannelError> {
        let mut reader = self.response_reader()?;
        assert_eq!(shapes.len(), reader.remaining(), "one shape per submitted request");
        let out = shapes
            .iter()
            .map(|&shape| {
                let item = reader.next(shape);
                DecodedResponse {
                    // SAFETY: callers of this convenience decoder only use
                    // byte payloads written from initialised memory.
                    bytes: item.bytes.iter().map(|b| unsafe { b.assume_init() }).collect(),
                    fault: item.fault.map(str::to_owned),
                }
            })
            .collect();
        Ok(out)
    }

    // ---- trustee side ------------------------------------------------------

    /// Serves the published batch, if any. Trustee-only.
    ///
    /// `exec` is called once per request, in submission order, and must
    /// write at most one response through the writer (writing nothing means
    /// an empty response).
    pub fn poll_serve<E>(&self, mut exec: E) -> usize
    where
        E: FnMut(&RequestView<'_>, &mut ResponseWriter<'_>),
    {
        let req_flag = self.request.header.ready.load(Ordering::Acquire);
        if req_flag == self.response.header.ready.load(Ordering::Relaxed) {
            return 0;
        }
        self.check_poison();
        #[cfg(debug_assertions)]
        self.response.writer.check();
        // SAFETY: the acquire load above synchronises with the client's
        // release store, so the header and blocks are fully written; the
        // client does not touch them until we flip the response flag.
        let (count, primary_len, overflow_len, placement, primary, overflow) = unsafe {
            let h = &self.request.header;
            (
                *h.count.get() as usize,
                *h.primary_len.get() as usize,
                *h.overflow_len.get() as usize,
                *h.placement.get(),
                &*self.request.primary.get(),
                &*self.request.overflow.get(),
            )
        };
        if count == 0 || primary_len > PRIMARY_BLOCK || overflow_len > OVERFLOW_BLOCK {
            self.poison("bad batch header");
        }
        let mut writer = ResponseWriter::new(&self.response);
        let mut cursors = [0usize; 2];
        for i in 0..count {
            let in_overflow = placement[i / 8] & (1 << (i % 8)) != 0;
            let (block, used) = if in_overflow {
                (&overflow[..overflow_len], &mut cursors[1])
            } else {
                (&primary[..primary_len], &mut cursors[0])
            };
            let view = match RequestView::decode(&block[*used..]) {
                Some(v) => v,
                None => self.poison("bad request length"),
            };
            *used += view.encoded_len;
            writer.start(i as u8);
            exec(&view, &mut writer);
        }
        if cursors[0] != primary_len || cursors[1] != overflow_len {
            self.poison("trailing bytes in batch");
        }
        writer.finish();
        self.response.header.ready.store(req_flag, Ordering::Release);
        count
    }
}

/// Builds one batch in a request slot. Nothing is visible to the trustee
/// until [`BatchWriter::commit`].
pub struct BatchWriter<'a> {
    pair: &'a ChannelPair,
    primary_used: usize,
    overflow_used: usize,
    count: usize,
    placement: [u8; 32],
}

impl BatchWriter<'_> {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn bytes_used(&self) -> usize {
        self.primary_used + self.overflow_used
    }

    /// Picks a block for an encoding of `len` bytes.
    fn place(&mut self, len: usize) -> Option<(bool, usize)> {
        if self.count == MAX_BATCH {
            return None;
        }
        if self.primary_used + len <= PRIMARY_BLOCK {
            let at = self.primary_used;
            self.primary_used += len;
            Some((false, at))
        } else if self.overflow_used + len <= OVERFLOW_BLOCK {
            let at = self.overflow_used;
            self.overflow_used += len;
            Some((true, at))
        } else {
            None
        }
    }

    fn block_ptr(&self, overflow: bool, at: usize) -> *mut MaybeUninit<u8> {
        let slot = &self.pair.request;
        // SAFETY: the client owns the request blocks while building a batch.
        unsafe {
            if overflow {
                (*slot.overflow.get()).as_mut_ptr().add(at)
            } else {
                (*slot.primary.get()).as_mut_ptr().add(at)
            }
        }
    }

    fn mark(&mut self, overflow: bool) {
        if overflow {
            self.placement[self.count / 8] |= 1 << (self.count % 8);
        }
        self.count += 1;
    }

    /// Encodes `req` into the slot; false when it does not fit.
    pub fn try_push(&mut self, req: &EncodedRequest<'_>) -> bool {
        let len = req.encoded_len();
        let Some((overflow, at)) = self.place(len) else {
            return false;
        };
        // SAFETY: `place` reserved `len` bytes inside the chosen block.
        unsafe { encode_unchecked(req, self.block_ptr(overflow, at)) };
        self.mark(overflow);
        true
    }

    /// Copies an already encoded request (as produced by [`encode_request`]).
    pub fn try_push_encoded(&mut self, encoded: &[MaybeUninit<u8>]) -> bool {
        let Some((overflow, at)) = self.place(encoded.len()) else {
            return false;
        };
        // SAFETY: as in `try_push`.
        unsafe {
            ptr::copy_nonoverlapping(encoded.as_ptr(), self.block_ptr(overflow, at), encoded.len())
        };
        self.mark(overflow);
        true
    }

    /// Publishes the batch: header first, then the ready flag with release
    /// ordering. An empty batch publishes nothing.
    pub fn commit(self) -> usize {
        if self.count == 0 {
            return 0;
        }
        let slot = &self.pair.request;
        #[cfg(debug_assertions)]
        slot.writer.check();
        // SAFETY: client-owned header fields; the trustee reads them only
        // after observing the flag flip below.
        unsafe {
            *slot.header.count.get() = self.count as u8;
            *slot.header.primary_len.get() = self.primary_used as u8;
            *slot.header.overflow_len.get() = self.overflow_used as u16;
            *slot.header.placement.get() = self.placement;
            *slot.header.awaiting.get() = true;
        }
        let flag = slot.header.ready.load(Ordering::Relaxed);
        slot.header.ready.store(flag ^ 1, Ordering::Release);
        self.count
    }
}

/// One decoded request, borrowed from the slot.
pub struct RequestView<'a> {
    pub code: usize,
    pub property: usize,
    pub env: &'a [MaybeUninit<u8>],
    arg: Option<&'a [MaybeUninit<u8>]>,
    encoded_len: usize,
}

impl<'a> RequestView<'a> {
    fn decode(bytes: &'a [MaybeUninit<u8>]) -> Option<Self> {
        if bytes.len() < MIN_REQUEST {
            return None;
        }
        let p = bytes.as_ptr();
        // SAFETY: at least MIN_REQUEST bytes are present, all written by the
        // encoder.
        let (code, descriptor, property) = unsafe {
            (
                ptr::read_unaligned(p as *const usize),
                ptr::read_unaligned(p.add(WORD) as *const u64),
                ptr::read_unaligned(p.add(2 * WORD) as *const usize),
            )
        };
        if descriptor & !(ENV_LEN_MASK | HAS_ARG) != 0 {
            return None;
        }
        let env_len = (descriptor & ENV_LEN_MASK) as usize;
        let mut at = MIN_REQUEST.checked_add(pad8(env_len))?;
        if at > bytes.len() {
            return None;
        }
        let env = &bytes[MIN_REQUEST..MIN_REQUEST + env_len];
        let arg = if descriptor & HAS_ARG != 0 {
            if at + LEN_PREFIX > bytes.len() {
                return None;
            }
            // SAFETY: bounds checked; the prefix was written by the encoder.
            let n = u32::from_le_bytes(unsafe { ptr::read_unaligned(p.add(at) as *const [u8; 4]) })
                as usize;
            let end = at + LEN_PREFIX + n;
            if at + pad8(LEN_PREFIX + n) > bytes.len() {
                return None;
            }
            let arg = &bytes[at + LEN_PREFIX..end];
            at += pad8(LEN_PREFIX + n);
            Some(arg)
        } else {
            None
        };
        Some(RequestView {
            code,
            property,
            env,
            arg,
            encoded_len: at,
        })
    }

    /// The serialized argument payload, if the request carries one.
    pub fn arg(&self) -> Option<&'a [u8]> {
        // SAFETY: argument bytes are copied from an initialised `&[u8]`.
        self.arg
            .map(|a| unsafe { &*(a as *const [MaybeUninit<u8>] as *const [u8]) })
    }

    pub fn encoded_len(&self) -> usize {
        self.encoded_len
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Primary,
    Overflow,
    Spill,
}

/// Writes the responses of one batch on the trustee.
pub struct ResponseWriter<'a> {
    slot: &'a ResponseSlot,
    stage: Stage,
    primary_len: usize,
    overflow_len: usize,
    current: u8,
    faults: usize,
}

impl<'a> ResponseWriter<'a> {
    fn new(slot: &'a ResponseSlot) -> Self {
        // SAFETY: trustee-owned; the client finished reading the previous
        // batch before it published the current one.
        unsafe {
            (*slot.spill.get()).clear();
            (*slot.faults.get()).clear();
        }
        ResponseWriter {
            slot,
            stage: Stage::Primary,
            primary_len: 0,
            overflow_len: 0,
            current: 0,
            faults: 0,
        }
    }

    fn start(&mut self, index: u8) {
        self.current = index;
    }

    fn reserve(&mut self, len: usize) -> *mut MaybeUninit<u8> {
        if self.stage == Stage::Primary && self.primary_len + len <= PRIMARY_BLOCK {
            let at = self.primary_len;
            self.primary_len += len;
            // SAFETY: within the primary block.
            return unsafe { (*self.slot.primary.get()).as_mut_ptr().add(at) };
        }
        if self.stage <= Stage::Overflow && self.overflow_len + len <= OVERFLOW_BLOCK {
            self.stage = Stage::Overflow;
            let at = self.overflow_len;
            self.overflow_len += len;
            // SAFETY: within the overflow block.
            return unsafe { (*self.slot.overflow.get()).as_mut_ptr().add(at) };
        }
        self.stage = Stage::Spill;
        // SAFETY: trustee-owned spill buffer.
        unsafe {
            let spill = &mut *self.slot.spill.get();
            let at = spill.len();
            spill.reserve(len);
            spill.set_len(at + len);
            spill.as_mut_ptr().add(at)
        }
    }

    /// Statically sized response (no prefix).
    pub fn write_fixed(&mut self, bytes: &[MaybeUninit<u8>]) {
        if bytes.is_empty() {
            return;
        }
        let dst = self.reserve(bytes.len());
        // SAFETY: `reserve` returned room for `bytes.len()` bytes.
        unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), dst, bytes.len()) };
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        self.write_fixed(as_uninit(bytes));
    }

    /// Variable-sized response, preceded by its 4-byte length.
    pub fn write_variable(&mut self, bytes: &[u8]) {
        let dst = self.reserve(LEN_PREFIX + bytes.len());
        // SAFETY: room for prefix + payload was reserved.
        unsafe {
            ptr::write_unaligned(dst as *mut [u8; 4], (bytes.len() as u32).to_le_bytes());
            ptr::copy_nonoverlapping(
                bytes.as_ptr() as *const MaybeUninit<u8>,
                dst.add(LEN_PREFIX),
                bytes.len(),
            );
        }
    }

    /// Moves `value` into the response by bitwise copy. The client takes
    /// ownership when it reads the same type back.
    pub(crate) fn write_value<V>(&mut self, value: V) {
        let len = std::mem::size_of::<V>();
        if len > 0 {
            let dst = self.reserve(len);
            // SAFETY: room for `len` bytes was reserved.
            unsafe { ptr::write_unaligned(dst as *mut V, value) };
        } else {
            std::mem::forget(value);
        }
    }

    /// Marks the current response as failed and writes a placeholder of the
    /// expected shape so positions stay aligned.
    pub fn fault(&mut self, shape: ResponseShape, message: String) {
        match shape {
            ResponseShape::Fixed(n) => {
                if n > 0 {
                    let dst = self.reserve(n);
                    // SAFETY: reserved; zeroed so the placeholder is defined.
                    unsafe { ptr::write_bytes(dst, 0, n) };
                }
            }
            ResponseShape::Variable => self.write_variable(&[]),
        }
        // SAFETY: trustee-owned.
        unsafe { (*self.slot.faults.get()).push((self.current, message)) };
        self.faults += 1;
    }

    fn finish(self) {
        #[cfg(debug_assertions)]
        self.slot.writer.check();
        // SAFETY: trustee-owned header fields, published by the flag store
        // that follows in `poll_serve`.
        unsafe {
            let h = &self.slot.header;
            let spill = &*self.slot.spill.get();
            *h.fault_count.get() = self.faults as u8;
            *h.primary_len.get() = self.primary_len as u8;
            *h.overflow_len.get() = self.overflow_len as u16;
            *h.spill_len.get() = spill.len() as u64;
            *h.spill_ptr.get() = spill.as_ptr() as usize;
        }
    }
}

/// One response as seen by the client.
pub struct ResponseItem<'a> {
    pub bytes: &'a [MaybeUninit<u8>],
    pub fault: Option<&'a str>,
}

/// Sequential decoder over the responses of a completed batch. Dropping it
/// marks the batch consumed, which frees the slot for the next submission.
pub struct ResponseReader<'a> {
    pair: &'a ChannelPair,
    remaining: usize,
    index: usize,
    primary_len: usize,
    overflow_len: usize,
    spill_len: usize,
    primary_at: usize,
    overflow_at: usize,
    spill_at: usize,
    faults: &'a [(u8, String)],
    fault_count: usize,
}

impl<'a> ResponseReader<'a> {
    pub fn remaining(&self) -> usize {
        self.remaining
    }

    fn take(&mut self, len: usize) -> &'a [MaybeUninit<u8>] {
        if len == 0 {
            return &[];
        }
        let resp = &self.pair.response;
        // SAFETY: the trustee released these bytes; bounds are checked below.
        unsafe {
            if self.primary_at < self.primary_len {
                let at = self.primary_at;
                if at + len > self.primary_len {
                    self.pair.poison("response overruns primary block");
                }
                self.primary_at += len;
                &(&*resp.primary.get())[at..at + len]
            } else if self.overflow_at < self.overflow_len {
                let at = self.overflow_at;
                if at + len > self.overflow_len {
                    self.pair.poison("response overruns overflow block");
                }
                self.overflow_at += len;
                &(&*resp.overflow.get())[at..at + len]
            } else {
                let at = self.spill_at;
                if at + len > self.spill_len {
                    self.pair.poison("response overruns spill buffer");
                }
                self.spill_at += len;
                &(&*resp.spill.get())[at..at + len]
            }
        }
    }

    /// Decodes the next response. Panics if every response was consumed.
    pub fn next(&mut self, shape: ResponseShape) -> ResponseItem<'a> {
        assert!(self.remaining > 0, "no more responses in this batch");
        let bytes = match shape {
            ResponseShape::Fixed(n) => self.take(n),
            ResponseShape::Variable => {
                let prefix = self.take(LEN_PREFIX);
                // SAFETY: the prefix was written by `write_variable`.
                let n = u32::from_le_bytes(unsafe { ptr::read_unaligned(prefix.as_ptr() as *const [u8; 4]) });
                self.take(n as usize)
            }
        };
        let idx = self.index;
        let fault = if self.fault_count > 0 {
            self.faults
                .iter()
                .find(|(i, _)| *i as usize == idx)
                .map(|(_, m)| m.as_str())
        } else {
            None
        };
        self.index += 1;
        self.remaining -= 1;
        ResponseItem { bytes, fault }
    }
}

impl Drop for ResponseReader<'_> {
    fn drop(&mut self) {
        // SAFETY: client-owned field.
        unsafe { *self.pair.request.header.awaiting.get() = false };
    }
}

/// T x T grid of pairs, indexed (client, trustee). Built before threads
/// start; never resized.
pub struct ChannelMatrix {
    threads: usize,
    pairs: Box<[ChannelPair]>,
}

impl ChannelMatrix {
    pub fn new(threads: usize) -> Self {
        let pairs = (0..threads * threads).map(|_| ChannelPair::new()).collect();
        ChannelMatrix { threads, pairs }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn pair(&self, client: usize, trustee: usize) -> &ChannelPair {
        &self.pairs[client * self.threads + trustee]
    }

    /// No batch is waiting to be served anywhere.
    pub fn all_idle(&self) -> bool {
        self.pairs.iter().all(|p| !p.has_pending_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::mem::{align_of, offset_of, size_of};

    fn echo(req: &RequestView<'_>, out: &mut ResponseWriter<'_>) {
        let mut bytes: Vec<u8> = req.env.iter().map(|b| unsafe { b.assume_init() }).collect();
        if let Some(arg) = req.arg() {
            bytes.extend_from_slice(arg);
        }
        out.write_variable(&bytes);
    }

    /// Independent byte counter: how many requests of the given encoded
    /// sizes fit when each must sit wholly inside one block.
    fn oracle_fit(sizes: &[usize]) -> usize {
        let (mut p, mut o) = (0, 0);
        for (i, &s) in sizes.iter().enumerate() {
            if i == MAX_BATCH {
                return i;
            }
            if p + s <= PRIMARY_BLOCK {
                p += s;
            } else if o + s <= OVERFLOW_BLOCK {
                o += s;
            } else {
                return i;
            }
        }
        sizes.len()
    }

    #[test]
    fn layout_is_byte_exact() {
        assert_eq!(size_of::<RequestHeader>(), HEADER_BYTES);
        assert_eq!(size_of::<ResponseHeader>(), HEADER_BYTES);
        assert_eq!(offset_of!(RequestHeader, count), 1);
        assert_eq!(offset_of!(RequestHeader, primary_len), 2);
        assert_eq!(offset_of!(RequestHeader, overflow_len), 4);
        assert_eq!(offset_of!(RequestHeader, placement), 8);
        assert_eq!(offset_of!(RequestSlot, primary), 64);
        assert_eq!(offset_of!(RequestSlot, overflow), 192);
        assert_eq!(offset_of!(ResponseHeader, fault_count), 1);
        assert_eq!(offset_of!(ResponseHeader, spill_len), 8);
        assert_eq!(offset_of!(ResponseHeader, spill_ptr), 16);
        assert_eq!(offset_of!(ResponseSlot, primary), 64);
        assert_eq!(offset_of!(ResponseSlot, overflow), 192);
        assert_eq!(align_of::<ChannelPair>(), 64);
        assert_eq!(align_of::<RequestSlot>(), 64);
        assert_eq!(size_of::<RequestSlot>() % 64, 0);
        assert_eq!(PRIMARY_BLOCK + OVERFLOW_BLOCK, 1152);
    }

    #[test]
    fn encoding_sizes() {
        let zero = EncodedRequest::new(1, 2, &[], None);
        assert_eq!(zero.encoded_len(), 24);
        let one_word = EncodedRequest::new(1, 2, &[7u8; 8], None);
        assert_eq!(one_word.encoded_len(), 32);

        // Byte-counting oracle: an exactly sized buffer succeeds, one byte
        // less is refused, and nothing past the reported size is touched.
        let mut buf = vec![MaybeUninit::new(0xAAu8); 64];
        assert_eq!(encode_request(&one_word, &mut buf).unwrap(), 32);
        assert!(buf[32..].iter().all(|b| unsafe { b.assume_init() } == 0xAA));
        assert_eq!(encode_request(&one_word, &mut buf[..32]).unwrap(), 32);
        assert!(encode_request(&one_word, &mut buf[..31]).is_err());
        assert_eq!(encode_request(&zero, &mut buf[..24]).unwrap(), 24);
        assert!(encode_request(&zero, &mut buf[..23]).is_err());

        let big = vec![0u8; 1200];
        let req = EncodedRequest::new(1, 2, &[], Some(&big));
        let mut slot_space = vec![MaybeUninit::uninit(); SLOT_CAPACITY];
        assert!(matches!(
            encode_request(&req, &mut slot_space),
            Err(ChannelError::WontFit { .. })
        ));
        let pair = ChannelPair::new();
        assert_eq!(pair.try_submit_batch(&[req]).unwrap(), 0);
        assert!(!pair.has_pending_batch());
    }

    #[test]
    fn submit_serve_poll_three() {
        let pair = ChannelPair::new();
        let envs: [&[u8]; 3] = [b"get-a", b"put-bb", b"get-ccc"];
        let reqs: Vec<_> = envs.iter().map(|e| EncodedRequest::new(9, 0, e, None)).collect();
        assert_eq!(pair.try_submit_batch(&reqs).unwrap(), 3);
        assert!(pair.has_pending_batch());
        assert_eq!(pair.poll_responses(&[ResponseShape::Variable; 3]).unwrap_err(), ChannelError::NotReady);
        assert_eq!(pair.try_submit_batch(&reqs).unwrap_err(), ChannelError::BatchInFlight);
        assert_eq!(pair.poll_serve(echo), 3);
        assert!(!pair.has_pending_batch());
        assert_eq!(pair.poll_serve(echo), 0);
        let got = pair.poll_responses(&[ResponseShape::Variable; 3]).unwrap();
        let got: Vec<_> = got.into_iter().map(|r| r.bytes).collect();
        assert_eq!(got, envs.iter().map(|e| e.to_vec()).collect::<Vec<_>>());
        // Slot is free again.
        assert_eq!(pair.try_submit_batch(&reqs[..1]).unwrap(), 1);
    }

    #[test]
    fn empty_batch_does_not_flip() {
        let pair = ChannelPair::new();
        assert_eq!(pair.try_submit_batch(&[]).unwrap(), 0);
        assert!(!pair.has_pending_batch());
        assert!(!pair.awaiting_responses());
    }

    #[test]
    fn minimum_size_batch_capacity() {
        let pair = ChannelPair::new();
        let reqs = vec![EncodedRequest::new(1, 1, &[], None); 100];
        let expected = oracle_fit(&[24; 100]);
        assert_eq!(expected, 47);
        assert_eq!(pair.try_submit_batch(&reqs).unwrap(), expected);
        let mut served = 0;
        pair.poll_serve(|_, _| served += 1);
        assert_eq!(served, 47);
    }

    #[test]
    fn small_request_returns_to_primary_after_big_one() {
        let pair = ChannelPair::new();
        let big = [1u8; 120];
        let small: [u8; 8] = [2; 8];
        let reqs = [
            EncodedRequest::new(1, 0, &small, None),
            EncodedRequest::new(1, 0, &big, None),
            EncodedRequest::new(1, 0, &small, None),
        ];
        assert_eq!(pair.try_submit_batch(&reqs).unwrap(), 3);
        let mut order = vec![];
        pair.poll_serve(|r, _| order.push(r.env.len()));
        assert_eq!(order, vec![8, 120, 8]);
    }

    #[test]
    fn responses_spill_past_slot() {
        let pair = ChannelPair::new();
        let reqs = vec![EncodedRequest::new(1, 0, &[], None); 4];
        pair.try_submit_batch(&reqs).unwrap();
        pair.poll_serve(|_, out| out.write_bytes(&[0x5A; 500]));
        let got = pair.poll_responses(&[ResponseShape::Fixed(500); 4]).unwrap();
        assert!(got.iter().all(|r| r.bytes == vec![0x5A; 500]));
        let spill = unsafe { *pair.response.header.spill_len.get() };
        assert!(spill > 0);
    }

    #[test]
    fn zero_sized_responses() {
        let pair = ChannelPair::new();
        let reqs = vec![EncodedRequest::new(1, 0, &[], None); 5];
        pair.try_submit_batch(&reqs).unwrap();
        pair.poll_serve(|_, _| {});
        unsafe {
            assert_eq!(*pair.response.header.primary_len.get(), 0);
            assert_eq!(*pair.response.header.overflow_len.get(), 0);
        }
        let got = pair.poll_responses(&[ResponseShape::Fixed(0); 5]).unwrap();
        assert!(got.iter().all(|r| r.bytes.is_empty()));
    }

    #[test]
    fn faults_are_positional() {
        let pair = ChannelPair::new();
        let reqs = vec![EncodedRequest::new(1, 0, &[], None); 3];
        pair.try_submit_batch(&reqs).unwrap();
        let mut i = 0;
        pair.poll_serve(|_, out| {
            if i == 1 {
                out.fault(ResponseShape::Fixed(8), "boom".into());
            } else {
                out.write_bytes(&[i as u8; 8]);
            }
            i += 1;
        });
        let got = pair.poll_responses(&[ResponseShape::Fixed(8); 3]).unwrap();
        assert_eq!(got[0].fault, None);
        assert_eq!(got[1].fault.as_deref(), Some("boom"));
        assert_eq!(got[2].bytes, vec![2; 8]);
    }

    #[test]
    #[should_panic(expected = "malformed delegation batch")]
    fn malformed_length_poisons() {
        let pair = ChannelPair::new();
        pair.try_submit_batch(&[EncodedRequest::new(1, 0, &[1; 8], Some(b"abc"))]).unwrap();
        // Corrupt the argument length prefix.
        unsafe {
            let p = (*pair.request.primary.get()).as_mut_ptr();
            ptr::write_unaligned(p.add(32) as *mut [u8; 4], 4000u32.to_le_bytes());
        }
        pair.poll_serve(echo);
    }

    #[test]
    fn flags_cross_threads() {
        use std::sync::Arc;
        let pair = Arc::new(ChannelPair::new());
        let rounds = 2000usize;
        let server = {
            let pair = pair.clone();
            std::thread::spawn(move || {
                let mut served = 0;
                while served < rounds {
                    let n = pair.poll_serve(|r, out| {
                        let v = u64::from_le_bytes(
                            r.env.iter().map(|b| unsafe { b.assume_init() }).collect::<Vec<_>>().try_into().unwrap(),
                        );
                        out.write_bytes(&(v * 2).to_le_bytes());
                    });
                    served += n;
                    if n == 0 {
                        std::thread::yield_now();
                    }
                }
            })
        };
        for i in 0..rounds as u64 {
            let env = i.to_le_bytes();
            assert_eq!(pair.try_submit_batch(&[EncodedRequest::new(0, 0, &env, None)]).unwrap(), 1);
            let got = loop {
                match pair.poll_responses(&[ResponseShape::Fixed(8)]) {
                    Ok(r) => break r,
                    Err(_) => std::thread::yield_now(),
                }
            };
            assert_eq!(got[0].bytes, (i * 2).to_le_bytes());
        }
        server.join().unwrap();
    }
}
