//! Entrusted properties and the delegation API.
//!
//! A [`Trust<T>`] names a property owned by one trustee thread. Every access
//! is a closure shipped to that thread: [`Trust::apply`] waits for the
//! result, [`Trust::apply_then`] continues immediately and runs a callback
//! on the calling thread once the result is back, and [`Trust::launch`]
//! runs a body that may itself block inside a fiber on the trustee, holding
//! the property's [`Latch`].
//!
//! Closures must be `Send + 'static`: they can capture owned values but no
//! borrowed references, so nothing that points into the caller's stack ever
//! crosses the channel.
//!
//! ```compile_fail
//! # use trust_core::*;
//! # let rt = Runtime::start(RuntimeConfig::new(1)).unwrap();
//! # rt.block_on(|| {
//! let ct = local_trustee().entrust(0u64);
//! let step = 5u64;
//! let r = &step;
//! ct.apply(move |c| *c += *r); // borrowed capture is rejected
//! # });
//! ```
//!
//! ```compile_fail
//! # use trust_core::*;
//! # use std::rc::Rc;
//! # let rt = Runtime::start(RuntimeConfig::new(1)).unwrap();
//! # rt.block_on(|| {
//! let ct = local_trustee().entrust(0u64);
//! let shared = Rc::new(1u64);
//! ct.apply(move |c| *c += *shared); // Rc is not Send
//! # });
//! ```
//!
//! # Reference counting
//!
//! Handles carry weights. Entrusting creates a property of weight
//! `INITIAL_WEIGHT` held by one handle; cloning moves part of a handle's
//! weight into the new handle without any message; dropping returns the
//! handle's weight to the trustee with a non-blocking request. The property
//! is destroyed, on its trustee, when its weight reaches zero. Because a
//! clone never adds weight, a release overtaking some other message can
//! never bring the count to zero early.

use std::cell::{Cell, RefCell, UnsafeCell};
use std::collections::VecDeque;
use std::marker::PhantomData;
use std::mem::{self, size_of, MaybeUninit};
use std::ops::{Deref, DerefMut};
use std::panic::{catch_unwind, panic_any, AssertUnwindSafe};
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{encoded_len, RequestView, ResponseShape, ResponseWriter, OVERFLOW_BLOCK};
use crate::fibers::{self, check_can_block, delegated_depth, panic_message, DelegatedGuard, FiberKind, WakeToken, DELEGATED_CONTEXT_VIOLATION};
use crate::runtime::{with_route, with_worker, Completion, Route, Trampoline, Worker};

pub const INITIAL_WEIGHT: u64 = 1 << 62;
/// Weight handed to each clone while the source holds plenty.
const CLONE_WEIGHT: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrustError {
    #[error("failed to serialize argument: {0}")]
    Serialize(String),
    #[error("failed to deserialize argument on the trustee: {0}")]
    Deserialize(String),
}

/// Names one trustee thread of one runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrusteeRef {
    rt: u64,
    index: usize,
}

impl TrusteeRef {
    pub(crate) fn new(rt: u64, index: usize) -> Self {
        TrusteeRef { rt, index }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub(crate) fn runtime_id(&self) -> u64 {
        self.rt
    }

    /// True when called on this trustee's own thread.
    pub fn is_local(&self) -> bool {
        with_worker(|w| w.is_some_and(|w| w.shared.id == self.rt && w.index == self.index))
    }

    /// Moves `value` to this trustee and returns the first handle to it.
    ///
    /// Never blocks: the property is allocated by the caller and adopted by
    /// the trustee through a non-blocking request.
    pub fn entrust<T: Send + 'static>(&self, value: T) -> Trust<T> {
        let cell = Box::into_raw(Box::new(PropertyCell {
            weight: Cell::new(INITIAL_WEIGHT),
            in_use: Cell::new(false),
            adopted: Cell::new(false),
            released: Cell::new(false),
            value: UnsafeCell::new(value),
        }));
        let cell = NonNull::new(cell).unwrap();
        let trust = Trust {
            trustee: *self,
            cell,
            weight: AtomicU64::new(INITIAL_WEIGHT),
        };
        let addr = cell.as_ptr() as usize;
        with_route(*self, |route| match route {
            // SAFETY: the cell was just allocated and is owned by this trustee.
            Route::Local(w) => unsafe { adopt::<T>(w, addr) },
            Route::Remote(w) => send(
                w,
                self.index,
                addr,
                Adopt::<T>(PhantomData),
                None,
                ack_completion(),
            ),
            Route::Foreign(Some(shared)) => {
                shared.inject(
                    self.index,
                    Box::new(move || with_worker(|w| unsafe { adopt::<T>(w.expect("worker"), addr) })),
                );
            }
            Route::Foreign(None) => panic!("entrust on a runtime that has shut down"),
        });
        trust
    }
}

/// Storage of one property on its trustee. Only the trustee thread touches
/// it after construction.
pub(crate) struct PropertyCell<T> {
    weight: Cell<u64>,
    in_use: Cell<bool>,
    adopted: Cell<bool>,
    /// Weight reached zero before the adoption request arrived.
    released: Cell<bool>,
    value: UnsafeCell<T>,
}

impl<T> PropertyCell<T> {
    /// Runs `f` with exclusive access in delegated context.
    ///
    /// # Safety
    ///
    /// Must run on the owning trustee with the cell alive.
    unsafe fn with_exclusive<U>(cell: *const Self, f: impl FnOnce(&mut T) -> U) -> U {
        let c = &*cell;
        if c.in_use.get() {
            panic!("re-entrant access to a property from its own delegated body");
        }
        struct Reset<'a>(&'a Cell<bool>);
        impl Drop for Reset<'_> {
            fn drop(&mut self) {
                self.0.set(false);
            }
        }
        c.in_use.set(true);
        let _reset = Reset(&c.in_use);
        let _ctx = DelegatedGuard::enter();
        f(&mut *c.value.get())
    }
}

unsafe fn drop_cell<T>(addr: usize) {
    drop(Box::from_raw(addr as *mut PropertyCell<T>));
}

/// Registers a client-allocated cell with its trustee.
unsafe fn adopt<T>(w: &Worker, addr: usize) {
    let c = &*(addr as *const PropertyCell<T>);
    if c.released.get() {
        destroy_now::<T>(w, addr);
    } else {
        c.adopted.set(true);
        w.register_property(addr, drop_cell::<T>);
    }
}

unsafe fn destroy_now<T>(w: &Worker, addr: usize) {
    w.unregister_property(addr);
    let _ctx = DelegatedGuard::enter();
    if let Err(p) = catch_unwind(AssertUnwindSafe(|| drop_cell::<T>(addr))) {
        w.shared
            .record_error(format!("property destructor panicked: {}", panic_message(&*p)));
    }
}

/// Returns `weight` to the property; destroys it at zero.
unsafe fn release<T>(w: &Worker, addr: usize, weight: u64) {
    if !w.property_alive(addr) {
        return;
    }
    let c = &*(addr as *const PropertyCell<T>);
    let left = c
        .weight
        .get()
        .checked_sub(weight)
        .expect("property weight underflow");
    c.weight.set(left);
    if left > 0 {
        return;
    }
    if !c.adopted.get() {
        c.released.set(true);
    } else if c.in_use.get() {
        w.defer(Box::new(move || with_worker(|w| destroy_now::<T>(w.expect("worker"), addr))));
    } else {
        destroy_now::<T>(w, addr);
    }
}

/// A raw pointer that may travel with a task to the thread that owns the
/// pointee.
struct SendPtr<P>(*mut P);

// SAFETY: only dereferenced on the owning thread, as arranged by the caller.
unsafe impl<P> Send for SendPtr<P> {}

impl<P> SendPtr<P> {
    fn get(&self) -> *mut P {
        self.0
    }
}

/// A delegated request body as executed on the trustee.
trait Task: Send + 'static {
    type Output: Send + 'static;
    fn run(self, property: usize, arg: Option<&[u8]>) -> Self::Output;
}

struct ApplyTask<T, F>(F, PhantomData<fn(T)>);

impl<T, U, F> Task for ApplyTask<T, F>
where
    T: Send + 'static,
    U: Send + 'static,
    F: FnOnce(&mut T) -> U + Send + 'static,
{
    type Output = U;
    fn run(self, property: usize, _: Option<&[u8]>) -> U {
        // SAFETY: the property word names a live cell of this trustee, kept
        // alive by the caller's handle.
        unsafe { PropertyCell::with_exclusive(property as *const PropertyCell<T>, self.0) }
    }
}

struct ApplyWithTask<T, V, F>(F, PhantomData<fn(T, V)>);

impl<T, V, U, F> Task for ApplyWithTask<T, V, F>
where
    T: Send + 'static,
    V: DeserializeOwned + 'static,
    U: Send + 'static,
    F: FnOnce(&mut T, V) -> U + Send + 'static,
{
    type Output = Result<U, TrustError>;
    fn run(self, property: usize, arg: Option<&[u8]>) -> Self::Output {
        let v: V = bincode::deserialize(arg.unwrap_or_default())
            .map_err(|e| TrustError::Deserialize(e.to_string()))?;
        // SAFETY: as for `ApplyTask`.
        Ok(unsafe {
            PropertyCell::with_exclusive(property as *const PropertyCell<T>, |t| (self.0)(t, v))
        })
    }
}

/// Runs on the trustee thread itself, in delegated context.
struct ThreadTask<F>(F);

impl<R, F> Task for ThreadTask<F>
where
    R: Send + 'static,
    F: FnOnce() -> R + Send + 'static,
{
    type Output = R;
    fn run(self, _: usize, _: Option<&[u8]>) -> R {
        let _ctx = DelegatedGuard::enter();
        (self.0)()
    }
}

struct Adopt<T>(PhantomData<fn(T)>);

impl<T: Send + 'static> Task for Adopt<T> {
    type Output = ();
    fn run(self, property: usize, _: Option<&[u8]>) {
        // SAFETY: the property word is a cell allocated by `entrust`.
        with_worker(|w| unsafe { adopt::<T>(w.expect("worker"), property) })
    }
}

struct Release<T>(u64, PhantomData<fn(T)>);

impl<T: Send + 'static> Task for Release<T> {
    type Output = ();
    fn run(self, property: usize, _: Option<&[u8]>) {
        // SAFETY: the releasing handle kept the cell alive until now.
        with_worker(|w| unsafe { release::<T>(w.expect("worker"), property, self.0) })
    }
}

struct Grant<T>(u64, PhantomData<fn(T)>);

impl<T: Send + 'static> Task for Grant<T> {
    type Output = ();
    fn run(self, property: usize, _: Option<&[u8]>) {
        // SAFETY: the requesting handle keeps the cell alive.
        let c = unsafe { &*(property as *const PropertyCell<T>) };
        c.weight.set(c.weight.get() + self.0);
    }
}

fn execute<K: Task>(task: K, property: usize, arg: Option<&[u8]>, out: &mut ResponseWriter<'_>) {
    match catch_unwind(AssertUnwindSafe(|| task.run(property, arg))) {
        Ok(v) => out.write_value(v),
        Err(p) => out.fault(
            ResponseShape::Fixed(size_of::<K::Output>()),
            panic_message(&*p),
        ),
    }
}

/// The task value is stored bitwise in the request environment.
unsafe fn inline_trampoline<K: Task>(req: &RequestView<'_>, out: &mut ResponseWriter<'_>) {
    debug_assert_eq!(req.env.len(), size_of::<K>());
    let task = ptr::read_unaligned(req.env.as_ptr() as *const K);
    execute(task, req.property, req.arg(), out);
}

/// The environment holds a pointer to a boxed task and argument, for
/// requests too large for a slot block.
unsafe fn boxed_trampoline<K: Task>(req: &RequestView<'_>, out: &mut ResponseWriter<'_>) {
    let addr = ptr::read_unaligned(req.env.as_ptr() as *const usize);
    let boxed = Box::from_raw(addr as *mut (K, Option<Vec<u8>>));
    let (task, arg) = *boxed;
    execute(task, req.property, arg.as_deref(), out);
}

fn send<K: Task>(
    w: &Worker,
    trustee: usize,
    property: usize,
    task: K,
    arg: Option<Vec<u8>>,
    completion: Completion,
) {
    let inline = encoded_len(size_of::<K>(), arg.as_ref().map(Vec::len));
    if inline <= OVERFLOW_BLOCK {
        let task = mem::ManuallyDrop::new(task);
        // SAFETY: the bytes of `task` are moved into the request; the
        // original is never dropped.
        let env = unsafe {
            std::slice::from_raw_parts(
                &*task as *const K as *const MaybeUninit<u8>,
                size_of::<K>(),
            )
        };
        w.enqueue(
            trustee,
            inline_trampoline::<K> as Trampoline,
            property,
            env,
            arg.as_deref(),
            completion,
        );
    } else {
        let addr = Box::into_raw(Box::new((task, arg))) as usize;
        let env = addr.to_ne_bytes().map(MaybeUninit::new);
        w.enqueue(
            trustee,
            boxed_trampoline::<K> as Trampoline,
            property,
            &env,
            None,
            completion,
        );
    }
}

unsafe fn ack_reply(_: *mut (), _: &[MaybeUninit<u8>], fault: Option<&str>) {
    if let Some(m) = fault {
        with_worker(|w| {
            if let Some(w) = w {
                w.shared.record_error(format!("runtime request failed: {m}"));
            }
        });
    }
}

fn ack_completion() -> Completion {
    Completion {
        shape: ResponseShape::Fixed(0),
        on_reply: ack_reply,
        data: ptr::null_mut(),
    }
}

/// Result slot on a blocked fiber's stack.
struct Waiter<U> {
    result: Option<Result<U, String>>,
    token: Option<WakeToken>,
}

impl<U> Waiter<U> {
    fn new() -> Self {
        Waiter {
            result: None,
            token: None,
        }
    }

    unsafe fn complete(this: *mut Self, r: Result<U, String>) {
        (*this).result = Some(r);
        if let Some(tok) = (*this).token.take() {
            fibers::resume(tok);
        }
    }

    /// Suspends until `complete` ran, then returns the value or re-raises
    /// the trustee-side panic.
    fn wait(this: *mut Self) -> U {
        // SAFETY: `this` lives on the current fiber's stack.
        unsafe {
            while (*this).result.is_none() {
                fibers::suspend_current(|tok| (*this).token = Some(tok));
            }
            match (*this).result.take().unwrap() {
                Ok(v) => v,
                Err(msg) => panic_any(msg),
            }
        }
    }
}

unsafe fn read_reply<U>(bytes: &[MaybeUninit<u8>], fault: Option<&str>) -> Result<U, String> {
    match fault {
        None => {
            debug_assert_eq!(bytes.len(), size_of::<U>());
            Ok(ptr::read_unaligned(bytes.as_ptr() as *const U))
        }
        Some(m) => Err(m.to_owned()),
    }
}

unsafe fn wake_reply<U>(data: *mut (), bytes: &[MaybeUninit<u8>], fault: Option<&str>) {
    Waiter::complete(data as *mut Waiter<U>, read_reply(bytes, fault));
}

unsafe fn then_reply<U, G: FnOnce(U)>(data: *mut (), bytes: &[MaybeUninit<u8>], fault: Option<&str>) {
    let then = Box::from_raw(data as *mut G);
    let r = read_reply::<U>(bytes, fault);
    with_worker(|w| {
        let w = w.expect("worker");
        match r {
            Ok(v) => w.run_callback(move || then(v)),
            Err(m) => w
                .shared
                .record_error(format!("delegated body panicked: {m}")),
        }
    });
}

unsafe fn then_with_reply<U, G: FnOnce(U)>(
    data: *mut (),
    bytes: &[MaybeUninit<u8>],
    fault: Option<&str>,
) {
    let then = Box::from_raw(data as *mut G);
    let r = read_reply::<Result<U, TrustError>>(bytes, fault);
    with_worker(|w| {
        let w = w.expect("worker");
        match r {
            Ok(Ok(v)) => w.run_callback(move || then(v)),
            Ok(Err(e)) => w.shared.record_error(e.to_string()),
            Err(m) => w
                .shared
                .record_error(format!("delegated body panicked: {m}")),
        }
    });
}

fn blocking_completion<U>(waiter: *mut Waiter<U>) -> Completion {
    Completion {
        shape: ResponseShape::Fixed(size_of::<U>()),
        on_reply: wake_reply::<U>,
        data: waiter as *mut (),
    }
}

fn check_not_delegated(op: &str) {
    if delegated_depth() > 0 {
        panic!("{DELEGATED_CONTEXT_VIOLATION}: {op} called inside a delegated body");
    }
}

/// A shared handle to a property owned by a trustee thread.
pub struct Trust<T: Send + 'static> {
    trustee: TrusteeRef,
    cell: NonNull<PropertyCell<T>>,
    weight: AtomicU64,
}

// SAFETY: the property is only touched on its trustee; handles carry a
// pointer that other threads never dereference.
unsafe impl<T: Send + 'static> Send for Trust<T> {}
unsafe impl<T: Send + 'static> Sync for Trust<T> {}

impl<T: Send + 'static> std::fmt::Debug for Trust<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trust")
            .field("trustee", &self.trustee.index)
            .field("property", &self.cell)
            .finish()
    }
}

impl<T: Send + 'static> Trust<T> {
    pub fn trustee(&self) -> TrusteeRef {
        self.trustee
    }

    fn addr(&self) -> usize {
        self.cell.as_ptr() as usize
    }

    fn cell_ptr(&self) -> SendPtr<PropertyCell<T>> {
        SendPtr(self.cell.as_ptr())
    }

    /// Runs `f` on the property and returns its result. Suspends the current
    /// fiber until the trustee answers; runs inline when the trustee is the
    /// current thread.
    ///
    /// # Panics
    ///
    /// With a delegated-context violation inside a delegated body. A panic
    /// in `f` is re-raised here with the same message.
    pub fn apply<U, F>(&self, f: F) -> U
    where
        F: FnOnce(&mut T) -> U + Send + 'static,
        U: Send + 'static,
    {
        with_route(self.trustee, |route| match route {
            Route::Local(w) => {
                check_not_delegated("apply");
                w.count_local_shortcut();
                // SAFETY: local trustee, live cell.
                unsafe { PropertyCell::with_exclusive(self.cell.as_ptr(), f) }
            }
            Route::Remote(w) => {
                check_can_block("apply");
                w.throttle(self.trustee.index);
                let mut waiter = Waiter::<U>::new();
                let wp: *mut Waiter<U> = &mut waiter;
                send(
                    w,
                    self.trustee.index,
                    self.addr(),
                    ApplyTask::<T, F>(f, PhantomData),
                    None,
                    blocking_completion(wp),
                );
                Waiter::wait(wp)
            }
            Route::Foreign(Some(shared)) => {
                let cell = self.cell_ptr();
                shared.run_blocking(self.trustee.index, move || unsafe {
                    PropertyCell::with_exclusive(cell.get(), f)
                })
            }
            Route::Foreign(None) => panic!("apply on a runtime that has shut down"),
        })
    }

    /// Ships `f` to the trustee and returns at once. `then` runs later on
    /// this thread with the result. Legal inside delegated context.
    ///
    /// # Panics
    ///
    /// When called from a thread that is not a worker of the runtime.
    pub fn apply_then<U, F, G>(&self, f: F, then: G)
    where
        F: FnOnce(&mut T) -> U + Send + 'static,
        U: Send + 'static,
        G: FnOnce(U) + 'static,
    {
        with_route(self.trustee, |route| match route {
            Route::Local(w) => {
                w.count_local_shortcut();
                let cell = self.cell.as_ptr();
                // SAFETY: local trustee; the property stays alive while its
                // handle exists, and deferred work runs before any release
                // queued after it.
                let busy = unsafe { (*cell).in_use.get() };
                if busy || delegated_depth() > 0 || w.has_deferred() {
                    let keep = self.clone();
                    w.defer(Box::new(move || {
                        let v = unsafe { PropertyCell::with_exclusive(keep.cell.as_ptr(), f) };
                        drop(keep);
                        then(v);
                    }));
                } else {
                    let r = catch_unwind(AssertUnwindSafe(|| unsafe {
                        PropertyCell::with_exclusive(cell, f)
                    }));
                    match r {
                        Ok(v) => w.run_callback(move || then(v)),
                        Err(p) => w.shared.record_error(format!(
                            "delegated body panicked: {}",
                            panic_message(&*p)
                        )),
                    }
                }
            }
            Route::Remote(w) => {
                if fibers::in_fiber() && delegated_depth() == 0 {
                    w.throttle(self.trustee.index);
                }
                let data = Box::into_raw(Box::new(then)) as *mut ();
                send(
                    w,
                    self.trustee.index,
                    self.addr(),
                    ApplyTask::<T, F>(f, PhantomData),
                    None,
                    Completion {
                        shape: ResponseShape::Fixed(size_of::<U>()),
                        on_reply: then_reply::<U, G>,
                        data,
                    },
                );
            }
            Route::Foreign(_) => panic!("apply_then must be called from a runtime worker thread"),
        })
    }

    /// Like [`Trust::apply`], with an argument that travels serialized and
    /// is rebuilt on the trustee. Use a tuple for several arguments.
    pub fn apply_with<V, U, F>(&self, f: F, arg: V) -> Result<U, TrustError>
    where
        V: Serialize + DeserializeOwned + 'static,
        F: FnOnce(&mut T, V) -> U + Send + 'static,
        U: Send + 'static,
    {
        let bytes = bincode::serialize(&arg).map_err(|e| TrustError::Serialize(e.to_string()))?;
        drop(arg);
        with_route(self.trustee, |route| match route {
            Route::Local(w) => {
                check_not_delegated("apply_with");
                w.count_local_shortcut();
                let v: V = bincode::deserialize(&bytes)
                    .map_err(|e| TrustError::Deserialize(e.to_string()))?;
                Ok(unsafe { PropertyCell::with_exclusive(self.cell.as_ptr(), |t| f(t, v)) })
            }
            Route::Remote(w) => {
                check_can_block("apply_with");
                w.throttle(self.trustee.index);
                let mut waiter = Waiter::<Result<U, TrustError>>::new();
                let wp: *mut Waiter<Result<U, TrustError>> = &mut waiter;
                send(
                    w,
                    self.trustee.index,
                    self.addr(),
                    ApplyWithTask::<T, V, F>(f, PhantomData),
                    Some(bytes),
                    blocking_completion(wp),
                );
                Waiter::wait(wp)
            }
            Route::Foreign(Some(shared)) => {
                let cell = self.cell_ptr();
                let task = ApplyWithTask::<T, V, F>(f, PhantomData);
                shared.run_blocking(self.trustee.index, move || {
                    task.run(cell.get() as usize, Some(&bytes))
                })
            }
            Route::Foreign(None) => panic!("apply_with on a runtime that has shut down"),
        })
    }

    /// Non-blocking [`Trust::apply_with`]; `then` runs on this thread.
    pub fn apply_with_then<V, U, F, G>(&self, f: F, arg: V, then: G) -> Result<(), TrustError>
    where
        V: Serialize + DeserializeOwned + 'static,
        F: FnOnce(&mut T, V) -> U + Send + 'static,
        U: Send + 'static,
        G: FnOnce(U) + 'static,
    {
        let bytes = bincode::serialize(&arg).map_err(|e| TrustError::Serialize(e.to_string()))?;
        drop(arg);
        with_route(self.trustee, |route| match route {
            Route::Local(_) => {
                self.apply_then(
                    move |t| match bincode::deserialize::<V>(&bytes) {
                        Ok(v) => f(t, v),
                        Err(e) => panic!("{}", TrustError::Deserialize(e.to_string())),
                    },
                    then,
                );
                Ok(())
            }
            Route::Remote(w) => {
                if fibers::in_fiber() && delegated_depth() == 0 {
                    w.throttle(self.trustee.index);
                }
                let data = Box::into_raw(Box::new(then)) as *mut ();
                send(
                    w,
                    self.trustee.index,
                    self.addr(),
                    ApplyWithTask::<T, V, F>(f, PhantomData),
                    Some(bytes),
                    Completion {
                        shape: ResponseShape::Fixed(size_of::<Result<U, TrustError>>()),
                        on_reply: then_with_reply::<U, G>,
                        data,
                    },
                );
                Ok(())
            }
            Route::Foreign(_) => {
                panic!("apply_with_then must be called from a runtime worker thread")
            }
        })
    }

    /// Current weight of this handle (diagnostics).
    pub fn weight(&self) -> u64 {
        self.weight.load(Ordering::Relaxed)
    }

    /// Adds weight to the property and to this handle when it cannot be
    /// split any further.
    fn refill(&self) {
        let add = CLONE_WEIGHT << 1;
        with_route(self.trustee, |route| match route {
            Route::Local(_) => unsafe {
                let c = &*self.cell.as_ptr();
                c.weight.set(c.weight.get() + add);
            },
            Route::Remote(w) => {
                check_can_block("Trust::clone (weight refill)");
                let mut waiter = Waiter::<()>::new();
                let wp: *mut Waiter<()> = &mut waiter;
                send(
                    w,
                    self.trustee.index,
                    self.addr(),
                    Grant::<T>(add, PhantomData),
                    None,
                    blocking_completion(wp),
                );
                Waiter::wait(wp);
            }
            Route::Foreign(Some(shared)) => {
                let cell = self.cell_ptr();
                shared.run_blocking(self.trustee.index, move || {
                    Grant::<T>(add, PhantomData).run(cell.get() as usize, None)
                });
            }
            Route::Foreign(None) => panic!("clone on a runtime that has shut down"),
        });
        self.weight.fetch_add(add, Ordering::AcqRel);
    }
}

impl<T: Send + 'static> Clone for Trust<T> {
    /// Splits this handle's weight. Sends nothing unless the weight is
    /// exhausted, which takes billions of clones of one handle.
    fn clone(&self) -> Self {
        let mut w = self.weight.load(Ordering::Acquire);
        loop {
            if w < 2 {
                self.refill();
                w = self.weight.load(Ordering::Acquire);
                continue;
            }
            let give = if w >= CLONE_WEIGHT << 1 { CLONE_WEIGHT } else { w / 2 };
            match self
                .weight
                .compare_exchange_weak(w, w - give, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => {
                    return Trust {
                        trustee: self.trustee,
                        cell: self.cell,
                        weight: AtomicU64::new(give),
                    }
                }
                Err(now) => w = now,
            }
        }
    }
}

impl<T: Send + 'static> Drop for Trust<T> {
    fn drop(&mut self) {
        let weight = *self.weight.get_mut();
        let addr = self.addr();
        let index = self.trustee.index;
        with_route(self.trustee, |route| match route {
            // SAFETY: this handle kept the cell alive until now.
            Route::Local(w) => unsafe { release::<T>(w, addr, weight) },
            Route::Remote(w) => send(
                w,
                index,
                addr,
                Release::<T>(weight, PhantomData),
                None,
                ack_completion(),
            ),
            Route::Foreign(Some(shared)) => shared.inject(
                index,
                Box::new(move || {
                    with_worker(|w| unsafe { release::<T>(w.expect("worker"), addr, weight) })
                }),
            ),
            // The runtime already destroyed every property.
            Route::Foreign(None) => {}
        });
    }
}

/// Mutual exclusion among the fibers of one thread, without atomic
/// instructions. Waiters are granted the latch in FIFO order.
///
/// `Latch<T>` is not `Sync`: it lives inside an entrusted property and only
/// the trustee's fibers use it.
pub struct Latch<T> {
    held: Cell<bool>,
    waiters: RefCell<VecDeque<WakeToken>>,
    value: UnsafeCell<T>,
}

// SAFETY: a latch moves between threads only while unlocked and with no
// waiters, inside a property being entrusted.
unsafe impl<T: Send> Send for Latch<T> {}

impl<T> Latch<T> {
    pub fn new(value: T) -> Self {
        Latch {
            held: Cell::new(false),
            waiters: RefCell::new(VecDeque::new()),
            value: UnsafeCell::new(value),
        }
    }

    pub fn is_locked(&self) -> bool {
        self.held.get()
    }

    pub fn try_lock(&self) -> Option<LatchGuard<'_, T>> {
        if self.held.get() {
            None
        } else {
            self.held.set(true);
            Some(LatchGuard { latch: self })
        }
    }

    /// Acquires the latch, suspending the current fiber while another fiber
    /// holds it.
    ///
    /// # Panics
    ///
    /// With a delegated-context violation if it would have to wait where
    /// suspension is not allowed.
    pub fn lock(&self) -> LatchGuard<'_, T> {
        if let Some(g) = self.try_lock() {
            return g;
        }
        // Ownership is handed over directly by `unlock`.
        fibers::suspend_current(|tok| self.waiters.borrow_mut().push_back(tok));
        debug_assert!(self.held.get());
        LatchGuard { latch: self }
    }

    pub fn into_inner(self) -> T {
        assert!(!self.held.get(), "latch dropped while held");
        self.value.into_inner()
    }

    fn unlock(&self) {
        loop {
            let next = self.waiters.borrow_mut().pop_front();
            match next {
                Some(tok) => {
                    if fibers::resume(tok) {
                        return;
                    }
                }
                None => {
                    self.held.set(false);
                    return;
                }
            }
        }
    }
}

pub struct LatchGuard<'a, T> {
    latch: &'a Latch<T>,
}

impl<T> Deref for LatchGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        // SAFETY: the guard proves exclusive ownership of the latch.
        unsafe { &*self.latch.value.get() }
    }
}

impl<T> DerefMut for LatchGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        // SAFETY: as above.
        unsafe { &mut *self.latch.value.get() }
    }
}

impl<T> Drop for LatchGuard<'_, T> {
    fn drop(&mut self) {
        self.latch.unlock();
    }
}

/// Locks the latch of a property and runs `f` under it. May suspend.
unsafe fn run_latched<T, U>(cell: *mut PropertyCell<Latch<T>>, f: impl FnOnce(&mut T) -> U) -> U {
    let latch: &Latch<T> = &*(*cell).value.get();
    let mut guard = latch.lock();
    f(&mut guard)
}

impl<T: Send + 'static> Trust<Latch<T>> {
    /// Runs `f` in a fresh fiber on the trustee while holding the latch.
    /// Unlike [`Trust::apply`], `f` may block, including nested blocking
    /// delegation. The result comes back through a second message from the
    /// trustee to this thread.
    ///
    /// Cyclic blocking between launched bodies deadlocks; nothing detects it.
    pub fn launch<U, F>(&self, f: F) -> U
    where
        F: FnOnce(&mut T) -> U + Send + 'static,
        U: Send + 'static,
    {
        let index = self.trustee.index;
        with_route(self.trustee, |route| match route {
            Route::Local(w) => {
                check_can_block("launch");
                w.count_local_shortcut();
                // SAFETY: local trustee and the handle keeps the cell alive.
                unsafe { run_latched(self.cell.as_ptr(), f) }
            }
            Route::Remote(w) => {
                check_can_block("launch");
                let mut waiter = Waiter::<U>::new();
                let raw: *mut Waiter<U> = &mut waiter;
                let wp = SendPtr(raw);
                let origin = w.index;
                let cell = self.cell_ptr();
                let start = ThreadTask(move || {
                    spawn_launch_fiber(move || {
                        let r = catch_unwind(AssertUnwindSafe(|| unsafe { run_latched(cell.get(), f) }))
                            .map_err(|p| panic_message(&*p));
                        // SAFETY: the waiter is completed on its own thread.
                        reply_to(origin, move || unsafe { Waiter::complete(wp.get(), r) });
                    })
                });
                send(w, index, 0, start, None, ack_completion());
                Waiter::wait(raw)
            }
            Route::Foreign(Some(shared)) => {
                let (tx, rx) = std::sync::mpsc::sync_channel(1);
                let cell = self.cell_ptr();
                shared.inject(
                    index,
                    Box::new(move || {
                        spawn_launch_fiber(move || {
                            let r = catch_unwind(AssertUnwindSafe(|| unsafe {
                                run_latched(cell.get(), f)
                            }));
                            let _ = tx.send(r);
                        })
                    }),
                );
                match rx.recv() {
                    Ok(Ok(v)) => v,
                    Ok(Err(p)) => std::panic::resume_unwind(p),
                    Err(_) => panic!("the runtime shut down before the launch completed"),
                }
            }
            Route::Foreign(None) => panic!("launch on a runtime that has shut down"),
        })
    }

    /// Non-blocking [`Trust::launch`]; `then` runs on this thread.
    pub fn launch_then<U, F, G>(&self, f: F, then: G)
    where
        F: FnOnce(&mut T) -> U + Send + 'static,
        U: Send + 'static,
        G: FnOnce(U) + 'static,
    {
        let index = self.trustee.index;
        with_route(self.trustee, |route| match route {
            Route::Local(w) => {
                w.count_local_shortcut();
                let keep = self.clone();
                w.spawn_fiber(
                    FiberKind::Launch,
                    Box::new(move || {
                        let r = catch_unwind(AssertUnwindSafe(|| unsafe {
                            run_latched(keep.cell.as_ptr(), f)
                        }));
                        drop(keep);
                        finish_then(r.map_err(|p| panic_message(&*p)), then);
                    }),
                );
            }
            Route::Remote(w) => {
                let origin = w.index;
                let cell = self.cell_ptr();
                let then = SendPtr(Box::into_raw(Box::new(then)));
                let start = ThreadTask(move || {
                    spawn_launch_fiber(move || {
                        let r = catch_unwind(AssertUnwindSafe(|| unsafe { run_latched(cell.get(), f) }))
                            .map_err(|p| panic_message(&*p));
                        // SAFETY: `then` is only unboxed back on `origin`.
                        reply_to(origin, move || {
                            let then = unsafe { Box::from_raw(then.get()) };
                            finish_then(r, *then);
                        });
                    })
                });
                send(w, index, 0, start, None, ack_completion());
            }
            Route::Foreign(_) => panic!("launch_then must be called from a runtime worker thread"),
        })
    }
}

fn finish_then<U, G: FnOnce(U)>(r: Result<U, String>, then: G) {
    with_worker(|w| {
        let w = w.expect("worker");
        match r {
            Ok(v) => w.run_callback(move || then(v)),
            Err(m) => w
                .shared
                .record_error(format!("launched body panicked: {m}")),
        }
    });
}

fn spawn_launch_fiber(f: impl FnOnce() + 'static) {
    with_worker(|w| w.expect("worker").spawn_fiber(FiberKind::Launch, Box::new(f)));
}

/// Sends `f` to run on worker `origin`, from the current worker.
fn reply_to(origin: usize, f: impl FnOnce() + Send + 'static) {
    with_worker(|w| {
        let w = w.expect("worker");
        send(w, origin, 0, ThreadTask(f), None, ack_completion());
    });
}
