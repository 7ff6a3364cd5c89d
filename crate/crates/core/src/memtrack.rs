//! Allocation tracking for peak-memory telemetry.
//!
//! Install [`TrackingAllocator`] as the global allocator in a binary to make
//! [`measure`] meaningful:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: zoedit_core::memtrack::TrackingAllocator = zoedit_core::memtrack::TrackingAllocator;
//! ```
//!
//! Byte counts are kept per thread. Memory freed on another thread than the
//! one that allocated it is attributed to the freeing thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

thread_local! {
    static CURRENT: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

static INSTALLED: AtomicBool = AtomicBool::new(false);

pub struct TrackingAllocator;

fn add(delta: i64) {
    let _ = CURRENT.try_with(|c| {
        let now = c.get() + delta;
        c.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let ptr = System.alloc(layout);
        if !ptr.is_null() {
            add(layout.size() as i64);
        }
        ptr
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let ptr = System.alloc_zeroed(layout);
        if !ptr.is_null() {
            add(layout.size() as i64);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        add(-(layout.size() as i64));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let out = System.realloc(ptr, layout, new_size);
        if !out.is_null() {
            add(new_size as i64 - layout.size() as i64);
        }
        out
    }
}

/// Whether a [`TrackingAllocator`] has served at least one allocation.
pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Bytes currently attributed to this thread.
pub fn current_bytes() -> i64 {
    CURRENT.with(Cell::get)
}

/// Runs `f` and returns its result together with the peak number of bytes
/// allocated by this thread above the level at entry.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let base = current_bytes();
    let saved_peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(saved_peak.max(peak)));
    (out, (peak - base).max(0) as u64)
}
