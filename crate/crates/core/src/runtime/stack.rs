//! Dedicated stacks for address-taken pointer slots.
//!
//! The application pushes frames and marks them exited; only the sweeper
//! releases a frame, after it has consumed the matching frame-exit event.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::memory::{round_up, Memory, DEDICATED_STACK_BASE, STACK_REGION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSlot {
    pub addr: u64,
    pub size: u64,
}

#[derive(Debug)]
struct Frame {
    token: u64,
    base: u64,
    released: bool,
}

#[derive(Debug, Default)]
struct ThreadStack {
    frames: Vec<Frame>,
    /// Tokens of frames entered and not yet exited, innermost last.
    active: Vec<u64>,
    top: u64,
}

#[derive(Debug, Clone)]
struct LiveFrame {
    thread: usize,
    slots: Vec<FrameSlot>,
}

/// Registered frames by function id, then token.
type LiveFrames = BTreeMap<u32, BTreeMap<u64, LiveFrame>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackError {
    /// Exit token does not match the innermost active frame.
    OutOfOrder { token: u64 },
    UnknownToken { token: u64 },
    Overflow,
}

pub struct DedicatedStacks {
    threads: Vec<Mutex<ThreadStack>>,
    live: Mutex<LiveFrames>,
    /// token -> function id of each registered frame.
    owners: Mutex<HashMap<u64, u32>>,
    next_token: AtomicU64,
    peak_bytes: AtomicU64,
    /// How long `enter` waits for the sweeper to reclaim space.
    overflow_wait: Duration,
}

impl DedicatedStacks {
    pub fn new(threads: usize) -> Self {
        DedicatedStacks {
            threads: (0..threads)
                .map(|t| {
                    Mutex::new(ThreadStack {
                        top: DEDICATED_STACK_BASE + t as u64 * STACK_REGION,
                        ..Default::default()
                    })
                })
                .collect(),
            live: Mutex::new(BTreeMap::new()),
            owners: Mutex::new(HashMap::new()),
            next_token: AtomicU64::new(1),
            peak_bytes: AtomicU64::new(0),
            overflow_wait: Duration::from_secs(2),
        }
    }

    fn limit(thread: usize) -> u64 {
        DEDICATED_STACK_BASE + (thread as u64 + 1) * STACK_REGION
    }

    /// Push a frame with one zeroed slot per entry of `slot_sizes`.
    pub fn enter(
        &self,
        memory: &Memory,
        thread: usize,
        function_id: u32,
        slot_sizes: &[u64],
    ) -> Result<(u64, Vec<FrameSlot>), StackError> {
        let len: u64 = slot_sizes.iter().map(|s| round_up((*s).max(1))).sum();
        let deadline = Instant::now() + self.overflow_wait;
        let mut ts = loop {
            let ts = self.threads[thread].lock().unwrap();
            if ts.top + len <= Self::limit(thread) {
                break ts;
            }
            drop(ts);
            if Instant::now() > deadline {
                return Err(StackError::Overflow);
            }
            std::thread::yield_now();
        };
        let token = self.next_token.fetch_add(1, Ordering::Relaxed);
        let base = ts.top;
        let mut slots = Vec::with_capacity(slot_sizes.len());
        let mut a = base;
        for s in slot_sizes {
            slots.push(FrameSlot { addr: a, size: *s });
            a += round_up((*s).max(1));
        }
        memory.zero(base, len);
        ts.top += len;
        ts.frames.push(Frame {
            token,
            base,
            released: false,
        });
        ts.active.push(token);
        let used = ts.top - (DEDICATED_STACK_BASE + thread as u64 * STACK_REGION);
        self.peak_bytes.fetch_max(used, Ordering::Relaxed);
        self.owners.lock().unwrap().insert(token, function_id);
        self.live.lock().unwrap().entry(function_id).or_default().insert(
            token,
            LiveFrame {
                thread,
                slots: slots.clone(),
            },
        );
        Ok((token, slots))
    }

    /// Mark the innermost frame of `thread` exited. Its slots stay live until
    /// [`DedicatedStacks::release`].
    pub fn exit(&self, thread: usize, token: u64) -> Result<(), StackError> {
        let mut ts = self.threads[thread].lock().unwrap();
        match ts.active.last() {
            Some(t) if *t == token => {
                ts.active.pop();
                Ok(())
            }
            _ if ts.active.contains(&token) => Err(StackError::OutOfOrder { token }),
            _ => Err(StackError::UnknownToken { token }),
        }
    }

    /// Drop a frame from future scans and reclaim whatever space at the top
    /// of its thread's stack is no longer in use. Returns the frame's slot count.
    pub fn release(&self, token: u64) -> Result<usize, StackError> {
        let function_id = self
            .owners
            .lock()
            .unwrap()
            .remove(&token)
            .ok_or(StackError::UnknownToken { token })?;
        let f = {
            let mut live = self.live.lock().unwrap();
            let frames = live.get_mut(&function_id).expect("owned frame is live");
            let f = frames.remove(&token).expect("owned frame is live");
            if frames.is_empty() {
                live.remove(&function_id);
            }
            f
        };
        let mut ts = self.threads[f.thread].lock().unwrap();
        // Tokens grow monotonically, so each thread's frames are sorted.
        if let Ok(i) = ts.frames.binary_search_by_key(&token, |fr| fr.token) {
            ts.frames[i].released = true;
        }
        while let Some(fr) = ts.frames.last() {
            if !fr.released || ts.active.contains(&fr.token) {
                break;
            }
            ts.top = fr.base;
            ts.frames.pop();
        }
        Ok(f.slots.len())
    }

    /// Slot `slot_id` of every live frame of `function_id`.
    pub fn live_slots(&self, function_id: u32, slot_id: u32) -> Vec<FrameSlot> {
        self.live
            .lock()
            .unwrap()
            .get(&function_id)
            .into_iter()
            .flat_map(|frames| frames.values())
            .filter_map(|f| f.slots.get(slot_id as usize).copied())
            .collect()
    }

    pub fn live_frames(&self) -> usize {
        self.owners.lock().unwrap().len()
    }

    pub fn live_frames_of(&self, function_id: u32) -> usize {
        self.live.lock().unwrap().get(&function_id).map_or(0, |f| f.len())
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes.load(Ordering::Relaxed)
    }
}
