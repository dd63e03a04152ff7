//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(time_ms, seq)`, where `seq` is a global counter
//! assigned at scheduling. Equal-time events therefore dispatch in the order
//! they were scheduled, which makes a run a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use crate::error::{Error, Result};

/// Implemented by event payloads so the kernel can log dispatches.
pub trait EventLabel {
    fn kind(&self) -> &'static str;
    fn actor(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct Scheduled<E> {
    pub time_ms: f64,
    pub seq: u64,
    pub event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // Reversed so BinaryHeap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time_ms
            .total_cmp(&self.time_ms)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub time_ms: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub actor: String,
}

impl fmt::Display for DispatchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.time_ms, self.seq, self.kind, self.actor)
    }
}

/// Whether the dispatch loop keeps going after a handler returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now_ms: f64,
    next_seq: u64,
    dispatched: u64,
    log: Option<Vec<DispatchRecord>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now_ms: 0.0,
            next_seq: 0,
            dispatched: 0,
            log: None,
        }
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> f64 {
        self.now_ms
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn take_log(&mut self) -> Option<Vec<DispatchRecord>> {
        self.log.take()
    }

    /// Enqueues `event` at absolute time `time_ms`; returns its sequence number.
    pub fn schedule(&mut self, time_ms: f64, event: E) -> Result<u64> {
        if !(time_ms >= self.now_ms) {
            return Err(Error::simulation(format!(
                "event scheduled at {time_ms} ms, before the clock ({} ms)",
                self.now_ms
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time_ms, seq, event });
        Ok(seq)
    }

    pub fn schedule_after(&mut self, delay_ms: f64, event: E) -> Result<u64> {
        self.schedule(self.now_ms + delay_ms, event)
    }
}

impl<E: EventLabel> EventQueue<E> {
    /// Pops the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<Scheduled<E>> {
        let next = self.heap.pop()?;
        debug_assert!(next.time_ms >= self.now_ms);
        self.now_ms = next.time_ms;
        self.dispatched += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(DispatchRecord {
                time_ms: next.time_ms,
                seq: next.seq,
                kind: next.event.kind(),
                actor: next.event.actor(),
            });
        }
        Some(next)
    }

    /// Dispatches events until the queue empties, a handler returns
    /// [`Flow::Stop`], or the next event lies beyond `until`. Returns the clock.
    pub fn run<F>(&mut self, until: Option<f64>, mut handler: F) -> Result<f64>
    where
        F: FnMut(&mut Self, Scheduled<E>) -> Result<Flow>,
    {
        loop {
            match (self.heap.peek(), until) {
                (None, _) => break,
                (Some(next), Some(bound)) if next.time_ms > bound => {
                    self.now_ms = bound;
                    break;
                }
                _ => {}
            }
            let ev = self.pop().expect("peeked");
            if handler(self, ev)? == Flow::Stop {
                break;
            }
        }
        Ok(self.now_ms)
    }
}
