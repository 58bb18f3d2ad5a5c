//! Deterministic discrete-event core.
//!
//! Time is kept in integer nanoseconds. Events scheduled for the same instant
//! fire in the order they were scheduled.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use thiserror::Error;

/// A point on the simulated time axis, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ns(self) -> u64 {
        self.0
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Handle returned by [`Engine::schedule`]; doubles as the tie-break sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("cannot schedule at {at} while clock is at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

struct Entry<E> {
    fire_at: SimTime,
    id: EventId,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.id == other.id
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.fire_at, self.id).cmp(&(other.fire_at, other.id))
    }
}

/// Future-event list plus virtual clock.
pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    cancelled: HashSet<EventId>,
    fired: u64,
    cancelled_count: u64,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            fired: 0,
            cancelled_count: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventId, EngineError> {
        if fire_at < self.now {
            return Err(EngineError::SchedulingInPast {
                at: fire_at,
                now: self.now,
            });
        }
        let id = EventId(self.next_seq);
        self.next_seq += 1;
        self.queue.push(Reverse(Entry {
            fire_at,
            id,
            payload,
        }));
        Ok(id)
    }

    /// Schedules `payload` `delay` nanoseconds from now. Cannot fail.
    pub fn schedule_in(&mut self, delay: u64, payload: E) -> EventId {
        let at = self.now + delay;
        self.schedule(at, payload)
            .expect("relative schedule is never in the past")
    }

    /// Cancels a pending event. Returns false if it already fired, was
    /// already cancelled or was never issued.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_seq || self.cancelled.contains(&id) {
            return false;
        }
        if !self.queue.iter().any(|e| e.0.id == id) {
            return false;
        }
        self.cancelled.insert(id);
        self.cancelled_count += 1;
        true
    }

    /// Removes the next live event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(SimTime, EventId, E)> {
        while let Some(Reverse(entry)) = self.queue.pop() {
            if self.cancelled.remove(&entry.id) {
                continue;
            }
            debug_assert!(entry.fire_at >= self.now);
            self.now = entry.fire_at;
            self.fired += 1;
            return Some((entry.fire_at, entry.id, entry.payload));
        }
        None
    }

    /// Fires events in (time, sequence) order until none remain and returns
    /// the final clock value.
    pub fn run_until_idle<F>(&mut self, mut handler: F) -> SimTime
    where
        F: FnMut(&mut Self, E),
    {
        while let Some((_, _, payload)) = self.pop() {
            handler(self, payload);
        }
        self.now
    }

    pub fn is_idle(&self) -> bool {
        self.queue.len() == self.cancelled.len()
    }

    pub fn scheduled(&self) -> u64 {
        self.next_seq
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn cancelled(&self) -> u64 {
        self.cancelled_count
    }
}
