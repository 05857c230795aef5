//! Deterministic discrete-event core: a time-ordered queue and a clock.
//!
//! Ordering is by `(time, seq)` where `seq` is a monotone counter assigned at
//! schedule time, so two events at the same instant fire in the order they
//! were scheduled. Event processing itself never draws randomness; replaying
//! a scenario with the same seed reproduces the trace byte for byte.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::ids::{ConnId, ProbeId, Side, TransferId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    /// A chunk finished service on one lane: phase 0 leaves the sender NIC,
    /// phase 1 is fully delivered (u32::MAX chunk marks an empty transfer).
    ChunkComplete {
        conn: ConnId,
        transfer: TransferId,
        chunk: u32,
        /// Guards against events issued before a rollback invalidated them.
        epoch: u32,
        phase: u8,
    },
    /// A chunk's dependency is satisfied; submit it to its send lane.
    ChunkReady {
        conn: ConnId,
        transfer: TransferId,
        chunk: u32,
        epoch: u32,
    },
    /// An injected fault becomes active.
    FaultInject { fault: usize },
    /// Out-of-band notification reaches the peer of a broken connection.
    OobNotify {
        fault: usize,
        conn: ConnId,
        side: Side,
    },
    /// A probe outcome is delivered to the triangulation logic.
    ProbeResult { probe: ProbeId },
    /// Poll timeout expires on a dead connection (no-OOB ablation path).
    Timeout {
        fault: usize,
        conn: ConnId,
        side: Side,
    },
    /// A failed component comes back.
    Recovery { fault: usize },
    /// Periodic reprobe tick for a not-yet-recovered component.
    Reprobe { fault: usize, attempt: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("cannot schedule into the past: t={t} < now={now}")]
    SchedulePast { t: f64, now: f64 },
    #[error("event time must be finite")]
    NonFiniteTime,
}

#[derive(Debug, Clone)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Default)]
pub struct Engine {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
}

impl Engine {
    pub fn new() -> Self {
        Engine {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue an event; `(time, seq)` pairs are unique by construction.
    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<(), EngineError> {
        if !time.is_finite() {
            return Err(EngineError::NonFiniteTime);
        }
        if time < self.now {
            return Err(EngineError::SchedulePast {
                t: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, kind }));
        Ok(())
    }

    fn pop_due(&mut self, t_end: f64) -> Option<Event> {
        match self.queue.peek() {
            Some(Reverse(s)) if s.time <= t_end => {
                let Reverse(s) = self.queue.pop().unwrap();
                self.now = s.time;
                Some(Event {
                    time: s.time,
                    seq: s.seq,
                    kind: s.kind,
                })
            }
            _ => None,
        }
    }

    /// Pop the next event regardless of its time, advancing the clock to it.
    /// Returns `None` when the queue is empty.
    pub fn step(&mut self) -> Option<Event> {
        self.pop_due(f64::INFINITY)
    }

    /// Process every event with `time <= t_end` in order, invoking the
    /// handler on each (which may schedule more). Advances the clock to
    /// `t_end` and returns the processed trace.
    pub fn run_until(
        &mut self,
        t_end: f64,
        mut on_event: impl FnMut(&mut Engine, &Event),
    ) -> Vec<Event> {
        let mut trace = Vec::new();
        while let Some(ev) = self.pop_due(t_end) {
            on_event(self, &ev);
            trace.push(ev);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        trace
    }

    /// Drain the queue completely.
    pub fn run_to_completion(&mut self, on_event: impl FnMut(&mut Engine, &Event)) -> Vec<Event> {
        self.run_until(f64::INFINITY, on_event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mark(i: usize) -> EventKind {
        EventKind::FaultInject { fault: i }
    }

    #[test]
    fn empty_queue_just_advances_clock() {
        let mut eng = Engine::new();
        let trace = eng.run_until(5.0, |_, _| {});
        assert!(trace.is_empty());
        assert_eq!(eng.now(), 5.0);
    }

    #[test]
    fn same_time_events_fire_in_schedule_order() {
        let mut eng = Engine::new();
        eng.schedule(1.0, mark(0)).unwrap();
        eng.schedule(1.0, mark(1)).unwrap();
        eng.schedule(0.5, mark(2)).unwrap();
        let trace = eng.run_until(2.0, |_, _| {});
        let order: Vec<_> = trace.iter().map(|e| e.kind.clone()).collect();
        assert_eq!(order, vec![mark(2), mark(0), mark(1)]);
    }

    #[test]
    fn run_until_stops_at_the_horizon() {
        let mut eng = Engine::new();
        for t in [1.0, 2.0, 3.0] {
            eng.schedule(t, mark(0)).unwrap();
        }
        let trace = eng.run_until(2.0, |_, _| {});
        assert_eq!(trace.len(), 2);
        assert_eq!(eng.now(), 2.0);
        assert_eq!(eng.pending(), 1);
    }

    #[test]
    fn scheduling_into_the_past_errors() {
        let mut eng = Engine::new();
        eng.schedule(1.0, mark(0)).unwrap();
        eng.run_until(1.0, |_, _| {});
        assert_eq!(
            eng.schedule(0.5, mark(1)),
            Err(EngineError::SchedulePast { t: 0.5, now: 1.0 })
        );
        // scheduling exactly at now is fine
        eng.schedule(1.0, mark(2)).unwrap();
    }

    #[test]
    fn handler_may_schedule_more_events() {
        let mut eng = Engine::new();
        eng.schedule(1.0, mark(0)).unwrap();
        let trace = eng.run_until(10.0, |eng, ev| {
            if let EventKind::FaultInject { fault } = ev.kind {
                if fault < 3 {
                    eng.schedule(ev.time + 1.0, mark(fault + 1)).unwrap();
                }
            }
        });
        assert_eq!(trace.len(), 4);
        assert_eq!(trace.last().unwrap().time, 4.0);
    }

    #[test]
    fn identical_schedules_replay_identically() {
        let build = || {
            let mut eng = Engine::new();
            for i in 0..100usize {
                let t = (i * 7 % 13) as f64 * 0.25;
                eng.schedule(t, mark(i)).unwrap();
            }
            eng.run_until(100.0, |_, _| {})
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn clock_never_decreases() {
        let mut eng = Engine::new();
        for i in 0..50usize {
            eng.schedule((i % 10) as f64, mark(i)).unwrap();
        }
        let mut last = 0.0;
        eng.run_until(20.0, |eng, _| {
            assert!(eng.now() >= last);
            last = eng.now();
        });
    }
}
