//! Bandwidth over the span in which a link actually carried blocks.

use std::time::Instant;

use parking_lot::Mutex;

#[derive(Debug, Clone, Copy)]
struct Span {
    start: Instant,
    bytes_start: u64,
    end: Instant,
    bytes_end: u64,
    blocks: u64,
    transfers: u64,
}

#[derive(Debug, Default)]
pub struct ActivityMeter {
    span: Mutex<Option<Span>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activity {
    pub seconds: f64,
    pub bytes: u64,
    pub blocks: u64,
    pub transfers: u64,
}

impl Activity {
    pub fn bytes_per_second(&self) -> f64 {
        if self.seconds > 0.0 {
            self.bytes as f64 / self.seconds
        } else {
            0.0
        }
    }
}

impl ActivityMeter {
    /// One block-carrying transfer that started at `started`, when the byte counter read
    /// `bytes_before`, and left it at `bytes_after`.
    pub fn record(&self, started: Instant, bytes_before: u64, bytes_after: u64, blocks: u64) {
        let now = Instant::now();
        let mut s = self.span.lock();
        let span = s.get_or_insert(Span {
            start: started,
            bytes_start: bytes_before,
            end: now,
            bytes_end: bytes_after,
            blocks: 0,
            transfers: 0,
        });
        span.end = now;
        span.bytes_end = bytes_after;
        span.blocks += blocks;
        span.transfers += 1;
    }

    pub fn activity(&self) -> Option<Activity> {
        self.span.lock().map(|s| Activity {
            seconds: s.end.duration_since(s.start).as_secs_f64(),
            bytes: s.bytes_end - s.bytes_start,
            blocks: s.blocks,
            transfers: s.transfers,
        })
    }
}
