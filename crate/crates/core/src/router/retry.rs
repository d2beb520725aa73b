//! Bounded FIFO of batches awaiting delivery to a forward backend.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::tsstore::{ForwardError, ForwardTarget};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingBatch {
    pub db: String,
    pub body: String,
    pub lines: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RetryStats {
    pub queued_batches: usize,
    pub delivered_batches: u64,
    pub dropped_batches: u64,
    pub dropped_lines: u64,
    pub rejected_batches: u64,
    pub rejected_lines: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlushReport {
    pub delivered: usize,
    pub rejected: usize,
    /// Set when the backend stopped answering; the head batch stays queued.
    pub stalled: Option<ForwardError>,
}

pub struct RetryBuffer {
    queue: Mutex<VecDeque<(u64, PendingBatch)>>,
    capacity: usize,
    next_seq: AtomicU64,
    flushing: tokio::sync::Mutex<()>,
    delivered_batches: AtomicU64,
    dropped_batches: AtomicU64,
    dropped_lines: AtomicU64,
    rejected_batches: AtomicU64,
    rejected_lines: AtomicU64,
}

impl RetryBuffer {
    pub fn new(capacity: usize) -> Self {
        RetryBuffer {
            queue: Mutex::new(VecDeque::new()),
            capacity: capacity.max(1),
            next_seq: AtomicU64::new(0),
            flushing: tokio::sync::Mutex::new(()),
            delivered_batches: AtomicU64::new(0),
            dropped_batches: AtomicU64::new(0),
            dropped_lines: AtomicU64::new(0),
            rejected_batches: AtomicU64::new(0),
            rejected_lines: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues a batch; when full the oldest batch is dropped and returned.
    pub fn push(&self, batch: PendingBatch) -> Option<PendingBatch> {
        let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        let mut q = self.queue.lock().expect("retry queue poisoned");
        let dropped = if q.len() >= self.capacity {
            q.pop_front().map(|(_, b)| b)
        } else {
            None
        };
        q.push_back((seq, batch));
        drop(q);
        if let Some(b) = &dropped {
            self.dropped_batches.fetch_add(1, Ordering::Relaxed);
            self.dropped_lines
                .fetch_add(b.lines as u64, Ordering::Relaxed);
            tracing::warn!(db = %b.db, lines = b.lines, "retry buffer full, dropped oldest batch");
        }
        dropped
    }

    pub fn len(&self) -> usize {
        self.queue.lock().expect("retry queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Queued batches, oldest first.
    pub fn snapshot(&self) -> Vec<PendingBatch> {
        self.queue
            .lock()
            .expect("retry queue poisoned")
            .iter()
            .map(|(_, b)| b.clone())
            .collect()
    }

    /// Delivers queued batches in arrival order until the queue is empty or the
    /// backend becomes unreachable. Rejected batches are dropped and counted,
    /// since resending a malformed batch cannot succeed. Only one flush runs at
    /// a time.
    pub async fn flush_with_retry(&self, target: &dyn ForwardTarget) -> FlushReport {
        let _guard = self.flushing.lock().await;
        let mut report = FlushReport::default();
        loop {
            let head = self
                .queue
                .lock()
                .expect("retry queue poisoned")
                .front()
                .cloned();
            let Some((seq, batch)) = head else {
                return report;
            };
            let outcome = target.forward(&batch.db, &batch.body).await;
            match outcome {
                Ok(()) => {
                    self.delivered_batches.fetch_add(1, Ordering::Relaxed);
                    report.delivered += 1;
                }
                Err(ForwardError::RemoteRejected { status, .. }) => {
                    tracing::warn!(db = %batch.db, status, "backend rejected batch");
                    self.rejected_batches.fetch_add(1, Ordering::Relaxed);
                    self.rejected_lines
                        .fetch_add(batch.lines as u64, Ordering::Relaxed);
                    report.rejected += 1;
                }
                Err(e @ ForwardError::Unreachable(_)) => {
                    report.stalled = Some(e);
                    return report;
                }
            }
            let mut q = self.queue.lock().expect("retry queue poisoned");
            // The head may have been dropped by an overflowing push meanwhile.
            if q.front().is_some_and(|(s, _)| *s == seq) {
                q.pop_front();
            }
        }
    }

    pub fn stats(&self) -> RetryStats {
        RetryStats {
            queued_batches: self.len(),
            delivered_batches: self.delivered_batches.load(Ordering::Relaxed),
            dropped_batches: self.dropped_batches.load(Ordering::Relaxed),
            dropped_lines: self.dropped_lines.load(Ordering::Relaxed),
            rejected_batches: self.rejected_batches.load(Ordering::Relaxed),
            rejected_lines: self.rejected_lines.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsstore::BoxFuture;
    use std::sync::atomic::AtomicBool;

    #[derive(Default)]
    struct Flaky {
        down: AtomicBool,
        reject: AtomicBool,
        got: Mutex<Vec<String>>,
    }

    impl ForwardTarget for Flaky {
        fn forward<'a>(
            &'a self,
            _db: &'a str,
            batch: &'a str,
        ) -> BoxFuture<'a, Result<(), ForwardError>> {
            Box::pin(async move {
                if self.down.load(Ordering::SeqCst) {
                    return Err(ForwardError::Unreachable("down".into()));
                }
                if self.reject.load(Ordering::SeqCst) {
                    return Err(ForwardError::RemoteRejected {
                        status: 400,
                        body: String::new(),
                    });
                }
                self.got.lock().unwrap().push(batch.to_owned());
                Ok(())
            })
        }
    }

    fn batch(n: usize) -> PendingBatch {
        PendingBatch {
            db: "lms".into(),
            body: format!("m v={n} {n}"),
            lines: 1,
        }
    }

    #[tokio::test]
    async fn healthy_backend_drains_immediately() {
        let target = Flaky::default();
        let buf = RetryBuffer::new(4);
        buf.push(batch(1));
        let r = buf.flush_with_retry(&target).await;
        assert_eq!(r.delivered, 1);
        assert!(buf.is_empty());
    }

    #[tokio::test]
    async fn outage_then_recovery_in_order() {
        let target = Flaky::default();
        target.down.store(true, Ordering::SeqCst);
        let buf = RetryBuffer::new(4);
        for i in 0..3 {
            buf.push(batch(i));
            assert!(buf.flush_with_retry(&target).await.stalled.is_some());
        }
        assert_eq!(buf.len(), 3);
        target.down.store(false, Ordering::SeqCst);
        assert_eq!(buf.flush_with_retry(&target).await.delivered, 3);
        assert_eq!(
            *target.got.lock().unwrap(),
            ["m v=0 0", "m v=1 1", "m v=2 2"]
        );
    }

    #[test]
    fn overflow_drops_oldest() {
        let buf = RetryBuffer::new(2);
        assert!(buf.push(batch(0)).is_none());
        assert!(buf.push(batch(1)).is_none());
        assert_eq!(buf.push(batch(2)), Some(batch(0)));
        assert_eq!(buf.snapshot(), [batch(1), batch(2)]);
        let s = buf.stats();
        assert_eq!((s.dropped_batches, s.dropped_lines), (1, 1));
    }

    #[tokio::test]
    async fn rejected_batches_are_dropped() {
        let target = Flaky::default();
        target.reject.store(true, Ordering::SeqCst);
        let buf = RetryBuffer::new(4);
        buf.push(batch(0));
        let r = buf.flush_with_retry(&target).await;
        assert_eq!(r.rejected, 1);
        assert!(buf.is_empty());
        assert_eq!(buf.stats().rejected_batches, 1);
    }
}
