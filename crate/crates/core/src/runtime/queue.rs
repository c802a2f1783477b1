use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::error::{bail, Result};

/// Fixed-capacity FIFO that evicts its oldest item instead of blocking the
/// producer. Evictions are counted.
#[derive(Debug)]
pub struct BoundedQueue<T> {
    inner: Mutex<State<T>>,
    ready: Condvar,
    capacity: usize,
    drops: AtomicU64,
}

#[derive(Debug)]
struct State<T> {
    items: VecDeque<T>,
    closed: bool,
    high_water: usize,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            bail!(Config, "queue capacity must be ≥ 1");
        }
        Ok(Self {
            inner: Mutex::new(State { items: VecDeque::with_capacity(capacity), closed: false, high_water: 0 }),
            ready: Condvar::new(),
            capacity,
            drops: AtomicU64::new(0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues `item`, evicting and returning the oldest one when full.
    pub fn push(&self, item: T) -> Option<T> {
        let mut s = self.inner.lock().unwrap();
        let evicted = if s.items.len() == self.capacity {
            self.drops.fetch_add(1, Ordering::Relaxed);
            s.items.pop_front()
        } else {
            None
        };
        s.items.push_back(item);
        s.high_water = s.high_water.max(s.items.len());
        drop(s);
        self.ready.notify_one();
        evicted
    }

    /// Blocks until an item arrives or the queue is closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.inner.lock().unwrap();
        loop {
            if let Some(x) = s.items.pop_front() {
                return Some(x);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap();
        }
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let s = self.inner.lock().unwrap();
        let (mut s, _) = self.ready.wait_timeout_while(s, timeout, |s| s.items.is_empty() && !s.closed).unwrap();
        s.items.pop_front()
    }

    pub fn try_pop(&self) -> Option<T> {
        self.inner.lock().unwrap().items.pop_front()
    }

    /// No further pushes are expected; wakes blocked consumers.
    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn drops(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }

    /// Largest length ever observed.
    pub fn high_water(&self) -> usize {
        self.inner.lock().unwrap().high_water
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_one_keeps_newest() {
        let q = BoundedQueue::new(1).unwrap();
        for i in 0..5 {
            q.push(i);
        }
        assert_eq!(q.drops(), 4);
        assert_eq!(q.try_pop(), Some(4));
        assert_eq!(q.high_water(), 1);
    }

    #[test]
    fn no_drops_when_drained() {
        let q = BoundedQueue::new(2).unwrap();
        for i in 0..10 {
            q.push(i);
            assert_eq!(q.pop(), Some(i));
        }
        assert_eq!(q.drops(), 0);
        q.close();
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(BoundedQueue::<u8>::new(0).is_err());
    }
}
