use std::collections::VecDeque;
use std::io::{self, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::event::ModeEvent;

/// Destination for serialized events. `publish` must not block on I/O
/// that can stall indefinitely.
pub trait EventSink: Send {
    fn publish(&mut self, line: &str);

    /// Flushes buffered output where that is cheap.
    fn flush(&mut self) {}
}

/// Writes each line to a local writer (stdout, a file, a buffer).
pub struct WriterSink<W: Write + Send> {
    out: W,
    failures: u64,
}

impl<W: Write + Send> WriterSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, failures: 0 }
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> EventSink for WriterSink<W> {
    fn publish(&mut self, line: &str) {
        if writeln!(self.out, "{line}").is_err() {
            self.failures += 1;
        }
    }

    fn flush(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn stdout_sink() -> WriterSink<io::Stdout> {
    WriterSink::new(io::stdout())
}

/// Reconnect schedule: 0.5 s doubling up to 30 s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { base: Duration::from_millis(500), factor: 2, cap: Duration::from_secs(30) }
    }
}

impl Backoff {
    /// Delay before reconnect attempt `n` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let mut d = self.base;
        for _ in 0..attempt {
            d = d.saturating_mul(self.factor);
            if d >= self.cap {
                return self.cap;
            }
        }
        d.min(self.cap)
    }
}

pub const TCP_BUFFER: usize = 1000;

struct Shared {
    pending: Mutex<VecDeque<(u64, String)>>,
    next_seq: AtomicU64,
    wake: Condvar,
    stop: AtomicBool,
    dropped: AtomicU64,
    sent: AtomicU64,
    capacity: usize,
}

/// NDJSON over TCP. Lines are buffered (oldest dropped beyond the capacity)
/// and written by a background thread that reconnects with backoff.
pub struct TcpSink {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

impl TcpSink {
    pub fn connect(addr: impl Into<String>) -> Self {
        Self::with_options(addr, Backoff::default(), TCP_BUFFER)
    }

    pub fn with_options(addr: impl Into<String>, backoff: Backoff, capacity: usize) -> Self {
        let shared = Arc::new(Shared {
            pending: Mutex::new(VecDeque::new()),
            next_seq: AtomicU64::new(0),
            wake: Condvar::new(),
            stop: AtomicBool::new(false),
            dropped: AtomicU64::new(0),
            sent: AtomicU64::new(0),
            capacity: capacity.max(1),
        });
        let addr = addr.into();
        let s = Arc::clone(&shared);
        let worker = std::thread::Builder::new()
            .name("tcp-sink".into())
            .spawn(move || tcp_worker(&addr, backoff, &s))
            .expect("spawn sink thread");
        Self { shared, worker: Some(worker) }
    }

    /// Lines discarded because the buffer was full.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    pub fn sent(&self) -> u64 {
        self.shared.sent.load(Ordering::Relaxed)
    }

    pub fn buffered(&self) -> usize {
        self.shared.pending.lock().unwrap().len()
    }
}

impl EventSink for TcpSink {
    fn publish(&mut self, line: &str) {
        let mut q = self.shared.pending.lock().unwrap();
        if q.len() >= self.shared.capacity {
            q.pop_front();
            self.shared.dropped.fetch_add(1, Ordering::Relaxed);
        }
        let seq = self.shared.next_seq.fetch_add(1, Ordering::Relaxed);
        q.push_back((seq, line.to_string()));
        drop(q);
        self.shared.wake.notify_one();
    }
}

impl Drop for TcpSink {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        self.shared.wake.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Sleeps in short slices so a stop request is honoured promptly.
fn nap(total: Duration, shared: &Shared) {
    let step = Duration::from_millis(50);
    let mut left = total;
    while !left.is_zero() && !shared.stop.load(Ordering::Relaxed) {
        let d = left.min(step);
        std::thread::sleep(d);
        left -= d;
    }
}

fn tcp_worker(addr: &str, backoff: Backoff, shared: &Shared) {
    let mut conn: Option<TcpStream> = None;
    let mut attempt = 0;
    loop {
        let line = {
            let mut q = shared.pending.lock().unwrap();
            while q.is_empty() && !shared.stop.load(Ordering::Relaxed) {
                q = shared.wake.wait_timeout(q, Duration::from_millis(200)).unwrap().0;
            }
            if shared.stop.load(Ordering::Relaxed) && (q.is_empty() || conn.is_none()) {
                return;
            }
            q.front().cloned()
        };
        let Some((seq, line)) = line else { continue };
        if conn.is_none() {
            match TcpStream::connect(addr) {
                Ok(s) => {
                    let _ = s.set_write_timeout(Some(Duration::from_secs(5)));
                    let _ = s.set_nodelay(true);
                    conn = Some(s);
                    attempt = 0;
                }
                Err(e) => {
                    let d = backoff.delay(attempt);
                    log::debug!("sink {addr} unreachable ({e}); retry in {d:?}");
                    attempt = attempt.saturating_add(1);
                    nap(d, shared);
                    continue;
                }
            }
        }
        let stream = conn.as_mut().expect("connected");
        let mut payload = line.into_bytes();
        payload.push(b'\n');
        match stream.write_all(&payload) {
            Ok(()) => {
                let mut q = shared.pending.lock().unwrap();
                if q.front().is_some_and(|f| f.0 == seq) {
                    q.pop_front();
                }
                shared.sent.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                log::debug!("sink {addr} write failed: {e}");
                conn = None;
            }
        }
    }
}

/// Serializes each event once and hands identical bytes to every sink.
#[derive(Default)]
pub struct Publisher {
    sinks: Vec<Box<dyn EventSink>>,
}

impl Publisher {
    pub fn new(sinks: Vec<Box<dyn EventSink>>) -> Self {
        Self { sinks }
    }

    pub fn add(&mut self, sink: Box<dyn EventSink>) {
        self.sinks.push(sink);
    }

    pub fn len(&self) -> usize {
        self.sinks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sinks.is_empty()
    }

    pub fn publish(&mut self, event: &ModeEvent) {
        let line = event.to_line();
        for s in &mut self.sinks {
            s.publish(&line);
        }
    }

    pub fn flush(&mut self) {
        for s in &mut self.sinks {
            s.flush();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader};
    use std::net::TcpListener;
    use std::sync::mpsc;

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        assert_eq!(b.delay(0), Duration::from_millis(500));
        assert_eq!(b.delay(1), Duration::from_secs(1));
        assert_eq!(b.delay(3), Duration::from_secs(4));
        assert_eq!(b.delay(6), Duration::from_secs(30));
        assert_eq!(b.delay(40), Duration::from_secs(30));
    }

    #[test]
    fn unreachable_sink_buffers_then_drops_oldest() {
        // Port 9 on localhost is almost never listening; either way the
        // buffer bound is what matters.
        let mut s = TcpSink::with_options("127.0.0.1:9", Backoff { base: Duration::from_secs(5), ..Backoff::default() }, 3);
        let start = std::time::Instant::now();
        for i in 0..10 {
            s.publish(&format!("{{\"n\":{i}}}"));
        }
        assert!(start.elapsed() < Duration::from_millis(100));
        assert!(s.buffered() <= 3);
        assert!(s.dropped() + s.sent() >= 7);
    }

    #[test]
    fn tcp_sink_delivers_lines() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            for line in BufReader::new(s).lines().take(3) {
                tx.send(line.unwrap()).unwrap();
            }
        });
        let mut sink = TcpSink::connect(addr);
        for i in 0..3 {
            sink.publish(&format!("line {i}"));
        }
        let got: Vec<String> = (0..3).map(|_| rx.recv_timeout(Duration::from_secs(5)).unwrap()).collect();
        assert_eq!(got, vec!["line 0", "line 1", "line 2"]);
    }
}
