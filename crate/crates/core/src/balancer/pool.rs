//! Dispatch state of the balancer.
//!
//! All decisions (pick a backend and mark it busy, release it, hand it to the
//! next queued request) happen inside `&mut self` methods, so wrapping the
//! pool in a mutex makes every decision atomic with respect to concurrent
//! completions.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::Serialize;
use tokio::sync::oneshot;

#[derive(Debug, Clone, Serialize)]
pub struct BackendStats {
    pub url: String,
    pub healthy: bool,
    pub in_flight: u32,
    pub dispatched: u64,
    pub completed: u64,
    pub failed: u64,
}

#[derive(Debug)]
struct Backend {
    url: String,
    healthy: bool,
    busy: bool,
    dispatched: u64,
    completed: u64,
    failed: u64,
    probe_failures: u32,
    // release order; the smallest value is the longest-idle backend
    idle_since: u64,
}

/// Outcome of trying to admit a request.
#[derive(Debug)]
pub enum Admission {
    /// Backend index reserved for the caller.
    Dispatched(usize),
    /// Wait for a backend index; the sender is dropped if the pool closes.
    Queued(oneshot::Receiver<usize>),
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PoolEvent {
    Dispatched { at_ms: u64, backend: usize },
    Health { at_ms: u64, backend: usize, healthy: bool },
}

impl PoolEvent {
    pub fn at(&self) -> Duration {
        match *self {
            PoolEvent::Dispatched { at_ms, .. } | PoolEvent::Health { at_ms, .. } => {
                Duration::from_millis(at_ms)
            }
        }
    }
}

/// Upper bucket bounds of the latency histogram, in milliseconds. A final
/// overflow bucket catches everything above the last bound.
pub const LATENCY_BOUNDS_MS: [u64; 16] = [
    1, 2, 5, 10, 20, 50, 100, 200, 500, 1_000, 2_000, 5_000, 10_000, 30_000, 60_000, 300_000,
];

#[derive(Debug, Clone, Serialize)]
pub struct LatencyHistogram {
    pub bounds_ms: Vec<u64>,
    /// `counts[i]` counts latencies ≤ `bounds_ms[i]` (and above the previous
    /// bound); the last entry is the overflow bucket.
    pub counts: Vec<u64>,
    pub total: u64,
    pub sum_ms: f64,
}

impl LatencyHistogram {
    fn new() -> Self {
        Self {
            bounds_ms: LATENCY_BOUNDS_MS.to_vec(),
            counts: vec![0; LATENCY_BOUNDS_MS.len() + 1],
            total: 0,
            sum_ms: 0.0,
        }
    }

    fn record(&mut self, latency: Duration) {
        let ms = latency.as_secs_f64() * 1000.0;
        let bucket = LATENCY_BOUNDS_MS
            .iter()
            .position(|&b| ms <= b as f64)
            .unwrap_or(LATENCY_BOUNDS_MS.len());
        self.counts[bucket] += 1;
        self.total += 1;
        self.sum_ms += ms;
    }
}

/// Point-in-time view of the pool, served at `GET /stats`.
#[derive(Debug, Clone, Serialize)]
pub struct PoolStats {
    pub backends: Vec<BackendStats>,
    pub queue_length: usize,
    pub in_flight: usize,
    /// Requests admitted to the queue or a backend.
    pub accepted: u64,
    /// Admitted requests that received their final response.
    pub responded: u64,
    /// Requests refused because the queue was full or the balancer closing.
    pub rejected: u64,
    /// Admitted requests whose waiter vanished before dispatch.
    pub abandoned: u64,
    pub latency: LatencyHistogram,
}

impl PoolStats {
    pub fn completed(&self) -> u64 {
        self.backends.iter().map(|b| b.completed).sum()
    }
}

#[derive(Debug)]
pub struct BackendPool {
    backends: Vec<Backend>,
    queue: VecDeque<oneshot::Sender<usize>>,
    capacity: usize,
    unhealthy_after: u32,
    release_seq: u64,
    accepted: u64,
    responded: u64,
    rejected: u64,
    abandoned: u64,
    closed: bool,
    latency: LatencyHistogram,
    epoch: Instant,
    events: Option<Vec<PoolEvent>>,
}

impl BackendPool {
    /// Backends start healthy and idle.
    pub fn new(urls: Vec<String>, capacity: usize, unhealthy_after: u32) -> Self {
        Self {
            backends: urls
                .into_iter()
                .enumerate()
                .map(|(i, url)| Backend {
                    url,
                    healthy: true,
                    busy: false,
                    dispatched: 0,
                    completed: 0,
                    failed: 0,
                    probe_failures: 0,
                    idle_since: i as u64,
                })
                .collect(),
            queue: VecDeque::new(),
            capacity,
            unhealthy_after: unhealthy_after.max(1),
            release_seq: 0,
            accepted: 0,
            responded: 0,
            rejected: 0,
            abandoned: 0,
            closed: false,
            latency: LatencyHistogram::new(),
            epoch: Instant::now(),
            events: None,
        }
    }

    /// Keep a log of dispatches and health transitions.
    pub fn record_events(&mut self) {
        self.events.get_or_insert_with(Vec::new);
    }

    pub fn events(&self) -> Vec<PoolEvent> {
        self.events.clone().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.backends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }

    pub fn url(&self, backend: usize) -> &str {
        &self.backends[backend].url
    }

    pub fn is_healthy(&self, backend: usize) -> bool {
        self.backends[backend].healthy
    }

    pub fn healthy_backends(&self) -> Vec<usize> {
        (0..self.backends.len()).filter(|&i| self.backends[i].healthy).collect()
    }

    /// Time since the pool was created, on the same clock as event stamps.
    pub fn elapsed(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn log(&mut self, event: PoolEvent) {
        if let Some(events) = self.events.as_mut() {
            events.push(event);
        }
    }

    fn pick_idle(&self) -> Option<usize> {
        self.backends
            .iter()
            .enumerate()
            .filter(|(_, b)| b.healthy && !b.busy)
            .min_by_key(|(_, b)| b.idle_since)
            .map(|(i, _)| i)
    }

    fn reserve(&mut self, i: usize) {
        let b = &mut self.backends[i];
        debug_assert!(!b.busy);
        b.busy = true;
        b.dispatched += 1;
        let at_ms = self.now_ms();
        self.log(PoolEvent::Dispatched { at_ms, backend: i });
    }

    fn try_dispatch(&mut self) -> Option<usize> {
        let i = self.pick_idle()?;
        self.reserve(i);
        Some(i)
    }

    /// Admits a new request: dispatch immediately when nothing is queued and
    /// a backend is idle, otherwise queue it in arrival order.
    pub fn admit(&mut self) -> Admission {
        if self.closed || self.queue.len() >= self.capacity {
            self.rejected += 1;
            return Admission::Rejected;
        }
        self.accepted += 1;
        if self.queue.is_empty() {
            if let Some(i) = self.try_dispatch() {
                return Admission::Dispatched(i);
            }
        }
        let (tx, rx) = oneshot::channel();
        self.queue.push_back(tx);
        Admission::Queued(rx)
    }

    /// Hands idle backends to queued requests, oldest request first.
    fn drain_queue(&mut self) {
        while !self.queue.is_empty() {
            let Some(i) = self.pick_idle() else { return };
            let waiter = self.queue.pop_front().expect("queue is non-empty");
            if waiter.is_closed() {
                self.abandoned += 1;
                continue;
            }
            self.reserve(i);
            if waiter.send(i).is_err() {
                self.backends[i].busy = false;
                self.backends[i].dispatched -= 1;
                self.abandoned += 1;
            }
        }
    }

    fn release(&mut self, i: usize) {
        self.release_seq += 1;
        let seq = self.backends.len() as u64 + self.release_seq;
        let b = &mut self.backends[i];
        debug_assert!(b.busy);
        b.busy = false;
        b.idle_since = seq;
    }

    /// The request on backend `i` got its final response.
    pub fn complete(&mut self, i: usize, latency: Duration) {
        self.release(i);
        self.backends[i].completed += 1;
        self.responded += 1;
        self.latency.record(latency);
        self.drain_queue();
    }

    /// Backend `i` failed to serve its request. The backend is marked
    /// unhealthy. With `retry` the request re-enters at the head of the
    /// queue (or goes straight to another idle backend); otherwise it is
    /// counted as answered with an error.
    pub fn fail(&mut self, i: usize, retry: bool, latency: Duration) -> Option<Admission> {
        self.release(i);
        self.backends[i].failed += 1;
        self.backends[i].probe_failures = self.unhealthy_after;
        self.set_health(i, false);
        if !retry || self.closed {
            self.responded += 1;
            self.latency.record(latency);
            self.drain_queue();
            return None;
        }
        if self.queue.is_empty() {
            if let Some(j) = self.try_dispatch() {
                return Some(Admission::Dispatched(j));
            }
        }
        let (tx, rx) = oneshot::channel();
        self.queue.push_front(tx);
        self.drain_queue();
        Some(Admission::Queued(rx))
    }

    /// A queued request gave up before being dispatched (for example the
    /// pool closed). Counts it as answered.
    pub fn respond_unqueued(&mut self, latency: Duration) {
        self.responded += 1;
        self.latency.record(latency);
    }

    fn set_health(&mut self, i: usize, healthy: bool) {
        if self.backends[i].healthy != healthy {
            self.backends[i].healthy = healthy;
            let at_ms = self.now_ms();
            self.log(PoolEvent::Health {
                at_ms,
                backend: i,
                healthy,
            });
        }
        if healthy {
            self.drain_queue();
        }
    }

    /// Forces the health state of backend `i`.
    pub fn mark_health(&mut self, i: usize, healthy: bool) {
        self.backends[i].probe_failures = if healthy { 0 } else { self.unhealthy_after };
        self.set_health(i, healthy);
    }

    /// Feeds one health-probe result. A success marks the backend healthy;
    /// `unhealthy_after` consecutive failures mark it unhealthy.
    pub fn probe_result(&mut self, i: usize, ok: bool) {
        if ok {
            self.mark_health(i, true);
        } else {
            let b = &mut self.backends[i];
            b.probe_failures = b.probe_failures.saturating_add(1);
            if b.probe_failures >= self.unhealthy_after {
                self.set_health(i, false);
            }
        }
    }

    /// Rejects everything queued and refuses new requests.
    pub fn close(&mut self) {
        self.closed = true;
        self.queue.clear();
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            backends: self
                .backends
                .iter()
                .map(|b| BackendStats {
                    url: b.url.clone(),
                    healthy: b.healthy,
                    in_flight: u32::from(b.busy),
                    dispatched: b.dispatched,
                    completed: b.completed,
                    failed: b.failed,
                })
                .collect(),
            queue_length: self.queue.len(),
            in_flight: self.backends.iter().filter(|b| b.busy).count(),
            accepted: self.accepted,
            responded: self.responded,
            rejected: self.rejected,
            abandoned: self.abandoned,
            latency: self.latency.clone(),
        }
    }
}
