use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use super::{Backend, BackendError, ModelRequest, ModelResponse};

/// Counts every call that reaches the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    counter: Arc<AtomicU64>,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B, counter: Arc<AtomicU64>) -> Self {
        CountingBackend { inner, counter }
    }

    pub fn count(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        self.counter.fetch_add(1, Ordering::SeqCst);
        self.inner.invoke(request)
    }
}

/// Counting semaphore bounding the number of in-flight model calls.
#[derive(Debug)]
pub struct ConcurrencyGate {
    limit: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

pub struct GatePermit<'a> {
    gate: &'a ConcurrencyGate,
}

impl ConcurrencyGate {
    pub fn new(limit: usize) -> Self {
        ConcurrencyGate {
            limit: limit.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut in_use = self.in_use.lock().expect("gate poisoned");
        while *in_use >= self.limit {
            in_use = self.freed.wait(in_use).expect("gate poisoned");
        }
        *in_use += 1;
        GatePermit { gate: self }
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut in_use = self.gate.in_use.lock().expect("gate poisoned");
        *in_use -= 1;
        self.gate.freed.notify_one();
    }
}

pub struct GatedBackend<B> {
    inner: B,
    gate: Arc<ConcurrencyGate>,
}

impl<B: Backend> GatedBackend<B> {
    pub fn new(inner: B, gate: Arc<ConcurrencyGate>) -> Self {
        GatedBackend { inner, gate }
    }
}

impl<B: Backend> Backend for GatedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let _permit = self.gate.acquire();
        self.inner.invoke(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn gate_bounds_concurrency() {
        let gate = Arc::new(ConcurrencyGate::new(2));
        let active = Arc::new(AtomicU64::new(0));
        let peak = Arc::new(AtomicU64::new(0));
        thread::scope(|s| {
            for _ in 0..8 {
                let (gate, active, peak) = (gate.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _p = gate.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(10));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(*gate.in_use.lock().unwrap(), 0);
    }
}
