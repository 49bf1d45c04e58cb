use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::json;

/// Sink for one JSON line per handled request.
#[derive(Clone)]
pub struct RequestLog {
    sink: Arc<Mutex<Box<dyn Write + Send>>>,
}

impl RequestLog {
    pub fn stderr() -> Self {
        Self::to_writer(std::io::stderr())
    }

    pub fn to_writer(w: impl Write + Send + 'static) -> Self {
        Self {
            sink: Arc::new(Mutex::new(Box::new(w))),
        }
    }

    /// In-memory sink for tests; returns the log and its shared buffer.
    pub fn memory() -> (Self, Arc<Mutex<Vec<u8>>>) {
        #[derive(Clone)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().expect("lock poisoned").extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Arc::new(Mutex::new(Vec::new()));
        (Self::to_writer(Shared(buf.clone())), buf)
    }

    pub fn record(&self, unix_ms: u64, method: &str, path: &str, status: u16, latency: Duration) {
        let line = json!({
            "unix_ms": unix_ms,
            "method": method,
            "path": path,
            "status": status,
            "latency_ms": latency.as_millis() as u64,
        });
        let mut sink = self.sink.lock().expect("lock poisoned");
        let _ = writeln!(sink, "{line}");
        let _ = sink.flush();
    }
}
