use std::panic::{AssertUnwindSafe, catch_unwind};
use std::sync::Arc;
use std::sync::mpsc::{Receiver, Sender, channel};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

pub type Job = Box<dyn FnOnce() + Send>;

/// Fixed set of threads draining a FIFO of jobs. Used to run top-level
/// trigger firings.
pub struct WorkQueue {
    tx: Mutex<Option<Sender<Job>>>,
    pending: Arc<(Mutex<usize>, Condvar)>,
}

impl WorkQueue {
    pub fn new(name: &str, threads: usize) -> Self {
        let (tx, rx) = channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let pending = Arc::new((Mutex::new(0usize), Condvar::new()));
        for i in 0..threads {
            let rx = rx.clone();
            let pending = pending.clone();
            let _ = thread::Builder::new().name(format!("{name}-{i}")).spawn(move || worker(rx, pending));
        }
        WorkQueue { tx: Mutex::new(Some(tx)), pending }
    }

    pub fn submit(&self, job: Job) {
        *self.pending.0.lock() += 1;
        let sent = self.tx.lock().as_ref().map(|tx| tx.send(job).is_ok()).unwrap_or(false);
        if !sent {
            self.done();
        }
    }

    fn done(&self) {
        let mut p = self.pending.0.lock();
        *p -= 1;
        self.pending.1.notify_all();
    }

    /// Waits until every submitted job has finished. False on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut p = self.pending.0.lock();
        while *p > 0 {
            if self.pending.1.wait_until(&mut p, deadline).timed_out() {
                return *p == 0;
            }
        }
        true
    }

    pub fn pending(&self) -> usize {
        *self.pending.0.lock()
    }
}

impl Drop for WorkQueue {
    fn drop(&mut self) {
        // Closing the channel stops the threads once the backlog is done.
        self.tx.lock().take();
    }
}

fn worker(rx: Arc<Mutex<Receiver<Job>>>, pending: Arc<(Mutex<usize>, Condvar)>) {
    loop {
        let job = rx.lock().recv();
        let Ok(job) = job else { return };
        if catch_unwind(AssertUnwindSafe(job)).is_err() {
            log::error!("work queue job panicked");
        }
        let mut p = pending.0.lock();
        *p -= 1;
        pending.1.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn runs_jobs_and_reports_idle() {
        let q = WorkQueue::new("t", 2);
        let n = Arc::new(AtomicUsize::new(0));
        for _ in 0..50 {
            let n = n.clone();
            q.submit(Box::new(move || {
                n.fetch_add(1, Ordering::SeqCst);
            }));
        }
        assert!(q.wait_idle(Duration::from_secs(5)));
        assert_eq!(n.load(Ordering::SeqCst), 50);
    }

    #[test]
    fn panicking_job_does_not_wedge_the_queue() {
        let q = WorkQueue::new("t", 1);
        q.submit(Box::new(|| panic!("boom")));
        q.submit(Box::new(|| {}));
        assert!(q.wait_idle(Duration::from_secs(5)));
    }
}
