//! Bounded, first-come-first-served admission for remote calls.
//!
//! Callers take a numbered ticket, then run their work once every earlier
//! ticket has been admitted and a concurrency slot is free. Ticket order is
//! the admission order, which keeps request ordering reproducible even when
//! calls originate from a thread pool.

use std::sync::{Condvar, Mutex};

struct QueueState {
    in_flight: u32,
    next_ticket: u64,
    now_serving: u64,
    peak_in_flight: u32,
    admitted: Vec<u64>,
}

pub struct AdmissionQueue {
    max_concurrent: u32,
    state: Mutex<QueueState>,
    available: Condvar,
}

impl AdmissionQueue {
    pub fn new(max_concurrent: u32) -> Self {
        AdmissionQueue {
            max_concurrent: max_concurrent.max(1),
            state: Mutex::new(QueueState {
                in_flight: 0,
                next_ticket: 0,
                now_serving: 0,
                peak_in_flight: 0,
                admitted: Vec::new(),
            }),
            available: Condvar::new(),
        }
    }

    /// Reserves a place in line. Tickets are admitted strictly in the order
    /// they were taken.
    pub fn take_ticket(&self) -> u64 {
        let mut s = self.state.lock().unwrap();
        let t = s.next_ticket;
        s.next_ticket += 1;
        t
    }

    /// Blocks until `ticket` is at the head of the line and a slot is free,
    /// then runs `work`.
    pub fn run_ticket<T>(&self, ticket: u64, work: impl FnOnce() -> T) -> T {
        let mut s = self.state.lock().unwrap();
        while !(s.now_serving == ticket && s.in_flight < self.max_concurrent) {
            s = self.available.wait(s).unwrap();
        }
        s.now_serving += 1;
        s.in_flight += 1;
        s.peak_in_flight = s.peak_in_flight.max(s.in_flight);
        s.admitted.push(ticket);
        drop(s);
        self.available.notify_all();

        let result = work();

        let mut s = self.state.lock().unwrap();
        s.in_flight -= 1;
        drop(s);
        self.available.notify_all();
        result
    }

    /// Takes a ticket and runs `work` when it comes up.
    pub fn admit<T>(&self, work: impl FnOnce() -> T) -> T {
        let ticket = self.take_ticket();
        self.run_ticket(ticket, work)
    }

    /// Highest number of concurrently running calls seen so far.
    pub fn peak_in_flight(&self) -> u32 {
        self.state.lock().unwrap().peak_in_flight
    }

    /// Tickets in the order they were admitted.
    pub fn admitted_order(&self) -> Vec<u64> {
        self.state.lock().unwrap().admitted.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn admission_follows_ticket_order() {
        let queue = Arc::new(AdmissionQueue::new(1));
        // Take tickets up front so the order is fixed regardless of how the
        // threads get scheduled.
        let tickets: Vec<u64> = (0..6).map(|_| queue.take_ticket()).collect();
        let mut handles = Vec::new();
        // Spawn in reverse to make scheduling adversarial.
        for &t in tickets.iter().rev() {
            let q = Arc::clone(&queue);
            handles.push(std::thread::spawn(move || {
                q.run_ticket(t, || std::thread::sleep(Duration::from_millis(2)));
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(queue.admitted_order(), tickets);
    }

    #[test]
    fn concurrency_never_exceeds_limit() {
        let queue = Arc::new(AdmissionQueue::new(3));
        let mut handles = Vec::new();
        for _ in 0..9 {
            let q = Arc::clone(&queue);
            handles.push(std::thread::spawn(move || {
                q.admit(|| std::thread::sleep(Duration::from_millis(30)));
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let peak = queue.peak_in_flight();
        assert!(peak <= 3, "peak {peak} exceeded the limit");
        assert!(peak >= 2, "queue never overlapped calls (peak {peak})");
    }

    #[test]
    fn sequential_use_reaches_peak_one() {
        let queue = AdmissionQueue::new(4);
        for i in 0..5 {
            let got = queue.admit(|| i * 2);
            assert_eq!(got, i * 2);
        }
        assert_eq!(queue.peak_in_flight(), 1);
    }
}
