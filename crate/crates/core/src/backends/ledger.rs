use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::TokenCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
    Encoder,
}

#[derive(Debug, Default)]
struct Counters {
    calls: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
    prompt_tokens: AtomicU64,
    output_tokens: AtomicU64,
    wall_time_us: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> RoleCounters {
        RoleCounters {
            calls: self.calls.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
            prompt_tokens: self.prompt_tokens.load(Ordering::SeqCst),
            output_tokens: self.output_tokens.load(Ordering::SeqCst),
            wall_time_us: self.wall_time_us.load(Ordering::SeqCst),
        }
    }
}

/// Per-role call and token counters. Every counter only grows.
///
/// `wall_time_us` sums the latency each backend reports for its successful
/// calls; simulators report a modeled latency so transcripts stay
/// reproducible.
#[derive(Debug, Default)]
pub struct CostLedger {
    student: Counters,
    teacher: Counters,
    encoder: Counters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleCounters {
    pub calls: u64,
    pub retries: u64,
    pub failures: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub student: RoleCounters,
    pub teacher: RoleCounters,
    pub encoder: RoleCounters,
}

impl CostLedger {
    fn role(&self, role: Role) -> &Counters {
        match role {
            Role::Student => &self.student,
            Role::Teacher => &self.teacher,
            Role::Encoder => &self.encoder,
        }
    }

    pub fn record_call(&self, role: Role) {
        self.role(role).calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_retry(&self, role: Role) {
        self.role(role).retries.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_failure(&self, role: Role) {
        self.role(role).failures.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_usage(&self, role: Role, tokens: TokenCounts, latency: Duration) {
        let c = self.role(role);
        c.prompt_tokens.fetch_add(tokens.prompt_tokens, Ordering::SeqCst);
        c.output_tokens.fetch_add(tokens.output_tokens, Ordering::SeqCst);
        c.wall_time_us
            .fetch_add(u64::try_from(latency.as_micros()).unwrap_or(u64::MAX), Ordering::SeqCst);
    }

    pub fn calls(&self, role: Role) -> u64 {
        self.role(role).calls.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            student: self.student.snapshot(),
            teacher: self.teacher.snapshot(),
            encoder: self.encoder.snapshot(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concurrent_updates_are_not_lost() {
        let ledger = CostLedger::default();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        ledger.record_call(Role::Teacher);
                        ledger.record_usage(
                            Role::Teacher,
                            TokenCounts {
                                prompt_tokens: 2,
                                output_tokens: 1,
                            },
                            Duration::from_micros(3),
                        );
                    }
                });
            }
        });
        let s = ledger.snapshot();
        assert_eq!(s.teacher.calls, 8000);
        assert_eq!(s.teacher.prompt_tokens, 16000);
        assert_eq!(s.teacher.wall_time_us, 24000);
        assert_eq!(s.student, RoleCounters::default());
    }
}
