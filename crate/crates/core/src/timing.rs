use serde::{Deserialize, Serialize};
use web_time::Instant;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub phases: Vec<(String, u64)>,
}

impl PhaseTimings {
    /// Runs `f` and records its wall time under `name`, accumulating repeats.
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(name, start.elapsed().as_nanos() as u64);
        out
    }

    pub fn add(&mut self, name: &str, nanos: u64) {
        // Keep every recorded phase strictly positive.
        let nanos = nanos.max(1);
        match self.phases.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => *t += nanos,
            None => self.phases.push((name.to_string(), nanos)),
        }
    }

    pub fn get(&self, name: &str) -> u64 {
        self.phases
            .iter()
            .find(|(n, _)| n == name)
            .map_or(0, |(_, t)| *t)
    }

    pub fn total(&self) -> u64 {
        self.phases.iter().map(|(_, t)| t).sum()
    }

    pub fn merge(&mut self, other: &PhaseTimings) {
        for (n, t) in &other.phases {
            self.add(n, *t);
        }
    }
}
