//! CPU Starter Unit and the cluster CPU that serves its requests.
//!
//! Service routines come from a closed registry declared in the program file;
//! each has a fixed cycle cost and one of a few canned behaviors.

use std::fmt;
use std::str::FromStr;

use super::UnitError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutineBehavior {
    NoOp,
    /// Args `[addr, count, scale_bits, ..]`: scales `count` local f32 values
    /// at `addr` by `f32::from_bits(scale_bits)`.
    ScalarPostprocess,
    /// Args carry a [`super::GatherScatterPlan`].
    LaunchGsdu,
}

impl fmt::Display for RoutineBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutineBehavior::NoOp => "no_op",
            RoutineBehavior::ScalarPostprocess => "scalar_postprocess",
            RoutineBehavior::LaunchGsdu => "launch_gsdu",
        })
    }
}

impl FromStr for RoutineBehavior {
    type Err = UnitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_op" => Ok(RoutineBehavior::NoOp),
            "scalar_postprocess" => Ok(RoutineBehavior::ScalarPostprocess),
            "launch_gsdu" => Ok(RoutineBehavior::LaunchGsdu),
            _ => Err(UnitError::UnknownRoutine(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routine {
    pub name: String,
    pub cost: u64,
    pub behavior: RoutineBehavior,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutineRegistry {
    routines: Vec<Routine>,
}

impl RoutineRegistry {
    pub fn register(&mut self, routine: Routine) {
        self.routines.retain(|r| r.name != routine.name);
        self.routines.push(routine);
    }

    pub fn get(&self, name: &str) -> Result<&Routine, UnitError> {
        self.routines
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| UnitError::UnknownRoutine(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Routine> {
        self.routines.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.routines.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceCall {
    pub routine: String,
    pub args: [u64; 8],
}

/// The cluster CPU: a single server handling one routine at a time.
#[derive(Debug, Clone)]
pub struct ClusterCpu {
    busy_until: u64,
    interrupt_overhead: u64,
}

impl ClusterCpu {
    pub fn new(interrupt_overhead: u64) -> Self {
        Self { busy_until: 0, interrupt_overhead }
    }

    /// Serves a request raised at `now`; returns `(start, end)`.
    pub fn serve(&mut self, now: u64, cost: u64) -> (u64, u64) {
        let start = now.max(self.busy_until);
        let end = start + self.interrupt_overhead + cost;
        self.busy_until = end;
        (start, end)
    }

    /// Serves requests raised in the same cycle in ascending TPB order.
    /// Returns `(tpb, start, end)` per request.
    pub fn serve_batch(&mut self, now: u64, requests: &[(u32, u64)]) -> Vec<(u32, u64, u64)> {
        let mut sorted = requests.to_vec();
        sorted.sort_by_key(|r| r.0);
        sorted
            .into_iter()
            .map(|(tpb, cost)| {
                let (s, e) = self.serve(now, cost);
                (tpb, s, e)
            })
            .collect()
    }

    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_request_latency() {
        let mut cpu = ClusterCpu::new(10);
        assert_eq!(cpu.serve(50, 100), (50, 160));
    }

    #[test]
    fn simultaneous_requests_served_in_tpb_order() {
        let mut cpu = ClusterCpu::new(10);
        let got = cpu.serve_batch(0, &[(3, 100), (0, 100), (2, 100), (1, 100)]);
        let want: Vec<(u32, u64, u64)> = (0..4).map(|t| (t, t as u64 * 110, (t as u64 + 1) * 110)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn unknown_routine() {
        let mut reg = RoutineRegistry::default();
        reg.register(Routine { name: "post".into(), cost: 5, behavior: RoutineBehavior::NoOp });
        assert!(reg.get("post").is_ok());
        assert_eq!(reg.get("missing"), Err(UnitError::UnknownRoutine("missing".into())));
    }
}
