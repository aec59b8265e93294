//! Scripted activation-population scenario.
//!
//! A batch of purchased copies, each with a behavior, is replayed against a
//! fresh in-memory service once per policy. The result is a per-policy
//! summary of grants, refusals and stolen markings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::{ContentId, PackagingSecret};
use crate::identity::{self, AttributeSet, MachineFingerprint};
use crate::licensing::ServerKey;
use crate::server::{ActivationRequest, ActivationResponse, ActivationService, PolicyMode, ProductStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Bought, never installed.
    Shelf,
    /// One machine, possibly reinstalled a few times.
    Honest,
    /// Moves to a new computer partway through.
    Upgrader,
    /// Lends the disc to a couple of friends.
    CasualSharer,
    /// Copies handed around a whole class.
    MassSharer,
}

impl Behavior {
    pub const ALL: [Behavior; 5] =
        [Behavior::Shelf, Behavior::Honest, Behavior::Upgrader, Behavior::CasualSharer, Behavior::MassSharer];

    /// Owner-only behaviors. Any refusal of the owner's first machine is a
    /// false positive.
    pub fn is_legitimate(self) -> bool {
        matches!(self, Behavior::Shelf | Behavior::Honest | Behavior::Upgrader)
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::Shelf => "shelf",
            Behavior::Honest => "honest",
            Behavior::Upgrader => "upgrader",
            Behavior::CasualSharer => "casual-sharer",
            Behavior::MassSharer => "mass-sharer",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub mix: BTreeMap<Behavior, usize>,
    pub policies: Vec<PolicyMode>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mix = BTreeMap::from([
            (Behavior::Shelf, 8),
            (Behavior::Honest, 150),
            (Behavior::Upgrader, 20),
            (Behavior::CasualSharer, 8),
            (Behavior::MassSharer, 4),
        ]);
        Self {
            seed: 0x00EC_A4B0,
            mix,
            policies: vec![
                PolicyMode::MonitorOnly,
                PolicyMode::Strict,
                PolicyMode::FairUse { extra_activations: 1 },
                PolicyMode::MassiveFraudPrevention { threshold: 5 },
            ],
        }
    }
}

impl ScenarioConfig {
    pub fn copies(&self) -> usize {
        self.mix.values().sum()
    }
}

/// One purchased copy and the machines that will try to activate it, in order.
#[derive(Debug, Clone)]
pub struct PurchasedCopy {
    pub content_id: ContentId,
    pub master_key: [u8; 32],
    pub behavior: Behavior,
    pub machines: Vec<MachineFingerprint>,
    /// Indexes into `machines`; index 0 is the owner.
    pub attempts: Vec<usize>,
}

fn random_machine(rng: &mut ChaCha8Rng) -> MachineFingerprint {
    let mut hex = |n: usize| (0..n).map(|_| format!("{:x}", rng.gen_range(0..16u8))).collect::<String>();
    let attrs = AttributeSet::new([
        (identity::CPU_MODEL, Some(format!("cpu {}", hex(4)))),
        (identity::BOARD_SERIAL, Some(hex(10))),
        (identity::DISK_SERIAL, Some(hex(14))),
        (identity::MAC_ADDRESS, Some(hex(12))),
        (identity::OS_FAMILY, Some("windows".to_string())),
        (identity::HOSTNAME, Some(format!("pc-{}", hex(6)))),
    ])
    .expect("generated attributes are well formed");
    identity::fingerprint(&attrs)
}

/// Builds the population deterministically from `config.seed`.
pub fn population(config: &ScenarioConfig) -> Vec<PurchasedCopy> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut behaviors: Vec<Behavior> =
        config.mix.iter().flat_map(|(b, n)| std::iter::repeat_n(*b, *n)).collect();
    behaviors.shuffle(&mut rng);

    behaviors
        .into_iter()
        .map(|behavior| {
            let mut id = [0u8; 16];
            rng.fill(&mut id);
            let content_id = ContentId::from_bytes(id);
            let mut seed = [0u8; 32];
            rng.fill(&mut seed);
            let master_key = *PackagingSecret::from_seed(seed, content_id).master_key();

            let machine_count = match behavior {
                Behavior::Shelf | Behavior::Honest => 1,
                Behavior::Upgrader => 2,
                Behavior::CasualSharer => rng.gen_range(3..=4),
                Behavior::MassSharer => rng.gen_range(15..=40),
            };
            let machines: Vec<_> = (0..machine_count).map(|_| random_machine(&mut rng)).collect();
            let attempts = match behavior {
                Behavior::Shelf => vec![],
                Behavior::Honest => vec![0; rng.gen_range(1..=3)],
                Behavior::Upgrader => {
                    let mut a = vec![0; rng.gen_range(1..=2)];
                    a.push(1);
                    if rng.gen_bool(0.3) {
                        a.push(0);
                    }
                    a
                }
                Behavior::CasualSharer | Behavior::MassSharer => {
                    let mut a: Vec<usize> = (0..machine_count).collect();
                    a[1..].shuffle(&mut rng);
                    if rng.gen_bool(0.5) {
                        a.push(0);
                    }
                    a
                }
            };
            PurchasedCopy { content_id, master_key, behavior, machines, attempts }
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BehaviorStats {
    pub copies: usize,
    pub attempts: u64,
    pub grants: u64,
    pub denials: u64,
    pub stolen_copies: usize,
    pub max_machines_per_copy: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyRun {
    pub policy: PolicyMode,
    pub copies: usize,
    pub activated_copies: usize,
    pub attempts: u64,
    pub grants: u64,
    pub denials: BTreeMap<String, u64>,
    pub stolen_copies: usize,
    /// Largest number of distinct machines granted for any single copy.
    pub max_machines_per_copy: usize,
    /// Legitimate copies whose owner was refused on their first machine.
    pub owners_refused: usize,
    pub by_behavior: BTreeMap<Behavior, BehaviorStats>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub copies: usize,
    pub runs: Vec<PolicyRun>,
}

impl SimulationReport {
    pub fn run_for(&self, policy: &PolicyMode) -> Option<&PolicyRun> {
        self.runs.iter().find(|r| &r.policy == policy)
    }
}

fn run_policy(policy: PolicyMode, copies: &[PurchasedCopy], key_seed: [u8; 32]) -> PolicyRun {
    let svc = ActivationService::in_memory(ServerKey::from_seed(key_seed));
    let mut run = PolicyRun {
        policy,
        copies: copies.len(),
        activated_copies: 0,
        attempts: 0,
        grants: 0,
        denials: BTreeMap::new(),
        stolen_copies: 0,
        max_machines_per_copy: 0,
        owners_refused: 0,
        by_behavior: BTreeMap::new(),
    };

    for copy in copies {
        svc.register_product(copy.content_id, copy.master_key, policy).expect("fresh content id");
        let mut granted = BTreeSet::new();
        let mut owner_refused = false;
        let b = run.by_behavior.entry(copy.behavior).or_default();
        b.copies += 1;
        for &m in &copy.attempts {
            let req = ActivationRequest::new(copy.content_id, &copy.machines[m], "buyer@example.edu");
            run.attempts += 1;
            b.attempts += 1;
            match svc.activate(&req).expect("in-memory activation") {
                ActivationResponse::Granted { .. } => {
                    run.grants += 1;
                    b.grants += 1;
                    granted.insert(m);
                }
                ActivationResponse::Denied { reason } => {
                    *run.denials.entry(reason.as_str().to_string()).or_default() += 1;
                    b.denials += 1;
                    owner_refused |= m == 0;
                }
            }
        }
        let stolen = svc.ledger_stats(copy.content_id).expect("registered").status == ProductStatus::Stolen;
        if stolen {
            run.stolen_copies += 1;
            b.stolen_copies += 1;
        }
        b.max_machines_per_copy = b.max_machines_per_copy.max(granted.len());
        run.max_machines_per_copy = run.max_machines_per_copy.max(granted.len());
        run.activated_copies += usize::from(!granted.is_empty());
        if copy.behavior.is_legitimate() && owner_refused {
            run.owners_refused += 1;
        }
    }
    run
}

/// Replays the population once per configured policy.
pub fn run_scenario(config: &ScenarioConfig) -> SimulationReport {
    let copies = population(config);
    let key_seed: [u8; 32] = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed).gen();
    SimulationReport {
        seed: config.seed,
        copies: copies.len(),
        runs: config.policies.iter().map(|p| run_policy(*p, &copies, key_seed)).collect(),
    }
}

impl fmt::Display for SimulationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "activation simulation: {} copies, seed {:#x}", self.copies, self.seed)?;
        for run in &self.runs {
            writeln!(f)?;
            writeln!(f, "policy {}", run.policy)?;
            writeln!(
                f,
                "  activated copies {} of {}, attempts {}, grants {}, stolen copies {}, max machines per copy {}, owners refused {}",
                run.activated_copies,
                run.copies,
                run.attempts,
                run.grants,
                run.stolen_copies,
                run.max_machines_per_copy,
                run.owners_refused
            )?;
            if !run.denials.is_empty() {
                let d: Vec<String> = run.denials.iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(f, "  denials {}", d.join(" "))?;
            }
            writeln!(f, "  {:<14} {:>6} {:>8} {:>6} {:>7} {:>6} {:>12}", "behavior", "copies", "attempts", "grants", "denials", "stolen", "max machines")?;
            for (b, s) in &run.by_behavior {
                writeln!(
                    f,
                    "  {:<14} {:>6} {:>8} {:>6} {:>7} {:>6} {:>12}",
                    b.to_string(),
                    s.copies,
                    s.attempts,
                    s.grants,
                    s.denials,
                    s.stolen_copies,
                    s.max_machines_per_copy
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_is_deterministic_and_sized() {
        let cfg = ScenarioConfig::default();
        let a = population(&cfg);
        let b = population(&cfg);
        assert_eq!(a.len(), 190);
        assert_eq!(
            a.iter().map(|c| (c.content_id, c.attempts.clone())).collect::<Vec<_>>(),
            b.iter().map(|c| (c.content_id, c.attempts.clone())).collect::<Vec<_>>()
        );
        assert!(a.iter().filter(|c| c.behavior == Behavior::Shelf).all(|c| c.attempts.is_empty()));
    }

    #[test]
    fn small_scenario_shape() {
        let cfg = ScenarioConfig {
            seed: 7,
            mix: BTreeMap::from([(Behavior::Honest, 3), (Behavior::MassSharer, 1)]),
            policies: vec![PolicyMode::Strict, PolicyMode::MassiveFraudPrevention { threshold: 3 }],
        };
        let r = run_scenario(&cfg);
        let strict = r.run_for(&PolicyMode::Strict).unwrap();
        assert_eq!(strict.max_machines_per_copy, 1);
        assert_eq!(strict.owners_refused, 0);
        let fraud = r.run_for(&PolicyMode::MassiveFraudPrevention { threshold: 3 }).unwrap();
        assert_eq!(fraud.stolen_copies, 1);
        assert!(r.to_string().contains("mass-sharer"));
    }
}
