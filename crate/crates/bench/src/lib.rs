//! Shared builders for the criterion benchmarks in `benches/`.

use specsim_core::config::SimConfig;
use specsim_core::controller::{Controller, ControllerConfig, Mode, PolicyKind};
use specsim_core::engine::{BatchPlan, PlanMember, RequestId, StepPhase};
use specsim_core::latency::{desk, ProfileSample};
use specsim_core::workload::{DatasetProfile, LengthDist, Scenario, ScenarioPhase};

pub fn uniform_plan(batch: usize, context: u64) -> BatchPlan {
    let members = (0..batch)
        .map(|i| PlanMember {
            id: RequestId(i as u64),
            context_len: context,
            prompt_len: context,
            spec_eligible: true,
            proposed: 0,
            verified: 0,
        })
        .collect();
    BatchPlan::new(0, StepPhase::Decode, members)
}

pub fn adaptive_controller(rate: f64) -> Controller {
    let mut controller = Controller::new(
        ControllerConfig {
            policy: PolicyKind::DraftModel,
            ..ControllerConfig::default()
        },
        Mode::TurboSpec,
    );
    controller.state.acceptance.rate = rate;
    controller
}

pub fn planted_grid() -> Vec<ProfileSample> {
    let mut samples = Vec::new();
    for ctx in 0..20u64 {
        for batched in 1..11u64 {
            samples.push(ProfileSample {
                context_tokens: ctx * 100,
                batched_tokens: batched * 25,
                latency_ms: 0.001 * (ctx * 100) as f64 + 0.05 * (batched * 25) as f64 + 2.0,
            });
        }
    }
    samples
}

/// A steady 8-request decode workload capped at a fixed step count.
pub fn steady_sim(max_steps: u64) -> SimConfig {
    let dataset = DatasetProfile {
        name: "bench".into(),
        prompt_len: LengthDist::fixed(256),
        output_len: LengthDist::fixed(100_000),
        true_acceptance: 0.7,
        pld_match_prob: None,
    };
    SimConfig {
        scenario_name: "bench".into(),
        scenario: Scenario {
            phases: vec![ScenarioPhase {
                duration_s: 1.0,
                qps: 1_000.0,
                dataset,
            }],
            seed: 0,
            horizon_s: f64::INFINITY,
        },
        spec: specsim_core::speculation::SpecProfile::draft_model(0.7),
        controller: ControllerConfig {
            policy: PolicyKind::DraftModel,
            ..ControllerConfig::default()
        },
        profiles: desk::profiles(),
        mode: Mode::TurboSpec,
        seed: 7,
        max_batch: 8,
        kv_total_slots: 100_000_000,
        noise_sigma: 0.0,
        max_steps: Some(max_steps),
    }
}
