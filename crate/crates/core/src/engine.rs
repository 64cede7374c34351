//! The serving-engine step loop: continuous batching with prefill-priority
//! scheduling, speculative decode steps (propose, score, accept), KV-slot
//! accounting, and the draft-KV catch-up bookkeeping around bonus tokens.
//!
//! The loop is strictly single-threaded and deterministic: all randomness
//! flows through one seeded generator owned by the engine, and step latency is
//! whatever the latency model predicts (optionally scaled by lognormal noise).

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use thiserror::Error;

use crate::controller::{Controller, Mode, PolicyKind, PrefillDecision};
use crate::latency::{LatencyError, LatencyProfiles};
use crate::metrics::{MetricsLog, RequestRecord};
use crate::speculation::{sample_accepted_count, sample_pld_match, SpecProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Queued,
    Prefill,
    Decoding,
    Finished,
}

/// One user request's lifecycle state inside the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub prompt_len: u64,
    pub target_output_len: u64,
    pub generated: u64,
    /// Cleared when this request's draft prefill was skipped; such requests
    /// never speculate again.
    pub spec_eligible: bool,
    /// Draft-model KV tokens built so far; lags the context by the pending
    /// bonus catch-up while speculation is active.
    pub draft_kv_len: u64,
    pub state: RequestState,
    pub finish_ms: Option<f64>,
    /// Ground-truth per-token acceptance rate; hidden from the controller.
    pub true_rate: f64,
    /// Per-request prompt-lookup match probability; falls back to the
    /// profile's value when absent.
    pub pld_match_prob: Option<f64>,
}

impl Request {
    pub fn new(
        id: RequestId,
        arrival_ms: f64,
        prompt_len: u64,
        target_output_len: u64,
        true_rate: f64,
    ) -> Self {
        Self {
            id,
            arrival_ms,
            prompt_len,
            target_output_len,
            generated: 0,
            spec_eligible: true,
            draft_kv_len: 0,
            state: RequestState::Queued,
            finish_ms: None,
            true_rate,
            pld_match_prob: None,
        }
    }

    pub fn context_len(&self) -> u64 {
        self.prompt_len + self.generated
    }

    pub fn remaining(&self) -> u64 {
        self.target_output_len - self.generated
    }

    /// Worst-case lifetime KV demand. Admission reserves this up front so the
    /// budget invariant holds without preemption.
    pub fn kv_footprint(&self, draft_policy: bool) -> u64 {
        let side = self.prompt_len + self.target_output_len;
        if draft_policy {
            side * 2
        } else {
            side
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Prefill,
    Decode,
}

impl std::fmt::Display for StepPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepPhase::Prefill => write!(f, "prefill"),
            StepPhase::Decode => write!(f, "decode"),
        }
    }
}

/// A batch member as the controller sees it: sizing data plus this step's
/// proposal state, no ground-truth fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanMember {
    pub id: RequestId,
    pub context_len: u64,
    pub prompt_len: u64,
    pub spec_eligible: bool,
    /// Tokens proposed for this member this step (0 = not speculating).
    pub proposed: u32,
    /// Tokens the target model will score for this member this step.
    pub verified: u32,
}

/// One engine step's composition.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub step_index: u64,
    pub phase: StepPhase,
    pub members: Vec<PlanMember>,
}

impl BatchPlan {
    pub fn new(step_index: u64, phase: StepPhase, members: Vec<PlanMember>) -> Self {
        Self {
            step_index,
            phase,
            members,
        }
    }

    pub fn context_total(&self) -> u64 {
        self.members.iter().map(|m| m.context_len).sum()
    }

    /// Tokens the forward pass processes: verified + bonus per member for
    /// decode steps, full prompts for prefill steps.
    pub fn batched_total(&self) -> u64 {
        match self.phase {
            StepPhase::Prefill => self.members.iter().map(|m| m.prompt_len).sum(),
            StepPhase::Decode => self.members.iter().map(|m| m.verified as u64 + 1).sum(),
        }
    }

    pub fn per_request_proposed(&self) -> Vec<u32> {
        self.members.iter().map(|m| m.proposed).collect()
    }
}

/// Realized result of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step_index: u64,
    /// Simulation clock after the step completed, milliseconds.
    pub clock_ms: f64,
    pub phase: StepPhase,
    pub batch_size: usize,
    /// The controller's speculation depth this step: proposed length under
    /// the draft policy, verification length under prompt lookup.
    pub chosen_k: u32,
    pub verification_len: u32,
    pub proposed_tokens: u64,
    /// Proposed tokens that survived scoring (before output-length capping).
    pub accepted_tokens: u64,
    pub generated_tokens: u64,
    pub latency_ms: f64,
    pub realized_goodput_tps: f64,
    /// Per-token acceptance measured from this step's chains (accepted over
    /// accepted + observed rejections); absent when nothing was scored.
    pub acceptance_fraction: Option<f64>,
    /// Controller's acceptance estimate after this step's update.
    pub acceptance_estimate: f64,
    /// Estimator expectations for the executed configuration.
    pub predicted_generated: f64,
    pub predicted_latency_ms: f64,
    pub accepted_per_request: Vec<u32>,
    pub disable_threshold: Option<u32>,
    pub draft_prefill_ran: bool,
}

/// Token-slot accounting for the shared KV pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvBudget {
    pub total_slots: u64,
    pub used_target: u64,
    pub used_draft: u64,
}

impl KvBudget {
    pub fn new(total_slots: u64) -> Self {
        Self {
            total_slots,
            used_target: 0,
            used_draft: 0,
        }
    }

    pub fn free_slots(&self) -> u64 {
        self.total_slots - self.used_target - self.used_draft
    }

    pub fn charge_target(&mut self, slots: u64) -> Result<(), EngineError> {
        if slots > self.free_slots() {
            return Err(EngineError::KvOverflow {
                needed: slots,
                free: self.free_slots(),
            });
        }
        self.used_target += slots;
        Ok(())
    }

    pub fn charge_draft(&mut self, slots: u64) -> Result<(), EngineError> {
        if slots > self.free_slots() {
            return Err(EngineError::KvOverflow {
                needed: slots,
                free: self.free_slots(),
            });
        }
        self.used_draft += slots;
        Ok(())
    }

    pub fn release_target(&mut self, slots: u64) {
        debug_assert!(self.used_target >= slots);
        self.used_target = self.used_target.saturating_sub(slots);
    }

    pub fn release_draft(&mut self, slots: u64) {
        debug_assert!(self.used_draft >= slots);
        self.used_draft = self.used_draft.saturating_sub(slots);
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("KV budget overflow: needed {needed} slots, {free} free")]
    KvOverflow { needed: u64, free: u64 },
    #[error("request {id} needs {footprint} KV slots but the pool holds {total}")]
    RequestExceedsKvBudget {
        id: RequestId,
        footprint: u64,
        total: u64,
    },
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
}

impl From<crate::controller::ControllerError> for EngineError {
    fn from(e: crate::controller::ControllerError) -> Self {
        match e {
            crate::controller::ControllerError::Latency(l) => EngineError::Latency(l),
            crate::controller::ControllerError::InvalidConfig(msg) => {
                EngineError::InvalidConfig(msg)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub seed: u64,
    pub max_batch: usize,
    pub kv_total_slots: u64,
    /// Sigma of the lognormal step-latency multiplier; 0 keeps latency exact.
    pub noise_sigma: f64,
    pub horizon_ms: f64,
    pub max_steps: Option<u64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_batch: 64,
            kv_total_slots: 1_000_000,
            noise_sigma: 0.0,
            horizon_ms: f64::INFINITY,
            max_steps: None,
        }
    }
}

const MIN_STEP_MS: f64 = 1e-6;

pub struct Engine {
    policy: PolicyKind,
    spec: SpecProfile,
    profiles: LatencyProfiles,
    controller: Controller,
    opts: SimOptions,
    kv: KvBudget,
    reserved_slots: u64,
    clock_ms: f64,
    pending: VecDeque<Request>,
    active: Vec<Request>,
    step_index: u64,
    steps: Vec<StepOutcome>,
    finished: Vec<RequestRecord>,
    horizon_exceeded: bool,
    kv_blocked_steps: u64,
}

impl Engine {
    pub fn new(
        spec: SpecProfile,
        profiles: LatencyProfiles,
        controller: Controller,
        arrivals: Vec<Request>,
        opts: SimOptions,
    ) -> Result<Self, EngineError> {
        spec.validate()
            .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        controller.config.validate()?;
        controller.mode().validate()?;
        if opts.max_batch < 1 {
            return Err(EngineError::InvalidConfig("max_batch must be >= 1".into()));
        }
        if opts.noise_sigma < 0.0 {
            return Err(EngineError::InvalidConfig(
                "noise_sigma must be >= 0".into(),
            ));
        }
        let policy = PolicyKind::from(spec.kind);
        if policy != controller.config.policy {
            return Err(EngineError::InvalidConfig(
                "speculation profile kind and controller policy disagree".into(),
            ));
        }
        let needs_draft = policy == PolicyKind::DraftModel && controller.mode() != Mode::NoSpec;
        if needs_draft && profiles.draft.is_none() {
            return Err(EngineError::Latency(LatencyError::MissingDraftModel));
        }

        let mut pending: Vec<Request> = arrivals;
        pending.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.0.cmp(&b.id.0)));
        for r in &pending {
            if r.prompt_len < 1 || r.target_output_len < 1 {
                return Err(EngineError::InvalidConfig(format!(
                    "request {} has empty prompt or output",
                    r.id
                )));
            }
        }

        Ok(Self {
            policy,
            spec,
            profiles,
            controller,
            kv: KvBudget::new(opts.kv_total_slots),
            reserved_slots: 0,
            clock_ms: 0.0,
            pending: pending.into(),
            active: Vec::new(),
            step_index: 0,
            steps: Vec::new(),
            finished: Vec::new(),
            horizon_exceeded: false,
            kv_blocked_steps: 0,
            opts,
        })
    }

    pub fn clock_ms(&self) -> f64 {
        self.clock_ms
    }

    pub fn kv(&self) -> &KvBudget {
        &self.kv
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn active_requests(&self) -> &[Request] {
        &self.active
    }

    fn draft_policy(&self) -> bool {
        self.policy == PolicyKind::DraftModel
    }

    /// Continuous-batching admission: FCFS over arrived requests while the
    /// batch cap and the reserved KV footprint allow. Head-of-line requests
    /// that do not fit keep everything behind them queued. Steps where the
    /// KV budget (not the batch cap) blocked admission are counted so
    /// saturated runs are visible in the log.
    fn admit(&mut self) {
        while let Some(front) = self.pending.front() {
            if front.arrival_ms > self.clock_ms || self.active.len() >= self.opts.max_batch {
                break;
            }
            let footprint = front.kv_footprint(self.draft_policy());
            if self.reserved_slots + footprint > self.kv.total_slots {
                self.kv_blocked_steps += 1;
                break;
            }
            let mut request = self.pending.pop_front().expect("front exists");
            request.state = RequestState::Prefill;
            self.reserved_slots += footprint;
            self.active.push(request);
        }
    }

    fn plan_member(r: &Request) -> PlanMember {
        PlanMember {
            id: r.id,
            context_len: r.context_len(),
            prompt_len: r.prompt_len,
            spec_eligible: r.spec_eligible,
            proposed: 0,
            verified: 0,
        }
    }

    /// Builds the next step's plan: admission first, then prefill priority,
    /// else a decode plan over every active request.
    pub fn schedule_batch(&mut self, rng: &mut ChaCha8Rng) -> Option<BatchPlan> {
        let _ = rng; // admission is deterministic; rng reserved for schedulers that need it
        self.admit();
        let prefill: Vec<PlanMember> = self
            .active
            .iter()
            .filter(|r| r.state == RequestState::Prefill)
            .map(Self::plan_member)
            .collect();
        if !prefill.is_empty() {
            return Some(BatchPlan::new(self.step_index, StepPhase::Prefill, prefill));
        }
        let decode: Vec<PlanMember> = self
            .active
            .iter()
            .filter(|r| r.state == RequestState::Decoding)
            .map(Self::plan_member)
            .collect();
        if decode.is_empty() {
            None
        } else {
            Some(BatchPlan::new(self.step_index, StepPhase::Decode, decode))
        }
    }

    fn noise_multiplier(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.opts.noise_sigma == 0.0 {
            return 1.0;
        }
        let sigma = self.opts.noise_sigma;
        // mu chosen so the multiplier has mean 1.
        let dist = LogNormal::new(-sigma * sigma / 2.0, sigma).expect("valid lognormal");
        dist.sample(rng)
    }

    /// Runs a prefill step: charges prompt latency for the target model and,
    /// under the draft policy, for the draft model unless the controller's
    /// prefill gate skips it. Skipped members lose speculation eligibility
    /// for their lifetime. No output tokens are generated.
    pub fn run_prefill(
        &mut self,
        plan: &BatchPlan,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome, EngineError> {
        let concurrency = self.active.len() as u32;
        let decision = self.controller.on_prefill(concurrency);
        let run_draft = self.draft_policy() && decision == PrefillDecision::RunDraftPrefill;

        let prompt_total: u64 = plan.members.iter().map(|m| m.prompt_len).sum();
        let mut latency = self
            .profiles
            .prefill_target
            .forward_time(0.0, prompt_total as f64);
        if run_draft {
            let draft = self
                .profiles
                .prefill_draft
                .as_ref()
                .ok_or(LatencyError::MissingDraftModel)?;
            latency += draft.forward_time(0.0, prompt_total as f64);
        }
        latency = (latency * self.noise_multiplier(rng)).max(MIN_STEP_MS);
        self.clock_ms += latency;

        let draft_policy = self.draft_policy();
        for member in &plan.members {
            let request = self
                .active
                .iter_mut()
                .find(|r| r.id == member.id)
                .expect("plan member is active");
            request.state = RequestState::Decoding;
            self.kv.charge_target(request.prompt_len)?;
            if draft_policy {
                if run_draft {
                    self.kv.charge_draft(request.prompt_len)?;
                    request.draft_kv_len = request.prompt_len;
                } else {
                    request.spec_eligible = false;
                }
            }
        }

        let outcome = StepOutcome {
            step_index: plan.step_index,
            clock_ms: self.clock_ms,
            phase: StepPhase::Prefill,
            batch_size: plan.members.len(),
            chosen_k: 0,
            verification_len: 0,
            proposed_tokens: 0,
            accepted_tokens: 0,
            generated_tokens: 0,
            latency_ms: latency,
            realized_goodput_tps: 0.0,
            acceptance_fraction: None,
            acceptance_estimate: self.controller.acceptance_rate(),
            predicted_generated: 0.0,
            predicted_latency_ms: latency,
            accepted_per_request: Vec::new(),
            disable_threshold: self.controller.state.disable_batch_size,
            draft_prefill_ran: run_draft,
        };
        Ok(outcome)
    }

    /// Runs one decode step: pick the proposal length, sample proposals,
    /// pick the verification length, sample the acceptance chains, advance
    /// the clock, and settle KV accounting.
    pub fn run_decode_step(
        &mut self,
        plan: &mut BatchPlan,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome, EngineError> {
        let batch_size = plan.members.len();
        let proposed_len = self
            .controller
            .get_proposed_len(&self.profiles, plan, &self.kv);

        if proposed_len > 0 {
            let profile_match = self.spec.match_prob.unwrap_or(0.0);
            for member in plan.members.iter_mut() {
                if !member.spec_eligible {
                    continue;
                }
                match self.policy {
                    PolicyKind::DraftModel => member.proposed = proposed_len,
                    PolicyKind::PromptLookup => {
                        let request = self
                            .active
                            .iter()
                            .find(|r| r.id == member.id)
                            .expect("plan member is active");
                        let prob = request.pld_match_prob.unwrap_or(profile_match);
                        member.proposed = sample_pld_match(rng, prob, proposed_len);
                    }
                }
            }
        }

        let verification_len = if proposed_len == 0 {
            0
        } else {
            self.controller
                .get_verification_len(&self.profiles, plan, proposed_len)
        };
        for member in plan.members.iter_mut() {
            member.verified = member.proposed.min(verification_len);
        }

        let predicted = self
            .controller
            .predict_step(&self.profiles, plan, proposed_len)?;
        let latency = (predicted.latency_ms * self.noise_multiplier(rng)).max(MIN_STEP_MS);
        self.clock_ms += latency;

        let mut accepted_per_request = Vec::with_capacity(batch_size);
        let mut generated_total = 0u64;
        let mut proposed_total = 0u64;
        let mut chains_scored = 0u64;
        let mut accepted_scored = 0u64;
        let mut rejections_observed = 0u64;
        let draft_policy = self.draft_policy();

        for member in plan.members.iter() {
            let idx = self
                .active
                .iter()
                .position(|r| r.id == member.id)
                .expect("plan member is active");
            let request = &mut self.active[idx];

            proposed_total += member.proposed as u64;
            let accepted = if member.verified > 0 {
                let m = sample_accepted_count(rng, request.true_rate, member.verified);
                chains_scored += 1;
                accepted_scored += m as u64;
                if m < member.verified {
                    rejections_observed += 1;
                }
                m
            } else {
                0
            };
            let tokens = ((accepted as u64) + 1).min(request.remaining());

            if draft_policy && member.proposed > 0 {
                // Full acceptance leaves the last drafted token plus the bonus
                // for the next draft pass to process; otherwise only the bonus
                // (or its correction) is pending.
                let pending: u64 = if accepted == member.proposed { 2 } else { 1 };
                let new_ctx = request.context_len() + tokens;
                let new_draft_kv = new_ctx.saturating_sub(pending).max(request.draft_kv_len);
                self.kv.charge_draft(new_draft_kv - request.draft_kv_len)?;
                request.draft_kv_len = new_draft_kv;
            }

            self.kv.charge_target(tokens)?;
            request.generated += tokens;
            generated_total += tokens;
            accepted_per_request.push(accepted);

            if request.remaining() == 0 {
                request.state = RequestState::Finished;
                request.finish_ms = Some(self.clock_ms);
                self.retire(idx);
            }
        }

        self.controller.on_decision(proposed_len, batch_size as u32);
        // A chain's tokens past its first rejection were never really scored,
        // so the per-token estimate divides by accepted + observed rejections
        // (the truncated-chain likelihood), not by all verified slots.
        let scored_tokens = accepted_scored + rejections_observed;
        self.controller
            .observe_acceptance(accepted_scored, scored_tokens);

        let chosen_k = match self.policy {
            PolicyKind::DraftModel => proposed_len,
            PolicyKind::PromptLookup => verification_len,
        };
        let outcome = StepOutcome {
            step_index: plan.step_index,
            clock_ms: self.clock_ms,
            phase: StepPhase::Decode,
            batch_size,
            chosen_k,
            verification_len,
            proposed_tokens: proposed_total,
            accepted_tokens: accepted_scored,
            generated_tokens: generated_total,
            latency_ms: latency,
            realized_goodput_tps: crate::controller::tokens_per_second(
                generated_total as f64,
                latency,
            ),
            acceptance_fraction: (chains_scored > 0)
                .then(|| accepted_scored as f64 / scored_tokens.max(1) as f64),
            acceptance_estimate: self.controller.acceptance_rate(),
            predicted_generated: predicted.accept_len,
            predicted_latency_ms: predicted.latency_ms,
            accepted_per_request,
            disable_threshold: self.controller.state.disable_batch_size,
            draft_prefill_ran: false,
        };

        debug_assert!(
            self.kv.used_target + self.kv.used_draft <= self.kv.total_slots,
            "KV accounting out of budget"
        );
        Ok(outcome)
    }

    /// Releases a finished request's KV and reservation. The request itself
    /// is swept out of the active set after the step completes.
    fn retire(&mut self, idx: usize) {
        let draft_policy = self.draft_policy();
        let request = &self.active[idx];
        self.kv.release_target(request.context_len());
        self.kv.release_draft(request.draft_kv_len);
        self.reserved_slots -= request.kv_footprint(draft_policy);
        self.finished.push(RequestRecord {
            id: request.id,
            arrival_ms: request.arrival_ms,
            finish_ms: request.finish_ms.expect("finished request has a time"),
            prompt_len: request.prompt_len,
            output_len: request.target_output_len,
        });
    }

    /// Advances the simulation by one step. Returns false when all requests
    /// have drained.
    pub fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<bool, EngineError> {
        self.active.retain(|r| r.state != RequestState::Finished);

        if self.active.is_empty() {
            match self.pending.front() {
                None => return Ok(false),
                Some(front) => {
                    if front.arrival_ms > self.clock_ms {
                        self.clock_ms = front.arrival_ms;
                    }
                }
            }
        }

        let Some(mut plan) = self.schedule_batch(rng) else {
            // Nothing active and the head request can never fit.
            let front = self.pending.front().expect("queue is nonempty here");
            return Err(EngineError::RequestExceedsKvBudget {
                id: front.id,
                footprint: front.kv_footprint(self.draft_policy()),
                total: self.kv.total_slots,
            });
        };

        let outcome = match plan.phase {
            StepPhase::Prefill => self.run_prefill(&plan, rng)?,
            StepPhase::Decode => self.run_decode_step(&mut plan, rng)?,
        };
        self.steps.push(outcome);
        self.step_index += 1;

        if self.clock_ms > self.opts.horizon_ms {
            self.horizon_exceeded = true;
            return Ok(false);
        }
        if let Some(max) = self.opts.max_steps {
            if self.step_index >= max {
                self.horizon_exceeded = true;
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Runs until every request finishes or the horizon/step cap is hit, then
    /// hands back the full metrics log. A truncated run is reported through
    /// the log's flag rather than an error.
    pub fn run(mut self, mut meta: Vec<(String, String)>) -> Result<MetricsLog, EngineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        while self.step(&mut rng)? {}

        self.active.retain(|r| r.state != RequestState::Finished);
        let unfinished = self.active.len() + self.pending.len();
        meta.push((
            "horizon_exceeded".into(),
            self.horizon_exceeded.to_string(),
        ));
        meta.push(("finished_requests".into(), self.finished.len().to_string()));
        meta.push(("unfinished_requests".into(), unfinished.to_string()));
        meta.push(("kv_blocked_steps".into(), self.kv_blocked_steps.to_string()));
        Ok(MetricsLog {
            step_records: self.steps,
            request_records: self.finished,
            run_meta: meta,
            horizon_exceeded: self.horizon_exceeded,
        })
    }
}

/// Convenience wrapper: build an engine and drain it in one call.
pub fn run_simulation(
    spec: SpecProfile,
    profiles: LatencyProfiles,
    controller: Controller,
    arrivals: Vec<Request>,
    opts: SimOptions,
    meta: Vec<(String, String)>,
) -> Result<MetricsLog, EngineError> {
    Engine::new(spec, profiles, controller, arrivals, opts)?.run(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{Controller, ControllerConfig, Mode, PolicyKind};
    use crate::latency::{desk, LatencyProfiles};
    use approx::assert_relative_eq;

    fn draft_controller(mode: Mode) -> Controller {
        Controller::new(
            ControllerConfig {
                policy: PolicyKind::DraftModel,
                ..ControllerConfig::default()
            },
            mode,
        )
    }

    fn request(id: u64, arrival: f64, prompt: u64, output: u64, rate: f64) -> Request {
        Request::new(RequestId(id), arrival, prompt, output, rate)
    }

    fn engine_with(
        mode: Mode,
        arrivals: Vec<Request>,
        opts: SimOptions,
        true_rate: f64,
    ) -> Engine {
        Engine::new(
            SpecProfile::draft_model(true_rate),
            desk::profiles(),
            draft_controller(mode),
            arrivals,
            opts,
        )
        .unwrap()
    }

    #[test]
    fn schedule_returns_decode_plan_for_active_requests() {
        let mut engine = engine_with(
            Mode::NoSpec,
            vec![
                request(0, 0.0, 10, 4, 0.7),
                request(1, 0.0, 10, 4, 0.7),
                request(2, 0.0, 10, 4, 0.7),
            ],
            SimOptions::default(),
            0.7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        assert_eq!(plan.phase, StepPhase::Prefill);
        engine.run_prefill(&plan.clone(), &mut rng).unwrap();
        let plan = engine.schedule_batch(&mut rng).unwrap();
        assert_eq!(plan.phase, StepPhase::Decode);
        assert_eq!(plan.members.len(), 3);
    }

    #[test]
    fn admission_blocks_when_prompt_cannot_fit() {
        let opts = SimOptions {
            kv_total_slots: 100,
            ..SimOptions::default()
        };
        // Footprint under the draft policy is 2 * (prompt + output).
        let mut engine = engine_with(
            Mode::TurboSpec,
            vec![
                request(0, 0.0, 20, 10, 0.7),
                request(1, 0.0, 30, 10, 0.7),
            ],
            opts,
            0.7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        assert_eq!(plan.members.len(), 1, "second request must stay queued");
        engine.run_prefill(&plan, &mut rng).unwrap();
        let plan = engine.schedule_batch(&mut rng).unwrap();
        assert_eq!(plan.phase, StepPhase::Decode);
        assert_eq!(plan.members.len(), 1);
    }

    #[test]
    fn prefill_latency_sums_target_and_draft_models() {
        let mut engine = engine_with(
            Mode::TurboSpec,
            vec![request(0, 0.0, 100, 4, 0.7)],
            SimOptions::default(),
            0.7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        let outcome = engine.run_prefill(&plan, &mut rng).unwrap();
        let expected = desk::prefill_target().forward_time(0.0, 100.0)
            + desk::prefill_draft().forward_time(0.0, 100.0);
        assert_relative_eq!(outcome.latency_ms, expected);
        assert!(outcome.draft_prefill_ran);
        assert!(engine.active_requests()[0].spec_eligible);
        assert_eq!(engine.active_requests()[0].draft_kv_len, 100);
    }

    #[test]
    fn skipped_draft_prefill_marks_requests_ineligible() {
        let mut engine = engine_with(
            Mode::TurboSpec,
            vec![request(0, 0.0, 100, 4, 0.7)],
            SimOptions::default(),
            0.7,
        );
        engine.controller.state.disable_batch_size = Some(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        let outcome = engine.run_prefill(&plan, &mut rng).unwrap();
        assert_relative_eq!(
            outcome.latency_ms,
            desk::prefill_target().forward_time(0.0, 100.0)
        );
        assert!(!outcome.draft_prefill_ran);
        assert!(!engine.active_requests()[0].spec_eligible);
        assert_eq!(engine.active_requests()[0].draft_kv_len, 0);
    }

    #[test]
    fn pld_prefill_never_runs_a_draft() {
        let controller = Controller::new(
            ControllerConfig {
                policy: PolicyKind::PromptLookup,
                ..ControllerConfig::default()
            },
            Mode::TurboSpec,
        );
        let mut engine = Engine::new(
            SpecProfile::prompt_lookup(0.7, 1.0, 5),
            LatencyProfiles::new(desk::target(), None, None, None),
            controller,
            vec![request(0, 0.0, 100, 4, 0.7)],
            SimOptions::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        let outcome = engine.run_prefill(&plan, &mut rng).unwrap();
        assert!(!outcome.draft_prefill_ran);
        assert!(engine.active_requests()[0].spec_eligible);
    }

    #[test]
    fn decode_step_generates_max_tokens_at_full_acceptance() {
        let mut engine = engine_with(
            Mode::FixedK(3),
            vec![request(0, 0.0, 16, 100, 1.0)],
            SimOptions::default(),
            1.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        engine.run_prefill(&plan, &mut rng).unwrap();
        let mut plan = engine.schedule_batch(&mut rng).unwrap();
        let outcome = engine.run_decode_step(&mut plan, &mut rng).unwrap();
        assert_eq!(outcome.generated_tokens, 4);
        assert_eq!(outcome.acceptance_fraction, Some(1.0));
    }

    #[test]
    fn decode_step_generates_bonus_only_at_zero_acceptance() {
        let mut engine = engine_with(
            Mode::FixedK(3),
            vec![request(0, 0.0, 16, 100, 0.0)],
            SimOptions::default(),
            0.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        engine.run_prefill(&plan, &mut rng).unwrap();
        let mut plan = engine.schedule_batch(&mut rng).unwrap();
        let outcome = engine.run_decode_step(&mut plan, &mut rng).unwrap();
        assert_eq!(outcome.generated_tokens, 1);
        assert_eq!(outcome.acceptance_fraction, Some(0.0));
    }

    #[test]
    fn decode_step_replays_the_seeded_acceptance_chain() {
        let seed = 99u64;
        let opts = SimOptions {
            seed,
            ..SimOptions::default()
        };
        let mut engine = engine_with(
            Mode::FixedK(2),
            vec![
                request(0, 0.0, 16, 100, 0.7),
                request(1, 0.0, 16, 100, 0.7),
            ],
            opts,
            0.7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = engine.schedule_batch(&mut rng).unwrap();
        engine.run_prefill(&plan, &mut rng).unwrap();
        let mut plan = engine.schedule_batch(&mut rng).unwrap();
        let before = rng.clone();
        let outcome = engine.run_decode_step(&mut plan, &mut rng).unwrap();

        // Independent replay of the same chain draws.
        let mut replay = before;
        let expected: Vec<u32> = (0..2)
            .map(|_| sample_accepted_count(&mut replay, 0.7, 2))
            .collect();
        assert_eq!(outcome.accepted_per_request, expected);
        let generated: u64 = expected.iter().map(|m| *m as u64 + 1).sum();
        assert_eq!(outcome.generated_tokens, generated);
    }

    #[test]
    fn draft_kv_lags_context_by_one_or_two() {
        // Full acceptance leaves two tokens pending, rejection leaves one.
        for (rate, pending) in [(1.0f64, 2u64), (0.0, 1)] {
            let mut engine = engine_with(
                Mode::FixedK(3),
                vec![request(0, 0.0, 16, 100, rate)],
                SimOptions::default(),
                rate,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let plan = engine.schedule_batch(&mut rng).unwrap();
            engine.run_prefill(&plan, &mut rng).unwrap();
            for _ in 0..3 {
                let mut plan = engine.schedule_batch(&mut rng).unwrap();
                engine.run_decode_step(&mut plan, &mut rng).unwrap();
                let r = &engine.active_requests()[0];
                assert_eq!(r.context_len() - r.draft_kv_len, pending);
            }
        }
    }

    #[test]
    fn empty_scenario_yields_empty_log() {
        let engine = engine_with(Mode::TurboSpec, vec![], SimOptions::default(), 0.7);
        let log = engine.run(vec![]).unwrap();
        assert!(log.step_records.is_empty());
        assert!(log.request_records.is_empty());
        assert!(!log.horizon_exceeded);
    }

    #[test]
    fn full_acceptance_run_finishes_in_two_decode_steps() {
        let engine = engine_with(
            Mode::FixedK(3),
            vec![request(0, 0.0, 16, 8, 1.0)],
            SimOptions::default(),
            1.0,
        );
        let log = engine.run(vec![]).unwrap();
        let decode: Vec<_> = log
            .step_records
            .iter()
            .filter(|s| s.phase == StepPhase::Decode)
            .collect();
        assert_eq!(decode.len(), 2);
        assert_eq!(decode[0].generated_tokens, 4);
        assert_eq!(decode[1].generated_tokens, 4);
        assert_eq!(log.request_records.len(), 1);
    }

    #[test]
    fn token_conservation_and_step_bounds_hold() {
        let arrivals: Vec<Request> = (0..20)
            .map(|i| request(i, i as f64 * 5.0, 32, 40, 0.7))
            .collect();
        let engine = engine_with(Mode::TurboSpec, arrivals, SimOptions::default(), 0.7);
        let log = engine.run(vec![]).unwrap();
        assert!(!log.horizon_exceeded);

        let generated: u64 = log.step_records.iter().map(|s| s.generated_tokens).sum();
        let expected: u64 = log.request_records.iter().map(|r| r.output_len).sum();
        assert_eq!(generated, expected);

        for step in log.step_records.iter().filter(|s| s.phase == StepPhase::Decode) {
            assert!(step.generated_tokens >= step.batch_size as u64);
            for accepted in &step.accepted_per_request {
                assert!(*accepted <= step.chosen_k);
            }
        }
    }

    #[test]
    fn clock_is_strictly_increasing_and_finish_after_arrival() {
        let arrivals: Vec<Request> = (0..10)
            .map(|i| request(i, i as f64 * 37.0, 64, 24, 0.6))
            .collect();
        let engine = engine_with(Mode::TurboSpec, arrivals, SimOptions::default(), 0.6);
        let log = engine.run(vec![]).unwrap();
        let mut last = 0.0;
        for s in &log.step_records {
            assert!(s.clock_ms > last);
            last = s.clock_ms;
        }
        for r in &log.request_records {
            assert!(r.finish_ms > r.arrival_ms);
        }
    }

    #[test]
    fn oversized_request_is_reported_not_looped() {
        let opts = SimOptions {
            kv_total_slots: 10,
            ..SimOptions::default()
        };
        let engine = engine_with(
            Mode::TurboSpec,
            vec![request(0, 0.0, 100, 100, 0.7)],
            opts,
            0.7,
        );
        match engine.run(vec![]) {
            Err(EngineError::RequestExceedsKvBudget { id, .. }) => assert_eq!(id, RequestId(0)),
            other => panic!("expected RequestExceedsKvBudget, got {other:?}"),
        }
    }

    #[test]
    fn kv_budget_invariant_holds_at_step_boundaries() {
        let arrivals: Vec<Request> = (0..12)
            .map(|i| request(i, i as f64 * 3.0, 40, 30, 0.8))
            .collect();
        let mut engine = engine_with(Mode::TurboSpec, arrivals, SimOptions::default(), 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while engine.step(&mut rng).unwrap() {
            let kv = engine.kv();
            assert!(kv.used_target + kv.used_draft <= kv.total_slots);
        }
    }

    #[test]
    fn horizon_truncates_with_flag() {
        let opts = SimOptions {
            horizon_ms: 1.0,
            ..SimOptions::default()
        };
        let engine = engine_with(
            Mode::TurboSpec,
            vec![request(0, 0.0, 400, 400, 0.7)],
            opts,
            0.7,
        );
        let log = engine.run(vec![]).unwrap();
        assert!(log.horizon_exceeded);
        assert!(!log.step_records.is_empty());
    }
}
