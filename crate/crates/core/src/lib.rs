//! Desk-scale simulator of a batched LLM serving engine with speculative decoding.
//!
//! The crate models a serving engine step loop (continuous batching, prefill and
//! decode phases, KV-slot accounting) together with the closed-loop controller
//! that picks how many tokens to speculate each step by maximizing estimated
//! goodput: generated tokens per unit time, counting only tokens that survive
//! verification. Latencies come from a fitted linear cost model instead of real
//! hardware, so controller behavior is reproducible and testable on a laptop.
//!
//! Module map:
//! - [`latency`]: profiling-sample ingestion, linear forward-pass cost model,
//!   batch latency prediction.
//! - [`speculation`]: acceptance-rate estimation and the accept/reject chain.
//! - [`controller`]: goodput estimation, proposed/verification length search,
//!   prefill disabling.
//! - [`engine`]: the discrete-event step loop and KV bookkeeping.
//! - [`workload`]: Poisson arrival generation, dataset length profiles, traces.
//! - [`metrics`]: per-step/per-request logs, CDFs, timelines, CSV export.
//! - [`config`]: scenario file schema gluing the above together.

pub mod config;
pub mod controller;
pub mod engine;
pub mod latency;
pub mod metrics;
pub mod speculation;
pub mod workload;

pub use config::{ScenarioFile, SimConfig};
pub use controller::{Controller, ControllerConfig, ControllerState, Mode, PolicyKind, SpecDecision};
pub use engine::{BatchPlan, Engine, KvBudget, Request, RequestId, SimOptions, StepOutcome};
pub use latency::{LatencyModel, LatencyProfiles, ProfileSample};
pub use metrics::MetricsLog;
pub use speculation::{AcceptanceEstimate, SpecKind, SpecProfile};
pub use workload::{DatasetProfile, Scenario, ScenarioPhase};
