//! Structured-output routing for LLM gateways that answer in text, images or
//! speech, plus the tooling to build instruction corpora and score systems.

pub mod backends;
pub mod clock;
pub mod datagen;
pub mod digest;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod prompting;
pub mod router;

pub use backends::{BackendError, BackendSet, MediaArtifact, MediaKind};
pub use clock::{Clock, FixedClock, SystemClock};
pub use eval::{run_eval, EvalJob, EvalReport, EvalSpec, SystemDescriptor};
pub use model::{InstructionRecord, Modality, RecordSource, StructuredResponse, WireProfile};
pub use parse::{parse_structured_response, ParseOutcome, RepairTag};
pub use prompting::{ConversationHistory, Role, Turn};
pub use router::{Policy, RouteError, RoutedResult, Router, RouterConfig};
