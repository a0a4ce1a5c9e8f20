//! Expert review service.
//!
//! Answers are decoded greedily and gated by predictive entropy. Low-entropy
//! answers are delivered at once; the rest wait in a review queue with
//! retrieved reference captions until an expert highlights the decisive
//! terms, after which the item is regenerated with highlight guidance.
//!
//! State is event-sourced ([`store`]); [`engine::ReviewService`] holds the
//! loop and [`http`] exposes it as JSON over HTTP.

pub mod config;
pub mod engine;
pub mod error;
pub mod http;
pub mod item;
pub mod store;

pub use config::ServiceConfig;
pub use engine::{AnnotationInput, AnswerRequest, DeliverInput, RegenerateInput, ReviewService};
pub use error::{Result, ServiceError};
pub use item::{ReviewItem, Status};
pub use store::{replay, SessionStore, Snapshot};
