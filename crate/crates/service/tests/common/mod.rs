#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use expert_cfg::model::{ModelSpec, SharedModel};
use expert_cfg::retrieval::KnowledgeStore;
use expert_cfg::scenario::{SyntheticWorld, WorldConfig};
use expert_cfg::OneLayerToy;
use expert_cfg_service::engine::AnswerRequest;
use expert_cfg_service::{ReviewService, ServiceConfig, SessionStore};

pub const MODEL: &str = "toy";

pub fn world(steering: usize, easy_open: usize, closed: usize) -> SyntheticWorld {
    SyntheticWorld::generate(WorldConfig {
        steering,
        easy_open,
        closed,
        ..WorldConfig::default()
    })
}

pub fn service_with(world: &SyntheticWorld, session: SessionStore, tweak: impl FnOnce(&mut ServiceConfig)) -> ReviewService {
    let model: SharedModel = Arc::new(OneLayerToy::<f64>::from_spec(&world.model).unwrap());
    let mut config = ServiceConfig::single_model(MODEL, ModelSpec::Toy { path: "unused.json".into() });
    tweak(&mut config);
    let corpus = KnowledgeStore::ingest(world.corpus.clone()).unwrap();
    ReviewService::new(config, BTreeMap::from([(MODEL.to_string(), model)]), Some(corpus), session).unwrap()
}

pub fn service(world: &SyntheticWorld) -> ReviewService {
    service_with(world, SessionStore::in_memory(), |_| {})
}

pub fn requests(world: &SyntheticWorld) -> Vec<AnswerRequest> {
    world
        .items
        .iter()
        .map(|it| AnswerRequest {
            id: it.row.id.clone(),
            question: it.row.question.clone(),
            visual_ref: Some(it.row.visual_ref.clone()),
            model_id: None,
        })
        .collect()
}
