use std::sync::Arc;

use rand::rngs::StdRng;
use rand::SeedableRng;
use stand_core::model::{MarkovModel, ModelError, RemoteConfig, RemoteModel, TargetModel};
use stand_core::synthetic::TaskFamily;
use stand_core::tree::build_heuristic_tree;
use stand_core::{EngineConfig, Session};

fn fixture() -> (MarkovModel, String) {
    let family = TaskFamily::ood();
    let problem = family.problems(5, 1).unwrap().remove(0);
    let local = (*problem.model).clone();
    let url = stand_logit_server::spawn_local(Arc::new(local.spec().clone())).unwrap();
    (local, url)
}

fn connect(url: &str, temperature: f64) -> RemoteModel {
    let mut config = RemoteConfig::new(url);
    config.temperature = temperature;
    // The server thread may still be starting.
    config.max_retries = 20;
    RemoteModel::connect(config).unwrap()
}

#[test]
fn remote_distributions_match_local_model() {
    let (local, url) = fixture();
    let remote = connect(&url, local.temperature());
    assert_eq!(remote.vocab_size(), local.vocab_size());
    let mut rng = StdRng::seed_from_u64(9);
    for _ in 0..50 {
        let ctx = stand_core::model::sample_trajectory(&local, &[3], 12, &mut rng).unwrap();
        assert_eq!(remote.next_distribution(&ctx).unwrap(), local.next_distribution(&ctx).unwrap());
    }
}

#[test]
fn remote_decode_replays_local_decode() {
    let (local, url) = fixture();
    let remote = connect(&url, local.temperature());
    let config = EngineConfig { max_tokens: 80, wall_clock: false, ..Default::default() };
    let topo = Arc::new(build_heuristic_tree());
    let a = Session::new(local, topo.clone(), config.clone(), 4).run_problem(&[1, 2, 3], 2).unwrap();
    let b = Session::new(remote, topo, config, 4).run_problem(&[1, 2, 3], 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn out_of_vocab_context_is_a_protocol_error() {
    let (local, url) = fixture();
    let mut config = RemoteConfig::new(&url);
    config.vocab_size = Some(local.vocab_size() + 10);
    config.max_retries = 20;
    let remote = RemoteModel::connect(config).unwrap();
    let bad = [local.vocab_size() as u32 + 1];
    assert!(matches!(remote.next_distribution(&bad), Err(ModelError::Protocol(_))));
}
