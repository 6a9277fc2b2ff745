use daalab_core::data::{self, DatasetSpec, ResponseSampler, GoldReward};
use daalab_core::model::ModelConfig;
use daalab_core::trainer::{self, Regime, TrainConfig};
use daalab_core::objectives::{ObjectiveConfig, ObjectiveKind};
use daalab_core::selection::ThresholdSpec;
use std::time::Instant;

#[test]
fn probe() {
    let seed = 0u64;
    let cfg = ModelConfig { init_seed: seed, ..ModelConfig::default() };
    let spec = DatasetSpec {
        vocab: 32, n_prompts: 256, prompt_len: (3, 6), response_len: (8, 16),
        temperature: 0.9, seed,
    };
    let corpus = data::gen_sft_corpus(&spec, &cfg).unwrap();
    let tc = TrainConfig { batch_size: 32, epochs: 8, learning_rate: 3e-3, seed, ..TrainConfig::default() };
    let (sft, _) = trainer::sft_train(&corpus, &cfg, &tc).unwrap();
    let gold = GoldReward::new(32, 42 + seed);
    let sampler = ResponseSampler::Grammar { mistake_range: (0.0, 0.4) };
    let pspec = DatasetSpec { seed: seed + 1000, ..spec };
    let pairs = data::gen_preferences(&sampler, &gold, &pspec, &cfg).unwrap();

    for (epochs, lr) in [(20, 5e-3), (12, 1e-2), (24, 1e-2)] {
        let t0 = Instant::now();
        let rc = TrainConfig {
            batch_size: 32, epochs, learning_rate: lr, seed,
            objective: ObjectiveConfig::new(ObjectiveKind::Confpo).with_beta(1.0).with_gamma(2.0),
            threshold: ThresholdSpec::Arithmetic,
            ..TrainConfig::default()
        };
        let outcomes = trainer::run_regime_experiment(&sft, None, &pairs, &cfg, &rc, &[Regime::All, Regime::LowOnly, Regime::HighOnly], None).unwrap();
        print!("epochs {epochs} lr {lr}: ");
        for o in &outcomes {
            print!("{}={:.3} ", o.regime.as_str(), o.final_selected_accuracy);
        }
        println!("({:?})", t0.elapsed());
    }
}
