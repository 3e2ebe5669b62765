// throwaway timing probe
use std::time::Instant;
use vdpo_core::pipeline::{generate_dataset, sft_triples, GenConfig};
use vdpo_core::policy::ModelConfig;
use vdpo_core::trainer::*;
use vdpo_core::world::Catalog;

#[test]
#[ignore]
fn timing() {
    let catalog = Catalog::default_catalog();
    let gen = GenConfig { seed: 5, count: 500, ..GenConfig::default() };
    let t0 = Instant::now();
    let (records, _) = generate_dataset(&gen, &catalog).unwrap();
    println!("gen 500: {:?}", t0.elapsed());
    let model = ModelConfig {
        vocab_size: 64, d_v: 16, d_e: 12, d_h: 24,
        max_query_len: 8, max_response_len: 16, seed: 1,
    };
    let triples = sft_triples(&records);
    let t0 = Instant::now();
    let sft = sft_fit(&SftConfig { learning_rate: 5e-3, batch_size: 32, epochs: 2, seed: 1, clip_norm: None }, &model, &triples).unwrap();
    println!("sft 2 epochs on 500: {:?} (loss {} -> {})", t0.elapsed(),
             sft.log.entries[0].loss, sft.log.entries.last().unwrap().loss);
    let prefs: Vec<_> = records.iter().map(|r| r.record.clone()).collect();
    let t0 = Instant::now();
    let config = TrainConfig { learning_rate: 5e-3, batch_size: 32, epochs: 4, seed: 1, ..TrainConfig::default() };
    let result = pref_fit(&config, &prefs, &sft.params).unwrap();
    println!("vdpo 4 epochs on 500: {:?} (loss {} -> {})", t0.elapsed(),
             result.log.entries[0].loss, result.log.entries.last().unwrap().loss);
    let t0 = Instant::now();
    let config = TrainConfig { objective: ObjectiveKind::Dpo, gamma: 1.0, ..config };
    let result = pref_fit(&config, &prefs, &sft.params).unwrap();
    println!("dpo 4 epochs on 500: {:?} (loss {} -> {})", t0.elapsed(),
             result.log.entries[0].loss, result.log.entries.last().unwrap().loss);
}
