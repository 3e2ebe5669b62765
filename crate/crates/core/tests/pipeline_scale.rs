//! Larger-scale pipeline invariants: every emitted record over many seeded
//! generations satisfies the dataset invariants, and generation is a pure
//! function of its inputs.

use vdpo_core::objectives::PreferenceRecord;
use vdpo_core::pipeline::{generate_dataset, GenConfig};
use vdpo_core::policy::ModelConfig;
use vdpo_core::world::{Catalog, Vocabulary};

#[test]
fn ten_thousand_records_respect_invariants() {
    let catalog = Catalog::default_catalog();
    let config = GenConfig {
        seed: 20_24,
        count: 10_000,
        ..GenConfig::default()
    };
    let (records, stats) = generate_dataset(&config, &catalog).unwrap();
    assert_eq!(records.len(), 10_000);
    let vocab = Vocabulary::build(&catalog, config.grid_width, config.grid_height);
    let model = ModelConfig {
        vocab_size: vocab.len(),
        d_v: config.d_v,
        d_e: 4,
        d_h: 4,
        max_query_len: 8,
        max_response_len: 16,
        seed: 0,
    };
    let mut image_count = 0usize;
    for record in &records {
        record.record.validate_strict(&model).unwrap();
        // Provenance carries positive similarity scores for gated records.
        assert!(record.provenance.sim_w > 0.0);
        assert!(record.provenance.sim_l.is_finite());
        if let PreferenceRecord::ImageContrast { .. } = record.record {
            image_count += 1;
            // Every image-contrast record passed the 1.5 ratio gate.
            assert!(
                record.provenance.sim_w / record.provenance.sim_l >= config.gate_threshold,
                "gate violated: {:?}",
                record.provenance
            );
            assert!(record.provenance.replacement.is_some());
        }
    }
    assert_eq!(image_count, stats.emitted_image);
    assert_eq!(stats.emitted_image + stats.emitted_response, 10_000);
    // The emitted mix follows the requested ratio exactly.
    assert_eq!(stats.emitted_response, 5_000);
    // The gate is doing real work at these occupancies.
    assert!(stats.gate_pass_rate() < 1.0);
    assert!(stats.gate_pass_rate() > 0.05);
}
