mod support;

use support::{micro_batch, synth_samples};
use tilecov::dataset::SynthConfig;
use tilecov::trainer::{
    adam_step, loss_and_grad, AdamConfig, AdamState, Batch, ModelConfig, Objective, ParamGroup,
    ToyModel,
};

const STEPS: usize = 200;

/// Soiling head on a frozen encoder, four fixed images, full-batch Adam.
#[test]
fn soiling_head_memorizes_four_images() {
    let samples = synth_samples(
        &SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        },
        4,
    );
    let (x, coverage) = micro_batch(&samples);
    let mut model = ToyModel::<f64>::new(ModelConfig::default(), 5).unwrap();
    model.set_trainable(ParamGroup::Encoder, false);
    let mut prior = [0.0; 4];
    for grid in &coverage {
        for tile in &grid.values {
            for (p, v) in prior.iter_mut().zip(tile) {
                *p += v / (4 * grid.values.len()) as f64;
            }
        }
    }
    model.set_output_prior(prior);
    let batch = Batch {
        inputs: model.features(&x).unwrap(),
        coverage,
        surrogate: None,
    };
    let adam = AdamConfig {
        learning_rate: 0.01,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store);
    let mut losses = Vec::with_capacity(STEPS);
    for _ in 0..STEPS {
        let pass = model
            .forward_from_features(batch.inputs.clone(), false, true)
            .unwrap();
        let out = loss_and_grad(Objective::Coverage, &pass, &batch).unwrap();
        losses.push(out.loss);
        let grads = model.backward(&pass, &out.d_logits);
        adam_step(
            &mut model.store,
            &grads,
            &mut state,
            &adam,
            &[ParamGroup::Soiling],
        );
        model.update_running_stats(&pass);
    }
    let pass = model
        .forward_from_features(batch.inputs.clone(), false, true)
        .unwrap();
    let last = loss_and_grad(Objective::Coverage, &pass, &batch)
        .unwrap()
        .loss;

    // Adam is not monotone step by step; window minima must be.
    let minima: Vec<f64> = losses
        .chunks(50)
        .map(|w| w.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    for pair in minima.windows(2) {
        assert!(pair[1] < pair[0], "{minima:?}");
    }
    assert!(last < 0.02, "loss after {STEPS} steps: {last}");
}
