use std::sync::Arc;

use spherewarp_core::synth::{make_cohort, CohortSpec, Frame};
use spherewarp_core::{Atlas, FeatureMap, SphereGrid};
use spherewarp_registration::amortized::{network_input, train_model};
use spherewarp_registration::*;

fn cohort(rows: usize, cols: usize, subjects: usize) -> (spherewarp_core::synth::Cohort, Atlas) {
    let spec = CohortSpec { rows, cols, subjects, ..Default::default() };
    let c = make_cohort(&spec, &Frame::identity()).unwrap();
    let atlas = Atlas::new(c.template.clone(), c.atlas_variance.clone(), None).unwrap();
    (c, atlas)
}

#[test]
fn untrained_model_predicts_identity() {
    let (c, atlas) = cohort(32, 64, 2);
    let model = build_unet(atlas.mean().grid_arc().clone(), 2, &[4, 8, 8, 8], 0).unwrap();
    let cfg = RegistrationConfig::for_mode(Mode::Amortized);
    let r = predict_amortized(&model, &c.subjects[0].features, &atlas, &cfg).unwrap();
    assert_eq!(r.mean_displacement(), 0.0);
    let again = predict_amortized(&model, &c.subjects[0].features, &atlas, &cfg).unwrap();
    assert_eq!(r.phi, again.phi);
    assert_eq!(r.sigma_diag, again.sigma_diag);
}

#[test]
fn prediction_rejects_other_grids() {
    let (c, atlas) = cohort(32, 64, 2);
    let model = build_unet(Arc::new(SphereGrid::new(16, 32).unwrap()), 2, &[4, 8, 8, 8], 0).unwrap();
    let cfg = RegistrationConfig::for_mode(Mode::Amortized);
    assert!(predict_amortized(&model, &c.subjects[0].features, &atlas, &cfg).is_err());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (c, atlas) = cohort(16, 32, 3);
    let pairs: Vec<FeatureMap> = c.subjects.iter().map(|s| s.features.clone()).collect();
    let cfg = RegistrationConfig { lr: 1e-3, iters: 15, mode: Mode::Amortized, seed: 4, ..Default::default() };
    let (a, ra) = train_amortized(&pairs, &atlas, &cfg, &[4, 8, 8, 8]).unwrap();
    let (b, rb) = train_amortized(&pairs, &atlas, &cfg, &[4, 8, 8, 8]).unwrap();
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
    assert_eq!(a.params(), b.params());
    assert!(ra.epoch_losses.last().unwrap() < &ra.epoch_losses[0]);
}

#[test]
fn stochastic_training_moves_the_variance_head() {
    let (c, atlas) = cohort(16, 32, 2);
    let pairs: Vec<FeatureMap> = c.subjects.iter().map(|s| s.features.clone()).collect();
    let cfg = RegistrationConfig { lr: 1e-3, iters: 3, mode: Mode::Amortized, sample_stochastic: true, ..Default::default() };
    let (model, report) = train_amortized(&pairs, &atlas, &cfg, &[4, 8, 8, 8]).unwrap();
    assert!(report.epoch_losses.iter().all(|v| v.is_finite()));
    let out = model.forward(&network_input(&pairs[0], &atlas).unwrap()).unwrap();
    assert!(out.log_var.data().iter().any(|v| *v != spherewarp_registration::unet::LOG_VAR_INIT));
}

#[test]
fn single_pair_overfit_approaches_instance_solution() {
    let (c, atlas) = cohort(16, 32, 2);
    let pair = vec![c.subjects[0].features.clone()];
    let icfg = RegistrationConfig::default();
    let inst = register_instance(&pair[0], &atlas, &icfg).unwrap();
    let cfg = RegistrationConfig { lr: 2e-3, iters: 400, mode: Mode::Amortized, ..Default::default() };
    let mut model = build_unet(atlas.mean().grid_arc().clone(), 2, &[8, 16, 16, 16], 1).unwrap();
    train_model(&mut model, &pair, &atlas, &cfg).unwrap();
    let pred = predict_amortized(&model, &pair[0], &atlas, &cfg).unwrap();
    let gap = spherewarp_core::synth::endpoint_error(&pred.phi, &inst.phi).unwrap();
    assert!(gap < 0.05, "mean endpoint discrepancy {gap}");
}
