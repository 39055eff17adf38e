use mtseg::config::ExperimentConfig;
use mtseg::data::generate_corpus;
use mtseg::experiment::run_training;
use mtseg::teacher::TrainMode;
use mtseg::unet::UNetConfig;

fn tiny(mode: TrainMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.mode = mode;
    cfg.model = UNetConfig {
        depth: 2,
        base_channels: 4,
        groups: 2,
        dropout_rate: 0.5,
    };
    cfg.schedule.total_epochs = 3;
    cfg.schedule.rampup_epochs = 2;
    cfg.batch_size = 4;
    cfg.corpus.n_subjects = 4;
    cfg.corpus.slices_per_subject = 2;
    cfg.corpus.image_size = 16;
    cfg
}

#[test]
fn zero_weight_student_is_the_baseline() {
    let base = tiny(TrainMode::Baseline);
    let corpus = generate_corpus(base.corpus.n_subjects, base.corpus.slices_per_subject, base.corpus.image_size, 5).unwrap();
    let b = run_training(&base, &corpus, |_| {}).unwrap();
    let a = run_training(&tiny(TrainMode::AblateEma), &corpus, |_| {}).unwrap();
    let bits = |p: &mtseg::unet::ModelParams<f32>| -> Vec<u32> {
        p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    assert_eq!(bits(&b.outcome.state.student), bits(&a.outcome.state.student));
    assert_ne!(bits(&a.outcome.state.student), bits(&a.outcome.state.teacher));
}

#[test]
fn zero_weight_adaptation_is_the_ablation() {
    let mut adapt = tiny(TrainMode::Adapt);
    adapt.schedule.gamma_max = 0.0;
    let corpus = generate_corpus(4, 2, 16, 6).unwrap();
    let x = run_training(&adapt, &corpus, |_| {}).unwrap();
    let y = run_training(&tiny(TrainMode::AblateEma), &corpus, |_| {}).unwrap();
    assert_eq!(x.outcome.state.student, y.outcome.state.student);
    assert_eq!(x.outcome.state.teacher, y.outcome.state.teacher);
}
