//! Training, benchmarking and verification drivers behind the CLI.

mod bench;
mod config;
mod data;
mod metrics;
mod optim;
mod train;
mod verify;

pub use bench::{run_bench, write_bench, write_bench_table, BenchReport, BenchRow};
pub use config::{
    BenchSection, LrSchedule, ModelSection, MqarSection, RunConfig, ScheduleKind, Task, TrainSection, OUTPUT_ROOT_ENV,
};
pub use data::{gen_mqar, label_accuracy, MqarDataset, MqarExample, TextCorpus, BOS, BYTE_VOCAB};
pub use metrics::{read_loss_curve, read_metrics, write_loss_curve, write_metrics, MetricsRecord};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use train::{mqar_accuracy, peak_state_elements, train, train_to_dir, TrainOutcome, TrainSummary};
pub use verify::{run_suite, run_verify, Check, Suite, SuiteReport, VerifyOptions, VerifyReport};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(RunConfig::from_toml("[train]\nstep = 3").is_err());
        assert!(RunConfig::from_toml("[model]\ninstance = \"nope\"").is_err());
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg = RunConfig::from_toml("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.schedule.kind, ScheduleKind::Cosine);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn model_overrides_apply() {
        let cfg = RunConfig::from_toml(
            r#"
            [model]
            preset = "tiny"
            instance = "gla"
            pattern = "LNL"
            hidden = 24
            num_heads = 3
            vocab_size = 40
            normalizer = false
            "#,
        )
        .unwrap();
        let m = cfg.model.resolve().unwrap();
        assert_eq!((m.hidden, m.num_heads, m.num_layers, m.vocab_size), (24, 3, 3, 40));
        assert_eq!(m.head_dim(), 8);
        assert!(!m.lsm.use_normalizer);
    }

    #[test]
    fn invalid_layouts_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 3;
        cfg.parallel.dp = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.mqar.pairs = 3;
        cfg.mqar.queries = 1;
        cfg.train.batch_size = 1;
        cfg.parallel.sp = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.task = Task::Text;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule { kind: ScheduleKind::Cosine, lr: 1.0, min_lr: 0.1, warmup_steps: 4 };
        assert_eq!(s.at(0, 104), 0.25);
        assert_eq!(s.at(3, 104), 1.0);
        assert!((s.at(4, 104) - 1.0).abs() < 1e-15);
        assert!((s.at(54, 104) - 0.55).abs() < 1e-12);
        assert!((s.at(104, 104) - 0.1).abs() < 1e-15);
        assert_eq!(LrSchedule::named("A1B").unwrap().lr, 1e-5);
        assert!(LrSchedule::named("7B").is_err());
    }

    #[test]
    fn output_dir_resolution() {
        let root = std::path::Path::new("/tmp/root");
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.output_dir_in(root, "train"), root.join("train"));
        cfg.output_dir = Some("runs/a".into());
        assert_eq!(cfg.output_dir_in(root, "train"), root.join("runs/a"));
        cfg.output_dir = Some("/abs".into());
        assert_eq!(cfg.output_dir_in(root, "train"), std::path::PathBuf::from("/abs"));
    }
}
