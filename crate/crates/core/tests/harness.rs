use fewshot_core::episodes::{self, Shots};
use fewshot_core::finetune::{self, Ablation, FinetuneConfig};
use fewshot_core::harness::config::DataSource;
use fewshot_core::harness::run::episode_seed;
use fewshot_core::harness::{aggregate, prepare, run_rows, run_shot_sweep, RunConfig};

fn small_config(episodes: usize) -> RunConfig {
    let mut cfg = RunConfig {
        episodes,
        finetune: FinetuneConfig {
            epochs: 5,
            lr: 5e-3,
            ..FinetuneConfig::default()
        },
        ..RunConfig::default()
    };
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.base_samples = 30;
    }
    cfg
}

#[test]
fn the_untrained_row_is_the_prototype_baseline() {
    let cfg = small_config(8);
    let prepared = prepare(&cfg).unwrap();
    let rows = run_rows(&prepared, &[Ablation::NONE], cfg.shots).unwrap();
    for rec in &rows[0].records {
        let ep = episodes::sample_episode(
            &prepared.novel,
            cfg.ways,
            cfg.shots,
            cfg.queries,
            episode_seed(cfg.seed, rec.episode),
        )
        .unwrap();
        assert_eq!(format!("{:016x}", ep.fingerprint()), rec.fingerprint);
        let baseline = finetune::prototype_baseline(&ep, &prepared.backbone, cfg.finetune.temperature_init).unwrap();
        assert_eq!(rec.query_accuracy, Some(baseline), "episode {}", rec.episode);
    }
}

#[test]
fn rows_share_the_episode_stream() {
    let cfg = small_config(6);
    let prepared = prepare(&cfg).unwrap();
    let rows = run_rows(&prepared, &Ablation::TABLE, cfg.shots).unwrap();
    for row in &rows[1..] {
        for (a, b) in rows[0].records.iter().zip(&row.records) {
            assert_eq!(a.fingerprint, b.fingerprint);
            assert_eq!(a.support_indices, b.support_indices);
            assert_eq!(a.query_indices, b.query_indices);
            assert_eq!(a.finetune_seed, b.finetune_seed);
        }
    }
}

#[test]
fn row_mean_is_the_arithmetic_mean() {
    let cfg = small_config(10);
    let prepared = prepare(&cfg).unwrap();
    let row = &run_rows(&prepared, &[Ablation::FULL], cfg.shots).unwrap()[0];
    let acc: Vec<f64> = row.accuracies().into_iter().map(Option::unwrap).collect();
    let plain = acc.iter().sum::<f64>() / acc.len() as f64;
    assert!((row.summary.mean_accuracy - plain).abs() < 1e-12);
    assert_eq!(row.summary.ci95, Some(aggregate(&acc).unwrap().ci95));
    assert_eq!(row.summary.curves.len(), cfg.finetune.epochs);
}

#[test]
fn shot_sweep_is_deterministic() {
    let cfg = small_config(4);
    let prepared = prepare(&cfg).unwrap();
    let a = run_shot_sweep(&prepared, &[1, 2]).unwrap();
    let b = run_shot_sweep(&prepared, &[1, 2]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.shots, y.shots);
        for (rx, ry) in x.rows.iter().zip(&y.rows) {
            assert_eq!(rx.records, ry.records);
            assert_eq!(rx.summary, ry.summary);
        }
        assert_eq!(x.gain_over_backbone, y.gain_over_backbone);
        assert!(x.rows[0].records.iter().all(|r| r.shots_per_class.iter().all(|&k| k == x.shots)));
    }
}

#[test]
fn variable_shots_respect_their_range() {
    let mut cfg = small_config(6);
    cfg.shots = Shots::Range { min: 1, max: 4 };
    let prepared = prepare(&cfg).unwrap();
    let row = &run_rows(&prepared, &[Ablation::B], cfg.shots).unwrap()[0];
    for rec in &row.records {
        assert!(rec.shots_per_class.iter().all(|k| (1..=4).contains(k)));
        assert_eq!(rec.support_indices.len(), rec.shots_per_class.iter().sum::<usize>());
    }
}

/// Measured at the benchmark settings. At the 5e-5 default the full method
/// moves too little for its loss trend to beat the per-epoch chain redraw.
#[test]
fn support_loss_falls_on_the_clean_benchmark() {
    let mut cfg = RunConfig {
        finetune: FinetuneConfig {
            lr: 5e-3,
            differentiate_stats: true,
            trace_query: false,
            ..FinetuneConfig::default()
        },
        ..RunConfig::default()
    };
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.contamination = 0.0;
    }
    let prepared = prepare(&cfg).unwrap();
    for row in run_rows(&prepared, &Ablation::TABLE[1..], cfg.shots).unwrap() {
        let mut fell = 0;
        for rec in &row.records {
            assert!(rec.traces.iter().all(|t| t.support_loss.is_finite()));
            let (first, last) = (&rec.traces[0], &rec.traces[cfg.finetune.epochs - 1]);
            if last.support_loss < first.support_loss {
                fell += 1;
            }
        }
        let share = fell as f64 / row.records.len() as f64;
        assert!(share >= 0.95, "{}: support loss fell in only {:.1}% of episodes", row.name(), 100.0 * share);
    }
}
