use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use popfusion::ablate::{enumerate_subsets, run_ablation, AblationConfig, AblationInput, RunOptions, SubsetMode};
use popfusion::features::{assemble_feature_matrix, DaypartHours, FeatureMatrix, FeaturePipeline, FrequencyCorpus};
use popfusion::fusion::TrainConfig;
use popfusion::gbdt::{cross_validate, fit_gbdt_exec, GbdtParams};
use popfusion::ingest::{generate_synthetic, DatasetBundle, SynthConfig};
use popfusion::par::Exec;
use popfusion::{SourceId, Target};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

struct Fixture {
    bundle: DatasetBundle,
    pipeline: FeaturePipeline,
    x: FeatureMatrix,
    y: Vec<f64>,
}

fn fixture() -> Fixture {
    let bundle = generate_synthetic(&SynthConfig::new(5, 2000, 100, 8)).unwrap();
    let pipeline =
        FeaturePipeline::fit(&bundle.train, &bundle.test, FrequencyCorpus::All, DaypartHours::default()).unwrap();
    let x = assemble_feature_matrix(&bundle.train, &pipeline, Exec::Sequential).unwrap();
    let y = bundle.train.target_column(Target::Play).unwrap().iter().map(|v| v.ln_1p()).collect();
    Fixture { bundle, pipeline, x, y }
}

fn bench_features(c: &mut Criterion, f: &Fixture) {
    let mut g = c.benchmark_group("assemble_feature_matrix");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| assemble_feature_matrix(&f.bundle.train, &f.pipeline, exec).unwrap()));
    }
    g.finish();
}

fn bench_gbdt(c: &mut Criterion, f: &Fixture) {
    let params = GbdtParams {
        n_rounds: 50,
        max_depth: 6,
        ..GbdtParams::default()
    };
    let mut g = c.benchmark_group("gbdt");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("fit", name), &exec, |b, &e| {
            b.iter(|| fit_gbdt_exec(&f.x, &f.y, &params, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("cross_validate_5", name), &exec, |b, &e| {
            b.iter(|| cross_validate(&f.x, &f.y, &params, 5, 1, e).unwrap())
        });
    }
    g.finish();
}

fn bench_ablation(c: &mut Criterion, f: &Fixture) {
    let input = AblationInput::from_bundle(&f.bundle).unwrap();
    let subsets = enumerate_subsets(&SourceId::ALL[..4], &SubsetMode::All).unwrap();
    let cfg = AblationConfig {
        train: TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        },
        unified_width: 16,
        head_widths: vec![16, 1],
        holdout_frac: 0.2,
    };
    let mut g = c.benchmark_group("ablation_15_cells");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = RunOptions {
            exec,
            checkpoint_dir: None,
            cell_limit: None,
        };
        g.bench_function(name, |b| b.iter(|| run_ablation(&input, &subsets, &[Target::Share], &cfg, 1, &opts).unwrap()));
    }
    g.finish();
}

fn benches(c: &mut Criterion) {
    let f = fixture();
    bench_features(c, &f);
    bench_gbdt(c, &f);
    bench_ablation(c, &f);
}

criterion_group! {
    name = parallel;
    config = Criterion::default().warm_up_time(Duration::from_secs(1)).measurement_time(Duration::from_secs(5));
    targets = benches
}
criterion_main!(parallel);
