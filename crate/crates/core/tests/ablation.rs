use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use popfusion::ablate::{
    cell_seed, enumerate_subsets, highlight_best, parse_subset, read_label_file, run_ablation, AblateError,
    AblationConfig, AblationInput, AblationTable, CellValue, RunOptions, SubsetMode,
};
use popfusion::fusion::TrainConfig;
use popfusion::ingest::EmbeddingSet;
use popfusion::par::Exec;
use popfusion::{SourceId, Target};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn stub_input(n: usize, missing_every: usize) -> AblationInput {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let row_ids: Vec<String> = (0..n).map(|i| format!("v{i:03}")).collect();
    let embeddings = SourceId::ALL
        .iter()
        .map(|&s| {
            let mut set = EmbeddingSet::new(s, 2);
            for (i, id) in row_ids.iter().enumerate() {
                let v: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                if s.get() != 6 || missing_every == 0 || i % missing_every != 0 {
                    set.vectors.insert(id.clone(), v);
                }
            }
            (s, set)
        })
        .collect();
    let counts: LogNormal<f64> = LogNormal::new(2.0, 1.0).unwrap();
    let targets = Target::ALL
        .iter()
        .map(|&t| (t, (0..n).map(|_| counts.sample(&mut rng).round()).collect()))
        .collect();
    AblationInput {
        row_ids,
        targets,
        embeddings,
    }
}

fn tiny_config() -> AblationConfig {
    AblationConfig {
        train: TrainConfig {
            max_epochs: 2,
            patience: 1,
            batch_size: 8,
            ..TrainConfig::default()
        },
        unified_width: 3,
        head_widths: vec![2, 1],
        holdout_frac: 0.25,
    }
}

fn opts(dir: &Path, limit: Option<usize>) -> RunOptions {
    RunOptions {
        exec: Exec::default(),
        checkpoint_dir: Some(dir.to_path_buf()),
        cell_limit: limit,
    }
}

#[test]
fn reference_labels_parse_into_the_fixture_rows() {
    let labels = read_label_file(&fixture("reference_labels.txt")).unwrap();
    assert_eq!(labels.len(), 53);
    let subsets = enumerate_subsets(&SourceId::ALL, &SubsetMode::Listed(labels.clone())).unwrap();
    let text = std::fs::read_to_string(fixture("reference_ablation.csv")).unwrap();
    let table = AblationTable::from_csv(&text).unwrap();
    let row_labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    let subset_labels: Vec<&str> = subsets.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(row_labels, subset_labels);
    assert_eq!(AblationTable::from_csv(&table.to_csv()).unwrap(), table);
}

#[test]
fn labels_are_canonical() {
    assert_eq!(parse_subset("4+3").unwrap().label, "3+4");
    assert!(matches!(parse_subset("3+3"), Err(AblateError::DuplicateSource { .. })));
    assert!(matches!(parse_subset("7"), Err(AblateError::BadLabel(_))));
    assert!(matches!(parse_subset(""), Err(AblateError::BadLabel(_))));
    let all = enumerate_subsets(&SourceId::ALL, &SubsetMode::All).unwrap();
    let mut labels: Vec<&str> = all.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels.len(), 63);
    labels.dedup();
    assert_eq!(labels.len(), 63);
}

#[test]
fn highlight_breaks_ties_by_label() {
    let text = "label,share,heart,comment,play\n3+4,50.00,error,1.00,\n1+2,50.00,60.00,,\n";
    let best = highlight_best(&AblationTable::from_csv(text).unwrap()).unwrap();
    assert_eq!(best[&Target::Share].label, "1+2");
    assert_eq!(best[&Target::Heart].label, "1+2");
    assert_eq!(best[&Target::Comment].label, "3+4");
    assert!(!best.contains_key(&Target::Play));
}

#[test]
fn checkpoints_are_reused_only_for_the_same_run() {
    let input = stub_input(40, 0);
    let subsets = enumerate_subsets(&[SourceId::new(1).unwrap(), SourceId::new(5).unwrap()], &SubsetMode::All).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let targets = [Target::Comment];
    let first = run_ablation(&input, &subsets, &targets, &cfg, 3, &opts(dir.path(), None)).unwrap();
    assert_eq!(first.rows.len(), 3);

    let cached = run_ablation(&input, &subsets, &targets, &cfg, 3, &opts(dir.path(), Some(0))).unwrap();
    assert_eq!(cached, first);

    let changed = AblationConfig {
        unified_width: 4,
        ..cfg.clone()
    };
    let stale = run_ablation(&input, &subsets, &targets, &changed, 3, &opts(dir.path(), Some(0)));
    assert!(matches!(stale, Err(AblateError::Interrupted { completed: 0 })));
    let reseeded = run_ablation(&input, &subsets, &targets, &cfg, 4, &opts(dir.path(), Some(0)));
    assert!(matches!(reseeded, Err(AblateError::Interrupted { .. })));

    let sequential = RunOptions {
        exec: Exec::Sequential,
        checkpoint_dir: None,
        cell_limit: None,
    };
    assert_eq!(run_ablation(&input, &subsets, &targets, &cfg, 3, &sequential).unwrap().rows, first.rows);
}

#[test]
fn cell_seeds_depend_only_on_their_cell() {
    let a = cell_seed(1, "3+4", Target::Play);
    assert_eq!(a, cell_seed(1, "3+4", Target::Play));
    assert_ne!(a, cell_seed(2, "3+4", Target::Play));
    assert_ne!(a, cell_seed(1, "3+4", Target::Share));
    assert_ne!(cell_seed(1, "1+2", Target::Play), cell_seed(1, "1+23", Target::Play));
}

#[test]
fn cells_without_enough_rows_fail_alone() {
    let input = stub_input(40, 0);
    let mut thin = input.clone();
    let s6 = SourceId::new(6).unwrap();
    let keep: Vec<String> = input.row_ids[..6].to_vec();
    thin.embeddings.get_mut(&s6).unwrap().vectors.retain(|id, _| keep.contains(id));
    let subsets = enumerate_subsets(&[SourceId::new(2).unwrap(), s6], &SubsetMode::All).unwrap();
    let no_dir = RunOptions::default();
    let table = run_ablation(&thin, &subsets, &[Target::Heart], &tiny_config(), 1, &no_dir).unwrap();
    let by_label: BTreeMap<&str, &CellValue> =
        table.rows.iter().map(|r| (r.label.as_str(), &r.cells[&Target::Heart])).collect();
    assert!(matches!(by_label["2"], CellValue::Mape(_)));
    assert!(matches!(by_label["6"], CellValue::Failed(_)));
    assert!(matches!(by_label["2+6"], CellValue::Failed(_)));
    assert!(table.to_csv().contains("2+6,,error,,"));
}

#[test]
fn partially_covered_source_still_trains() {
    let input = stub_input(60, 5);
    let subsets = enumerate_subsets(&[SourceId::new(6).unwrap()], &SubsetMode::All).unwrap();
    let table = run_ablation(&input, &subsets, &[Target::Share], &tiny_config(), 2, &RunOptions::default()).unwrap();
    assert!(matches!(table.rows[0].cells[&Target::Share], CellValue::Mape(m) if m.is_finite()));
}
