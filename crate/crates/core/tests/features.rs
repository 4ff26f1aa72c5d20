mod common;

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate, Weekday};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use popfusion::features::{
    assemble_feature_matrix, fit_median_stats, fit_tag_frequency, impute_video_meta, is_us_holiday, iqr_filter,
    tokenize_tags, DaypartHours, FeaturePipeline, FrequencyCorpus,
};
use popfusion::ingest::{generate_synthetic, MetaField, SynthConfig};
use popfusion::par::Exec;

use common::{iqr_keep_oracle, recount_tags};

fn caption_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just('#'),
            Just('@'),
            Just('.'),
            Just('_'),
            Just(' '),
            Just('\t'),
            Just('!'),
            Just('é'),
            proptest::char::range('a', 'e'),
            proptest::char::range('A', 'C'),
            proptest::char::range('0', '2'),
        ],
        0..48,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

proptest! {
    #[test]
    fn frequency_table_equals_recount(captions in proptest::collection::vec(caption_strategy(), 0..10)) {
        let table = fit_tag_frequency(captions.iter().map(String::as_str));
        let (hashtags, mentions) = recount_tags(&captions);
        prop_assert_eq!(table.corpus_size, captions.len());
        prop_assert_eq!(table.hashtag_freq, hashtags.into_iter().collect());
        prop_assert_eq!(table.mention_freq, mentions.into_iter().collect());
    }

    #[test]
    fn tokens_ignore_surrounding_whitespace(caption in caption_strategy(), pad in "[ \t\n]{0,3}") {
        let padded = format!("{pad}{caption}{pad}");
        prop_assert_eq!(tokenize_tags(&padded), tokenize_tags(&caption));
    }

    #[test]
    fn iqr_mask_equals_quantile_oracle(
        values in proptest::collection::vec(prop_oneof![(-20i32..20).prop_map(f64::from), -1e6f64..1e6], 1..80),
        k in prop_oneof![Just(0.5), Just(1.5), Just(3.0), 0.1f64..5.0],
    ) {
        prop_assert_eq!(iqr_filter(&values, k).unwrap(), iqr_keep_oracle(&values, k));
    }
}

#[test]
fn holidays_match_calendar_scan() {
    fn nth_weekday(year: i32, month: u32, weekday: Weekday, n: usize) -> NaiveDate {
        (1..=31)
            .filter_map(|d| NaiveDate::from_ymd_opt(year, month, d))
            .filter(|d| d.weekday() == weekday)
            .nth(n - 1)
            .unwrap()
    }
    fn last_weekday(year: i32, month: u32, weekday: Weekday) -> NaiveDate {
        (1..=31)
            .filter_map(|d| NaiveDate::from_ymd_opt(year, month, d))
            .filter(|d| d.weekday() == weekday)
            .next_back()
            .unwrap()
    }
    for year in 2000..2031 {
        let mut expected: BTreeSet<NaiveDate> = [(1, 1), (6, 19), (7, 4), (11, 11), (12, 25)]
            .iter()
            .map(|&(m, d)| NaiveDate::from_ymd_opt(year, m, d).unwrap())
            .collect();
        expected.insert(nth_weekday(year, 1, Weekday::Mon, 3));
        expected.insert(nth_weekday(year, 2, Weekday::Mon, 3));
        expected.insert(last_weekday(year, 5, Weekday::Mon));
        expected.insert(nth_weekday(year, 9, Weekday::Mon, 1));
        expected.insert(nth_weekday(year, 10, Weekday::Mon, 2));
        expected.insert(nth_weekday(year, 11, Weekday::Thu, 4));
        let mut day = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
        while day.year() == year {
            assert_eq!(is_us_holiday(day), expected.contains(&day), "{day}");
            day = day.succ_opt().unwrap();
        }
    }
}

#[test]
fn feature_rows_follow_input_permutation() {
    let bundle = generate_synthetic(&SynthConfig::new(3, 80, 10, 4)).unwrap();
    let pipeline = FeaturePipeline::fit(&bundle.train, &bundle.test, FrequencyCorpus::All, DaypartHours::default()).unwrap();
    let base = assemble_feature_matrix(&bundle.train, &pipeline, Exec::Sequential).unwrap();
    assert_eq!(base.n_cols(), 22);
    assert!(base.values.iter().all(|v| v.is_finite()));

    let mut perm: Vec<usize> = (0..bundle.train.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let shuffled = bundle.train.select(&perm);
    let refit = FeaturePipeline::fit(&shuffled, &bundle.test, FrequencyCorpus::All, DaypartHours::default()).unwrap();
    assert_eq!(refit, pipeline);
    let permuted = assemble_feature_matrix(&shuffled, &refit, Exec::Parallel).unwrap();
    assert_eq!(permuted, base.select_rows(&perm));
}

#[test]
fn imputation_keeps_observed_values() {
    let bundle = generate_synthetic(&SynthConfig::new(4, 120, 10, 4)).unwrap();
    let stats = fit_median_stats(&bundle.train).unwrap();
    let filled = impute_video_meta(&bundle.test, &stats);
    let mut imputed = 0;
    for (before, after) in bundle.test.rows.iter().zip(&filled.rows) {
        for f in MetaField::ALL {
            match before.meta.get(f) {
                Some(v) => assert_eq!(after.meta.get(f), Some(v)),
                None => {
                    imputed += 1;
                    assert!(after.meta.get(f).is_some_and(f64::is_finite));
                }
            }
        }
    }
    assert!(imputed > 0);
}
