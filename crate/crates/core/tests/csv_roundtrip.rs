use std::io::Write;

use dynlatent::io::{load_long_csv, read_long_csv, write_long_csv};
use dynlatent::sim::{apply_missingness, generate, replicate_rng, scenario1, scenario2};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simulate_write_load_is_exact(seed in any::<u64>(), n in 1usize..40, thin in any::<bool>(), which in 0usize..2) {
        let scenario = if which == 0 { scenario1() } else { scenario2() };
        let mut rng = replicate_rng(seed, 0);
        let mut data = generate(&scenario.truth, n, &mut rng).unwrap();
        if thin {
            data = apply_missingness(&data, 0.15, 0.07, &mut rng).unwrap();
        }
        let text = write_long_csv(&data).unwrap();
        let back = read_long_csv(text.as_bytes(), &scenario.fit_spec).unwrap();
        prop_assert_eq!(&back, &data);
        // and writing again gives the same bytes
        prop_assert_eq!(write_long_csv(&back).unwrap(), text);
    }
}

#[test]
fn round_trip_through_a_file() {
    let s = scenario2();
    let mut rng = replicate_rng(7, 0);
    let data = apply_missingness(&generate(&s.truth, 64, &mut rng).unwrap(), 0.15, 0.07, &mut rng).unwrap();
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(write_long_csv(&data).unwrap().as_bytes()).unwrap();
    file.flush().unwrap();
    assert_eq!(load_long_csv(file.path(), &s.fit_spec).unwrap(), data);
}

#[test]
fn quoted_fields_and_missing_tokens() {
    let s = scenario2();
    let text = "subject_id,time,marker,value,C2\n\"a,1\",0,Y1,0.5,1\n\"a,1\",0,Y2,NA,1\n\"a,1\",1,Y2,2.5,1\n";
    let data = read_long_csv(text.as_bytes(), &s.fit_spec).unwrap();
    assert_eq!(data.subjects[0].id, "a,1");
    assert_eq!(data.subjects[0].visits[0].values, vec![Some(0.5), None]);
    assert_eq!(data.subjects[0].visits[1].values, vec![None, Some(2.5)]);
    let again = write_long_csv(&data).unwrap();
    assert!(again.contains("\"a,1\""));
    assert_eq!(read_long_csv(again.as_bytes(), &s.fit_spec).unwrap(), data);
}
