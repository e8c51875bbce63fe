use std::path::Path;

use noisylab_core::experiment::{build_report, config_dir_name, run_experiment, Components, ExperimentSpec};
use noisylab_core::{Error, ErrorKind};

fn small_spec(configurations: &str) -> ExperimentSpec {
    let text = format!(
        "output_dir = \"out\"\nconfigurations = {configurations}\nreplications = 2\nbase_seed = 5\n\
         [split]\ntrain = 300\nvalidation = 100\ntest = 100\n\
         [training]\nmax_epochs = 2\n\
         [evaluation]\nbootstrap_replicates = 100\n"
    );
    ExperimentSpec::parse(&text, Path::new("spec.toml")).unwrap()
}

#[test]
fn baseline_only_spec_reports_a_single_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small_spec("[\"baseline\"]"), dir.path()).unwrap();
    assert_eq!(report.configurations.len(), 1);
    assert_eq!(report.seeds, vec![5, 6]);
    let cells = report.cells("baseline").unwrap();
    assert_eq!(cells.len(), 5);
    assert!(cells.iter().all(|c| c.p_value.is_none() && c.per_seed.len() == 2));
    let table = report.to_table();
    assert!(table.contains("baseline"));
    assert!(dir.path().join("report.csv").is_file());
    assert!(dir.path().join("seed-5/baseline/checkpoint.bin").is_file());

    // rebuilding from disk gives the same numbers
    let again = build_report(dir.path()).unwrap();
    assert_eq!(again.to_csv(), report.to_csv());
}

#[test]
fn regularized_configurations_are_compared_to_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small_spec("[\"baseline\", \"+noise+corr\"]"), dir.path()).unwrap();
    let cells = report.cells("+noise+corr").unwrap();
    assert!(cells.iter().all(|c| c.p_value.is_some_and(|p| (0.0..=1.0).contains(&p))));
    assert!(dir.path().join(format!("seed-6/{}/log.csv", config_dir_name("+noise+corr"))).is_file());
}

#[test]
fn empty_results_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = build_report(dir.path()).unwrap_err();
    assert!(matches!(err, Error::NoResults(_)));
    assert_eq!(err.kind(), ErrorKind::Data);
}

#[test]
fn unknown_spec_fields_and_configurations_are_rejected() {
    let bad_field = "output_dir = \"o\"\nconfigurations = [\"baseline\"]\nepochs = 3\n";
    assert!(ExperimentSpec::parse(bad_field, Path::new("s.toml")).is_err());
    let bad_config = "output_dir = \"o\"\nconfigurations = [\"+dropout\"]\n";
    assert!(ExperimentSpec::parse(bad_config, Path::new("s.toml")).is_err());
    let twice = "output_dir = \"o\"\nconfigurations = [\"all\", \"all\"]\n";
    assert!(ExperimentSpec::parse(twice, Path::new("s.toml")).is_err());
}

#[test]
fn component_names() {
    let all = Components::from_name("all").unwrap();
    assert!(all.normalize && all.segmentation && all.localization && all.noise && all.correlation);
    let c = Components::from_name("+norm+corr").unwrap();
    assert!(c.normalize && c.correlation && !c.noise && !c.segmentation);
    let b = Components::from_name("baseline").unwrap();
    assert_eq!(b, Components::default());
}

#[test]
fn spec_survives_a_toml_round_trip() {
    let spec = small_spec("[\"baseline\", \"all\"]");
    let back = ExperimentSpec::parse(&spec.to_toml().unwrap(), Path::new("x")).unwrap();
    assert_eq!(back, spec);
}
