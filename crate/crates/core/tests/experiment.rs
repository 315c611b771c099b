use std::fs;
use std::path::Path;

use lws_core::experiment::{
    apply_overrides, backward_timings, emit_frequency, emit_reinit, emit_results, epochs_csv,
    parse_key_values, run_experiment, run_frequency_experiment, run_profile_experiment,
    run_reinit_experiment, train_seed, Experiment, ExperimentConfig, RunRecord,
};
use lws_core::Error;

const BASE: &str = "
arch.family = relu_net
arch.depth = 2
arch.width = 16
data.kind = synthetic
data.train_size = 120
data.test_size = 60
data.shape = 1,4,4
data.classes = 3
optim.kind = adam
schedule.lr = 0.01
train.epochs = 3
train.batch_size = 32
seeds = 1,2
";

fn experiment(extra: &str) -> Experiment {
    let mut map = parse_key_values(BASE).unwrap();
    let overrides: Vec<String> = extra.lines().map(|l| l.replace(' ', "")).collect();
    apply_overrides(&mut map, &overrides).unwrap();
    Experiment::prepare(ExperimentConfig::from_map(map).unwrap()).unwrap()
}

fn bits(r: &RunRecord) -> Vec<u32> {
    r.params.theta().iter().map(|v| v.to_bits()).collect()
}

/// The CSV with the three wall-clock columns dropped.
fn untimed_csv(text: &str) -> String {
    text.lines()
        .map(|l| l.split(',').take(8).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn zero_epochs_keeps_the_initialization() {
    let exp = experiment("train.epochs = 0");
    let records = run_experiment(&exp).unwrap();
    for r in &records {
        assert_eq!(r.epochs.len(), 1);
        assert_eq!(r.params.theta(), exp.init_params(r.seed).unwrap().theta());
        assert_eq!(Some(r.final_test.accuracy), r.epochs[0].test_acc);
        assert_eq!(r.total_backward_time_s, 0.0);
    }
}

#[test]
fn full_equals_all_bottoms_with_certain_hits() {
    let full = run_experiment(&experiment("policy.kind = full")).unwrap();
    let prob = run_experiment(&experiment(
        "policy.kind = top_k_all_bottoms\npolicy.k = 1\npolicy.rho = 1",
    ))
    .unwrap();
    for (a, b) in full.iter().zip(&prob) {
        assert_eq!(bits(a), bits(b));
        assert_eq!(untimed_csv(&epochs_csv(a)), untimed_csv(&epochs_csv(b)));
    }
}

#[test]
fn frozen_layers_keep_initial_values() {
    let exp = experiment("policy.kind = top_k\npolicy.k = 1");
    let l = exp.net.num_parametric();
    for r in run_experiment(&exp).unwrap() {
        let init = exp.init_params(r.seed).unwrap();
        assert_eq!(r.frozen_layers(l), (1..l).collect::<Vec<_>>());
        for layer in 1..l {
            assert_eq!(r.params.layer(layer).unwrap(), init.layer(layer).unwrap());
        }
        assert_ne!(r.params.layer(l).unwrap(), init.layer(l).unwrap());
        for e in &r.epochs[1..] {
            assert_eq!(e.selection.as_ref().unwrap().stop_layer(), l);
        }
    }
}

#[test]
fn runs_are_reproducible() {
    let spec = "policy.kind = random_uniform";
    let a = run_experiment(&experiment(spec)).unwrap();
    let b = run_experiment(&experiment(spec)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(bits(x), bits(y));
        assert_eq!(untimed_csv(&epochs_csv(x)), untimed_csv(&epochs_csv(y)));
    }
    assert_ne!(bits(&a[0]), bits(&a[1]));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn emitted_results_are_stable_and_consistent() {
    let exp = experiment("train.epochs = 3");
    let records = run_experiment(&exp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let written = emit_results(&exp, &records, &a).unwrap();
    emit_results(&exp, &records, &b).unwrap();
    assert_eq!(written.len(), 1 + 2 * records.len());
    for p in &written {
        let name = p.file_name().unwrap().to_str().unwrap();
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }

    let summary: serde_json::Value = serde_json::from_slice(&read(&a, "summary.json")).unwrap();
    let finals: Vec<f64> = records
        .iter()
        .map(|r| {
            let csv = String::from_utf8(read(&a, &format!("epochs_seed{}.csv", r.seed))).unwrap();
            let last = csv.lines().last().unwrap();
            last.split(',').nth(5).unwrap().parse().unwrap()
        })
        .collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    assert!((summary["test_acc"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(summary["data"]["test_set"], "full");
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn reinit_sweep_rows() {
    let exp = experiment("analysis.reinit_grid = 0,10,50,100");
    let result = run_reinit_experiment(&exp).unwrap();
    assert_eq!(result.rows.len(), 4 * 2 * 2);
    for r in &result.records {
        let full = r.final_test.accuracy;
        for row in result.rows.iter().filter(|x| x.seed == r.seed) {
            let untouched = match row.point.mode.as_str() {
                "active" => row.point.percent == 0.0,
                _ => row.point.percent == 100.0,
            };
            if untouched {
                assert_eq!(row.point.test_accuracy, full);
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    emit_reinit(&exp, &result.rows, &result.records, dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("reinit_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
}

#[test]
fn frequency_maps_cover_every_epoch() {
    let exp = experiment("analysis.alphas = 5,50");
    let result = run_frequency_experiment(&exp).unwrap();
    assert_eq!(result.maps.len(), 2 * 2);
    let p = exp.net.param_count();
    for (_, map) in &result.maps {
        assert_eq!(map.epochs, 3);
        let per_epoch = ((map.alpha / 100.0 * p as f64).ceil()) as u32;
        assert_eq!(map.counts.iter().sum::<u32>(), per_epoch * 3);
    }
    let dir = tempfile::tempdir().unwrap();
    emit_frequency(&exp, &result, dir.path()).unwrap();
    let means = fs::read_to_string(dir.path().join("active_freq_layer_means.csv")).unwrap();
    assert_eq!(means.lines().count(), 1 + 4 * exp.net.num_parametric());
    assert!(dir
        .path()
        .join("alpha5/seed1/active_freq_layer1.csv")
        .exists());
}

#[test]
fn gradient_profiles_are_sorted() {
    let exp = experiment("analysis.profile_epochs = 0,3");
    let result = run_profile_experiment(&exp).unwrap();
    assert_eq!(result.profiles.len(), 4);
    for (_, prof) in &result.profiles {
        assert_eq!(prof.magnitudes.len(), exp.net.param_count());
        assert!(prof.magnitudes.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let exp = experiment("schedule.lr = 1e30\nseeds = 1");
    match train_seed(&exp, 1, &mut |_, _| Ok(())) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.final_test)),
    }
}

#[test]
fn top_layer_backward_is_cheaper_than_full() {
    let config = ExperimentConfig::parse(
        "arch.family = conv_net\narch.depth = 4\narch.width = 16\ndata.kind = synthetic\n\
         data.train_size = 64\ndata.test_size = 10\ndata.shape = 1,16,16\ndata.classes = 4\n\
         schedule.lr = 0.01\ntrain.batch_size = 32\nseeds = 1",
    )
    .unwrap();
    let exp = Experiment::prepare(config).unwrap();
    let params = exp.init_params(1).unwrap();
    let t = backward_timings(&exp, &params, 20).unwrap();
    let l = exp.net.num_parametric();
    assert_eq!(t.len(), l);
    assert!(t[l - 1].median_s < t[0].median_s, "{t:?}");
}

#[test]
fn synthetic_test_split_shares_class_prototypes() {
    let exp = experiment("train.epochs = 10\nseeds = 1\ndata.noise = 0.3");
    let r = &run_experiment(&exp).unwrap()[0];
    assert!(r.final_test.accuracy > 0.9, "{}", r.final_test.accuracy);
}
