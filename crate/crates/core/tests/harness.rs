use mmer_core::harness::mlp::{L1_BIAS, L1_WEIGHT, L2_BIAS, L2_WEIGHT};
use mmer_core::harness::*;
use mmer_core::{Checkpoint, Tensor};

fn small_spec() -> ExperimentSpec {
    ExperimentSpec {
        seeds: vec![0, 1],
        steps: 150,
        ..ExperimentSpec::default()
    }
}

#[test]
fn synthesis_is_deterministic_and_trains() {
    let spec = ExperimentSpec {
        n_models: 1,
        ..small_spec()
    };
    let a = synthesize_models(&spec, 5).unwrap();
    let b = synthesize_models(&spec, 5).unwrap();
    assert_eq!(a, b);
    let shape = spec.shape();
    let base_loss = task_loss(&a.base, shape, &a.tasks[0]).unwrap();
    let tuned_loss = task_loss(&a.fine_tuned[0], shape, &a.tasks[0]).unwrap();
    assert!(tuned_loss < base_loss, "{tuned_loss} !< {base_loss}");
}

#[test]
fn four_models_are_pairwise_different() {
    let s = synthesize_models(&small_spec(), 2).unwrap();
    assert_eq!(s.fine_tuned.len(), 4);
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(s.fine_tuned[i], s.fine_tuned[j]);
        }
    }
}

#[test]
fn single_model_full_k_retains_everything() {
    let spec = ExperimentSpec {
        n_models: 1,
        k_percent: 100.0,
        methods: vec![Method::Mmer],
        ..small_spec()
    };
    let out = run_retention_experiment(&spec).unwrap();
    for run in &out.runs {
        let r = run.result(Method::Mmer).unwrap().report.mean_ratio;
        assert!((r - 1.0).abs() < 1e-4, "retention {r}");
    }
}

/// Keeps only the modality block of the first-layer weight changes, so the
/// task vectors of different modalities have disjoint supports.
fn restrict_to_block(model: &Checkpoint, base: &Checkpoint, spec: &ExperimentSpec, index: usize) -> Checkpoint {
    let mut out = base.clone();
    let hidden = spec.hidden;
    let rows = index * spec.dims_per_modality..(index + 1) * spec.dims_per_modality;
    let m = model.tensor(L1_WEIGHT).unwrap().data();
    let mut w = base.tensor(L1_WEIGHT).unwrap().data().to_vec();
    for r in rows {
        w[r * hidden..(r + 1) * hidden].copy_from_slice(&m[r * hidden..(r + 1) * hidden]);
    }
    let shape = base.tensor(L1_WEIGHT).unwrap().shape().to_vec();
    out.insert(L1_WEIGHT, Tensor::new(shape, w).unwrap());
    out
}

#[test]
fn disjoint_supports_retain_everything() {
    let spec = ExperimentSpec {
        methods: vec![Method::Mmer],
        ..small_spec()
    };
    let s = synthesize_models(&spec, 3).unwrap();
    let models: Vec<Checkpoint> = s
        .fine_tuned
        .iter()
        .enumerate()
        .map(|(i, m)| restrict_to_block(m, &s.base, &spec, i))
        .collect();
    let run = evaluate_methods(&spec, 3, &s.base, &models, &s.tasks).unwrap();
    let r = run.result(Method::Mmer).unwrap().report.mean_ratio;
    assert!((r - 1.0).abs() < 1e-4, "retention {r}");
    for name in [L1_BIAS, L2_WEIGHT, L2_BIAS] {
        assert_eq!(models[0].tensor(name).unwrap(), s.base.tensor(name).unwrap());
    }
}

#[test]
fn mmer_beats_averaging_on_most_seeds() {
    let spec = ExperimentSpec {
        methods: vec![Method::Mmer, Method::NaivemcAvg],
        ..small_spec()
    };
    let out = run_retention_experiment(&spec).unwrap();
    assert_eq!(out.wins(Method::Mmer, Method::NaivemcAvg), spec.seeds.len());
    let csv = out.to_csv();
    assert!(csv.starts_with("seed,method,task,original_score,method_score,ratio\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 5);
}

#[test]
fn lambda_sweep_densities_do_not_increase() {
    let spec = ExperimentSpec {
        methods: vec![Method::Mmer],
        ..small_spec()
    };
    let sweep = run_sweep(&spec, SweepAxis::Lambda, None).unwrap();
    for &seed in &spec.seeds {
        let d: Vec<f64> = sweep
            .rows
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.density.unwrap())
            .collect();
        assert_eq!(d.len(), 6);
        assert!(d.windows(2).all(|w| w[1] <= w[0]), "{d:?}");
    }
    assert!(sweep.to_csv().starts_with("lambda,seed,method,mean_retention,mean_density\n"));
}

#[test]
fn k_sweep_full_row_matches_untrimmed_pipeline() {
    let spec = ExperimentSpec {
        methods: vec![Method::Mmer, Method::Ties],
        ..small_spec()
    };
    let sweep = run_sweep(&spec, SweepAxis::K, Some(&[50.0, 100.0])).unwrap();
    let full = ExperimentSpec {
        k_percent: 100.0,
        ..spec.clone()
    };
    let direct = run_retention_experiment(&full).unwrap();
    for run in &direct.runs {
        for r in &run.results {
            let row = sweep
                .rows
                .iter()
                .find(|x| x.value == 100.0 && x.seed == run.seed && x.method == r.method)
                .unwrap();
            assert_eq!(row.mean_retention, r.report.mean_ratio);
        }
    }
}

#[test]
fn forgetting_precondition_holds() {
    let spec = ExperimentSpec {
        seeds: vec![0],
        ..small_spec()
    };
    let out = run_forgetting_experiment(&spec).unwrap();
    let run = &out.runs[0];
    assert!(run.forgetting_occurred());
    assert!(run.adaptation.loss < run.adaptation.reference);
    assert_eq!(run.reconstructed.len(), 4);
    let csv = out.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 + 4 + 1);
}

#[test]
fn spec_validation() {
    assert!(ExperimentSpec::from_json("{}").is_ok());
    for bad in [
        r#"{"architecture":"transformer"}"#,
        r#"{"n_models":9}"#,
        r#"{"n_models":0}"#,
        r#"{"k_percent":5}"#,
        r#"{"lambda":8}"#,
        r#"{"lambdas":{"vision":0.1}}"#,
        r#"{"lambdas":{"sonar":1}}"#,
        r#"{"unknown":1}"#,
        r#"{"methods":["bogus"]}"#,
        r#"{"seeds":[]}"#,
    ] {
        assert!(ExperimentSpec::from_json(bad).is_err(), "{bad}");
    }
    let spec = ExperimentSpec::from_json(r#"{"methods":["mmer","naivemc-avg","mmer-no-direction"]}"#).unwrap();
    assert_eq!(spec.methods[1], Method::NaivemcAvg);
}

#[test]
fn artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        seeds: vec![4],
        n_models: 2,
        steps: 20,
        ..ExperimentSpec::default()
    };
    write_artifacts(&spec, dir.path()).unwrap();
    let seed_dir = dir.path().join("seed_4");
    assert!(seed_dir.join("base.mtc").exists());
    assert!(seed_dir.join("models/audio.mtc").exists());
    assert!(seed_dir.join("bundle/masks/vision.mmk").exists());
    let task: SyntheticTask =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tasks/vision-seed4.json")).unwrap()).unwrap();
    assert_eq!(task, spec.task(0, 4));
}

#[test]
fn retention_trends_down_as_models_are_added() {
    let spec = ExperimentSpec {
        methods: vec![Method::Mmer],
        seeds: vec![0, 1, 2, 3],
        ..ExperimentSpec::default()
    };
    let sweep = run_sweep(&spec, SweepAxis::NModels, None).unwrap();
    let means: Vec<(f64, f64)> = (1..=8)
        .map(|n| {
            let rows: Vec<f64> = sweep.rows.iter().filter(|r| r.value == n as f64).map(|r| r.mean_retention).collect();
            (n as f64, rows.iter().sum::<f64>() / rows.len() as f64)
        })
        .collect();
    let mx = means.iter().map(|m| m.0).sum::<f64>() / 8.0;
    let my = means.iter().map(|m| m.1).sum::<f64>() / 8.0;
    let slope = means.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / means.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "{means:?}");
    assert!(means[1..].iter().all(|m| m.1 <= means[0].1), "{means:?}");
}
