use std::path::PathBuf;

use gdm::checkpoint::{Checkpoint, CheckpointModel};
use gdm::datagen::{generate_trials, write_series_csv, NascarConfig, NascarVariant, Standardizer, NASCAR_K};
use gdm::diffmath::Matrix;
use gdm::evalpred::{
    predict_k, r_squared, smooth_posterior, state_accuracy, state_usage, write_confusion_csv, write_envelope_csv,
    write_metrics_csv, write_states_csv, write_usage_csv, PredictionEnvelope,
};
use gdm::inference::{amortized_apply, train_from, write_trace, ModelSpec, TrainConfig, TrainState};
use gdm::mixture3::{to_gdm, to_mixture3};
use gdm::model::{ObsSeries, SoftStateSeq, Variant};
use gdm::rng::seeded;
use gdm::GdmError;

use crate::data::{check_not_input, create_dir, create_file, expand, load_all, standardize};
use crate::{CliError, CliResult, ConvertArgs, EvalArgs, NascarArgs, PredictArgs, TrainArgs};

pub fn generate_nascar(a: &NascarArgs) -> CliResult<()> {
    let variant: NascarVariant = a.variant.parse().map_err(|e: GdmError| CliError::usage(e.to_string()))?;
    if a.k != NASCAR_K {
        return Err(CliError::usage(format!("the NASCAR track has exactly {NASCAR_K} states, got --K {}", a.k)));
    }
    if a.t_len == 0 {
        return Err(CliError::usage("--T must be at least 1"));
    }
    if a.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let mut cfg = match variant {
        NascarVariant::Standard => NascarConfig::standard(a.seed),
        NascarVariant::SoftSticky => NascarConfig::soft_sticky(a.seed),
    };
    cfg.t_len = a.t_len;
    cfg.n_obs = a.n_obs;
    cfg.obs_noise = a.obs_noise;
    cfg.min_speed = a.min_speed;
    cfg.emission_seed = a.emission_seed;
    if let Some(v) = a.temp {
        cfg.temperature = v;
    }
    if let Some(v) = a.softness {
        cfg.softness = v;
    }
    if let Some(v) = a.stickiness {
        cfg.stickiness = v;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let trials = generate_trials(&cfg, a.trials)?;
    create_dir(&a.out)?;
    let mut files = Vec::new();
    for (i, trial) in trials.iter().enumerate() {
        let name = format!("trial_{i}.csv");
        write_series_csv(&trial.series, create_file(&a.out.join(&name))?)?;
        let states = format!("states_{i}.csv");
        write_states_csv(&trial.states.z, create_file(&a.out.join(&states))?)?;
        files.push(serde_json::json!({ "data": name, "states": states, "steps": trial.series.len() }));
    }
    let manifest = serde_json::json!({
        "dataset": "nascar",
        "variant": variant.to_string(),
        "T": cfg.t_len,
        "K": NASCAR_K,
        "trials": a.trials,
        "seed": cfg.seed,
        "emission_seed": cfg.emission_seed,
        "n_obs": cfg.n_obs,
        "obs_noise": cfg.obs_noise,
        "temperature": cfg.temperature,
        "softness": cfg.softness,
        "stickiness": cfg.stickiness,
        "min_speed": cfg.min_speed,
        "files": files,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Failed(e.to_string()))? + "\n";
    std::fs::write(a.out.join("manifest.json"), text)
        .map_err(|e| CliError::Failed(format!("{}: {e}", a.out.display())))?;
    println!("wrote {} trials of {} steps to {}", a.trials, cfg.t_len, a.out.display());
    Ok(())
}

fn trace_path(a: &TrainArgs) -> PathBuf {
    a.trace.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".trace.csv");
        PathBuf::from(s)
    })
}

fn stack(parts: &[Matrix]) -> CliResult<Matrix> {
    Ok(Matrix::vstack(&parts.iter().collect::<Vec<_>>())?)
}

/// Pooled R^2 of the smoothed means over all series.
fn pooled_r2(
    model: &gdm::model::GdmParams,
    post: &gdm::inference::PosteriorParams,
    series: &[ObsSeries],
    draws: usize,
    seed: u64,
) -> CliResult<(f64, Vec<SoftStateSeq>)> {
    let mut rng = seeded(seed);
    let (mut ys, mut yhats, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for s in series {
        let sm = smooth_posterior(model, post, s, draws, &mut rng)?;
        ys.push(s.y.clone());
        yhats.push(sm.yhat);
        zs.push(amortized_apply(post, s, &mut rng)?);
    }
    let r2 = r_squared(&stack(&ys)?, &stack(&yhats)?)?;
    Ok((r2, zs))
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let inputs = expand(&a.data)?;
    check_not_input(&a.out, &inputs)?;
    if let Some(r) = &a.resume {
        if r == &a.out {
            return Err(CliError::usage("--resume and --out must name different files"));
        }
    }
    let raw = load_all(&a.data, &a.schema)?;

    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let base = resumed
        .as_ref()
        .and_then(|c| c.config.clone())
        .unwrap_or_default();
    let cfg = TrainConfig {
        steps: a.steps.unwrap_or(base.steps),
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        seed: a.seed.unwrap_or(base.seed),
        temperature: a.temp.unwrap_or(base.temperature),
        gradient_clip: a.clip.unwrap_or(base.gradient_clip),
        elbo_samples: a.samples.unwrap_or(base.elbo_samples),
        checkpoint_every: a.checkpoint_every.unwrap_or(base.checkpoint_every),
        ..base
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let (state, standardizer) = match &resumed {
        Some(ck) => {
            let m = ck.gdm()?;
            let given = (a.k, a.d, a.variant.as_deref());
            if given.0.is_some_and(|k| k != m.k()) || given.1.is_some_and(|d| d != m.d()) {
                return Err(CliError::usage("--K/--D differ from the checkpoint being resumed"));
            }
            if let Some(v) = given.2 {
                let v: Variant = v.parse().map_err(|e: GdmError| CliError::usage(e.to_string()))?;
                if v != m.transition.variant() {
                    return Err(CliError::usage("--variant differs from the checkpoint being resumed"));
                }
            }
            if (m.temperature - cfg.temperature).abs() > 0.0 {
                return Err(CliError::usage("--temp differs from the checkpoint being resumed"));
            }
            (ck.train_state()?, ck.standardizer.clone())
        }
        None => {
            let variant: Variant = a
                .variant
                .as_deref()
                .unwrap_or("sticky-linear")
                .parse()
                .map_err(|e: GdmError| CliError::usage(e.to_string()))?;
            let k = a.k.unwrap_or(4);
            let d = a.d.unwrap_or(2);
            let n = raw[0].dim();
            if k == 0 {
                return Err(CliError::usage("--K must be at least 1"));
            }
            if d == 0 || d > n {
                return Err(CliError::usage(format!("--D {d} must lie between 1 and the {n} observed dimensions")));
            }
            let st = if a.standardize { Some(Standardizer::fit(&raw)?) } else { None };
            let series = standardize(raw.clone(), st.as_ref())?;
            let spec = ModelSpec { k, d, variant };
            (TrainState::init(&series, &spec, &cfg)?, st)
        }
    };
    let series = standardize(raw, standardizer.as_ref())?;
    let snapshot = |s: &TrainState| {
        let mut ck = Checkpoint::from_train_state(s, &cfg);
        ck.standardizer = standardizer.clone();
        ck
    };

    let result = train_from(&series, state, &cfg, |s| snapshot(s).save(&a.out));
    let state = match result {
        Ok(s) => s,
        Err(f) => {
            let mut msg = f.error.to_string();
            if let (GdmError::Diverged { .. }, Some(good)) = (&f.error, &f.last_good) {
                snapshot(good).save(&a.out)?;
                msg = format!("{msg}; last good state (step {}) saved to {}", good.step, a.out.display());
            }
            return Err(CliError::Failed(msg));
        }
    };

    let (r2, _) = pooled_r2(&state.model, &state.posterior, &series, 1, cfg.seed)?;
    let mut ck = snapshot(&state);
    ck.metrics.insert("r2_train".into(), r2);
    if let Some(last) = state.trace.last() {
        ck.metrics.insert("elbo_final".into(), last.elbo);
    }
    ck.save(&a.out)?;
    write_trace(&state.trace, create_file(&trace_path(a))?)?;
    println!("trained {} steps; train R^2 {r2:.4}; checkpoint {}", state.step, a.out.display());
    Ok(())
}

fn labels_of(series: &[ObsSeries], what: &str) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for s in series {
        match &s.labels {
            Some(l) => out.extend_from_slice(l),
            None => {
                return Err(CliError::Failed(format!(
                    "{what} data has no label column; state accuracy needs labels"
                )))
            }
        }
    }
    Ok(out)
}

fn stack_states(zs: &[SoftStateSeq]) -> CliResult<Matrix> {
    Ok(Matrix::vstack(&zs.iter().map(|z| &z.z).collect::<Vec<_>>())?)
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    if a.knn_k == 0 {
        return Err(CliError::usage("--knn-k must be at least 1"));
    }
    if a.draws == 0 {
        return Err(CliError::usage("--draws must be at least 1"));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.gdm()?;
    let post = ck.posterior()?;
    let train = standardize(load_all(&a.train_data, &a.schema)?, ck.standardizer.as_ref())?;
    let test = standardize(load_all(&a.test_data, &a.schema)?, ck.standardizer.as_ref())?;
    let labels_train = labels_of(&train, "training")?;
    let labels_test = labels_of(&test, "test")?;

    let (r2_train, z_train) = pooled_r2(model, post, &train, a.draws, a.seed)?;
    let (r2_test, z_test) = pooled_r2(model, post, &test, a.draws, a.seed.wrapping_add(1))?;
    let report = state_accuracy(
        &stack_states(&z_train)?,
        &labels_train,
        &stack_states(&z_test)?,
        &labels_test,
        a.knn_k,
    )?;
    let usage = state_usage(
        &SoftStateSeq::new(stack_states(&z_test)?)?,
        &labels_test,
        a.presence,
        a.coverage,
    )?;

    create_dir(&a.out)?;
    let metrics = vec![
        ("r2_train".to_string(), r2_train),
        ("r2_test".to_string(), r2_test),
        ("state_accuracy".to_string(), report.accuracy),
        ("knn_k".to_string(), a.knn_k as f64),
    ];
    write_metrics_csv(&metrics, create_file(&a.out.join("metrics.csv"))?)?;
    write_confusion_csv(&report.confusion, create_file(&a.out.join("confusion.csv"))?)?;
    write_usage_csv(&usage, create_file(&a.out.join("usage.csv"))?)?;
    for (name, zs) in [("train", &z_train), ("test", &z_test)] {
        for (i, z) in zs.iter().enumerate() {
            write_states_csv(&z.z, create_file(&a.out.join(format!("states_{name}_{i}.csv")))?)?;
        }
    }
    println!(
        "r2_train={r2_train:.4} r2_test={r2_test:.4} state_accuracy={:.4} (k={})",
        report.accuracy, a.knn_k
    );
    Ok(())
}

/// Maps an envelope computed on standardized data back to data units.
fn unstandardize(env: &mut PredictionEnvelope, st: &Standardizer) {
    for (mean, std) in env.mean.iter_mut().zip(env.std.iter_mut()) {
        for t in 0..mean.rows() {
            for j in 0..mean.cols() {
                mean[(t, j)] = mean[(t, j)] * st.scale[j] + st.mean[j];
                std[(t, j)] *= st.scale[j];
            }
        }
    }
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    if a.horizon == 0 {
        return Err(CliError::usage("--horizon must be at least 1"));
    }
    if a.rollouts < 2 {
        return Err(CliError::usage("--rollouts must be at least 2 for a spread to exist"));
    }
    if !(a.width > 0.0) {
        return Err(CliError::usage("--width must be positive"));
    }
    let inputs = expand(std::slice::from_ref(&a.data))?;
    if inputs.len() != 1 {
        return Err(CliError::usage(format!("--data must name one file, '{}' matches {}", a.data, inputs.len())));
    }
    check_not_input(&a.out, &inputs)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.gdm()?;
    let post = ck.posterior()?;
    let raw = load_all(std::slice::from_ref(&a.data), &a.schema)?.remove(0);
    let y = standardize(vec![raw.clone()], ck.standardizer.as_ref())?.remove(0);
    let mut env = predict_k(model, post, &y, a.horizon, a.rollouts, &mut seeded(a.seed))?;
    if let Some(st) = &ck.standardizer {
        unstandardize(&mut env, st);
    }
    write_envelope_csv(&env, create_file(&a.out)?)?;

    let mut rows = Vec::new();
    for h in 1..=a.horizon {
        if raw.len() <= h {
            break;
        }
        rows.push((format!("coverage_h{h}"), env.coverage(&raw, h, a.width)?));
        rows.push((format!("mean_width_h{h}"), env.mean_width(h, a.width)?));
    }
    if let Some(m) = &a.metrics {
        write_metrics_csv(&rows, create_file(m)?)?;
    }
    if let Some((_, c)) = rows.first() {
        println!("horizon 1 coverage within +/-{} std: {c:.4}", a.width);
    }
    Ok(())
}

pub fn convert(a: &ConvertArgs) -> CliResult<()> {
    check_not_input(&a.out, &[a.ckpt.clone()])?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = match &ck.model {
        CheckpointModel::Gdm(m) => CheckpointModel::Mixture3(to_mixture3(m)?),
        CheckpointModel::Mixture3(m) => CheckpointModel::Gdm(to_gdm(m)?),
    };
    let kind = model.kind();
    let out = Checkpoint {
        model,
        posterior: None,
        adam: None,
        step: ck.step,
        seed: ck.seed,
        config: None,
        trace: Vec::new(),
        metrics: Default::default(),
        standardizer: ck.standardizer.clone(),
    };
    out.save(&a.out)?;
    println!("wrote {kind} checkpoint {}", a.out.display());
    Ok(())
}
